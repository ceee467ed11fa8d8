//! The memory encoder: a frozen backbone plus low-rank adapters on the
//! query/value projections and a learnable memory-token embedding table.
//! Encoding appends k memory tokens to the context and reads their
//! final-layer hidden states as the memory slots.

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::forward::QvOverride;
use crate::lm::params::LmParameters;
use crate::lm::{ModelConfig, TokenSequence};

/// Number of trainable task-token embeddings appended to the memory table:
/// the autoencode task token and the continuation task token.
pub const N_TASK_TOKENS: usize = 2;

const LORA_INIT_STD: f32 = 0.02;
const MEM_INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    /// Low-rank dimension of the adapters.
    pub rank: usize,
    /// Scale; the effective delta is (alpha/rank) * B*A.
    pub alpha: f32,
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        // alpha = 2r keeps the delta scale constant across ranks
        Self { rank, alpha: 2.0 * rank as f32 }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("lora alpha must be positive".into()));
        }
        if self.rank > config.d_model {
            return Err(Error::Config(format!(
                "lora rank {} exceeds projection dim {}",
                self.rank, config.d_model
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self::with_rank(32)
    }
}

/// One adapted projection: `delta = scale * b · a`, `a: [r, d_in]`,
/// `b: [d_out, r]`. `b` starts at zero so the delta starts at exactly zero.
#[derive(Debug, Clone)]
pub struct LoraFactors {
    pub a: Array2<f32>,
    pub b: Array2<f32>,
}

/// Adapters for the query and value projections of every layer.
#[derive(Debug, Clone)]
pub struct LoraWeights {
    pub q: Vec<LoraFactors>,
    pub v: Vec<LoraFactors>,
}

impl LoraWeights {
    pub fn init(config: &ModelConfig, lora: &LoraConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let dist = Normal::new(0.0f32, LORA_INIT_STD).expect("valid normal");
        let mut factors = || LoraFactors {
            a: Array2::from_shape_fn((lora.rank, d), |_| dist.sample(rng)),
            b: Array2::zeros((d, lora.rank)),
        };
        let q = (0..config.n_layers).map(|_| factors()).collect();
        let v = (0..config.n_layers).map(|_| factors()).collect();
        Self { q, v }
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &[usize], &[f32])) {
        for (i, fq) in self.q.iter().enumerate() {
            f(&format!("lora.layers.{i}.q.a"), &[fq.a.nrows(), fq.a.ncols()], fq.a.as_slice().unwrap());
            f(&format!("lora.layers.{i}.q.b"), &[fq.b.nrows(), fq.b.ncols()], fq.b.as_slice().unwrap());
        }
        for (i, fv) in self.v.iter().enumerate() {
            f(&format!("lora.layers.{i}.v.a"), &[fv.a.nrows(), fv.a.ncols()], fv.a.as_slice().unwrap());
            f(&format!("lora.layers.{i}.v.b"), &[fv.b.nrows(), fv.b.ncols()], fv.b.as_slice().unwrap());
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f32])) {
        for (i, fq) in self.q.iter_mut().enumerate() {
            f(&format!("lora.layers.{i}.q.a"), fq.a.as_slice_mut().unwrap());
            f(&format!("lora.layers.{i}.q.b"), fq.b.as_slice_mut().unwrap());
        }
        for (i, fv) in self.v.iter_mut().enumerate() {
            f(&format!("lora.layers.{i}.v.a"), fv.a.as_slice_mut().unwrap());
            f(&format!("lora.layers.{i}.v.b"), fv.b.as_slice_mut().unwrap());
        }
    }
}

/// Learnable embeddings: k memory tokens followed by the task tokens.
#[derive(Debug, Clone)]
pub struct MemoryTokenTable {
    /// `[(k + N_TASK_TOKENS), d_model]`
    pub table: Array2<f32>,
    pub k: usize,
}

impl MemoryTokenTable {
    pub fn init(k: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0f32, MEM_INIT_STD).expect("valid normal");
        Self {
            table: Array2::from_shape_fn((k + N_TASK_TOKENS, d_model), |_| dist.sample(rng)),
            k,
        }
    }

    /// The k memory-token input rows.
    pub fn memory_rows(&self) -> ndarray::ArrayView2<'_, f32> {
        self.table.slice(s![..self.k, ..])
    }

    /// The task-token rows ([AE] then [LM]) used by the decoder's embedding.
    pub fn task_rows(&self) -> Array2<f32> {
        self.table.slice(s![self.k.., ..]).to_owned()
    }
}

/// Compressed representation of one context: exactly k slot vectors, plus
/// the provenance needed to refuse mismatched decode requests.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlots {
    pub slots: Array2<f32>,
    pub model_id: String,
    pub context_hash: String,
}

impl MemorySlots {
    pub fn k(&self) -> usize {
        self.slots.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.slots.ncols()
    }
}

/// Hex sha-256 of a token id sequence, little-endian u32s.
pub fn context_hash(ids: &[u32]) -> String {
    let mut hasher = Sha256::new();
    for id in ids {
        hasher.update(id.to_le_bytes());
    }
    hex_string(&hasher.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Materialize the effective encoder projections `W' = W + (alpha/r)·B·A`
/// for query and value; every other backbone tensor is shared untouched.
pub fn apply_lora(
    base: &LmParameters,
    lora: &LoraWeights,
    cfg: &LoraConfig,
) -> Result<QvOverride> {
    cfg.validate(&base.config)?;
    if lora.q.len() != base.config.n_layers || lora.v.len() != base.config.n_layers {
        return Err(Error::Config(format!(
            "adapter layer count {} != model layers {}",
            lora.q.len(),
            base.config.n_layers
        )));
    }
    let scale = cfg.scale();
    let mut q = Vec::with_capacity(lora.q.len());
    let mut v = Vec::with_capacity(lora.v.len());
    for (i, (fq, fv)) in lora.q.iter().zip(&lora.v).enumerate() {
        for (name, f) in [("q", fq), ("v", fv)] {
            if f.a.dim() != (cfg.rank, base.config.d_model)
                || f.b.dim() != (base.config.d_model, cfg.rank)
            {
                return Err(Error::Config(format!(
                    "layer {i} {name} adapter shapes A{:?} B{:?} incompatible with rank {} and d_model {}",
                    f.a.dim(),
                    f.b.dim(),
                    cfg.rank,
                    base.config.d_model
                )));
            }
        }
        q.push(&base.layers[i].attn.wq + &(fq.b.dot(&fq.a) * scale));
        v.push(&base.layers[i].attn.wv + &(fv.b.dot(&fv.a) * scale));
    }
    Ok(QvOverride { q, v })
}

/// Encode a context into exactly k memory slots: run the adapted model over
/// `[context tokens ; memory tokens]` and take the final hidden states at
/// the memory positions.
pub fn encode(
    base: &LmParameters,
    qv: &QvOverride,
    mem: &MemoryTokenTable,
    context: &TokenSequence,
) -> Result<MemorySlots> {
    encode_ids(base, qv, mem, context.ids())
}

pub fn encode_ids(
    base: &LmParameters,
    qv: &QvOverride,
    mem: &MemoryTokenTable,
    ids: &[u32],
) -> Result<MemorySlots> {
    if ids.is_empty() {
        return Err(Error::Precondition("cannot encode an empty context".into()));
    }
    let k = mem.k;
    let total = ids.len() + k;
    if total > base.config.max_positions {
        return Err(Error::Length { actual: total, limit: base.config.max_positions });
    }
    let cache = encoder_cache(base, qv, mem, ids)?;
    let slots = cache.normed.slice(s![ids.len().., ..]).to_owned();
    Ok(MemorySlots {
        slots,
        model_id: String::new(),
        context_hash: context_hash(ids),
    })
}

/// Full forward cache for the encoder input `[context ; memory tokens]`;
/// the training loop reuses it for the reverse pass.
pub fn encoder_cache(
    base: &LmParameters,
    qv: &QvOverride,
    mem: &MemoryTokenTable,
    ids: &[u32],
) -> Result<crate::lm::forward::ForwardCache> {
    // memory tokens ride in as a soft suffix: context tokens first, then
    // the k learned rows, all under ordinary positional treatment
    let cfg = &base.config;
    let k = mem.k;
    let total = ids.len() + k;
    if total > cfg.max_positions {
        return Err(Error::Length { actual: total, limit: cfg.max_positions });
    }
    let mut inputs = Array2::zeros((total, cfg.d_model));
    let mut sources = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Precondition(format!(
                "token id {id} outside vocab of size {}",
                cfg.vocab_size
            )));
        }
        inputs.row_mut(i).assign(&base.tok_emb.row(id as usize));
        sources.push(crate::lm::forward::EmbSource::Vocab(id));
    }
    inputs.slice_mut(s![ids.len().., ..]).assign(&mem.memory_rows());
    if let Some(pe) = &base.pos_emb {
        let mut view = inputs.slice_mut(s![..total, ..]);
        view += &pe.slice(s![..total, ..]);
    }
    Ok(crate::lm::forward::run_transformer(base, Some(qv), inputs, 0, sources))
}

/// Names and sizes of exactly the trainable tensors: the adapter factors
/// and the memory/task-token table. The backbone is excluded.
pub fn trainable_parameter_names(config: &ModelConfig, lora: &LoraConfig, k: usize) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for i in 0..config.n_layers {
        for proj in ["q", "v"] {
            out.push((format!("lora.layers.{i}.{proj}.a"), lora.rank * config.d_model));
            out.push((format!("lora.layers.{i}.{proj}.b"), config.d_model * lora.rank));
        }
    }
    out.push(("mem.table".into(), (k + N_TASK_TOKENS) * config.d_model));
    out
}

/// Closed-form trainable-parameter count:
/// `n_layers * 2 proj * 2 factors * (rank * d_model) + (k + n_task) * d_model`.
pub fn trainable_parameter_count(config: &ModelConfig, lora: &LoraConfig, k: usize) -> usize {
    let lora_params = config.n_layers * 2 * 2 * (lora.rank * config.d_model);
    let emb_params = (k + N_TASK_TOKENS) * config.d_model;
    lora_params + emb_params
}

/// Documented arithmetic for the paper-scale reference configuration:
/// a 32-layer, 4096-wide backbone with rank-32 adapters on query/value and
/// 128 memory tokens plus one task token, against 6.74e9 base parameters.
pub fn reference_7b_trainable_fraction() -> f64 {
    let d_model = 4096.0f64;
    let n_layers = 32.0;
    let rank = 32.0;
    let k = 128.0;
    let lora = n_layers * 2.0 * 2.0 * (rank * d_model);
    let emb = (k + 1.0) * d_model;
    let base = 6_738_415_616.0f64;
    (lora + emb) / base
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::params::seeded_rng;
    use crate::lm::BYTE_VOCAB_SIZE;
    use rand::Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            vocab_size: BYTE_VOCAB_SIZE,
            max_positions: 96,
            rotary: false,
        }
    }

    fn setup(k: usize) -> (LmParameters, LoraWeights, LoraConfig, MemoryTokenTable) {
        let cfg = cfg();
        let mut rng = seeded_rng(17);
        let params = LmParameters::init(&cfg, &mut rng);
        let lcfg = LoraConfig::with_rank(4);
        let lora = LoraWeights::init(&cfg, &lcfg, &mut rng);
        let mem = MemoryTokenTable::init(k, cfg.d_model, &mut rng);
        (params, lora, lcfg, mem)
    }

    #[test]
    fn zero_b_means_identity_adaptation() {
        let (params, lora, lcfg, _) = setup(4);
        let qv = apply_lora(&params, &lora, &lcfg).unwrap();
        for i in 0..params.config.n_layers {
            assert_eq!(qv.q[i], params.layers[i].attn.wq);
            assert_eq!(qv.v[i], params.layers[i].attn.wv);
        }
    }

    #[test]
    fn rank_one_unit_construction_touches_one_entry() {
        let (params, mut lora, _, _) = setup(4);
        let lcfg = LoraConfig { rank: 1, alpha: 1.0 };
        let d = params.config.d_model;
        for f in lora.q.iter_mut().chain(lora.v.iter_mut()) {
            f.a = Array2::zeros((1, d));
            f.b = Array2::zeros((d, 1));
        }
        // A = e_i^T, B = e_j: delta has a single 1.0 at (j, i)
        lora.q[0].a[[0, 3]] = 1.0;
        lora.q[0].b[[5, 0]] = 1.0;
        let qv = apply_lora(&params, &lora, &lcfg).unwrap();
        let delta = &qv.q[0] - &params.layers[0].attn.wq;
        for ((r, c), v) in delta.indexed_iter() {
            if (r, c) == (5, 3) {
                assert!((v - 1.0).abs() < 1e-7);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
        assert_eq!(qv.v[0], params.layers[0].attn.wv);
    }

    #[test]
    fn random_adapter_matches_naive_matmul_oracle() {
        let (params, mut lora, lcfg, _) = setup(4);
        let mut rng = seeded_rng(99);
        let dist = Normal::new(0.0f32, 0.1).unwrap();
        for f in lora.q.iter_mut().chain(lora.v.iter_mut()) {
            f.b = Array2::from_shape_fn(f.b.dim(), |_| dist.sample(&mut rng));
        }
        let qv = apply_lora(&params, &lora, &lcfg).unwrap();
        let scale = lcfg.scale();
        // independent naive triple-loop matmul
        for li in 0..params.config.n_layers {
            let f = &lora.q[li];
            let (r, d) = f.a.dim();
            let mut expect = params.layers[li].attn.wq.clone();
            for out in 0..d {
                for inp in 0..d {
                    let mut acc = 0.0f32;
                    for x in 0..r {
                        acc += f.b[[out, x]] * f.a[[x, inp]];
                    }
                    expect[[out, inp]] += scale * acc;
                }
            }
            let max_err = (&expect - &qv.q[li])
                .iter()
                .fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-6, "layer {li} max err {max_err}");
        }
    }

    #[test]
    fn shape_mismatch_is_a_config_error() {
        let (params, mut lora, lcfg, _) = setup(4);
        lora.q[1].a = Array2::zeros((3, 32));
        assert!(matches!(
            apply_lora(&params, &lora, &lcfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encode_returns_exactly_k_slots_for_any_context_length() {
        let (params, lora, lcfg, mem) = setup(8);
        let qv = apply_lora(&params, &lora, &lcfg).unwrap();
        for len in [1usize, 5, 40] {
            let ids: Vec<u32> = (0..len as u32).map(|i| i % 250).collect();
            let slots = encode_ids(&params, &qv, &mem, &ids).unwrap();
            assert_eq!(slots.slots.dim(), (8, 32));
            assert!(slots.slots.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn empty_context_is_rejected() {
        let (params, lora, lcfg, mem) = setup(4);
        let qv = apply_lora(&params, &lora, &lcfg).unwrap();
        assert!(matches!(
            encode_ids(&params, &qv, &mem, &[]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn overflow_is_a_length_error() {
        let (params, lora, lcfg, mem) = setup(8);
        let qv = apply_lora(&params, &lora, &lcfg).unwrap();
        let ids: Vec<u32> = vec![1; 89]; // 89 + 8 > 96
        assert!(matches!(
            encode_ids(&params, &qv, &mem, &ids),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn different_contexts_give_different_slots() {
        let (params, lora, lcfg, mem) = setup(8);
        let qv = apply_lora(&params, &lora, &lcfg).unwrap();
        let mut rng = seeded_rng(5);
        for _ in 0..10 {
            let a: Vec<u32> = (0..12).map(|_| rng.gen_range(0..250u32)).collect();
            let mut b = a.clone();
            let flip = rng.gen_range(0..12usize);
            b[flip] = (b[flip] + 1) % 250;
            let sa = encode_ids(&params, &qv, &mem, &a).unwrap();
            let sb = encode_ids(&params, &qv, &mem, &b).unwrap();
            let max_diff = (&sa.slots - &sb.slots)
                .iter()
                .fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(max_diff > 0.0, "slots degenerate for perturbed context");
        }
    }

    #[test]
    fn trainable_count_matches_closed_form() {
        // toy shape: 4 layers, d=256, r=32, k=128
        let cfg = ModelConfig::toy();
        let lcfg = LoraConfig::with_rank(32);
        let count = trainable_parameter_count(&cfg, &lcfg, 128);
        let lora = 4 * 2 * 2 * (32 * 256);
        let emb = (128 + 2) * 256;
        assert_eq!(count, lora + emb);
        assert_eq!(count, 164_352);
        let named: usize = trainable_parameter_names(&cfg, &lcfg, 128)
            .iter()
            .map(|(_, n)| n)
            .sum();
        assert_eq!(named, count);
    }

    #[test]
    fn reference_scale_fraction_is_about_a_quarter_percent() {
        let frac = reference_7b_trainable_fraction();
        assert!((frac - 0.0025).abs() < 0.0005, "fraction {frac}");
    }
}
