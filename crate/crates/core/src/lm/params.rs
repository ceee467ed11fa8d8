//! Backbone parameter tensors, initialization, and named-tensor traversal.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone)]
pub struct AttnWeights {
    /// All projections are stored `[out, in]`; a sequence `X: [T, in]`
    /// projects as `X · Wᵀ`.
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub attn_norm: Array1<f32>,
    pub attn: AttnWeights,
    pub ff_norm: Array1<f32>,
    pub w_up: Array2<f32>,   // [d_ff, d]
    pub w_down: Array2<f32>, // [d, d_ff]
}

#[derive(Debug, Clone)]
pub struct LmParameters {
    pub config: ModelConfig,
    pub tok_emb: Array2<f32>, // [vocab, d]
    /// Learned position table `[max_positions, d]`; `None` under rotary.
    pub pos_emb: Option<Array2<f32>>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Array1<f32>,
    pub head: Array2<f32>, // [vocab, d]
    /// Precomputed rotary angles `[max_positions, head_dim/2]` as (cos, sin).
    pub rope_cos: Option<Array2<f32>>,
    pub rope_sin: Option<Array2<f32>>,
}

fn gauss(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Array2<f32> {
    let dist = Normal::new(0.0f32, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl LmParameters {
    /// Random initialization. Output-side projections get the usual
    /// depth-scaled std so residual streams start near identity.
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        config.validate().expect("validated config");
        let d = config.d_model;
        let out_std = INIT_STD / (2.0 * config.n_layers as f32).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Array1::ones(d),
                attn: AttnWeights {
                    wq: gauss(rng, d, d, INIT_STD),
                    wk: gauss(rng, d, d, INIT_STD),
                    wv: gauss(rng, d, d, INIT_STD),
                    wo: gauss(rng, d, d, out_std),
                },
                ff_norm: Array1::ones(d),
                w_up: gauss(rng, config.d_ff, d, INIT_STD),
                w_down: gauss(rng, d, config.d_ff, out_std),
            })
            .collect();
        let (rope_cos, rope_sin) = if config.rotary {
            let (c, s) = rope_tables(config);
            (Some(c), Some(s))
        } else {
            (None, None)
        };
        Self {
            config: config.clone(),
            tok_emb: gauss(rng, config.vocab_size, d, INIT_STD),
            pos_emb: if config.rotary {
                None
            } else {
                Some(gauss(rng, config.max_positions, d, INIT_STD))
            },
            layers,
            final_norm: Array1::ones(d),
            head: gauss(rng, config.vocab_size, d, INIT_STD),
            rope_cos,
            rope_sin,
        }
    }

    /// Visit every parameter tensor in a fixed, stable order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[usize], &[f32])) {
        let m = |a: &Array2<f32>| (vec![a.nrows(), a.ncols()], ());
        let _ = m;
        f("backbone.tok_emb", &[self.tok_emb.nrows(), self.tok_emb.ncols()], slice2(&self.tok_emb));
        if let Some(pe) = &self.pos_emb {
            f("backbone.pos_emb", &[pe.nrows(), pe.ncols()], slice2(pe));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("backbone.layers.{i}");
            f(&format!("{p}.attn_norm"), &[layer.attn_norm.len()], layer.attn_norm.as_slice().unwrap());
            f(&format!("{p}.attn.wq"), &[layer.attn.wq.nrows(), layer.attn.wq.ncols()], slice2(&layer.attn.wq));
            f(&format!("{p}.attn.wk"), &[layer.attn.wk.nrows(), layer.attn.wk.ncols()], slice2(&layer.attn.wk));
            f(&format!("{p}.attn.wv"), &[layer.attn.wv.nrows(), layer.attn.wv.ncols()], slice2(&layer.attn.wv));
            f(&format!("{p}.attn.wo"), &[layer.attn.wo.nrows(), layer.attn.wo.ncols()], slice2(&layer.attn.wo));
            f(&format!("{p}.ff_norm"), &[layer.ff_norm.len()], layer.ff_norm.as_slice().unwrap());
            f(&format!("{p}.w_up"), &[layer.w_up.nrows(), layer.w_up.ncols()], slice2(&layer.w_up));
            f(&format!("{p}.w_down"), &[layer.w_down.nrows(), layer.w_down.ncols()], slice2(&layer.w_down));
        }
        f("backbone.final_norm", &[self.final_norm.len()], self.final_norm.as_slice().unwrap());
        f("backbone.head", &[self.head.nrows(), self.head.ncols()], slice2(&self.head));
    }

    /// Mutable counterpart of `visit`, same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f32])) {
        f("backbone.tok_emb", self.tok_emb.as_slice_mut().unwrap());
        if let Some(pe) = &mut self.pos_emb {
            f("backbone.pos_emb", pe.as_slice_mut().unwrap());
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("backbone.layers.{i}");
            f(&format!("{p}.attn_norm"), layer.attn_norm.as_slice_mut().unwrap());
            f(&format!("{p}.attn.wq"), layer.attn.wq.as_slice_mut().unwrap());
            f(&format!("{p}.attn.wk"), layer.attn.wk.as_slice_mut().unwrap());
            f(&format!("{p}.attn.wv"), layer.attn.wv.as_slice_mut().unwrap());
            f(&format!("{p}.attn.wo"), layer.attn.wo.as_slice_mut().unwrap());
            f(&format!("{p}.ff_norm"), layer.ff_norm.as_slice_mut().unwrap());
            f(&format!("{p}.w_up"), layer.w_up.as_slice_mut().unwrap());
            f(&format!("{p}.w_down"), layer.w_down.as_slice_mut().unwrap());
        }
        f("backbone.final_norm", self.final_norm.as_slice_mut().unwrap());
        f("backbone.head", self.head.as_slice_mut().unwrap());
    }

    /// Snapshot of all parameter bytes for freeze checks.
    pub fn snapshot(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        self.visit(|name, _shape, data| out.push((name.to_string(), data.to_vec())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, data| n += data.len());
        n
    }
}

fn slice2(a: &Array2<f32>) -> &[f32] {
    a.as_slice().expect("standard layout")
}

/// cos/sin tables for rotary positions, theta base 10000.
fn rope_tables(config: &ModelConfig) -> (Array2<f32>, Array2<f32>) {
    let half = config.head_dim() / 2;
    let mut cos = Array2::zeros((config.max_positions, half));
    let mut sin = Array2::zeros((config.max_positions, half));
    for pos in 0..config.max_positions {
        for j in 0..half {
            let theta = pos as f64 * (10000f64).powf(-2.0 * j as f64 / config.head_dim() as f64);
            cos[[pos, j]] = theta.cos() as f32;
            sin[[pos, j]] = theta.sin() as f32;
        }
    }
    (cos, sin)
}

/// Gradient accumulators matching `LmParameters` shapes.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub tok_emb: Array2<f32>,
    pub pos_emb: Option<Array2<f32>>,
    pub layers: Vec<LayerGrads>,
    pub final_norm: Array1<f32>,
    pub head: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub attn_norm: Array1<f32>,
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    pub ff_norm: Array1<f32>,
    pub w_up: Array2<f32>,
    pub w_down: Array2<f32>,
}

impl ParamGrads {
    pub fn zeros_like(params: &LmParameters) -> Self {
        let d = params.config.d_model;
        Self {
            tok_emb: Array2::zeros(params.tok_emb.dim()),
            pos_emb: params.pos_emb.as_ref().map(|pe| Array2::zeros(pe.dim())),
            layers: params
                .layers
                .iter()
                .map(|_| LayerGrads {
                    attn_norm: Array1::zeros(d),
                    wq: Array2::zeros((d, d)),
                    wk: Array2::zeros((d, d)),
                    wv: Array2::zeros((d, d)),
                    wo: Array2::zeros((d, d)),
                    ff_norm: Array1::zeros(d),
                    w_up: Array2::zeros((params.config.d_ff, d)),
                    w_down: Array2::zeros((d, params.config.d_ff)),
                })
                .collect(),
            final_norm: Array1::zeros(d),
            head: Array2::zeros(params.head.dim()),
        }
    }

    /// Visit gradients in the same order as `LmParameters::visit`.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f32])) {
        f("backbone.tok_emb", self.tok_emb.as_slice_mut().unwrap());
        if let Some(pe) = &mut self.pos_emb {
            f("backbone.pos_emb", pe.as_slice_mut().unwrap());
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("backbone.layers.{i}");
            f(&format!("{p}.attn_norm"), layer.attn_norm.as_slice_mut().unwrap());
            f(&format!("{p}.attn.wq"), layer.wq.as_slice_mut().unwrap());
            f(&format!("{p}.attn.wk"), layer.wk.as_slice_mut().unwrap());
            f(&format!("{p}.attn.wv"), layer.wv.as_slice_mut().unwrap());
            f(&format!("{p}.attn.wo"), layer.wo.as_slice_mut().unwrap());
            f(&format!("{p}.ff_norm"), layer.ff_norm.as_slice_mut().unwrap());
            f(&format!("{p}.w_up"), layer.w_up.as_slice_mut().unwrap());
            f(&format!("{p}.w_down"), layer.w_down.as_slice_mut().unwrap());
        }
        f("backbone.final_norm", self.final_norm.as_slice_mut().unwrap());
        f("backbone.head", self.head.as_slice_mut().unwrap());
    }
}

/// Deterministic RNG for a given seed; every stochastic component in the
/// crate derives from one of these.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw a fresh stream seed; used to give subsystems independent rngs.
pub fn fork_seed(rng: &mut ChaCha8Rng) -> u64 {
    rng.gen()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::BYTE_VOCAB_SIZE;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            vocab_size: BYTE_VOCAB_SIZE,
            max_positions: 64,
            rotary: false,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny();
        let a = LmParameters::init(&cfg, &mut seeded_rng(7));
        let b = LmParameters::init(&cfg, &mut seeded_rng(7));
        assert_eq!(a.tok_emb, b.tok_emb);
        assert_eq!(a.layers[1].attn.wq, b.layers[1].attn.wq);
    }

    #[test]
    fn visit_covers_every_tensor_once() {
        let params = LmParameters::init(&tiny(), &mut seeded_rng(0));
        let mut names = Vec::new();
        let mut total = 0usize;
        params.visit(|name, shape, data| {
            names.push(name.to_string());
            assert_eq!(shape.iter().product::<usize>(), data.len());
            total += data.len();
        });
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate tensor names");
        assert_eq!(total, params.param_count());
        // embedding table row count equals vocab size
        assert_eq!(params.tok_emb.nrows(), BYTE_VOCAB_SIZE);
    }

    #[test]
    fn rotary_config_has_rope_tables_instead_of_pos_table() {
        let mut cfg = tiny();
        cfg.rotary = true;
        let params = LmParameters::init(&cfg, &mut seeded_rng(0));
        assert!(params.pos_emb.is_none());
        assert!(params.rope_cos.is_some());
        assert_eq!(params.rope_cos.as_ref().unwrap().dim(), (64, 4));
    }
}
