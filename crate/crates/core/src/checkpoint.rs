//! Checkpoint directories: `meta.json` (config, format version, tensor
//! manifest, seed) plus `tensors.bin` (little-endian float32, row-major,
//! concatenated in manifest order). Training checkpoints add optimizer
//! moments to the manifest and a `training.json` with step and RNG state.
//! Load/save round-trips are bit-exact.

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::encoder::{
    hex_string, trainable_parameter_names, LoraConfig, LoraFactors, LoraWeights, MemoryTokenTable,
    N_TASK_TOKENS,
};
use crate::error::{Error, Result};
use crate::lm::params::{LmParameters, seeded_rng};
use crate::lm::ModelConfig;
use crate::optim::{AdamConfig, AdamW};
use crate::pipeline::Icae;
use crate::training::{TrainConfig, Trainer};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const TRAINING_FILE: &str = "training.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub k: usize,
    pub seed: u64,
    pub model_id: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub step: u64,
    pub skipped_nonfinite: u64,
    pub opt_step: u64,
    pub rng_seed: String,
    pub rng_word_pos_hi: u64,
    pub rng_word_pos_lo: u64,
}

struct TensorWriter {
    manifest: Vec<TensorEntry>,
    bytes: Vec<u8>,
    /// Byte length of the model tensors (the id hash covers exactly these).
    model_bytes: usize,
}

impl TensorWriter {
    fn new() -> Self {
        Self { manifest: Vec::new(), bytes: Vec::new(), model_bytes: 0 }
    }

    fn push(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let offset = self.bytes.len() as u64;
        let mut buf = vec![0u8; data.len() * 4];
        LittleEndian::write_f32_into(data, &mut buf);
        self.bytes.extend_from_slice(&buf);
        self.manifest.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            dtype: "f32".into(),
            offset,
        });
    }

    fn mark_model_boundary(&mut self) {
        self.model_bytes = self.bytes.len();
    }
}

fn collect_model_tensors(icae: &Icae) -> TensorWriter {
    let mut w = TensorWriter::new();
    icae.backbone.visit(|name, shape, data| w.push(name, shape, data));
    icae.lora.visit(|name, shape, data| w.push(name, shape, data));
    w.push(
        "mem.table",
        &[icae.mem.table.nrows(), icae.mem.table.ncols()],
        icae.mem.table.as_slice().unwrap(),
    );
    w.mark_model_boundary();
    w
}

fn write_dir(dir: &Path, meta: &CheckpointMeta, bytes: &[u8]) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::File { path: dir.to_path_buf(), source: e })?;
    std::fs::write(dir.join(TENSORS_FILE), bytes)
        .map_err(|e| Error::File { path: dir.join(TENSORS_FILE), source: e })?;
    std::fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(meta)?)
        .map_err(|e| Error::File { path: dir.join(META_FILE), source: e })?;
    Ok(())
}

/// Content id: hash of the model-tensor byte range.
fn content_id(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize()[..16])
}

/// Save model weights (backbone + adapters + memory table). Returns the
/// content id, which is also stamped into the model.
pub fn save_model(dir: &Path, icae: &mut Icae, seed: u64) -> Result<String> {
    let w = collect_model_tensors(icae);
    let model_id = content_id(&w.bytes[..w.model_bytes]);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: icae.config().clone(),
        lora: icae.lora_cfg.clone(),
        k: icae.k(),
        seed,
        model_id: model_id.clone(),
        tensors: w.manifest,
    };
    write_dir(dir, &meta, &w.bytes)?;
    icae.model_id = model_id.clone();
    Ok(model_id)
}

/// Save the full training state: model weights, optimizer moments, step
/// counters, and RNG position.
pub fn save_train_state(dir: &Path, trainer: &mut Trainer, seed: u64) -> Result<String> {
    let mut w = collect_model_tensors(&trainer.icae);
    let model_bytes = w.model_bytes;
    let names = trainable_parameter_names(
        trainer.icae.config(),
        &trainer.icae.lora_cfg,
        trainer.icae.k(),
    );
    assert_eq!(names.len(), trainer.opt.states.len(), "optimizer group mismatch");
    for ((name, _), (m, v)) in names.iter().zip(&trainer.opt.states) {
        w.push(&format!("opt.m.{name}"), &[m.len()], m);
        w.push(&format!("opt.v.{name}"), &[v.len()], v);
    }
    let model_id = content_id(&w.bytes[..model_bytes]);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: trainer.icae.config().clone(),
        lora: trainer.icae.lora_cfg.clone(),
        k: trainer.icae.k(),
        seed,
        model_id: model_id.clone(),
        tensors: w.manifest,
    };
    write_dir(dir, &meta, &w.bytes)?;
    let state = TrainingState {
        config: trainer.cfg.clone(),
        step: trainer.step,
        skipped_nonfinite: trainer.skipped_nonfinite,
        opt_step: trainer.opt.step,
        rng_seed: hex_string(&trainer.rng.get_seed()),
        rng_word_pos_hi: (trainer.rng.get_word_pos() >> 64) as u64,
        rng_word_pos_lo: trainer.rng.get_word_pos() as u64,
    };
    std::fs::write(dir.join(TRAINING_FILE), serde_json::to_vec_pretty(&state)?)
        .map_err(|e| Error::File { path: dir.join(TRAINING_FILE), source: e })?;
    trainer.icae.model_id = model_id.clone();
    Ok(model_id)
}

struct TensorReader {
    meta: CheckpointMeta,
    bytes: Vec<u8>,
}

impl TensorReader {
    fn open(dir: &Path) -> Result<Self> {
        let meta_raw = std::fs::read(dir.join(META_FILE))
            .map_err(|e| Error::File { path: dir.join(META_FILE), source: e })?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_raw)
            .map_err(|e| Error::Format(format!("bad checkpoint meta: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {} unsupported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let bytes = std::fs::read(dir.join(TENSORS_FILE))
            .map_err(|e| Error::File { path: dir.join(TENSORS_FILE), source: e })?;
        Ok(Self { meta, bytes })
    }

    fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.meta
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint manifest is missing tensor {name}")))
    }

    fn read(&self, name: &str, expect_shape: &[usize]) -> Result<Vec<f32>> {
        let entry = self.entry(name)?;
        if entry.shape != expect_shape {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?} but the configuration implies {:?}",
                entry.shape, expect_shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::Format(format!("tensor {name} has dtype {}", entry.dtype)));
        }
        let n: usize = expect_shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 4;
        if end > self.bytes.len() {
            return Err(Error::Format(format!("tensor {name} extends past end of file")));
        }
        let mut out = vec![0.0f32; n];
        LittleEndian::read_f32_into(&self.bytes[start..end], &mut out);
        Ok(out)
    }

    fn read2(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
        let data = self.read(name, &[rows, cols])?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
    }

    fn read1(&self, name: &str, len: usize) -> Result<Array1<f32>> {
        Ok(Array1::from_vec(self.read(name, &[len])?))
    }
}

fn load_backbone(r: &TensorReader) -> Result<LmParameters> {
    let cfg = &r.meta.model;
    cfg.validate()?;
    // start from a seeded init purely for structure; every tensor is
    // overwritten from the manifest
    let mut params = LmParameters::init(cfg, &mut seeded_rng(0));
    let d = cfg.d_model;
    params.tok_emb = r.read2("backbone.tok_emb", cfg.vocab_size, d)?;
    if cfg.rotary {
        params.pos_emb = None;
    } else {
        params.pos_emb = Some(r.read2("backbone.pos_emb", cfg.max_positions, d)?);
    }
    for i in 0..cfg.n_layers {
        let p = format!("backbone.layers.{i}");
        let layer = &mut params.layers[i];
        layer.attn_norm = r.read1(&format!("{p}.attn_norm"), d)?;
        layer.attn.wq = r.read2(&format!("{p}.attn.wq"), d, d)?;
        layer.attn.wk = r.read2(&format!("{p}.attn.wk"), d, d)?;
        layer.attn.wv = r.read2(&format!("{p}.attn.wv"), d, d)?;
        layer.attn.wo = r.read2(&format!("{p}.attn.wo"), d, d)?;
        layer.ff_norm = r.read1(&format!("{p}.ff_norm"), d)?;
        layer.w_up = r.read2(&format!("{p}.w_up"), cfg.d_ff, d)?;
        layer.w_down = r.read2(&format!("{p}.w_down"), d, cfg.d_ff)?;
    }
    params.final_norm = r.read1("backbone.final_norm", d)?;
    params.head = r.read2("backbone.head", cfg.vocab_size, d)?;
    Ok(params)
}

fn load_parts(r: &TensorReader) -> Result<Icae> {
    let cfg = &r.meta.model;
    let lcfg = &r.meta.lora;
    lcfg.validate(cfg)?;
    let backbone = load_backbone(r)?;
    let d = cfg.d_model;
    let mut q = Vec::with_capacity(cfg.n_layers);
    let mut v = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        q.push(LoraFactors {
            a: r.read2(&format!("lora.layers.{i}.q.a"), lcfg.rank, d)?,
            b: r.read2(&format!("lora.layers.{i}.q.b"), d, lcfg.rank)?,
        });
        v.push(LoraFactors {
            a: r.read2(&format!("lora.layers.{i}.v.a"), lcfg.rank, d)?,
            b: r.read2(&format!("lora.layers.{i}.v.b"), d, lcfg.rank)?,
        });
    }
    let lora = LoraWeights { q, v };
    let mem = MemoryTokenTable {
        table: r.read2("mem.table", r.meta.k + N_TASK_TOKENS, d)?,
        k: r.meta.k,
    };
    Icae::from_parts(backbone, lora, lcfg.clone(), mem, r.meta.model_id.clone())
}

/// Load model weights; returns the model and the seed recorded at save.
pub fn load_model(dir: &Path) -> Result<(Icae, u64)> {
    let r = TensorReader::open(dir)?;
    let icae = load_parts(&r)?;
    Ok((icae, r.meta.seed))
}

/// Load a full training state (model, optimizer, RNG, counters).
pub fn load_train_state(dir: &Path) -> Result<Trainer> {
    let r = TensorReader::open(dir)?;
    let icae = load_parts(&r)?;
    let raw = std::fs::read(dir.join(TRAINING_FILE))
        .map_err(|e| Error::File { path: dir.join(TRAINING_FILE), source: e })?;
    let state: TrainingState = serde_json::from_slice(&raw)
        .map_err(|e| Error::Format(format!("bad training state: {e}")))?;

    let mut trainer = Trainer::new(icae, state.config.clone())?;
    let names = trainable_parameter_names(
        trainer.icae.config(),
        &trainer.icae.lora_cfg,
        trainer.icae.k(),
    );
    let mut opt = AdamW::new(
        AdamConfig {
            lr: state.config.learning_rate,
            weight_decay: state.config.weight_decay,
            ..AdamConfig::default()
        },
        &names.iter().map(|(_, n)| *n).collect::<Vec<_>>(),
    );
    for (i, (name, n)) in names.iter().enumerate() {
        opt.states[i].0 = r.read(&format!("opt.m.{name}"), &[*n])?;
        opt.states[i].1 = r.read(&format!("opt.v.{name}"), &[*n])?;
    }
    opt.step = state.opt_step;
    trainer.opt = opt;
    trainer.step = state.step;
    trainer.skipped_nonfinite = state.skipped_nonfinite;

    let seed_bytes = parse_hex32(&state.rng_seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed_bytes);
    let pos = ((state.rng_word_pos_hi as u128) << 64) | state.rng_word_pos_lo as u128;
    rng.set_word_pos(pos);
    trainer.rng = rng;
    Ok(trainer)
}

fn parse_hex32(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(Error::Format("rng seed must be 32 hex bytes".into()));
    }
    let mut out = [0u8; 32];
    for i in 0..32 {
        out[i] = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|e| Error::Format(format!("bad rng seed hex: {e}")))?;
    }
    Ok(out)
}

/// Names the manifest must cover for a model checkpoint of this shape.
pub fn expected_model_tensor_names(config: &ModelConfig, lora: &LoraConfig, k: usize) -> Vec<String> {
    let mut names = Vec::new();
    let probe = LmParameters::init(config, &mut seeded_rng(0));
    probe.visit(|name, _, _| names.push(name.to_string()));
    for (name, _) in trainable_parameter_names(config, lora, k) {
        names.push(name);
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CorpusChunk;
    use crate::lm::BYTE_VOCAB_SIZE;
    use crate::training::TrainConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            vocab_size: BYTE_VOCAB_SIZE,
            max_positions: 128,
            rotary: false,
        }
    }

    fn fresh_icae(seed: u64) -> Icae {
        Icae::new(&cfg(), LoraConfig::with_rank(4), 4, &mut seeded_rng(seed)).unwrap()
    }

    fn chunks() -> Vec<CorpusChunk> {
        (0..6)
            .map(|i| CorpusChunk {
                context: (0..20).map(|j| (50 + (i * 3 + j) % 60) as u32).collect(),
                continuation: Some((0..6).map(|j| (50 + j) as u32).collect()),
                doc_id: format!("d{i}"),
                offset: 0,
            })
            .collect()
    }

    #[test]
    fn model_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut icae = fresh_icae(1);
        let id = save_model(dir.path(), &mut icae, 42).unwrap();
        let (loaded, seed) = load_model(dir.path()).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(loaded.model_id, id);
        let mut before = Vec::new();
        icae.backbone.visit(|_, _, d| before.extend_from_slice(d));
        let mut after = Vec::new();
        loaded.backbone.visit(|_, _, d| after.extend_from_slice(d));
        assert_eq!(before.len(), after.len());
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(icae.mem.table, loaded.mem.table);
        assert_eq!(icae.lora.q[1].a, loaded.lora.q[1].a);
    }

    #[test]
    fn manifest_covers_every_parameter_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let mut icae = fresh_icae(2);
        save_model(dir.path(), &mut icae, 0).unwrap();
        let meta: CheckpointMeta =
            serde_json::from_slice(&std::fs::read(dir.path().join(META_FILE)).unwrap()).unwrap();
        let names: Vec<String> = meta.tensors.iter().map(|t| t.name.clone()).collect();
        for expected in expected_model_tensor_names(&cfg(), &LoraConfig::with_rank(4), 4) {
            assert!(names.contains(&expected), "manifest missing {expected}");
        }
    }

    #[test]
    fn edited_dimensions_fail_to_load_as_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut icae = fresh_icae(3);
        save_model(dir.path(), &mut icae, 0).unwrap();
        let meta_path = dir.path().join(META_FILE);
        let mut meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&meta_path).unwrap()).unwrap();
        meta["model"]["d_model"] = serde_json::json!(64);
        std::fs::write(&meta_path, serde_json::to_vec(&meta).unwrap()).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
    }

    #[test]
    fn save_load_step_matches_step_without_save_bitwise() {
        let data = chunks();
        let tc = TrainConfig {
            batch_size: 2,
            total_steps: 40,
            warmup_steps: 2,
            seed: 9,
            p_ae: 0.5,
            ..TrainConfig::default()
        };
        let mut a = Trainer::new(fresh_icae(7), tc.clone()).unwrap();
        let mut b = Trainer::new(fresh_icae(7), tc).unwrap();
        for _ in 0..3 {
            a.pretrain_step(&data).unwrap();
            b.pretrain_step(&data).unwrap();
        }
        // a: save then reload; b: keep going
        let dir = tempfile::tempdir().unwrap();
        save_train_state(dir.path(), &mut a, 9).unwrap();
        let mut a2 = load_train_state(dir.path()).unwrap();
        let ra = a2.pretrain_step(&data).unwrap();
        let rb = b.pretrain_step(&data).unwrap();
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits(), "resumed loss diverged");
        assert_eq!(ra.task, rb.task);
        // and the parameters they produce agree bitwise
        assert_eq!(a2.icae.mem.table, b.icae.mem.table);
        assert_eq!(a2.icae.lora.q[0].b, b.icae.lora.q[0].b);
    }

    #[test]
    fn model_id_is_content_addressed() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mut icae1 = fresh_icae(11);
        let mut icae2 = fresh_icae(11);
        let id1 = save_model(dir1.path(), &mut icae1, 0).unwrap();
        let id2 = save_model(dir2.path(), &mut icae2, 0).unwrap();
        assert_eq!(id1, id2, "same weights, same id");
        let mut icae3 = fresh_icae(12);
        let id3 = save_model(dir1.path(), &mut icae3, 0).unwrap();
        assert_ne!(id1, id3, "different weights, different id");
    }
}
