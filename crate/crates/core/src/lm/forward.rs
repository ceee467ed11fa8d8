//! Causal forward pass with an activation cache for manual backprop.
//!
//! The engine operates on embedded input rows, so callers can mix soft
//! prefix vectors (memory slots) with ordinary tokens. Attention is computed
//! triangularly: values at position i never touch inputs at positions > i,
//! so causality holds bitwise, not just approximately.

use ndarray::{s, Array1, Array2};

use super::params::LmParameters;
use super::{AE_TOKEN, LM_TOKEN};
use crate::error::{Error, Result};

pub const RMS_EPS: f32 = 1e-5;

/// Effective query/value projection weights per layer, replacing the
/// backbone's own when the low-rank adapter is applied.
#[derive(Debug, Clone)]
pub struct QvOverride {
    pub q: Vec<Array2<f32>>,
    pub v: Vec<Array2<f32>>,
}

/// Where a token position's input embedding came from; backward scatters
/// vocab rows into the embedding-table gradient and leaves task rows to the
/// caller (they live in the trainable memory-token table).
#[derive(Debug, Clone, Copy)]
pub enum EmbSource {
    Vocab(u32),
    Task(usize),
}

#[derive(Debug)]
pub struct LayerCache {
    pub x_in: Array2<f32>,
    pub normed_attn: Array2<f32>,
    pub rms_attn_inv: Vec<f32>,
    /// Post-rotary projections, `[T, d]`, head h in columns `h*dh..(h+1)*dh`.
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    /// Per-head attention probabilities, zeros above the diagonal.
    pub probs: Vec<Array2<f32>>,
    pub attn_concat: Array2<f32>,
    pub x_mid: Array2<f32>,
    pub normed_ff: Array2<f32>,
    pub rms_ff_inv: Vec<f32>,
    pub h_pre: Array2<f32>,
    pub h_act: Array2<f32>,
}

#[derive(Debug)]
pub struct ForwardCache {
    /// Embedded inputs after positional treatment, `[T_total, d]`.
    pub inputs: Array2<f32>,
    pub layers: Vec<LayerCache>,
    /// Residual stream after the last layer, before the final norm.
    pub x_final: Array2<f32>,
    /// Post-final-norm hidden states; the head reads these.
    pub normed: Array2<f32>,
    pub final_rms_inv: Vec<f32>,
    pub prefix_len: usize,
    pub emb_sources: Vec<EmbSource>,
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// y = x * gain / rms(x), row-wise; returns 1/rms per row.
pub fn rms_norm_rows(x: &Array2<f32>, gain: &Array1<f32>) -> (Array2<f32>, Vec<f32>) {
    let (t, d) = x.dim();
    let mut out = Array2::zeros((t, d));
    let mut invs = Vec::with_capacity(t);
    let g = gain.as_slice().unwrap();
    let xs = x.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for i in 0..t {
        let row = &xs[i * d..(i + 1) * d];
        let ms = dot(row, row) / d as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        invs.push(inv);
        let orow = &mut os[i * d..(i + 1) * d];
        for j in 0..d {
            orow[j] = row[j] * inv * g[j];
        }
    }
    (out, invs)
}

pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Rotate query/key rows in place; position of row i is `pos_offset + i`.
pub fn apply_rotary(x: &mut Array2<f32>, params: &LmParameters, pos_offset: usize) {
    let cos = params.rope_cos.as_ref().expect("rotary tables");
    let sin = params.rope_sin.as_ref().expect("rotary tables");
    let d = params.config.d_model;
    let dh = params.config.head_dim();
    let half = dh / 2;
    let (t, _) = x.dim();
    let xs = x.as_slice_mut().unwrap();
    for i in 0..t {
        let pos = pos_offset + i;
        for h in 0..params.config.n_heads {
            let base = i * d + h * dh;
            for j in 0..half {
                let (c, s) = (cos[[pos, j]], sin[[pos, j]]);
                let a = xs[base + 2 * j];
                let b = xs[base + 2 * j + 1];
                xs[base + 2 * j] = a * c - b * s;
                xs[base + 2 * j + 1] = a * s + b * c;
            }
        }
    }
}

/// Inverse rotation applied to gradients of rotated rows.
pub fn apply_rotary_transpose(x: &mut Array2<f32>, params: &LmParameters, pos_offset: usize) {
    let cos = params.rope_cos.as_ref().expect("rotary tables");
    let sin = params.rope_sin.as_ref().expect("rotary tables");
    let d = params.config.d_model;
    let dh = params.config.head_dim();
    let half = dh / 2;
    let (t, _) = x.dim();
    let xs = x.as_slice_mut().unwrap();
    for i in 0..t {
        let pos = pos_offset + i;
        for h in 0..params.config.n_heads {
            let base = i * d + h * dh;
            for j in 0..half {
                let (c, s) = (cos[[pos, j]], sin[[pos, j]]);
                let a = xs[base + 2 * j];
                let b = xs[base + 2 * j + 1];
                xs[base + 2 * j] = a * c + b * s;
                xs[base + 2 * j + 1] = -a * s + b * c;
            }
        }
    }
}

/// Embed token ids, resolving task tokens through the trainable task table
/// when provided. Returns rows without positional treatment.
fn embed_tokens(
    params: &LmParameters,
    task_table: Option<&Array2<f32>>,
    tokens: &[u32],
) -> Result<(Array2<f32>, Vec<EmbSource>)> {
    let d = params.config.d_model;
    let mut rows = Array2::zeros((tokens.len(), d));
    let mut sources = Vec::with_capacity(tokens.len());
    for (i, &id) in tokens.iter().enumerate() {
        let task_row = match id {
            AE_TOKEN => Some(0),
            LM_TOKEN => Some(1),
            _ => None,
        };
        match (task_row, task_table) {
            (Some(r), Some(table)) => {
                rows.row_mut(i).assign(&table.row(r));
                sources.push(EmbSource::Task(r));
            }
            _ => {
                if id as usize >= params.config.vocab_size {
                    return Err(Error::Precondition(format!(
                        "token id {id} outside vocab of size {}",
                        params.config.vocab_size
                    )));
                }
                rows.row_mut(i).assign(&params.tok_emb.row(id as usize));
                sources.push(EmbSource::Vocab(id));
            }
        }
    }
    Ok((rows, sources))
}

fn layer_qv<'a>(
    params: &'a LmParameters,
    qv: Option<&'a QvOverride>,
    layer: usize,
) -> (&'a Array2<f32>, &'a Array2<f32>) {
    match qv {
        Some(o) => (&o.q[layer], &o.v[layer]),
        None => (&params.layers[layer].attn.wq, &params.layers[layer].attn.wv),
    }
}

/// Run the transformer over pre-embedded rows starting at absolute
/// position 0. Returns the full cache including post-norm hidden states.
pub fn run_transformer(
    params: &LmParameters,
    qv: Option<&QvOverride>,
    inputs: Array2<f32>,
    prefix_len: usize,
    emb_sources: Vec<EmbSource>,
) -> ForwardCache {
    let cfg = &params.config;
    let (t, d) = inputs.dim();
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();

    let mut x = inputs.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, layer) in params.layers.iter().enumerate() {
        let (wq, wv) = layer_qv(params, qv, li);
        let x_in = x;
        let (normed_attn, rms_attn_inv) = rms_norm_rows(&x_in, &layer.attn_norm);
        let mut q = normed_attn.dot(&wq.t());
        let mut k = normed_attn.dot(&layer.attn.wk.t());
        let v = normed_attn.dot(&wv.t());
        if cfg.rotary {
            apply_rotary(&mut q, params, 0);
            apply_rotary(&mut k, params, 0);
        }

        let qs = q.as_slice().unwrap();
        let ks = k.as_slice().unwrap();
        let vs = v.as_slice().unwrap();
        let mut probs: Vec<Array2<f32>> = (0..n_heads).map(|_| Array2::zeros((t, t))).collect();
        let mut attn_concat = Array2::<f32>::zeros((t, d));
        let concat = attn_concat.as_slice_mut().unwrap();
        for (h, ph) in probs.iter_mut().enumerate() {
            let pslice = ph.as_slice_mut().unwrap();
            for i in 0..t {
                let qi = &qs[i * d + h * dh..i * d + (h + 1) * dh];
                let prow = &mut pslice[i * t..i * t + i + 1];
                let mut maxv = f32::NEG_INFINITY;
                for (j, pj) in prow.iter_mut().enumerate() {
                    let kj = &ks[j * d + h * dh..j * d + (h + 1) * dh];
                    let s = dot(qi, kj) * scale;
                    *pj = s;
                    if s > maxv {
                        maxv = s;
                    }
                }
                let mut sum = 0.0;
                for pj in prow.iter_mut() {
                    *pj = (*pj - maxv).exp();
                    sum += *pj;
                }
                let inv = 1.0 / sum;
                let out = &mut concat[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, pj) in prow.iter_mut().enumerate() {
                    *pj *= inv;
                    axpy(*pj, &vs[j * d + h * dh..j * d + (h + 1) * dh], out);
                }
            }
        }

        let attn_out = attn_concat.dot(&layer.attn.wo.t());
        let x_mid = &x_in + &attn_out;
        let (normed_ff, rms_ff_inv) = rms_norm_rows(&x_mid, &layer.ff_norm);
        let h_pre = normed_ff.dot(&layer.w_up.t());
        let h_act = h_pre.mapv(gelu);
        let ff_out = h_act.dot(&layer.w_down.t());
        x = &x_mid + &ff_out;

        layers.push(LayerCache {
            x_in,
            normed_attn,
            rms_attn_inv,
            q,
            k,
            v,
            probs,
            attn_concat,
            x_mid,
            normed_ff,
            rms_ff_inv,
            h_pre,
            h_act,
        });
    }

    let (normed, final_rms_inv) = rms_norm_rows(&x, &params.final_norm);
    ForwardCache {
        inputs,
        layers,
        x_final: x,
        normed,
        final_rms_inv,
        prefix_len,
        emb_sources,
    }
}

/// Assemble `[prefix; tokens]`, apply positional treatment, and run the
/// model. Prefix rows occupy positions `0..P` and receive the same
/// positional treatment embedded tokens would.
pub fn prepare_and_run(
    params: &LmParameters,
    qv: Option<&QvOverride>,
    task_table: Option<&Array2<f32>>,
    prefix: Option<&Array2<f32>>,
    tokens: &[u32],
) -> Result<ForwardCache> {
    let cfg = &params.config;
    let p = prefix.map_or(0, |m| m.nrows());
    let total = p + tokens.len();
    if total > cfg.max_positions {
        return Err(Error::Length { actual: total, limit: cfg.max_positions });
    }
    if let Some(m) = prefix {
        if m.ncols() != cfg.d_model {
            return Err(Error::Precondition(format!(
                "prefix width {} != d_model {}",
                m.ncols(),
                cfg.d_model
            )));
        }
    }
    let (tok_rows, sources) = embed_tokens(params, task_table, tokens)?;
    let mut inputs = Array2::zeros((total, cfg.d_model));
    if let Some(m) = prefix {
        inputs.slice_mut(s![..p, ..]).assign(m);
    }
    if !tokens.is_empty() {
        inputs.slice_mut(s![p.., ..]).assign(&tok_rows);
    }
    if let Some(pe) = &params.pos_emb {
        let mut view = inputs.slice_mut(s![..total, ..]);
        view += &pe.slice(s![..total, ..]);
    }
    Ok(run_transformer(params, qv, inputs, p, sources))
}

/// Forward pass producing logits for the token positions only; prefix
/// positions emit no logits.
pub fn forward(
    params: &LmParameters,
    qv: Option<&QvOverride>,
    task_table: Option<&Array2<f32>>,
    prefix: Option<&Array2<f32>>,
    tokens: &[u32],
) -> Result<(Array2<f32>, ForwardCache)> {
    let cache = prepare_and_run(params, qv, task_table, prefix, tokens)?;
    let logits = cache.normed.slice(s![cache.prefix_len.., ..]).dot(&params.head.t());
    Ok((logits, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::params::seeded_rng;
    use crate::lm::{ModelConfig, BYTE_VOCAB_SIZE};

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_layers: layers,
            n_heads: 4,
            d_ff: 64,
            vocab_size: BYTE_VOCAB_SIZE,
            max_positions: 96,
            rotary: false,
        }
    }

    #[test]
    fn single_token_no_prefix_shape() {
        let params = LmParameters::init(&cfg(2), &mut seeded_rng(1));
        let (logits, _) = forward(&params, None, None, None, &[42]).unwrap();
        assert_eq!(logits.dim(), (1, BYTE_VOCAB_SIZE));
    }

    #[test]
    fn prefix_positions_emit_no_logits() {
        let params = LmParameters::init(&cfg(2), &mut seeded_rng(1));
        let prefix = Array2::from_elem((8, 32), 0.01f32);
        let tokens: Vec<u32> = (0..20).collect();
        let (logits, cache) = forward(&params, None, None, Some(&prefix), &tokens).unwrap();
        assert_eq!(logits.dim(), (20, BYTE_VOCAB_SIZE));
        assert_eq!(cache.normed.nrows(), 28);
    }

    #[test]
    fn length_overflow_names_the_limit() {
        let params = LmParameters::init(&cfg(1), &mut seeded_rng(1));
        let tokens: Vec<u32> = vec![1; 97];
        let err = forward(&params, None, None, None, &tokens).unwrap_err();
        match err {
            crate::error::Error::Length { actual, limit } => {
                assert_eq!(actual, 97);
                assert_eq!(limit, 96);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn causality_is_exact_under_token_perturbation() {
        // run twice on a 3-layer model with one late token changed
        let params = LmParameters::init(&cfg(3), &mut seeded_rng(9));
        let a: Vec<u32> = vec![10, 20, 30, 40, 50, 60];
        let mut b = a.clone();
        b[4] = 99;
        let (la, _) = forward(&params, None, None, None, &a).unwrap();
        let (lb, _) = forward(&params, None, None, None, &b).unwrap();
        for i in 0..4 {
            for v in 0..BYTE_VOCAB_SIZE {
                assert!(
                    la[[i, v]].to_bits() == lb[[i, v]].to_bits(),
                    "row {i} col {v} differs"
                );
            }
        }
        // and the perturbed position itself must differ somewhere
        let changed = (0..BYTE_VOCAB_SIZE).any(|v| la[[4, v]] != lb[[4, v]]);
        assert!(changed);
    }

    #[test]
    fn causality_holds_under_rotary_too() {
        let mut c = cfg(2);
        c.rotary = true;
        let params = LmParameters::init(&c, &mut seeded_rng(9));
        let a: Vec<u32> = vec![1, 2, 3, 4, 5];
        let mut b = a.clone();
        b[3] = 77;
        let (la, _) = forward(&params, None, None, None, &a).unwrap();
        let (lb, _) = forward(&params, None, None, None, &b).unwrap();
        for i in 0..3 {
            for v in 0..BYTE_VOCAB_SIZE {
                assert_eq!(la[[i, v]].to_bits(), lb[[i, v]].to_bits());
            }
        }
    }

    #[test]
    fn rotary_transpose_inverts_rotation() {
        let mut c = cfg(1);
        c.rotary = true;
        let params = LmParameters::init(&c, &mut seeded_rng(3));
        let original = Array2::from_shape_fn((5, 32), |(i, j)| (i * 32 + j) as f32 * 0.01);
        let mut x = original.clone();
        apply_rotary(&mut x, &params, 2);
        apply_rotary_transpose(&mut x, &params, 2);
        for (a, b) in x.iter().zip(original.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
