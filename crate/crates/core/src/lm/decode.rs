//! Greedy decoding with a per-layer KV cache.

use ndarray::{Array1, Array2};

use super::forward::{gelu, QvOverride, RMS_EPS};
use super::params::LmParameters;
use super::{AE_TOKEN, LM_TOKEN};
use crate::error::{Error, Result};

struct LayerKv {
    k: Array2<f32>,
    v: Array2<f32>,
}

/// Incremental decoder state: one forward position at a time.
struct DecodeState<'a> {
    params: &'a LmParameters,
    qv: Option<&'a QvOverride>,
    cache: Vec<LayerKv>,
    len: usize,
}

impl<'a> DecodeState<'a> {
    fn new(params: &'a LmParameters, qv: Option<&'a QvOverride>) -> Self {
        let d = params.config.d_model;
        let cap = params.config.max_positions;
        let cache = (0..params.config.n_layers)
            .map(|_| LayerKv { k: Array2::zeros((cap, d)), v: Array2::zeros((cap, d)) })
            .collect();
        Self { params, qv, cache, len: 0 }
    }

    /// Push one embedded input row; returns the post-final-norm hidden row.
    fn step(&mut self, x_row: &Array1<f32>) -> Array1<f32> {
        let cfg = &self.params.config;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let n_heads = cfg.n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let pos = self.len;

        let mut x = x_row.clone();
        for (li, layer) in self.params.layers.iter().enumerate() {
            let (wq, wv) = match self.qv {
                Some(o) => (&o.q[li], &o.v[li]),
                None => (&layer.attn.wq, &layer.attn.wv),
            };
            let normed = rms_row(&x, &layer.attn_norm);
            let mut q = wq.dot(&normed);
            let mut k = layer.attn.wk.dot(&normed);
            let v = wv.dot(&normed);
            if cfg.rotary {
                rotate_row(&mut q, self.params, pos);
                rotate_row(&mut k, self.params, pos);
            }
            self.cache[li].k.row_mut(pos).assign(&k);
            self.cache[li].v.row_mut(pos).assign(&v);

            let ks = self.cache[li].k.as_slice().unwrap();
            let vs = self.cache[li].v.as_slice().unwrap();
            let qs = q.as_slice().unwrap();
            let mut concat = Array1::<f32>::zeros(d);
            let cs = concat.as_slice_mut().unwrap();
            let t = pos + 1;
            let mut scores = vec![0.0f32; t];
            for h in 0..n_heads {
                let col = h * dh;
                let qh = &qs[col..col + dh];
                let mut maxv = f32::NEG_INFINITY;
                for (j, sj) in scores.iter_mut().enumerate() {
                    let kj = &ks[j * d + col..j * d + col + dh];
                    let s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                    *sj = s;
                    if s > maxv {
                        maxv = s;
                    }
                }
                let mut sum = 0.0f32;
                for sj in scores.iter_mut() {
                    *sj = (*sj - maxv).exp();
                    sum += *sj;
                }
                let inv = 1.0 / sum;
                let out = &mut cs[col..col + dh];
                for (j, sj) in scores.iter().enumerate() {
                    let p = sj * inv;
                    let vj = &vs[j * d + col..j * d + col + dh];
                    for (o, vx) in out.iter_mut().zip(vj) {
                        *o += p * vx;
                    }
                }
            }
            let attn_out = layer.attn.wo.dot(&concat);
            let x_mid = &x + &attn_out;
            let normed_ff = rms_row(&x_mid, &layer.ff_norm);
            let h_act = layer.w_up.dot(&normed_ff).mapv(gelu);
            let ff_out = layer.w_down.dot(&h_act);
            x = &x_mid + &ff_out;
        }
        self.len += 1;
        rms_row(&x, &self.params.final_norm)
    }
}

fn rms_row(x: &Array1<f32>, gain: &Array1<f32>) -> Array1<f32> {
    let d = x.len();
    let ms = x.iter().map(|v| v * v).sum::<f32>() / d as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    Array1::from_iter(x.iter().zip(gain.iter()).map(|(v, g)| v * inv * g))
}

fn rotate_row(x: &mut Array1<f32>, params: &LmParameters, pos: usize) {
    let cos = params.rope_cos.as_ref().expect("rotary tables");
    let sin = params.rope_sin.as_ref().expect("rotary tables");
    let dh = params.config.head_dim();
    let half = dh / 2;
    let xs = x.as_slice_mut().unwrap();
    for h in 0..params.config.n_heads {
        let base = h * dh;
        for j in 0..half {
            let (c, s) = (cos[[pos, j]], sin[[pos, j]]);
            let a = xs[base + 2 * j];
            let b = xs[base + 2 * j + 1];
            xs[base + 2 * j] = a * c - b * s;
            xs[base + 2 * j + 1] = a * s + b * c;
        }
    }
}

fn embed_one(
    params: &LmParameters,
    task_table: Option<&Array2<f32>>,
    id: u32,
    pos: usize,
) -> Result<Array1<f32>> {
    let task_row = match id {
        AE_TOKEN => Some(0),
        LM_TOKEN => Some(1),
        _ => None,
    };
    let mut row = match (task_row, task_table) {
        (Some(r), Some(table)) => table.row(r).to_owned(),
        _ => {
            if id as usize >= params.config.vocab_size {
                return Err(Error::Precondition(format!(
                    "token id {id} outside vocab of size {}",
                    params.config.vocab_size
                )));
            }
            params.tok_emb.row(id as usize).to_owned()
        }
    };
    if let Some(pe) = &params.pos_emb {
        row += &pe.row(pos);
    }
    Ok(row)
}

/// First index of the maximum logit; ties resolve to the lowest id.
fn argmax(logits: &Array1<f32>) -> u32 {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

/// Greedy decode: feed `[prefix; seed_tokens]`, then emit argmax tokens
/// until `stop_token` or `max_new`. Returns only the newly generated ids
/// (including the stop token when hit).
pub fn greedy_decode(
    params: &LmParameters,
    qv: Option<&QvOverride>,
    task_table: Option<&Array2<f32>>,
    prefix: Option<&Array2<f32>>,
    seed_tokens: &[u32],
    max_new: usize,
    stop_token: u32,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(Error::Precondition("max_new must be at least 1".into()));
    }
    if seed_tokens.is_empty() && prefix.map_or(true, |p| p.nrows() == 0) {
        return Err(Error::Precondition("decode needs a nonempty prefix or seed".into()));
    }
    let cfg = &params.config;
    let p = prefix.map_or(0, |m| m.nrows());
    let total = p + seed_tokens.len() + max_new;
    if total > cfg.max_positions {
        return Err(Error::Length { actual: total, limit: cfg.max_positions });
    }

    let mut state = DecodeState::new(params, qv);
    let mut normed = Array1::zeros(cfg.d_model);
    if let Some(m) = prefix {
        for i in 0..p {
            let mut row = m.row(i).to_owned();
            if let Some(pe) = &params.pos_emb {
                row += &pe.row(i);
            }
            normed = state.step(&row);
        }
    }
    for &id in seed_tokens {
        let row = embed_one(params, task_table, id, state.len)?;
        normed = state.step(&row);
    }

    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let logits = params.head.dot(&normed);
        let next = argmax(&logits);
        out.push(next);
        if next == stop_token {
            break;
        }
        if out.len() == max_new {
            break;
        }
        let row = embed_one(params, task_table, next, state.len)?;
        normed = state.step(&row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::forward::forward;
    use crate::lm::params::seeded_rng;
    use crate::lm::{ModelConfig, BYTE_VOCAB_SIZE, EOS_TOKEN};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            vocab_size: BYTE_VOCAB_SIZE,
            max_positions: 64,
            rotary: false,
        }
    }

    #[test]
    fn max_new_one_gives_exactly_one_token() {
        let params = LmParameters::init(&cfg(), &mut seeded_rng(2));
        let out = greedy_decode(&params, None, None, None, &[65, 66], 1, EOS_TOKEN).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn stops_at_stop_token() {
        let params = LmParameters::init(&cfg(), &mut seeded_rng(2));
        // whatever the first argmax is, declaring it the stop token must
        // terminate the decode after one step
        let first = greedy_decode(&params, None, None, None, &[1, 2, 3], 1, EOS_TOKEN).unwrap()[0];
        let out = greedy_decode(&params, None, None, None, &[1, 2, 3], 10, first).unwrap();
        assert_eq!(out, vec![first]);
    }

    #[test]
    fn decode_is_deterministic() {
        let params = LmParameters::init(&cfg(), &mut seeded_rng(3));
        let a = greedy_decode(&params, None, None, None, &[5, 6, 7], 16, EOS_TOKEN).unwrap();
        let b = greedy_decode(&params, None, None, None, &[5, 6, 7], 16, EOS_TOKEN).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_overflow_is_an_explicit_length_error() {
        let params = LmParameters::init(&cfg(), &mut seeded_rng(3));
        let err = greedy_decode(&params, None, None, None, &[1; 40], 60, EOS_TOKEN).unwrap_err();
        assert!(matches!(err, Error::Length { limit: 64, .. }));
    }

    #[test]
    fn incremental_path_agrees_with_batch_forward() {
        // the KV-cache path and the full forward must predict the same
        // next token from the same inputs
        let params = LmParameters::init(&cfg(), &mut seeded_rng(4));
        let tokens = [10u32, 44, 91, 7];
        let (logits, _) = forward(&params, None, None, None, &tokens).unwrap();
        let batch_next = {
            let row = logits.row(logits.nrows() - 1);
            let mut best = (0usize, f32::NEG_INFINITY);
            for (i, &v) in row.iter().enumerate() {
                if v > best.1 {
                    best = (i, v);
                }
            }
            best.0 as u32
        };
        let inc = greedy_decode(&params, None, None, None, &tokens, 1, EOS_TOKEN).unwrap();
        assert_eq!(inc[0], batch_next);
    }

    #[test]
    fn incremental_path_agrees_under_rotary() {
        let mut c = cfg();
        c.rotary = true;
        let params = LmParameters::init(&c, &mut seeded_rng(8));
        let tokens = [3u32, 250, 17, 99, 41];
        let (logits, _) = forward(&params, None, None, None, &tokens).unwrap();
        let last = logits.row(logits.nrows() - 1);
        let batch_next = last
            .iter()
            .enumerate()
            .fold((0usize, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0 as u32;
        let inc = greedy_decode(&params, None, None, None, &tokens, 1, EOS_TOKEN).unwrap();
        assert_eq!(inc[0], batch_next);
    }
}
