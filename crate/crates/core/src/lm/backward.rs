//! Manual reverse pass mirroring `forward::run_transformer`.
//!
//! Callers choose which gradients to materialize: full backbone gradients
//! (backbone warmup), query/value projection gradients only (the low-rank
//! adapter path), and/or gradients w.r.t. the embedded input rows (memory
//! slots, memory-token embeddings, task-token embeddings).

use ndarray::{Array1, Array2};

use super::forward::{
    apply_rotary_transpose, gelu_grad, EmbSource, ForwardCache, QvOverride, RMS_EPS,
};
use super::params::{LmParameters, ParamGrads};

#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardOptions {
    pub want_input_grads: bool,
    pub want_param_grads: bool,
    pub want_qv_grads: bool,
}

#[derive(Debug)]
pub struct BackwardResult {
    /// Gradient w.r.t. the embedded input rows (after positional add).
    pub d_inputs: Option<Array2<f32>>,
    pub param_grads: Option<ParamGrads>,
    /// Per layer `(dW_q, dW_v)` of the *effective* projections.
    pub qv_grads: Option<Vec<(Array2<f32>, Array2<f32>)>>,
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Backward through y = x * gain / rms(x). Returns dx; accumulates dgain.
fn rms_norm_backward(
    dy: &Array2<f32>,
    x: &Array2<f32>,
    gain: &Array1<f32>,
    inv: &[f32],
    dgain: Option<&mut Array1<f32>>,
) -> Array2<f32> {
    let (t, d) = x.dim();
    let mut dx = Array2::zeros((t, d));
    let g = gain.as_slice().unwrap();
    let dys = dy.as_slice().unwrap();
    let xs = x.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    let mut dg_local = vec![0.0f32; d];
    for i in 0..t {
        let dyr = &dys[i * d..(i + 1) * d];
        let xr = &xs[i * d..(i + 1) * d];
        let dxr = &mut dxs[i * d..(i + 1) * d];
        let ri = inv[i];
        let mut tdotx = 0.0f32;
        for j in 0..d {
            let tj = dyr[j] * g[j];
            tdotx += tj * xr[j];
            dxr[j] = ri * tj;
            dg_local[j] += dyr[j] * xr[j] * ri;
        }
        let c = ri * ri * ri * tdotx / d as f32;
        for j in 0..d {
            dxr[j] -= c * xr[j];
        }
    }
    if let Some(dg) = dgain {
        let dgs = dg.as_slice_mut().unwrap();
        for j in 0..d {
            dgs[j] += dg_local[j];
        }
    }
    dx
}

/// Reverse pass. `d_normed` is the gradient w.r.t. the post-final-norm
/// hidden states (all rows, prefix included).
pub fn backward(
    params: &LmParameters,
    qv: Option<&QvOverride>,
    cache: &ForwardCache,
    d_normed: &Array2<f32>,
    opts: BackwardOptions,
) -> BackwardResult {
    let cfg = &params.config;
    let (t, d) = cache.inputs.dim();
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();

    let mut param_grads = opts.want_param_grads.then(|| ParamGrads::zeros_like(params));
    let mut qv_grads = opts.want_qv_grads.then(|| {
        (0..cfg.n_layers)
            .map(|_| (Array2::zeros((d, d)), Array2::zeros((d, d))))
            .collect::<Vec<_>>()
    });

    // final norm
    let mut dx = rms_norm_backward(
        d_normed,
        &cache.x_final,
        &params.final_norm,
        &cache.final_rms_inv,
        param_grads.as_mut().map(|g| &mut g.final_norm),
    );

    for li in (0..cfg.n_layers).rev() {
        let layer = &params.layers[li];
        let lc = &cache.layers[li];
        let (wq, wv) = match qv {
            Some(o) => (&o.q[li], &o.v[li]),
            None => (&layer.attn.wq, &layer.attn.wv),
        };

        // feed-forward block: x_out = x_mid + w_down(gelu(w_up(normed_ff)))
        let d_h_act = dx.dot(&layer.w_down);
        if let Some(g) = param_grads.as_mut() {
            g.layers[li].w_down += &dx.t().dot(&lc.h_act);
        }
        let mut d_h_pre = d_h_act;
        {
            let dps = d_h_pre.as_slice_mut().unwrap();
            let hps = lc.h_pre.as_slice().unwrap();
            for (dp, hp) in dps.iter_mut().zip(hps) {
                *dp *= gelu_grad(*hp);
            }
        }
        let d_normed_ff = d_h_pre.dot(&layer.w_up);
        if let Some(g) = param_grads.as_mut() {
            g.layers[li].w_up += &d_h_pre.t().dot(&lc.normed_ff);
        }
        let d_mid_from_ff = rms_norm_backward(
            &d_normed_ff,
            &lc.x_mid,
            &layer.ff_norm,
            &lc.rms_ff_inv,
            param_grads.as_mut().map(|g| &mut g.layers[li].ff_norm),
        );
        let d_x_mid = &dx + &d_mid_from_ff;

        // attention block: x_mid = x_in + wo(concat_heads(probs · v))
        let d_concat = d_x_mid.dot(&layer.attn.wo);
        if let Some(g) = param_grads.as_mut() {
            g.layers[li].wo += &d_x_mid.t().dot(&lc.attn_concat);
        }
        let mut dq = Array2::<f32>::zeros((t, d));
        let mut dk = Array2::<f32>::zeros((t, d));
        let mut dv = Array2::<f32>::zeros((t, d));
        {
            let dcs = d_concat.as_slice().unwrap();
            let qs = lc.q.as_slice().unwrap();
            let ks = lc.k.as_slice().unwrap();
            let vs = lc.v.as_slice().unwrap();
            let dqs = dq.as_slice_mut().unwrap();
            let dks = dk.as_slice_mut().unwrap();
            let dvs = dv.as_slice_mut().unwrap();
            let mut dprobs_row = vec![0.0f32; t];
            for h in 0..n_heads {
                let ph = lc.probs[h].as_slice().unwrap();
                let col = h * dh;
                for i in 0..t {
                    let da = &dcs[i * d + col..i * d + col + dh];
                    let prow = &ph[i * t..i * t + i + 1];
                    // dprobs and dv
                    for j in 0..=i {
                        dprobs_row[j] = dot(da, &vs[j * d + col..j * d + col + dh]);
                        axpy(prow[j], da, &mut dvs[j * d + col..j * d + col + dh]);
                    }
                    // softmax backward, then into q and k
                    let srow = &dprobs_row[..=i];
                    let sdot = dot(prow, srow);
                    let qi = &qs[i * d + col..i * d + col + dh];
                    for j in 0..=i {
                        let dsc = prow[j] * (srow[j] - sdot) * scale;
                        if dsc != 0.0 {
                            axpy(dsc, &ks[j * d + col..j * d + col + dh], &mut dqs[i * d + col..i * d + col + dh]);
                            axpy(dsc, qi, &mut dks[j * d + col..j * d + col + dh]);
                        }
                    }
                }
            }
        }
        if cfg.rotary {
            apply_rotary_transpose(&mut dq, params, 0);
            apply_rotary_transpose(&mut dk, params, 0);
        }

        if let Some(g) = param_grads.as_mut() {
            g.layers[li].wq += &dq.t().dot(&lc.normed_attn);
            g.layers[li].wk += &dk.t().dot(&lc.normed_attn);
            g.layers[li].wv += &dv.t().dot(&lc.normed_attn);
        }
        if let Some(g) = qv_grads.as_mut() {
            g[li].0 += &dq.t().dot(&lc.normed_attn);
            g[li].1 += &dv.t().dot(&lc.normed_attn);
        }

        let mut d_normed_attn = dq.dot(wq);
        d_normed_attn += &dk.dot(&layer.attn.wk);
        d_normed_attn += &dv.dot(wv);
        let d_in_from_attn = rms_norm_backward(
            &d_normed_attn,
            &lc.x_in,
            &layer.attn_norm,
            &lc.rms_attn_inv,
            param_grads.as_mut().map(|g| &mut g.layers[li].attn_norm),
        );
        dx = &d_x_mid + &d_in_from_attn;
    }

    // scatter embedding gradients; gradient w.r.t. an input row equals the
    // gradient w.r.t. its embedding row (position add is a sum)
    if let Some(g) = param_grads.as_mut() {
        for (i, src) in cache.emb_sources.iter().enumerate() {
            let row = cache.prefix_len + i;
            if let EmbSource::Vocab(id) = src {
                let mut target = g.tok_emb.row_mut(*id as usize);
                target += &dx.row(row);
            }
        }
        if let Some(dpe) = g.pos_emb.as_mut() {
            for i in 0..t {
                let mut target = dpe.row_mut(i);
                target += &dx.row(i);
            }
        }
    }

    BackwardResult {
        d_inputs: opts.want_input_grads.then_some(dx),
        param_grads,
        qv_grads,
    }
}

/// mean(x^2) + eps, exposed for finite-difference tests.
pub fn rms_eps() -> f32 {
    RMS_EPS
}
