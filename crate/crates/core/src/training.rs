//! Training loops: backbone warmup (the stand-in for a pretrained target
//! LM), autoencoding/continuation pretraining, and instruct fine-tuning.
//! ICAE steps update exactly the adapter factors and the memory-token
//! table; the backbone never changes once warmup ends.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CorpusChunk;
use crate::encoder::encoder_cache;
use crate::error::{Error, Result};
use crate::lm::backward::{backward, BackwardOptions};
use crate::lm::forward::prepare_and_run;
use crate::lm::loss::cross_entropy_grad;
use crate::lm::params::{LmParameters, ParamGrads};
use crate::lm::{ModelConfig, Role, TokenSequence, BOS_TOKEN, EOS_TOKEN};
use crate::optim::{clip_scale, global_grad_norm, lr_schedule, AdamConfig, AdamW};
use crate::pipeline::{build_ae_layout, build_instruct_layout, build_lm_layout, Icae, TaskLayout};
use crate::plc::PlcExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Probability that a pretraining batch draws the autoencoding task.
    pub p_ae: f64,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f32,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Plain LM steps that warm the backbone before it is frozen
    /// (pretrain phase only; the desk-scale stand-in for a pretrained LM).
    pub backbone_warmup_steps: u64,
    pub backbone_lr: f32,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_ae) {
            return Err(Error::Config("p_ae must lie in [0,1]".into()));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch size and total steps must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("learning rate and grad clip must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Pretrain,
            p_ae: 0.5,
            batch_size: 8,
            learning_rate: 3e-4,
            warmup_steps: 100,
            total_steps: 1000,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 200,
            backbone_warmup_steps: 400,
            backbone_lr: 1e-3,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: u64,
    pub task: String,
    pub loss: f64,
    pub grad_norm: f64,
    pub update_norm: f64,
    pub skipped: bool,
}

/// An instruct example with all three fields tokenized and length-checked.
#[derive(Debug, Clone)]
pub struct TokenizedPlc {
    pub context: Vec<u32>,
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
}

/// Tokenize PLC examples, dropping those that cannot fit the decoder
/// (layouts reject rather than truncate). Returns survivors + skip count.
pub fn prepare_plc(
    config: &ModelConfig,
    k: usize,
    max_context: usize,
    examples: &[PlcExample],
) -> (Vec<TokenizedPlc>, usize) {
    use crate::lm::tokenizer::tokenize;
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for ex in examples {
        let context = tokenize(&ex.text).ids().to_vec();
        let prompt = tokenize(&ex.prompt).ids().to_vec();
        let response = tokenize(&ex.answer).ids().to_vec();
        let fits_encoder = !context.is_empty()
            && context.len() <= max_context
            && context.len() + k <= config.max_positions;
        let fits_decoder =
            k + prompt.len() + response.len() + 1 <= config.max_positions;
        if fits_encoder && fits_decoder && !prompt.is_empty() && !response.is_empty() {
            out.push(TokenizedPlc { context, prompt, response });
        } else {
            skipped += 1;
        }
    }
    (out, skipped)
}

/// Gradient accumulators over exactly the trainable tensors.
pub struct GradAccum {
    /// Per layer `(dA, dB)` for the query adapters.
    pub lora_q: Vec<(Array2<f32>, Array2<f32>)>,
    pub lora_v: Vec<(Array2<f32>, Array2<f32>)>,
    pub mem: Array2<f32>,
}

impl GradAccum {
    fn zeros(icae: &Icae) -> Self {
        let r = icae.lora_cfg.rank;
        let d = icae.config().d_model;
        let n = icae.config().n_layers;
        let factors = |_: usize| (Array2::zeros((r, d)), Array2::zeros((d, r)));
        Self {
            lora_q: (0..n).map(factors).collect(),
            lora_v: (0..n).map(factors).collect(),
            mem: Array2::zeros(icae.mem.table.dim()),
        }
    }

    /// Slices in the fixed trainable order: per layer q.a, q.b, v.a, v.b,
    /// then the memory table.
    fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for (q, v) in self.lora_q.iter_mut().zip(self.lora_v.iter_mut()) {
            out.push(q.0.as_slice_mut().unwrap());
            out.push(q.1.as_slice_mut().unwrap());
            out.push(v.0.as_slice_mut().unwrap());
            out.push(v.1.as_slice_mut().unwrap());
        }
        out.push(self.mem.as_slice_mut().unwrap());
        out
    }
}

/// Trainable parameter slices of the model in the same fixed order.
fn trainable_slices(icae: &mut Icae) -> Vec<&mut [f32]> {
    let mut out = Vec::new();
    for (q, v) in icae.lora.q.iter_mut().zip(icae.lora.v.iter_mut()) {
        out.push(q.a.as_slice_mut().unwrap());
        out.push(q.b.as_slice_mut().unwrap());
        out.push(v.a.as_slice_mut().unwrap());
        out.push(v.b.as_slice_mut().unwrap());
    }
    out.push(icae.mem.table.as_slice_mut().unwrap());
    out
}

fn trainable_sizes(icae: &Icae) -> Vec<usize> {
    let r = icae.lora_cfg.rank;
    let d = icae.config().d_model;
    let mut out = Vec::new();
    for _ in 0..icae.config().n_layers {
        out.extend([r * d, d * r, r * d, d * r]);
    }
    out.push(icae.mem.table.len());
    out
}

/// Forward + reverse through decoder and encoder for one example,
/// accumulating adapter and memory-table gradients in sum form.
fn accumulate_example(
    icae: &Icae,
    context_ids: &[u32],
    layout: &TaskLayout,
    acc: &mut GradAccum,
) -> Result<(f64, usize)> {
    let k = icae.k();
    let scale = icae.lora_cfg.scale();

    // encoder: [context ; memory tokens] under the adapted projections
    let enc_cache = encoder_cache(&icae.backbone, icae.adapted_qv(), &icae.mem, context_ids)?;
    let ctx_len = context_ids.len();
    let slots = enc_cache.normed.slice(s![ctx_len.., ..]).to_owned();

    // decoder: [slots ; task/visible/target tokens] under frozen weights
    let (input_ids, targets) = layout.flatten();
    let task_rows = icae.mem.task_rows();
    let dec_cache =
        prepare_and_run(&icae.backbone, None, Some(&task_rows), Some(&slots), &input_ids)?;
    let logits = dec_cache.normed.slice(s![k.., ..]).dot(&icae.backbone.head.t());
    let role = layout.target_role();
    let (nll_sum, count, dlogits) = cross_entropy_grad(&logits, &targets, |r| r == role)?;

    // decoder reverse: only input gradients are needed (weights frozen)
    let mut d_normed_dec = Array2::zeros(dec_cache.normed.dim());
    d_normed_dec
        .slice_mut(s![k.., ..])
        .assign(&dlogits.dot(&icae.backbone.head));
    let dec_back = backward(
        &icae.backbone,
        None,
        &dec_cache,
        &d_normed_dec,
        BackwardOptions { want_input_grads: true, ..Default::default() },
    );
    let d_dec_in = dec_back.d_inputs.expect("input grads requested");

    // task-token embedding sits at decoder row k when present
    if layout.task_token.is_some() {
        let table_row = icae.mem.k + if layout.task == crate::pipeline::TaskKind::Continuation { 1 } else { 0 };
        let mut target = acc.mem.row_mut(table_row);
        target += &d_dec_in.row(k);
    }

    // encoder reverse: slots gradient enters at the memory positions
    let mut d_normed_enc = Array2::zeros(enc_cache.normed.dim());
    d_normed_enc
        .slice_mut(s![ctx_len.., ..])
        .assign(&d_dec_in.slice(s![..k, ..]));
    let enc_back = backward(
        &icae.backbone,
        Some(icae.adapted_qv()),
        &enc_cache,
        &d_normed_enc,
        BackwardOptions { want_input_grads: true, want_qv_grads: true, want_param_grads: false },
    );
    let d_enc_in = enc_back.d_inputs.expect("input grads requested");
    let qv_grads = enc_back.qv_grads.expect("qv grads requested");

    // memory-token input rows
    {
        let mut mem_rows = acc.mem.slice_mut(s![..icae.mem.k, ..]);
        mem_rows += &d_enc_in.slice(s![ctx_len.., ..]);
    }
    // chain effective-projection gradients into the low-rank factors:
    // dA = scale * B^T dW, dB = scale * dW A^T
    for (li, (dwq, dwv)) in qv_grads.iter().enumerate() {
        let fq = &icae.lora.q[li];
        acc.lora_q[li].0 += &(fq.b.t().dot(dwq) * scale);
        acc.lora_q[li].1 += &(dwq.dot(&fq.a.t()) * scale);
        let fv = &icae.lora.v[li];
        acc.lora_v[li].0 += &(fv.b.t().dot(dwv) * scale);
        acc.lora_v[li].1 += &(dwv.dot(&fv.a.t()) * scale);
    }
    Ok((nll_sum, count))
}

/// Mean autoencoding loss of one context and its analytic gradients over
/// the trainable surface; the exact quantities a pretraining step applies.
pub fn ae_loss_and_grads(icae: &Icae, context_ids: &[u32]) -> Result<(f64, GradAccum)> {
    let context = TokenSequence::uniform(context_ids.to_vec(), Role::Context);
    let layout = build_ae_layout(icae.config(), icae.k(), &context)?;
    let mut acc = GradAccum::zeros(icae);
    let (nll, count) = accumulate_example(icae, context_ids, &layout, &mut acc)?;
    let inv = 1.0 / count as f32;
    for g in acc.slices_mut() {
        for x in g.iter_mut() {
            *x *= inv;
        }
    }
    Ok((nll / count as f64, acc))
}

pub struct Trainer {
    pub icae: Icae,
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub skipped_nonfinite: u64,
}

impl Trainer {
    pub fn new(icae: Icae, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes = trainable_sizes(&icae);
        let opt = AdamW::new(
            AdamConfig {
                lr: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            },
            &sizes,
        );
        let rng = crate::lm::params::seeded_rng(cfg.seed);
        Ok(Self { icae, cfg, opt, rng, step: 0, skipped_nonfinite: 0 })
    }

    fn apply_batch(&mut self, acc: &mut GradAccum, nll_sum: f64, count: usize, task: &str) -> Result<TrainStepReport> {
        let loss = nll_sum / count.max(1) as f64;
        if !loss.is_finite() {
            self.skipped_nonfinite += 1;
            self.step += 1;
            return Ok(TrainStepReport {
                step: self.step,
                task: task.into(),
                loss,
                grad_norm: f64::NAN,
                update_norm: 0.0,
                skipped: true,
            });
        }
        let inv = 1.0 / count as f32;
        let mut gslices = acc.slices_mut();
        for g in gslices.iter_mut() {
            for x in g.iter_mut() {
                *x *= inv;
            }
        }
        let gviews: Vec<&[f32]> = gslices.iter().map(|g| &**g).collect();
        let grad_norm = global_grad_norm(&gviews);
        let cscale = clip_scale(grad_norm, self.cfg.grad_clip);
        if cscale != 1.0 {
            for g in gslices.iter_mut() {
                for x in g.iter_mut() {
                    *x *= cscale;
                }
            }
        }
        let lr_t = lr_schedule(
            self.cfg.learning_rate,
            self.cfg.warmup_steps,
            self.cfg.total_steps,
            self.step,
        );
        let mut pslices = trainable_slices(&mut self.icae);
        let mut group: Vec<(&mut [f32], &[f32])> = pslices
            .iter_mut()
            .zip(gslices.iter())
            .map(|(p, g)| (&mut **p, &**g))
            .collect();
        let update_norm = self.opt.step_group(lr_t, &mut group);
        drop(group);
        drop(pslices);
        self.icae.refresh_adapters()?;
        self.step += 1;
        Ok(TrainStepReport {
            step: self.step,
            task: task.into(),
            loss,
            grad_norm,
            update_norm,
            skipped: false,
        })
    }

    /// One pretraining step: draw a task for the whole batch, sample
    /// chunks, and update the trainable surface.
    pub fn pretrain_step(&mut self, chunks: &[CorpusChunk]) -> Result<TrainStepReport> {
        if chunks.is_empty() {
            return Err(Error::Data("pretraining needs a nonempty chunk stream".into()));
        }
        let draw_ae = self.rng.gen::<f64>() < self.cfg.p_ae;
        let lm_pool: Vec<usize> = chunks
            .iter()
            .enumerate()
            .filter(|(_, c)| c.continuation.is_some())
            .map(|(i, _)| i)
            .collect();
        let use_ae = draw_ae || lm_pool.is_empty();
        let task = if use_ae { "ae" } else { "lm" };

        let mut acc = GradAccum::zeros(&self.icae);
        let mut nll_sum = 0.0;
        let mut count = 0usize;
        for _ in 0..self.cfg.batch_size {
            let chunk = if use_ae {
                &chunks[self.rng.gen_range(0..chunks.len())]
            } else {
                &chunks[lm_pool[self.rng.gen_range(0..lm_pool.len())]]
            };
            let context = TokenSequence::uniform(chunk.context.clone(), Role::Context);
            let layout = if use_ae {
                build_ae_layout(self.icae.config(), self.icae.k(), &context)?
            } else {
                let cont = TokenSequence::uniform(
                    chunk.continuation.clone().expect("lm pool"),
                    Role::Continuation,
                );
                build_lm_layout(self.icae.config(), self.icae.k(), &context, &cont)?
            };
            let (nll, c) = accumulate_example(&self.icae, chunk.context.as_slice(), &layout, &mut acc)?;
            nll_sum += nll;
            count += c;
        }
        self.apply_batch(&mut acc, nll_sum, count, task)
    }

    /// One instruct fine-tuning step over PLC examples.
    pub fn finetune_step(&mut self, examples: &[TokenizedPlc]) -> Result<TrainStepReport> {
        if examples.is_empty() {
            return Err(Error::Data("fine-tuning needs a nonempty example set".into()));
        }
        let mut acc = GradAccum::zeros(&self.icae);
        let mut nll_sum = 0.0;
        let mut count = 0usize;
        for _ in 0..self.cfg.batch_size {
            let ex = &examples[self.rng.gen_range(0..examples.len())];
            let prompt = TokenSequence::uniform(ex.prompt.clone(), Role::Prompt);
            let response = TokenSequence::uniform(ex.response.clone(), Role::Response);
            let layout =
                build_instruct_layout(self.icae.config(), self.icae.k(), &prompt, &response)?;
            let (nll, c) = accumulate_example(&self.icae, &ex.context, &layout, &mut acc)?;
            nll_sum += nll;
            count += c;
        }
        self.apply_batch(&mut acc, nll_sum, count, "instruct")
    }

    /// Mean response loss over a held-out set under the current weights.
    pub fn held_out_response_loss(&self, examples: &[TokenizedPlc]) -> Result<f64> {
        let mut nll = 0.0;
        let mut count = 0usize;
        for ex in examples {
            let context = TokenSequence::uniform(ex.context.clone(), Role::Context);
            let slots = self.icae.encode(&context)?;
            let prompt = TokenSequence::uniform(ex.prompt.clone(), Role::Prompt);
            let response = TokenSequence::uniform(ex.response.clone(), Role::Response);
            let layout =
                build_instruct_layout(self.icae.config(), self.icae.k(), &prompt, &response)?;
            let (input_ids, targets) = layout.flatten();
            let (logits, _) = crate::lm::forward::forward(
                &self.icae.backbone,
                None,
                Some(&self.icae.mem.task_rows()),
                Some(&slots.slots),
                &input_ids,
            )?;
            let (s, c) =
                crate::lm::loss::nll_sum(&logits, &targets, |r| r == Role::Response)?;
            nll += s;
            count += c;
        }
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        Ok(nll / count as f64)
    }
}

/// Plain next-token LM training of the backbone itself; runs before the
/// backbone is frozen for ICAE training.
pub fn warmup_backbone(
    params: &mut LmParameters,
    chunks: &[CorpusChunk],
    steps: u64,
    batch_size: usize,
    lr: f32,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if chunks.is_empty() {
        return Err(Error::Data("backbone warmup needs a nonempty chunk stream".into()));
    }
    let sizes: Vec<usize> = {
        let mut v = Vec::new();
        params.visit(|_, _, data| v.push(data.len()));
        v
    };
    let mut opt = AdamW::new(
        AdamConfig { lr, weight_decay: 0.0, ..AdamConfig::default() },
        &sizes,
    );
    let cap = params.config.max_positions;
    for step in 0..steps {
        let mut grads = ParamGrads::zeros_like(params);
        let mut nll_sum = 0.0;
        let mut count = 0usize;
        for _ in 0..batch_size {
            let chunk = &chunks[rng.gen_range(0..chunks.len())];
            let mut ids = Vec::with_capacity(2 + chunk.context.len());
            ids.push(BOS_TOKEN);
            ids.extend_from_slice(&chunk.context);
            if let Some(cont) = &chunk.continuation {
                ids.extend_from_slice(cont);
            }
            ids.push(EOS_TOKEN);
            ids.truncate(cap);
            let inputs = &ids[..ids.len() - 1];
            let targets = TokenSequence::uniform(ids[1..].to_vec(), Role::Context);
            let (logits, cache) =
                crate::lm::forward::forward(params, None, None, None, inputs)?;
            let (nll, c, dlogits) = cross_entropy_grad(&logits, &targets, |_| true)?;
            nll_sum += nll;
            count += c;
            let mut d_normed = Array2::zeros(cache.normed.dim());
            d_normed.assign(&dlogits.dot(&params.head));
            let res = backward(
                params,
                None,
                &cache,
                &d_normed,
                BackwardOptions { want_param_grads: true, ..Default::default() },
            );
            let g = res.param_grads.expect("param grads requested");
            add_param_grads(&mut grads, &g, &dlogits, &cache.normed);
        }
        let loss = nll_sum / count.max(1) as f64;
        if !loss.is_finite() {
            on_step(step, loss);
            continue;
        }
        let inv = 1.0 / count as f32;
        let mut gslices = param_grad_slices(&mut grads);
        for g in gslices.iter_mut() {
            for x in g.iter_mut() {
                *x *= inv;
            }
        }
        let gviews: Vec<&[f32]> = gslices.iter().map(|g| &**g).collect();
        let norm = global_grad_norm(&gviews);
        let cs = clip_scale(norm, 1.0);
        if cs != 1.0 {
            for g in gslices.iter_mut() {
                for x in g.iter_mut() {
                    *x *= cs;
                }
            }
        }
        let lr_t = lr_schedule(lr, 20.min(steps / 10), steps, step);
        let mut pslices = param_slices(params);
        let mut group: Vec<(&mut [f32], &[f32])> = pslices
            .iter_mut()
            .zip(gslices.iter())
            .map(|(p, g)| (&mut **p, &**g))
            .collect();
        opt.step_group(lr_t, &mut group);
        on_step(step, loss);
    }
    Ok(())
}

/// Head gradient: the reverse pass above covers everything behind the
/// final norm; the head itself is d_logits^T · normed.
fn add_param_grads(
    total: &mut ParamGrads,
    part: &ParamGrads,
    dlogits: &Array2<f32>,
    normed: &Array2<f32>,
) {
    total.tok_emb += &part.tok_emb;
    if let (Some(t), Some(p)) = (total.pos_emb.as_mut(), part.pos_emb.as_ref()) {
        *t += p;
    }
    for (tl, pl) in total.layers.iter_mut().zip(&part.layers) {
        tl.attn_norm += &pl.attn_norm;
        tl.wq += &pl.wq;
        tl.wk += &pl.wk;
        tl.wv += &pl.wv;
        tl.wo += &pl.wo;
        tl.ff_norm += &pl.ff_norm;
        tl.w_up += &pl.w_up;
        tl.w_down += &pl.w_down;
    }
    total.final_norm += &part.final_norm;
    total.head += &dlogits.t().dot(normed);
}

fn param_slices(params: &mut LmParameters) -> Vec<&mut [f32]> {
    let mut out: Vec<&mut [f32]> = Vec::new();
    out.push(params.tok_emb.as_slice_mut().unwrap());
    if let Some(pe) = params.pos_emb.as_mut() {
        out.push(pe.as_slice_mut().unwrap());
    }
    for layer in params.layers.iter_mut() {
        out.push(layer.attn_norm.as_slice_mut().unwrap());
        out.push(layer.attn.wq.as_slice_mut().unwrap());
        out.push(layer.attn.wk.as_slice_mut().unwrap());
        out.push(layer.attn.wv.as_slice_mut().unwrap());
        out.push(layer.attn.wo.as_slice_mut().unwrap());
        out.push(layer.ff_norm.as_slice_mut().unwrap());
        out.push(layer.w_up.as_slice_mut().unwrap());
        out.push(layer.w_down.as_slice_mut().unwrap());
    }
    out.push(params.final_norm.as_slice_mut().unwrap());
    out.push(params.head.as_slice_mut().unwrap());
    out
}

fn param_grad_slices(grads: &mut ParamGrads) -> Vec<&mut [f32]> {
    let mut out: Vec<&mut [f32]> = Vec::new();
    out.push(grads.tok_emb.as_slice_mut().unwrap());
    if let Some(pe) = grads.pos_emb.as_mut() {
        out.push(pe.as_slice_mut().unwrap());
    }
    for layer in grads.layers.iter_mut() {
        out.push(layer.attn_norm.as_slice_mut().unwrap());
        out.push(layer.wq.as_slice_mut().unwrap());
        out.push(layer.wk.as_slice_mut().unwrap());
        out.push(layer.wv.as_slice_mut().unwrap());
        out.push(layer.wo.as_slice_mut().unwrap());
        out.push(layer.ff_norm.as_slice_mut().unwrap());
        out.push(layer.w_up.as_slice_mut().unwrap());
        out.push(layer.w_down.as_slice_mut().unwrap());
    }
    out.push(grads.final_norm.as_slice_mut().unwrap());
    out.push(grads.head.as_slice_mut().unwrap());
    out
}
