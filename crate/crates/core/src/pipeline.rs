//! Decoder input layouts for the three tasks, and the user-facing
//! inference operations over an assembled model.
//!
//! Layout shapes:
//!   autoencode:   [slots][AE]  with the context (+EOS) supervised
//!   continuation: [slots][LM]  with the continuation (+EOS) supervised
//!   instruct:     [slots][prompt][response] with the response (+EOS) supervised
//!
//! The decoder consumes only slots and visible tokens; the original context
//! reaches it through the slots alone.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{
    apply_lora, encode_ids, LoraConfig, LoraWeights, MemorySlots, MemoryTokenTable,
};
use crate::error::{Error, Result};
use crate::lm::decode::greedy_decode;
use crate::lm::forward::{forward, QvOverride};
use crate::lm::params::LmParameters;
use crate::lm::tokenizer::{detokenize_ids, tokenize};
use crate::lm::{ModelConfig, Role, TokenSequence, AE_TOKEN, EOS_TOKEN, LM_TOKEN};

/// Default cap on context token length for encoding and restoration.
pub const DEFAULT_MAX_CONTEXT: usize = 512;
/// Default cap on generated response length.
pub const DEFAULT_MAX_RESPONSE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Autoencode,
    Continuation,
    Instruct,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Autoencode => "ae",
            TaskKind::Continuation => "lm",
            TaskKind::Instruct => "instruct",
        }
    }
}

/// A decoder input layout plus its supervision targets.
#[derive(Debug, Clone)]
pub struct TaskLayout {
    pub task: TaskKind,
    pub task_token: Option<u32>,
    /// Prompt tokens for the instruct task; empty otherwise.
    pub visible: TokenSequence,
    /// Supervised tokens, terminated by EOS, all sharing the task's role.
    pub targets: TokenSequence,
}

impl TaskLayout {
    /// Role whose positions carry loss.
    pub fn target_role(&self) -> Role {
        match self.task {
            TaskKind::Autoencode => Role::Context,
            TaskKind::Continuation => Role::Continuation,
            TaskKind::Instruct => Role::Response,
        }
    }

    /// Decoder token ids (after the slot prefix) and the shifted target
    /// sequence aligned one-to-one with the logits rows.
    pub fn flatten(&self) -> (Vec<u32>, TokenSequence) {
        let mut seq = TokenSequence::empty();
        if let Some(t) = self.task_token {
            seq.push(t, Role::Task);
        }
        seq.extend(&self.visible);
        seq.extend(&self.targets);
        let ids = seq.ids();
        let roles = seq.roles();
        let input_ids = ids[..ids.len() - 1].to_vec();
        let shifted =
            TokenSequence::new(ids[1..].to_vec(), roles[1..].to_vec()).expect("parallel");
        (input_ids, shifted)
    }

    /// Number of supervised positions: targets incl. terminal EOS.
    pub fn mask_len(&self) -> usize {
        self.targets.len()
    }
}

fn check_capacity(cfg: &ModelConfig, k: usize, layout_len: usize) -> Result<()> {
    let total = k + layout_len;
    if total > cfg.max_positions {
        return Err(Error::Length { actual: total, limit: cfg.max_positions });
    }
    Ok(())
}

/// `[slots][AE]` with the context itself (+EOS) as supervision.
pub fn build_ae_layout(cfg: &ModelConfig, k: usize, context: &TokenSequence) -> Result<TaskLayout> {
    if context.is_empty() {
        return Err(Error::Precondition("autoencode layout needs a nonempty context".into()));
    }
    check_capacity(cfg, k, 1 + context.len() + 1)?;
    let mut targets = TokenSequence::uniform(context.ids().to_vec(), Role::Context);
    targets.push(EOS_TOKEN, Role::Context);
    Ok(TaskLayout {
        task: TaskKind::Autoencode,
        task_token: Some(AE_TOKEN),
        visible: TokenSequence::empty(),
        targets,
    })
}

/// `[slots][LM]` with the continuation (+EOS) as supervision; the context
/// itself never enters the decoder input.
pub fn build_lm_layout(
    cfg: &ModelConfig,
    k: usize,
    context: &TokenSequence,
    continuation: &TokenSequence,
) -> Result<TaskLayout> {
    if context.is_empty() || continuation.is_empty() {
        return Err(Error::Precondition(
            "continuation layout needs nonempty context and continuation".into(),
        ));
    }
    check_capacity(cfg, k, 1 + continuation.len() + 1)?;
    let mut targets = TokenSequence::uniform(continuation.ids().to_vec(), Role::Continuation);
    targets.push(EOS_TOKEN, Role::Continuation);
    Ok(TaskLayout {
        task: TaskKind::Continuation,
        task_token: Some(LM_TOKEN),
        visible: TokenSequence::empty(),
        targets,
    })
}

/// `[slots][prompt][response]` with loss only on the response (+EOS).
pub fn build_instruct_layout(
    cfg: &ModelConfig,
    k: usize,
    prompt: &TokenSequence,
    response: &TokenSequence,
) -> Result<TaskLayout> {
    if prompt.is_empty() || response.is_empty() {
        return Err(Error::Precondition(
            "instruct layout needs nonempty prompt and response".into(),
        ));
    }
    check_capacity(cfg, k, prompt.len() + response.len() + 1)?;
    let mut targets = TokenSequence::uniform(response.ids().to_vec(), Role::Response);
    targets.push(EOS_TOKEN, Role::Response);
    Ok(TaskLayout {
        task: TaskKind::Instruct,
        task_token: None,
        visible: TokenSequence::uniform(prompt.ids().to_vec(), Role::Prompt),
        targets,
    })
}

/// Context tokens per memory slot.
pub fn compression_ratio(context_len: usize, k: usize) -> f64 {
    assert!(context_len >= 1 && k >= 1, "compression ratio needs positive lengths");
    context_len as f64 / k as f64
}

/// The assembled in-context autoencoder: frozen backbone, adapters, and
/// memory-token table, with the adapted projections materialized.
#[derive(Debug)]
pub struct Icae {
    pub backbone: LmParameters,
    pub lora: LoraWeights,
    pub lora_cfg: LoraConfig,
    pub mem: MemoryTokenTable,
    /// Effective encoder q/v projections; refresh after adapter updates.
    qv: QvOverride,
    /// Content id of the checkpoint this model was loaded from / saved to.
    pub model_id: String,
}

impl Icae {
    pub fn new(
        config: &ModelConfig,
        lora_cfg: LoraConfig,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        lora_cfg.validate(config)?;
        if k == 0 {
            return Err(Error::Config("memory length k must be positive".into()));
        }
        let backbone = LmParameters::init(config, rng);
        let lora = LoraWeights::init(config, &lora_cfg, rng);
        let mem = MemoryTokenTable::init(k, config.d_model, rng);
        let qv = apply_lora(&backbone, &lora, &lora_cfg)?;
        Ok(Self { backbone, lora, lora_cfg, mem, qv, model_id: "unsaved".into() })
    }

    pub fn from_parts(
        backbone: LmParameters,
        lora: LoraWeights,
        lora_cfg: LoraConfig,
        mem: MemoryTokenTable,
        model_id: String,
    ) -> Result<Self> {
        let qv = apply_lora(&backbone, &lora, &lora_cfg)?;
        Ok(Self { backbone, lora, lora_cfg, mem, qv, model_id })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    pub fn k(&self) -> usize {
        self.mem.k
    }

    /// Re-materialize the adapted projections after an optimizer step.
    pub fn refresh_adapters(&mut self) -> Result<()> {
        self.qv = apply_lora(&self.backbone, &self.lora, &self.lora_cfg)?;
        Ok(())
    }

    pub fn adapted_qv(&self) -> &QvOverride {
        &self.qv
    }

    /// Compress a context into k memory slots.
    pub fn encode(&self, context: &TokenSequence) -> Result<MemorySlots> {
        let mut slots = encode_ids(&self.backbone, &self.qv, &self.mem, context.ids())?;
        slots.model_id = self.model_id.clone();
        slots
            .slots
            .iter()
            .all(|v| v.is_finite())
            .then_some(())
            .ok_or_else(|| Error::Precondition("encoder produced non-finite slots".into()))?;
        Ok(slots)
    }

    pub fn encode_text(&self, text: &str) -> Result<MemorySlots> {
        self.encode(&tokenize(text))
    }

    fn check_provenance(&self, slots: &MemorySlots) -> Result<()> {
        if slots.d_model() != self.config().d_model || slots.k() != self.k() {
            return Err(Error::Provenance(format!(
                "slots are {}x{} but the model expects {}x{}",
                slots.k(),
                slots.d_model(),
                self.k(),
                self.config().d_model
            )));
        }
        if slots.model_id != self.model_id {
            return Err(Error::Provenance(format!(
                "slots were produced by checkpoint {} but {} is loaded",
                slots.model_id, self.model_id
            )));
        }
        Ok(())
    }

    fn decode_from(
        &self,
        slots: &MemorySlots,
        seed: &[u32],
        max_new: usize,
    ) -> Result<Vec<u32>> {
        greedy_decode(
            &self.backbone,
            None,
            Some(&self.mem.task_rows()),
            Some(&slots.slots),
            seed,
            max_new,
            EOS_TOKEN,
        )
    }

    /// Reconstruct the original context text from its slots.
    pub fn restore(&self, slots: &MemorySlots) -> Result<String> {
        Ok(detokenize_ids(&self.restore_ids(slots)?))
    }

    /// Token-level restoration (trailing EOS included when generated).
    pub fn restore_ids(&self, slots: &MemorySlots) -> Result<Vec<u32>> {
        self.check_provenance(slots)?;
        let budget = DEFAULT_MAX_CONTEXT + 1;
        let room = self.config().max_positions.saturating_sub(self.k() + 1);
        self.decode_from(slots, &[AE_TOKEN], budget.min(room))
    }

    /// Continue the compressed context.
    pub fn continue_text(&self, slots: &MemorySlots, max_new: usize) -> Result<String> {
        self.check_provenance(slots)?;
        if max_new == 0 {
            return Err(Error::Precondition("max_new must be at least 1".into()));
        }
        let ids = self.decode_from(slots, &[LM_TOKEN], max_new)?;
        Ok(detokenize_ids(&ids))
    }

    /// Answer a prompt conditioned on the compressed context.
    pub fn respond(&self, slots: &MemorySlots, prompt: &str, max_new: usize) -> Result<String> {
        self.check_provenance(slots)?;
        if prompt.is_empty() {
            return Err(Error::Precondition("respond needs a nonempty prompt".into()));
        }
        if max_new == 0 {
            return Err(Error::Precondition("max_new must be at least 1".into()));
        }
        let prompt_ids = tokenize(prompt);
        let ids = self.decode_from(slots, prompt_ids.ids(), max_new)?;
        Ok(detokenize_ids(&ids))
    }

    /// Answer a prompt conditioned on raw context text instead of slots
    /// (the summary-baseline comparison path).
    pub fn respond_with_text_context(
        &self,
        context: &str,
        prompt: &str,
        max_new: usize,
    ) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::Precondition("respond needs a nonempty prompt".into()));
        }
        let mut seed = tokenize(context).ids().to_vec();
        seed.extend_from_slice(tokenize(prompt).ids());
        let ids = greedy_decode(
            &self.backbone,
            None,
            Some(&self.mem.task_rows()),
            None,
            &seed,
            max_new,
            EOS_TOKEN,
        )?;
        Ok(detokenize_ids(&ids))
    }

    /// Loss of a layout under the current weights (for evaluation).
    pub fn layout_loss(&self, slots: &MemorySlots, layout: &TaskLayout) -> Result<f64> {
        let (input_ids, targets) = layout.flatten();
        let (logits, _) = forward(
            &self.backbone,
            None,
            Some(&self.mem.task_rows()),
            Some(&slots.slots),
            &input_ids,
        )?;
        let role = layout.target_role();
        crate::lm::loss::cross_entropy(&logits, &targets, |r| r == role)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::params::seeded_rng;
    use crate::lm::BYTE_VOCAB_SIZE;

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

    fn model(k: usize) -> Icae {
        Icae::new(&cfg(), LoraConfig::with_rank(4), k, &mut seeded_rng(23)).unwrap()
    }

    fn ctx(ids: &[u32]) -> TokenSequence {
        TokenSequence::uniform(ids.to_vec(), Role::Context)
    }

    #[test]
    fn ae_layout_positions_and_mask() {
        let layout = build_ae_layout(&cfg(), 2, &ctx(&[65, 66])).unwrap();
        let (input_ids, targets) = layout.flatten();
        // decoder sees [AE] t1 t2 after the slot prefix
        assert_eq!(input_ids, vec![AE_TOKEN, 65, 66]);
        // logits rows supervise t1 t2 EOS
        assert_eq!(targets.ids(), &[65, 66, EOS_TOKEN]);
        assert_eq!(layout.mask_len(), 3); // len(context) + 1
        let role = layout.target_role();
        assert!(targets.roles().iter().all(|&r| r == role));
    }

    #[test]
    fn ae_layout_rejects_empty_context() {
        assert!(matches!(
            build_ae_layout(&cfg(), 2, &TokenSequence::empty()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn lm_layout_supervises_continuation_only() {
        let layout =
            build_lm_layout(&cfg(), 4, &ctx(&[1, 2, 3]), &ctx(&[7])).unwrap();
        let (input_ids, targets) = layout.flatten();
        // context tokens are not in the decoder input, only its slots are
        assert_eq!(input_ids, vec![LM_TOKEN, 7]);
        assert_eq!(targets.ids(), &[7, EOS_TOKEN]);
        assert_eq!(layout.mask_len(), 2); // continuation of length 1 -> 2 supervised
    }

    #[test]
    fn lm_layout_decoder_length_arithmetic() {
        // continuation of 20 with k=8: decoder rows = 1 + 20 (+1 for EOS target)
        let continuation: Vec<u32> = (0..20).collect();
        let layout = build_lm_layout(&cfg(), 8, &ctx(&[1, 2]), &ctx(&continuation)).unwrap();
        let (input_ids, targets) = layout.flatten();
        assert_eq!(input_ids.len(), 1 + 20);
        assert_eq!(targets.len(), 1 + 20);
        assert_eq!(layout.mask_len(), 21);
    }

    #[test]
    fn instruct_layout_masks_response_plus_eos() {
        let prompt: Vec<u32> = (10..20).collect(); // 10 tokens
        let response: Vec<u32> = (30..50).collect(); // 20 tokens
        let layout =
            build_instruct_layout(&cfg(), 4, &ctx(&prompt), &ctx(&response)).unwrap();
        assert_eq!(layout.mask_len(), 21);
        let (input_ids, targets) = layout.flatten();
        assert_eq!(input_ids.len(), 30);
        assert_eq!(targets.len(), 30);
        // mask is role-driven: altering a prompt token leaves it unchanged
        let masked = targets
            .roles()
            .iter()
            .filter(|&&r| r == Role::Response)
            .count();
        assert_eq!(masked, 21);
        // ordering: prompt targets come before response targets
        let first_response = targets.roles().iter().position(|&r| r == Role::Response).unwrap();
        assert!(targets.roles()[..first_response].iter().all(|&r| r == Role::Prompt));
    }

    #[test]
    fn layouts_reject_overflow_instead_of_truncating() {
        let big: Vec<u32> = vec![1; 126]; // 2 + 1 + 126 + 1 > 128
        assert!(matches!(
            build_ae_layout(&cfg(), 2, &ctx(&big)),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn compression_ratio_examples() {
        assert_eq!(compression_ratio(512, 128), 4.0);
        assert_eq!(compression_ratio(512, 64), 8.0);
        assert_eq!(compression_ratio(128, 128), 1.0);
    }

    #[test]
    fn restore_is_deterministic_and_checks_provenance() {
        let m = model(4);
        let slots = m.encode_text("hello world").unwrap();
        let a = m.restore(&slots).unwrap();
        let b = m.restore(&slots).unwrap();
        assert_eq!(a, b);

        let mut foreign = slots.clone();
        foreign.model_id = "someone-else".into();
        assert!(matches!(m.restore(&foreign), Err(Error::Provenance(_))));
    }

    #[test]
    fn respond_rejects_empty_prompt() {
        let m = model(4);
        let slots = m.encode_text("hello").unwrap();
        assert!(matches!(
            m.respond(&slots, "", 8),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn outputs_depend_only_on_slots_not_on_the_original_text() {
        // erase the context after encoding: identical slots, identical output
        let m = model(4);
        let slots_a = m.encode_text("the quick brown fox").unwrap();
        let out_a = m.restore(&slots_a).unwrap();
        // a structurally fresh copy of the same slots behaves identically
        let copied = MemorySlots {
            slots: slots_a.slots.clone(),
            model_id: slots_a.model_id.clone(),
            context_hash: "different-context-forgotten".into(),
        };
        let out_b = m.restore(&copied).unwrap();
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn swapping_continuation_tokens_changes_the_loss() {
        let m = model(4);
        let context = ctx(&[10, 20, 30, 40]);
        let slots = m.encode(&context).unwrap();
        let a = build_lm_layout(m.config(), 4, &context, &ctx(&[5, 9, 5, 200])).unwrap();
        let b = build_lm_layout(m.config(), 4, &context, &ctx(&[9, 5, 5, 200])).unwrap();
        let la = m.layout_loss(&slots, &a).unwrap();
        let lb = m.layout_loss(&slots, &b).unwrap();
        assert_ne!(la, lb, "supervision is degenerate under token swap");
    }
}
