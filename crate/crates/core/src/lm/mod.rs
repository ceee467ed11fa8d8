//! A small decoder-only causal transformer: the frozen target LM that decodes
//! memory slots, and (with adapters) the encoder backbone.

pub mod backward;
pub mod decode;
pub mod forward;
pub mod loss;
pub mod params;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of byte tokens in the base vocabulary.
pub const N_BYTE_TOKENS: u32 = 256;
/// Reserved special token ids, appended after the 256 byte tokens.
pub const PAD_TOKEN: u32 = 256;
pub const BOS_TOKEN: u32 = 257;
pub const EOS_TOKEN: u32 = 258;
/// Task token telling the decoder to reconstruct the original context.
pub const AE_TOKEN: u32 = 259;
/// Task token telling the decoder to continue past the original context.
pub const LM_TOKEN: u32 = 260;
/// Full vocabulary size: 256 bytes + 5 specials.
pub const BYTE_VOCAB_SIZE: usize = 261;

/// Shape and layout of the backbone transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Hard limit on prefix + token positions in one forward pass.
    pub max_positions: usize,
    /// Rotary position encoding; when false a learned position table is used.
    pub rotary: bool,
}

impl ModelConfig {
    /// The default desk-scale backbone: CPU-trainable in minutes. Rotary
    /// attention keeps the frozen decoder's language modeling usable at
    /// any slot-prefix offset.
    pub fn toy() -> Self {
        Self {
            d_model: 256,
            n_layers: 4,
            n_heads: 4,
            d_ff: 1024,
            vocab_size: BYTE_VOCAB_SIZE,
            max_positions: 768,
            rotary: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_positions == 0
        {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Role of a token within a task layout; loss masks are role-driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Context,
    Memory,
    Task,
    Prompt,
    Response,
    Continuation,
    Pad,
}

/// Ordered token ids with parallel role labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    roles: Vec<Role>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, roles: Vec<Role>) -> Result<Self> {
        if ids.len() != roles.len() {
            return Err(Error::Precondition(format!(
                "ids ({}) and roles ({}) must have equal length",
                ids.len(),
                roles.len()
            )));
        }
        Ok(Self { ids, roles })
    }

    /// All ids share one role.
    pub fn uniform(ids: Vec<u32>, role: Role) -> Self {
        let roles = vec![role; ids.len()];
        Self { ids, roles }
    }

    pub fn empty() -> Self {
        Self { ids: Vec::new(), roles: Vec::new() }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32, role: Role) {
        self.ids.push(id);
        self.roles.push(role);
    }

    pub fn extend(&mut self, other: &TokenSequence) {
        self.ids.extend_from_slice(&other.ids);
        self.roles.extend_from_slice(&other.roles);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut cfg = ModelConfig::toy();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_rejects_zero_dims() {
        let mut cfg = ModelConfig::toy();
        cfg.d_ff = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn token_sequence_requires_parallel_roles() {
        assert!(TokenSequence::new(vec![1, 2], vec![Role::Context]).is_err());
        let seq = TokenSequence::new(vec![1, 2], vec![Role::Context, Role::Task]).unwrap();
        assert_eq!(seq.len(), 2);
    }
}
