//! Byte-level reversible tokenizer: every UTF-8 string round-trips exactly.

use super::{Role, TokenSequence, N_BYTE_TOKENS};

/// Tokenize text into byte tokens with role `Context`.
pub fn tokenize(text: &str) -> TokenSequence {
    let ids: Vec<u32> = text.bytes().map(u32::from).collect();
    TokenSequence::uniform(ids, Role::Context)
}

/// Inverse of `tokenize`. Special (non-byte) tokens render as nothing.
pub fn detokenize(seq: &TokenSequence) -> String {
    let bytes: Vec<u8> = seq
        .ids()
        .iter()
        .filter(|&&id| id < N_BYTE_TOKENS)
        .map(|&id| id as u8)
        .collect();
    // Byte tokens of a tokenized string always re-assemble to valid UTF-8;
    // decoded ids from a model may not, so replace invalid sequences.
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Detokenize a raw id slice (decode outputs carry no roles).
pub fn detokenize_ids(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < N_BYTE_TOKENS)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::EOS_TOKEN;
    use proptest::prelude::*;

    #[test]
    fn empty_input_gives_empty_sequence() {
        assert_eq!(tokenize("").len(), 0);
        assert_eq!(detokenize(&tokenize("")), "");
    }

    #[test]
    fn two_char_roundtrip() {
        let seq = tokenize("ab");
        assert!(seq.len() <= 2);
        assert_eq!(detokenize(&seq), "ab");
    }

    #[test]
    fn roles_default_to_context() {
        let seq = tokenize("xyz");
        assert!(seq.roles().iter().all(|&r| r == Role::Context));
    }

    #[test]
    fn specials_render_as_nothing() {
        let mut seq = tokenize("hi");
        seq.push(EOS_TOKEN, Role::Context);
        assert_eq!(detokenize(&seq), "hi");
    }

    proptest! {
        #[test]
        fn roundtrip_holds_for_all_strings(s in ".*") {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }
    }
}
