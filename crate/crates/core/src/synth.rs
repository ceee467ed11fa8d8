//! Deterministic synthetic micro-corpus for desk-scale runs and fixtures.
//!
//! Texts are grouped into families sharing an opening sentence, so a
//! decoder that has merely memorized the corpus still needs the memory
//! slots to tell family members apart during restoration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::lm::params::seeded_rng;

const SUBJECTS: &[&str] = &[
    "fox", "miller", "engine", "harbor", "signal", "garden", "pilot", "archive",
    "river", "lantern", "comet", "ledger", "orchard", "beacon", "courier", "glacier",
];
const VERBS: &[&str] = &[
    "crossed", "measured", "ignored", "repaired", "followed", "mapped", "weighed",
    "sketched", "guarded", "traded", "counted", "signaled", "carried", "tested",
];
const OBJECTS: &[&str] = &[
    "the old bridge", "a copper wire", "the tide tables", "a sealed crate",
    "the north road", "a broken clock", "the survey notes", "a quiet valley",
    "the spare rudder", "a woven basket", "the grain ledger", "a folded map",
];
const TAILS: &[&str] = &[
    "before dawn", "after the storm", "without delay", "by lamplight",
    "near the quarry", "under light rain", "in early spring", "past the mill",
    "despite the cold", "during the recount",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    format!(
        "the {} {} {} {}.",
        SUBJECTS[rng.gen_range(0..SUBJECTS.len())],
        VERBS[rng.gen_range(0..VERBS.len())],
        OBJECTS[rng.gen_range(0..OBJECTS.len())],
        TAILS[rng.gen_range(0..TAILS.len())],
    )
}

/// Generate `n` texts whose byte lengths spread between roughly `min_len`
/// and `max_len`, in families of `family_size` sharing an opening sentence.
pub fn synth_corpus(seed: u64, n: usize, family_size: usize, max_len: usize) -> Vec<String> {
    let mut rng = seeded_rng(seed);
    let mut texts = Vec::with_capacity(n);
    let mut opening = String::new();
    for i in 0..n {
        if i % family_size.max(1) == 0 {
            opening = sentence(&mut rng);
        }
        let mut text = opening.clone();
        // spread target lengths across the corpus deterministically
        let frac = (i % 7) as f64 / 6.0;
        let target = ((max_len as f64) * (0.25 + 0.75 * frac)) as usize;
        while text.len() < target {
            let next = sentence(&mut rng);
            if text.len() + 1 + next.len() > max_len {
                break;
            }
            text.push(' ');
            text.push_str(&next);
        }
        texts.push(text);
    }
    texts
}
