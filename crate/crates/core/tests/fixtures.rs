//! The shipped fixtures are deterministic products of the synthetic
//! generator and the stub generation client; these tests keep them in sync.
//! Regenerate with:
//!   cargo test -p icae-core --test fixtures -- --ignored regenerate

use std::path::PathBuf;

use icae_core::plc::{generate_plc, load_plc, write_plc, PlcExample, StubGenerator};
use icae_core::synth::synth_corpus;

fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn corpus_texts() -> Vec<String> {
    synth_corpus(11, 64, 8, 190)
}

pub fn plc_examples() -> Vec<PlcExample> {
    let texts = synth_corpus(77, 14, 2, 190);
    let mut examples = generate_plc(&texts, &StubGenerator).examples;
    examples.truncate(200);
    examples
}

fn corpus_jsonl(texts: &[String]) -> String {
    texts
        .iter()
        .map(|t| format!("{}\n", serde_json::json!({ "text": t })))
        .collect()
}

#[test]
#[ignore = "writes the fixture files"]
fn regenerate() {
    let dir = fixtures_dir();
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("corpus.jsonl"), corpus_jsonl(&corpus_texts())).unwrap();
    write_plc(&plc_examples(), &dir.join("plc.jsonl")).unwrap();
}

#[test]
fn shipped_corpus_matches_generator() {
    let on_disk = std::fs::read_to_string(fixtures_dir().join("corpus.jsonl")).unwrap();
    assert_eq!(on_disk, corpus_jsonl(&corpus_texts()));
}

#[test]
fn shipped_plc_fixture_matches_generator_and_loads_cleanly() {
    let load = load_plc(&fixtures_dir().join("plc.jsonl")).unwrap();
    assert!(load.errors.is_empty());
    assert_eq!(load.examples.len(), 200);
    assert_eq!(load.examples, plc_examples());
}
