//! The judge request must match the golden transcript byte for byte, and
//! the stub path must parse the three worked example verdicts.

use icae_core::client::{LlmClient, ScriptedClient};
use icae_core::eval::{judge_pair, judge_request, JudgeChoice, JudgePair};

fn golden() -> String {
    let p = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden/judge_prompt.txt");
    std::fs::read_to_string(p).unwrap()
}

fn case() -> JudgePair {
    JudgePair {
        text: "The committee approved the budget on Tuesday.".into(),
        prompt: "When was the budget approved?".into(),
        answer_a: "On Tuesday.".into(),
        answer_b: "The budget was rejected.".into(),
    }
}

#[test]
fn judge_request_matches_golden_transcript_byte_for_byte() {
    let req = judge_request(&case());
    let expected = golden();
    assert_eq!(
        req.user.as_bytes(),
        expected.as_bytes(),
        "judge prompt deviates from the golden transcript"
    );
}

#[test]
fn stub_round_trip_sends_golden_prompt_and_parses_each_worked_verdict() {
    let verdicts = [
        (r#"{"reason": "The instruction asks what GPT4 is, and from the original text, we know that GPT4 is a multimodal, large-scale model that can generate text. Therefore, Assistant A is the closer answer, while Assistant B did not follow the instruction well in providing a response.", "choice": "A"}"#, JudgeChoice::A),
        (r#"{"reason": "This text discusses how to make large language models follow user instructions better, and Assistant B's response is more in line with the meaning of the text.", "choice": "B"}"#, JudgeChoice::B),
        (r#"{"reason": "Both answers are acceptable and correct. They should be a tie.", "choice": "Tie"}"#, JudgeChoice::Tie),
    ];
    for (raw, expected) in verdicts {
        let client = ScriptedClient::repeating(raw);
        let judgment = judge_pair(&case(), &client);
        assert_eq!(judgment.choice, Some(expected));
        // and the wire request was the golden transcript
        let seen = client.seen();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].user, golden());
        let _ = &client as &dyn LlmClient;
    }
}
