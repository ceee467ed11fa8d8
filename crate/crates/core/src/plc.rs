//! The prompt-with-long-context triple pipeline: JSONL load/store and
//! generation of (text, prompt, answer) triples through an external LLM
//! (or its deterministic stub).

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::client::{LlmClient, LlmRequest};
use crate::error::{Error, Result};

/// Instruction appended to each text when generating prompt/answer pairs.
pub const PLC_GENERATION_PROMPT: &str = r#"Design 10 prompts specified to the above text to test understanding of the above text. These prompts should be diverse and cover as many aspects (e.g., topic, genre, structure, style, polarity, key information and details) of the text as possible. The first half of these prompts should be like an instruction, the other should be like a question. In addition to the prompts specified to the above text, please also design 5 general prompts like "rephrase the above text", "summarize the above text", "write a title for the above text", "extract a few keywords for the above text" and "write a paragraph (i.e., continuation) that follows the above text". Each prompt should be outputted in the following format: [{"prompt": your generated prompt, "answer": the answer to the prompt}]"#;

/// Expected pair count per text: 10 specific + 5 general.
pub const EXPECTED_PAIRS_PER_TEXT: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Specific,
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlcExample {
    pub text: String,
    pub prompt: String,
    pub answer: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prompt_kind: Option<PromptKind>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlcLineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct PlcLoad {
    pub examples: Vec<PlcExample>,
    pub errors: Vec<PlcLineError>,
}

/// Load a JSONL file of triples; malformed lines are reported with their
/// line numbers and the rest load normally.
pub fn load_plc(path: &Path) -> Result<PlcLoad> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::File { path: path.to_path_buf(), source: e })?;
    let mut out = PlcLoad { examples: Vec::new(), errors: Vec::new() };
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PlcExample>(line) {
            Ok(ex) => {
                if ex.text.is_empty() || ex.prompt.is_empty() || ex.answer.is_empty() {
                    let empty = [
                        ("text", ex.text.is_empty()),
                        ("prompt", ex.prompt.is_empty()),
                        ("answer", ex.answer.is_empty()),
                    ]
                    .iter()
                    .filter(|(_, e)| *e)
                    .map(|(n, _)| *n)
                    .collect::<Vec<_>>()
                    .join(", ");
                    out.errors.push(PlcLineError {
                        line: lineno,
                        message: format!("empty field(s): {empty}"),
                    });
                } else {
                    out.examples.push(ex);
                }
            }
            Err(e) => out.errors.push(PlcLineError { line: lineno, message: e.to_string() }),
        }
    }
    Ok(out)
}

pub fn write_plc(examples: &[PlcExample], path: &Path) -> Result<()> {
    let mut buf = String::new();
    for ex in examples {
        buf.push_str(&serde_json::to_string(ex)?);
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::File { path: path.to_path_buf(), source: e })
}

#[derive(Debug, Deserialize)]
struct RawPair {
    prompt: String,
    answer: String,
}

/// Parse a generation response: a JSON array of {"prompt","answer"}
/// objects, possibly wrapped in surrounding prose.
fn parse_pairs(response: &str) -> Option<Vec<RawPair>> {
    if let Ok(pairs) = serde_json::from_str::<Vec<RawPair>>(response) {
        return Some(pairs);
    }
    let start = response.find('[')?;
    let end = response.rfind(']')?;
    if end <= start {
        return None;
    }
    serde_json::from_str::<Vec<RawPair>>(&response[start..=end]).ok()
}

#[derive(Debug, Default)]
pub struct PlcGenReport {
    pub examples: Vec<PlcExample>,
    pub parse_failures: usize,
    pub transport_failures: usize,
    /// Texts whose pair count differed from the expected 15.
    pub count_warnings: usize,
}

/// Build the generation request for one text: the text itself with the
/// generation instruction appended.
pub fn generation_request(text: &str) -> LlmRequest {
    LlmRequest {
        system: None,
        user: format!("{text}\n\n{PLC_GENERATION_PROMPT}"),
        temperature: 0.7,
        max_tokens: 2048,
    }
}

/// Generate triples for each text through the given client. Unparseable
/// responses and exhausted-retry transport failures skip the text.
pub fn generate_plc(texts: &[String], client: &dyn LlmClient) -> PlcGenReport {
    let mut report = PlcGenReport::default();
    for text in texts {
        let req = generation_request(text);
        let response = match client.complete(&req) {
            Ok(r) => r,
            Err(_) => {
                report.transport_failures += 1;
                continue;
            }
        };
        let Some(pairs) = parse_pairs(&response) else {
            report.parse_failures += 1;
            continue;
        };
        if pairs.is_empty() {
            report.parse_failures += 1;
            continue;
        }
        if pairs.len() != EXPECTED_PAIRS_PER_TEXT {
            report.count_warnings += 1;
        }
        let n = pairs.len();
        for (i, pair) in pairs.into_iter().enumerate() {
            let prompt_kind = (n == EXPECTED_PAIRS_PER_TEXT).then(|| {
                if i < 10 {
                    PromptKind::Specific
                } else {
                    PromptKind::General
                }
            });
            report.examples.push(PlcExample {
                text: text.clone(),
                prompt: pair.prompt,
                answer: pair.answer,
                prompt_kind,
            });
        }
    }
    report
}

/// Deterministic offline stand-in for the generation service: emits the
/// expected 10 specific + 5 general pairs with answers derived from the
/// text itself, so the triples are grounded and learnable.
pub struct StubGenerator;

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn join(ws: &[&str]) -> String {
    ws.join(" ")
}

impl StubGenerator {
    pub fn pairs_for(text: &str) -> Vec<(String, String)> {
        let ws = words(text);
        let n = ws.len();
        let first = |k: usize| join(&ws[..k.min(n)]);
        let last = |k: usize| join(&ws[n.saturating_sub(k)..]);
        let mut keywords: Vec<&str> = ws.clone();
        keywords.sort_by_key(|w| std::cmp::Reverse(w.len()));
        keywords.dedup();
        keywords.truncate(3);
        vec![
            // ten prompts tied to this text: five instructions, five questions
            ("Repeat the opening words of the above text.".into(), first(6)),
            ("Quote the final words of the above text.".into(), last(6)),
            ("Copy the second word of the above text.".into(), ws.get(1).unwrap_or(&"").to_string()),
            ("State the opening three words of the above text.".into(), first(3)),
            ("Copy the closing three words of the above text.".into(), last(3)),
            ("What is the first word of the above text?".into(), ws.first().unwrap_or(&"").to_string()),
            ("What is the last word of the above text?".into(), ws.last().unwrap_or(&"").to_string()),
            ("What are the first five words of the above text?".into(), first(5)),
            ("What is the fourth word of the above text?".into(), ws.get(3).unwrap_or(&"").to_string()),
            ("What are the last two words of the above text?".into(), last(2)),
            // five general prompts
            ("Rephrase the above text.".into(), format!("in other words: {}", first(8))),
            ("Summarize the above text.".into(), first(10)),
            ("Write a title for the above text.".into(), first(4)),
            ("Extract a few keywords for the above text.".into(), keywords.join(", ")),
            ("Write a paragraph (i.e., continuation) that follows the above text.".into(), format!("{} and so it went on.", last(4))),
        ]
    }
}

impl LlmClient for StubGenerator {
    fn complete(&self, req: &LlmRequest) -> Result<String> {
        // the request is text + "\n\n" + instruction; recover the text
        let text = req
            .user
            .strip_suffix(PLC_GENERATION_PROMPT)
            .map(|t| t.trim_end())
            .unwrap_or(&req.user);
        let pairs = Self::pairs_for(text);
        let items: Vec<serde_json::Value> = pairs
            .into_iter()
            .map(|(prompt, answer)| serde_json::json!({"prompt": prompt, "answer": answer}))
            .collect();
        Ok(serde_json::to_string(&items)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::ScriptedClient;

    #[test]
    fn valid_three_line_file_loads_three_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plc.jsonl");
        let mut body = String::new();
        for i in 0..3 {
            body.push_str(&format!(
                "{}\n",
                serde_json::json!({"text": format!("t{i}"), "prompt": "p", "answer": "a"})
            ));
        }
        std::fs::write(&p, body).unwrap();
        let load = load_plc(&p).unwrap();
        assert_eq!(load.examples.len(), 3);
        assert!(load.errors.is_empty());
    }

    #[test]
    fn missing_answer_is_reported_with_its_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plc.jsonl");
        let body = format!(
            "{}\n{}\n{}\n",
            serde_json::json!({"text": "a", "prompt": "b", "answer": "c"}),
            serde_json::json!({"text": "a", "prompt": "b"}),
            serde_json::json!({"text": "x", "prompt": "y", "answer": "z"}),
        );
        std::fs::write(&p, body).unwrap();
        let load = load_plc(&p).unwrap();
        assert_eq!(load.examples.len(), 2);
        assert_eq!(load.errors.len(), 1);
        assert_eq!(load.errors[0].line, 2);
        assert!(load.errors[0].message.contains("answer"), "{}", load.errors[0].message);
    }

    #[test]
    fn empty_field_is_rejected_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("plc.jsonl");
        std::fs::write(
            &p,
            format!("{}\n", serde_json::json!({"text": "", "prompt": "b", "answer": "c"})),
        )
        .unwrap();
        let load = load_plc(&p).unwrap();
        assert!(load.examples.is_empty());
        assert_eq!(load.errors.len(), 1);
        assert!(load.errors[0].message.contains("text"));
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.jsonl");
        let examples = vec![
            PlcExample { text: "alpha".into(), prompt: "q1".into(), answer: "a1".into(), prompt_kind: Some(PromptKind::Specific) },
            PlcExample { text: "beta".into(), prompt: "q2".into(), answer: "a2".into(), prompt_kind: None },
        ];
        write_plc(&examples, &p).unwrap();
        let load = load_plc(&p).unwrap();
        assert_eq!(load.examples, examples);
    }

    #[test]
    fn stub_generator_yields_fifteen_grounded_pairs_per_text() {
        let texts = vec!["the quick brown fox jumps over the lazy dog.".to_string()];
        let report = generate_plc(&texts, &StubGenerator);
        assert_eq!(report.examples.len(), 15);
        assert_eq!(report.parse_failures, 0);
        assert_eq!(report.count_warnings, 0);
        let specific = report
            .examples
            .iter()
            .filter(|e| e.prompt_kind == Some(PromptKind::Specific))
            .count();
        assert_eq!(specific, 10);
        // grounded: the first-word question is answered from the text
        let first_word = report
            .examples
            .iter()
            .find(|e| e.prompt.contains("first word"))
            .unwrap();
        assert_eq!(first_word.answer, "the");
    }

    #[test]
    fn invalid_json_counts_as_parse_failure() {
        let client = ScriptedClient::repeating("not json at all");
        let report = generate_plc(&["text one".to_string()], &client);
        assert!(report.examples.is_empty());
        assert_eq!(report.parse_failures, 1);
    }

    #[test]
    fn short_pair_lists_load_with_a_warning() {
        let resp = serde_json::json!([
            {"prompt": "p1", "answer": "a1"},
            {"prompt": "p2", "answer": "a2"},
            {"prompt": "p3", "answer": "a3"},
        ])
        .to_string();
        let client = ScriptedClient::repeating(&resp);
        let report = generate_plc(&["some text".to_string()], &client);
        assert_eq!(report.examples.len(), 3);
        assert_eq!(report.count_warnings, 1);
        assert!(report.examples.iter().all(|e| e.prompt_kind.is_none()));
    }

    #[test]
    fn generation_request_appends_the_instruction_to_the_text() {
        let req = generation_request("THE TEXT");
        assert!(req.user.starts_with("THE TEXT\n\n"));
        assert!(req.user.ends_with(PLC_GENERATION_PROMPT));
    }
}
