//! Pairwise judging: send a text, a prompt, and two candidate answers to an
//! external judge model and parse its JSON verdict. Includes verdict
//! tallying and a position-swap consistency audit.

use serde::{Deserialize, Serialize};

use crate::client::{LlmClient, LlmRequest};
use crate::error::{Error, Result};

/// The judging instruction with its three worked examples.
pub const JUDGE_PROMPT: &str = r#"Given a piece of text, an instruction for this text, and two AI assistant answers, your task is to choose the better answer and provide reasons. Evaluate the answers holistically, paying special attention to whether the response (1) follows the given instruction and (2) is correct. If both answers correctly respond to the prompt, you should judge it as a tie.

Example 1:
```
Text: We report the development of GPT-4, a large-scale, multimodal model which can accept image and text inputs and produce text outputs. While less capable than humans in many real-world scenarios, GPT-4 exhibits human-level performance on various professional and academic benchmarks, including passing a simulated bar exam with a score around the top 10
Prompt: What is GPT4?
Assistant A: GPT4 is a large-scale language-trained transformer-based model.
Assistant B: GPT4 can produce outputs.
```

Your output should be:
```
{"reason": "The instruction asks what GPT4 is, and from the original text, we know that GPT4 is a multimodal, large-scale model that can generate text. Therefore, Assistant A is the closer answer, while Assistant B did not follow the instruction well in providing a response.", "choice": "A"}
```

Example 2:
```
Text: Making language models bigger does not inherently make them better at following a user's intent. For example, large language models can generate outputs that are untruthful, toxic, or simply not helpful to the user. In other words, these models are not aligned with their users. In this paper, we show an avenue for aligning language models with user intent on a wide range of tasks by fine-tuning with human feedback. Starting with a set of labeler-written prompts and prompts submitted through the OpenAI API, we collect a dataset of labeler demonstrations of the desired model behavior, which we use to fine-tune GPT-3 using supervised learning. We then collect a dataset of rankings of model outputs, which we use to further fine-tune this supervised model using reinforcement learning from human feedback. We call the resulting models InstructGPT. In human evaluations on our prompt distribution, outputs from the 1.3B parameter InstructGPT model are preferred to outputs from the 175B GPT-3, despite having 100x fewer parameters. Moreover, InstructGPT models show improvements in truthfulness and reductions in toxic output generation while having minimal performance regressions on public NLP datasets. Even though InstructGPT still makes simple mistakes, our results show that fine-tuning with human feedback is a promising direction for aligning language models with human intent.
Prompt: Write a title for the above text.
Assistant A: Improving Fine-Tuning for Language Models: A GPT-3-inspired Approach
Assistant B: Training language models to follow instructions with human feedback
```

Your output should be:
```
{"reason": "This text discusses how to make large language models follow user instructions better, and Assistant B's response is more in line with the meaning of the text.", "choice": "B"}
```

Example 3:
```
Text: Though technology companies announced massive layoffs last year, 2023 has been much worse. Layoffs have far outpaced last year's cuts, as tech giants including Amazon, Facebook parent company Meta, Microsoft, Google, IBM, SAP, and Salesforce - as well as many smaller companies - announce sweeping job cuts. The problem: Big Tech went on a hiring binge during the pandemic when lockdowns sparked a tech buying spree to support remote work and an uptick in e-commerce, and now they face revenue declines. Although global IT spending is forecast to rise in 2023, with enterprise software and IT services experiencing the greatest growth, the overall increase is expected to be modest, with data center systems and communications services growing by less than 1
Prompt: How many job losses have occurred in the technology sector so far in 2023?
Assistant A: 208,181 job losses have occurred in the technology sector so far in 2023.
Assistant B: 208,181.
```

Your output should be:
```
{"reason": "Both answers are acceptable and correct. They should be a tie.", "choice": "Tie"}
```
Your response should only be in the JSON format above; THERE SHOULD BE NO OTHER CONTENT INCLUDED IN YOUR RESPONSE. Write the "reason" key before writing the "choice" key, so that you think step-by-step before making your decision. KEEP YOUR REASONING BRIEF. Again, don't favor either A or B if they are both acceptable and correct -- judge a tie instead."#;

/// Prompt used to produce the fixed-length summary for the
/// summary-vs-slots comparison mode.
pub const SUMMARY_PROMPT: &str = "Write a summary for the above text. Your summary should not exceed 100 words but should include as much information of the original text as possible.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgeChoice {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Judgment {
    /// Present exactly when parsing succeeded.
    pub choice: Option<JudgeChoice>,
    pub reason: String,
    pub raw_response: String,
}

impl Judgment {
    pub fn parsed(&self) -> bool {
        self.choice.is_some()
    }
}

/// One comparison case: a context, a prompt, and two candidate answers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgePair {
    pub text: String,
    pub prompt: String,
    pub answer_a: String,
    pub answer_b: String,
}

/// Build the full judge request: the instruction block followed by the
/// case in the same fenced format the worked examples use.
pub fn judge_request(pair: &JudgePair) -> LlmRequest {
    let user = format!(
        "{JUDGE_PROMPT}\n\n```\nText: {}\nPrompt: {}\nAssistant A: {}\nAssistant B: {}\n```",
        pair.text, pair.prompt, pair.answer_a, pair.answer_b
    );
    LlmRequest { system: None, user, temperature: 0.0, max_tokens: 512 }
}

#[derive(Deserialize)]
struct RawVerdict {
    reason: String,
    choice: String,
}

/// Parse `{"reason": ..., "choice": ...}`, tolerating surrounding prose.
pub fn parse_judgment(raw: &str) -> Judgment {
    let attempt = serde_json::from_str::<RawVerdict>(raw).ok().or_else(|| {
        let start = raw.find('{')?;
        let end = raw.rfind('}')?;
        serde_json::from_str::<RawVerdict>(&raw[start..=end]).ok()
    });
    match attempt {
        Some(v) => {
            let choice = match v.choice.trim().to_ascii_lowercase().as_str() {
                "a" => Some(JudgeChoice::A),
                "b" => Some(JudgeChoice::B),
                "tie" => Some(JudgeChoice::Tie),
                _ => None,
            };
            Judgment {
                choice,
                reason: v.reason,
                raw_response: raw.to_string(),
            }
        }
        None => Judgment { choice: None, reason: String::new(), raw_response: raw.to_string() },
    }
}

/// Send one pair to the judge and parse the verdict. Transport errors
/// surface as unparsed judgments so the tally can count them.
pub fn judge_pair(pair: &JudgePair, client: &dyn LlmClient) -> Judgment {
    match client.complete(&judge_request(pair)) {
        Ok(raw) => parse_judgment(&raw),
        Err(e) => Judgment {
            choice: None,
            reason: String::new(),
            raw_response: format!("<transport error: {e}>"),
        },
    }
}

/// Win/lose/tie aggregates over parsed judgments; parse failures are
/// excluded from the denominators and reported separately.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TallyReport {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub parse_failures: usize,
    pub win_pct: f64,
    pub lose_pct: f64,
    pub tie_pct: f64,
    /// win + tie, the "on par" column.
    pub on_par_pct: f64,
    /// None when there are no losses.
    pub win_lose_ratio: Option<f64>,
}

pub fn tally(judgments: &[Judgment]) -> Result<TallyReport> {
    let mut wins = 0usize;
    let mut losses = 0usize;
    let mut ties = 0usize;
    let mut parse_failures = 0usize;
    for j in judgments {
        match j.choice {
            Some(JudgeChoice::A) => wins += 1,
            Some(JudgeChoice::B) => losses += 1,
            Some(JudgeChoice::Tie) => ties += 1,
            None => parse_failures += 1,
        }
    }
    let parsed = wins + losses + ties;
    if parsed == 0 {
        return Err(Error::Data("no parsed judgments to tally".into()));
    }
    let pct = |n: usize| 100.0 * n as f64 / parsed as f64;
    Ok(TallyReport {
        wins,
        losses,
        ties,
        parse_failures,
        win_pct: pct(wins),
        lose_pct: pct(losses),
        tie_pct: pct(ties),
        on_par_pct: pct(wins + ties),
        win_lose_ratio: (losses > 0).then(|| wins as f64 / losses as f64),
    })
}

/// Position-swap audit: judge (A,B) and (B,A); a consistent judge flips
/// its choice (ties stay ties). Reports the disagreement rate.
#[derive(Debug, Clone, Serialize)]
pub struct SwapAuditReport {
    pub compared: usize,
    pub consistent: usize,
    pub disagreements: usize,
    pub unparsed: usize,
    pub disagreement_rate: f64,
}

pub fn position_swap_audit(pairs: &[JudgePair], client: &dyn LlmClient) -> SwapAuditReport {
    let mut compared = 0usize;
    let mut consistent = 0usize;
    let mut unparsed = 0usize;
    for pair in pairs {
        let forward = judge_pair(pair, client);
        let swapped_pair = JudgePair {
            text: pair.text.clone(),
            prompt: pair.prompt.clone(),
            answer_a: pair.answer_b.clone(),
            answer_b: pair.answer_a.clone(),
        };
        let backward = judge_pair(&swapped_pair, client);
        match (forward.choice, backward.choice) {
            (Some(f), Some(b)) => {
                compared += 1;
                let expected = match f {
                    JudgeChoice::A => JudgeChoice::B,
                    JudgeChoice::B => JudgeChoice::A,
                    JudgeChoice::Tie => JudgeChoice::Tie,
                };
                if b == expected {
                    consistent += 1;
                }
            }
            _ => unparsed += 1,
        }
    }
    let disagreements = compared - consistent;
    SwapAuditReport {
        compared,
        consistent,
        disagreements,
        unparsed,
        disagreement_rate: if compared > 0 {
            disagreements as f64 / compared as f64
        } else {
            0.0
        },
    }
}

/// A deterministic judge for offline runs: always returns the configured
/// verdict in the expected JSON shape.
pub struct StubJudge {
    verdict: &'static str,
}

impl StubJudge {
    pub fn tie() -> Self {
        Self { verdict: "Tie" }
    }

    pub fn always(choice: JudgeChoice) -> Self {
        Self {
            verdict: match choice {
                JudgeChoice::A => "A",
                JudgeChoice::B => "B",
                JudgeChoice::Tie => "Tie",
            },
        }
    }
}

impl LlmClient for StubJudge {
    fn complete(&self, _req: &LlmRequest) -> Result<String> {
        Ok(format!(
            "{{\"reason\": \"stub verdict\", \"choice\": \"{}\"}}",
            self.verdict
        ))
    }
}

/// Build the summary request for one text (text first, instruction after,
/// matching the "above text" phrasing).
pub fn summary_request(text: &str) -> LlmRequest {
    LlmRequest {
        system: None,
        user: format!("{text}\n\n{SUMMARY_PROMPT}"),
        temperature: 0.0,
        max_tokens: 256,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::ScriptedClient;

    fn pair() -> JudgePair {
        JudgePair {
            text: "t".into(),
            prompt: "p".into(),
            answer_a: "a".into(),
            answer_b: "b".into(),
        }
    }

    #[test]
    fn stub_tie_parses_as_tie() {
        let j = judge_pair(&pair(), &StubJudge::tie());
        assert_eq!(j.choice, Some(JudgeChoice::Tie));
        assert_eq!(j.reason, "stub verdict");
    }

    #[test]
    fn non_json_response_is_a_parse_failure_not_an_error() {
        let client = ScriptedClient::repeating("I think A is better!");
        let j = judge_pair(&pair(), &client);
        assert!(j.choice.is_none());
        assert_eq!(j.raw_response, "I think A is better!");
    }

    #[test]
    fn worked_example_outputs_all_parse() {
        // the three example verdicts shipped inside the judging instruction
        let cases = [
            (r#"{"reason": "The instruction asks what GPT4 is, and from the original text, we know that GPT4 is a multimodal, large-scale model that can generate text. Therefore, Assistant A is the closer answer, while Assistant B did not follow the instruction well in providing a response.", "choice": "A"}"#, JudgeChoice::A),
            (r#"{"reason": "This text discusses how to make large language models follow user instructions better, and Assistant B's response is more in line with the meaning of the text.", "choice": "B"}"#, JudgeChoice::B),
            (r#"{"reason": "Both answers are acceptable and correct. They should be a tie.", "choice": "Tie"}"#, JudgeChoice::Tie),
        ];
        for (raw, expected) in cases {
            let j = parse_judgment(raw);
            assert_eq!(j.choice, Some(expected), "failed on {raw}");
            assert!(!j.reason.is_empty());
        }
    }

    #[test]
    fn verdict_embedded_in_prose_still_parses() {
        let j = parse_judgment("Sure! Here is my verdict: {\"reason\": \"ok\", \"choice\": \"B\"} hope that helps");
        assert_eq!(j.choice, Some(JudgeChoice::B));
    }

    #[test]
    fn tally_thirds() {
        let js: Vec<Judgment> = [JudgeChoice::A, JudgeChoice::B, JudgeChoice::Tie]
            .iter()
            .map(|&c| Judgment { choice: Some(c), reason: String::new(), raw_response: String::new() })
            .collect();
        let t = tally(&js).unwrap();
        assert!((t.win_pct - 33.3).abs() < 0.1);
        assert!((t.lose_pct - 33.3).abs() < 0.1);
        assert!((t.tie_pct - 33.3).abs() < 0.1);
        assert!((t.on_par_pct - 66.7).abs() < 0.1);
        assert!((t.win_pct + t.lose_pct + t.tie_pct - 100.0).abs() < 0.1);
    }

    #[test]
    fn tally_win_lose_ratio() {
        let js: Vec<Judgment> = [JudgeChoice::A, JudgeChoice::A, JudgeChoice::B]
            .iter()
            .map(|&c| Judgment { choice: Some(c), reason: String::new(), raw_response: String::new() })
            .collect();
        let t = tally(&js).unwrap();
        assert!((t.win_pct - 66.7).abs() < 0.1);
        assert!((t.lose_pct - 33.3).abs() < 0.1);
        assert_eq!(t.win_lose_ratio, Some(2.0));
    }

    #[test]
    fn parse_failures_shrink_the_denominator() {
        let mut js: Vec<Judgment> = [JudgeChoice::A, JudgeChoice::A, JudgeChoice::Tie]
            .iter()
            .map(|&c| Judgment { choice: Some(c), reason: String::new(), raw_response: String::new() })
            .collect();
        js.push(Judgment { choice: None, reason: String::new(), raw_response: "garbage".into() });
        let t = tally(&js).unwrap();
        assert_eq!(t.parse_failures, 1);
        // denominators use the 3 parsed judgments
        assert!((t.win_pct - 66.666).abs() < 0.01);
        assert_eq!(t.wins + t.losses + t.ties, 3);
    }

    #[test]
    fn tally_of_nothing_parsed_is_an_error() {
        let js = vec![Judgment { choice: None, reason: String::new(), raw_response: String::new() }];
        assert!(tally(&js).is_err());
    }

    #[test]
    fn swap_audit_counts_positional_bias() {
        // a judge that always says A disagrees with itself under swapping
        let report = position_swap_audit(&[pair(), pair()], &StubJudge::always(JudgeChoice::A));
        assert_eq!(report.compared, 2);
        assert_eq!(report.disagreements, 2);
        assert_eq!(report.disagreement_rate, 1.0);
        // a tie judge is perfectly consistent
        let report = position_swap_audit(&[pair()], &StubJudge::tie());
        assert_eq!(report.disagreements, 0);
    }

    #[test]
    fn judge_request_carries_the_instruction_and_the_case() {
        let req = judge_request(&pair());
        assert!(req.user.starts_with(JUDGE_PROMPT));
        assert!(req.user.ends_with("```\nText: t\nPrompt: p\nAssistant A: a\nAssistant B: b\n```"));
    }
}
