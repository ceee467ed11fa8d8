//! Evaluation: restoration metrics with length bucketing, memory-length
//! sweeps, and the pairwise judge protocol.

pub mod judge;
pub mod metrics;
pub mod restoration;

pub use judge::{
    judge_pair, judge_request, parse_judgment, position_swap_audit, summary_request, tally,
    JudgeChoice, JudgePair, Judgment, StubJudge, SwapAuditReport, TallyReport, JUDGE_PROMPT,
    SUMMARY_PROMPT,
};
pub use metrics::{bleu, bucket, exact_match, BLEU_VARIANT};
pub use restoration::{
    eval_restoration, sweep_memory_lengths, write_plot_csv, EvalReport, MetricSummary, SweepReport,
};

use crate::client::LlmClient;
use crate::error::Result;
use crate::pipeline::Icae;
use crate::plc::PlcExample;

/// Build judge pairs for the summary-baseline comparison: answer A comes
/// from responding over memory slots, answer B from responding over an
/// external-model summary of the same text placed in the raw context.
pub fn summary_baseline_pairs(
    icae: &Icae,
    examples: &[PlcExample],
    summarizer: &dyn LlmClient,
    max_new: usize,
) -> Result<Vec<JudgePair>> {
    let mut pairs = Vec::with_capacity(examples.len());
    for ex in examples {
        let slots = icae.encode_text(&ex.text)?;
        let answer_a = icae.respond(&slots, &ex.prompt, max_new)?;
        let summary = summarizer.complete(&summary_request(&ex.text))?;
        let answer_b = icae.respond_with_text_context(&summary, &ex.prompt, max_new)?;
        pairs.push(JudgePair {
            text: ex.text.clone(),
            prompt: ex.prompt.clone(),
            answer_a,
            answer_b,
        });
    }
    Ok(pairs)
}
