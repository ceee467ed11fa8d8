//! Argument and config-file handling. Every run resolves to a RunConfig
//! that is echoed as JSON into the run directory; flags win over the file.

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use icae_core::lm::ModelConfig;
use icae_core::training::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "icae", version, about = "Context compression into memory slots")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; command-line flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic component of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Run directory; defaults to runs/<subcommand>.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Autoencoding + continuation pretraining of the adapter surface.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Corpus file or directory (plain text or JSONL with a `text` key).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Memory slot count.
        #[arg(long)]
        k: Option<usize>,
        /// Adapter rank.
        #[arg(long)]
        r: Option<usize>,
        /// Probability of the autoencoding task per batch.
        #[arg(long)]
        p_ae: Option<f64>,
    },
    /// Instruct fine-tuning on (text, prompt, answer) triples.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretraining checkpoint to start from.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Allow starting without a pretraining checkpoint (ablation).
        #[arg(long, default_value_t = false)]
        from_scratch: bool,
        /// PLC JSONL file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        r: Option<usize>,
    },
    /// Compress a document into a slot file.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Input text file.
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Expected memory length (validated against the checkpoint).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct the original text from a slot file.
    Restore {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        slots: PathBuf,
    },
    /// Continue the compressed context.
    Continue {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        slots: PathBuf,
        #[arg(long, default_value_t = 128)]
        max_new: usize,
    },
    /// Answer a prompt conditioned on a compressed context.
    Respond {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Slot file to condition on.
        #[arg(long)]
        slots: Option<PathBuf>,
        /// Raw text file to encode on the fly instead of --slots.
        #[arg(long = "in", value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 512)]
        max_new: usize,
    },
    /// Restoration metrics (BLEU / exact match / loss) with bucketing.
    EvalAe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation corpus (plain text or JSONL documents).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Restoration metrics across checkpoints trained at different k.
    SweepK {
        #[command(flatten)]
        common: Common,
        /// Comma-separated memory lengths, e.g. 32,64,128.
        #[arg(long)]
        ks: String,
        /// Directory containing one checkpoint per k, named k<K>.
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate (text, prompt, answer) triples for a corpus of texts.
    GenPlc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the deterministic offline generator.
        #[arg(long, default_value_t = false)]
        stub: bool,
        /// Chat-completions base URL for the generation model.
        #[arg(long)]
        llm_url: Option<String>,
        #[arg(long, default_value = "gpt-4")]
        llm_model: String,
    },
    /// Pairwise judging of answer files.
    Judge {
        #[command(flatten)]
        common: Common,
        /// JSONL of {text, prompt, answer_a, answer_b} cases.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Build cases from a PLC file: answer A responds over slots,
        /// answer B over an external summary of the text.
        #[arg(long)]
        summary_baseline: Option<PathBuf>,
        /// Checkpoint for the summary-baseline responses.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Use the deterministic tie judge.
        #[arg(long, default_value_t = false)]
        stub_judge: bool,
        /// Chat-completions base URL for the judge model.
        #[arg(long)]
        judge_url: Option<String>,
        #[arg(long, default_value = "gpt-4")]
        judge_model: String,
        /// Also judge every pair with positions swapped and report the
        /// disagreement rate.
        #[arg(long, default_value_t = false)]
        swap_audit: bool,
    },
    /// Aggregate judgments into win/lose/tie percentages.
    Tally {
        #[command(flatten)]
        common: Common,
        /// JSONL of judgments as written by `judge`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Optional JSON config file contents; any present field becomes the base
/// value that flags may override.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub k: Option<usize>,
    pub rank: Option<usize>,
    pub max_context: Option<usize>,
    pub max_continuation: Option<usize>,
}

pub fn load_file_config(path: &Option<PathBuf>) -> anyhow::Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
            Ok(serde_json::from_str(&raw)
                .map_err(|e| anyhow::anyhow!("bad config {}: {e}", p.display()))?)
        }
    }
}
