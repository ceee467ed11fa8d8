//! Restoration evaluation: encode each context, restore it greedily, score
//! BLEU / prefix exact-match / autoencoding loss, and aggregate per
//! context-length bucket. Also the memory-length sweep across checkpoints.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::metrics::{bleu, bucket, exact_match, BLEU_VARIANT};
use crate::error::{Error, Result};
use crate::lm::{Role, TokenSequence, EOS_TOKEN};
use crate::pipeline::{build_ae_layout, Icae};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestorationRecord {
    pub context_len: usize,
    pub bucket: usize,
    pub bleu: f64,
    pub em: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub bleu_mean: f64,
    pub bleu_median: f64,
    pub em_mean: f64,
    pub em_median: f64,
    pub loss_mean: f64,
    pub loss_median: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketSummary {
    pub bucket: usize,
    #[serde(flatten)]
    pub summary: MetricSummary,
}

/// Everything needed to reproduce the run; deliberately path-free so
/// reports from identical runs compare bitwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub k: usize,
    pub model_id: String,
    pub bleu_variant: String,
    pub n_inputs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfigEcho,
    pub overall: MetricSummary,
    pub buckets: Vec<BucketSummary>,
    pub records: Vec<RestorationRecord>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn summarize(records: &[&RestorationRecord]) -> MetricSummary {
    let n = records.len();
    let mut bleus: Vec<f64> = records.iter().map(|r| r.bleu).collect();
    let mut ems: Vec<f64> = records.iter().map(|r| r.em).collect();
    let mut losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n.max(1) as f64;
    let (bm, em_, lm) = (mean(&bleus), mean(&ems), mean(&losses));
    bleus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ems.sort_by(|a, b| a.partial_cmp(b).unwrap());
    losses.sort_by(|a, b| a.partial_cmp(b).unwrap());
    MetricSummary {
        count: n,
        bleu_mean: bm,
        bleu_median: median(&bleus),
        em_mean: em_,
        em_median: median(&ems),
        loss_mean: lm,
        loss_median: median(&losses),
    }
}

/// Evaluate restoration over a set of contexts with the loaded model.
/// `k` must match the checkpoint's memory length.
pub fn eval_restoration(icae: &Icae, contexts: &[Vec<u32>], k: usize) -> Result<EvalReport> {
    if k != icae.k() {
        return Err(Error::Provenance(format!(
            "requested k={k} but the checkpoint was trained with k={}",
            icae.k()
        )));
    }
    if contexts.is_empty() {
        return Err(Error::Data("restoration eval needs at least one context".into()));
    }
    let mut records = Vec::with_capacity(contexts.len());
    for ids in contexts {
        let context = TokenSequence::uniform(ids.clone(), Role::Context);
        let slots = icae.encode(&context)?;
        let mut restored = icae.restore_ids(&slots)?;
        if restored.last() == Some(&EOS_TOKEN) {
            restored.pop();
        }
        let layout = build_ae_layout(icae.config(), icae.k(), &context)?;
        let loss = icae.layout_loss(&slots, &layout)?;
        records.push(RestorationRecord {
            context_len: ids.len(),
            bucket: bucket(ids.len()),
            bleu: bleu(ids, &restored)?,
            em: exact_match(ids, &restored)?,
            loss,
        });
    }
    let mut bucket_ids: Vec<usize> = records.iter().map(|r| r.bucket).collect();
    bucket_ids.sort_unstable();
    bucket_ids.dedup();
    let buckets = bucket_ids
        .into_iter()
        .map(|b| {
            let members: Vec<&RestorationRecord> =
                records.iter().filter(|r| r.bucket == b).collect();
            BucketSummary { bucket: b, summary: summarize(&members) }
        })
        .collect();
    let all: Vec<&RestorationRecord> = records.iter().collect();
    Ok(EvalReport {
        config: EvalConfigEcho {
            k,
            model_id: icae.model_id.clone(),
            bleu_variant: BLEU_VARIANT.into(),
            n_inputs: contexts.len(),
        },
        overall: summarize(&all),
        buckets,
        records,
    })
}

/// Plot-ready CSV: one row per (bucket, metric) with the k column.
pub fn write_plot_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut out = String::from("bucket,metric,value,k\n");
    for b in &report.buckets {
        let k = report.config.k;
        out.push_str(&format!("{},bleu_median,{},{}\n", b.bucket, b.summary.bleu_median, k));
        out.push_str(&format!("{},bleu_mean,{},{}\n", b.bucket, b.summary.bleu_mean, k));
        out.push_str(&format!("{},em_median,{},{}\n", b.bucket, b.summary.em_median, k));
        out.push_str(&format!("{},em_mean,{},{}\n", b.bucket, b.summary.em_mean, k));
        out.push_str(&format!("{},loss_mean,{},{}\n", b.bucket, b.summary.loss_mean, k));
    }
    std::fs::write(path, out).map_err(|e| Error::File { path: path.to_path_buf(), source: e })
}

#[derive(Debug, Serialize)]
pub struct SweepRun {
    pub k: usize,
    pub report: EvalReport,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
    /// (k, path, error) for checkpoints that could not be evaluated.
    pub missing: Vec<(usize, String, String)>,
}

/// Evaluate restoration across checkpoints trained at different memory
/// lengths. Missing checkpoints are listed and the sweep continues.
pub fn sweep_memory_lengths(
    entries: &[(usize, PathBuf)],
    contexts: &[Vec<u32>],
) -> Result<SweepReport> {
    if entries.is_empty() {
        return Err(Error::Data("sweep needs at least one memory length".into()));
    }
    let mut runs = Vec::new();
    let mut missing = Vec::new();
    for (k, path) in entries {
        match crate::checkpoint::load_model(path) {
            Ok((icae, _seed)) => match eval_restoration(&icae, contexts, *k) {
                Ok(report) => runs.push(SweepRun { k: *k, report }),
                Err(e) => missing.push((*k, path.display().to_string(), e.to_string())),
            },
            Err(e) => missing.push((*k, path.display().to_string(), e.to_string())),
        }
    }
    Ok(SweepReport { runs, missing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LoraConfig;
    use crate::lm::params::seeded_rng;
    use crate::lm::{ModelConfig, BYTE_VOCAB_SIZE};

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
        Icae::new(&cfg(), LoraConfig::with_rank(4), k, &mut seeded_rng(31)).unwrap()
    }

    fn contexts() -> Vec<Vec<u32>> {
        (0..6)
            .map(|i| (0..(10 + i * 7)).map(|j| (65 + (i + j) % 26) as u32).collect())
            .collect()
    }

    #[test]
    fn bucket_counts_sum_to_input_count() {
        let icae = model(4);
        let report = eval_restoration(&icae, &contexts(), 4).unwrap();
        let total: usize = report.buckets.iter().map(|b| b.summary.count).sum();
        assert_eq!(total, 6);
        assert_eq!(report.overall.count, 6);
        assert_eq!(report.records.len(), 6);
    }

    #[test]
    fn untrained_model_restores_poorly() {
        let icae = model(4);
        let report = eval_restoration(&icae, &contexts(), 4).unwrap();
        assert!(
            report.overall.bleu_median < 0.1,
            "untrained bleu median {}",
            report.overall.bleu_median
        );
    }

    #[test]
    fn k_mismatch_is_a_provenance_error() {
        let icae = model(4);
        assert!(matches!(
            eval_restoration(&icae, &contexts(), 8),
            Err(Error::Provenance(_))
        ));
    }

    #[test]
    fn repeated_eval_is_deterministic() {
        let icae = model(4);
        let a = eval_restoration(&icae, &contexts(), 4).unwrap();
        let b = eval_restoration(&icae, &contexts(), 4).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn sweep_lists_missing_checkpoints_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("k4");
        let mut icae = model(4);
        crate::checkpoint::save_model(&good, &mut icae, 0).unwrap();
        let entries = vec![
            (4usize, good),
            (8usize, dir.path().join("does-not-exist")),
        ];
        let sweep = sweep_memory_lengths(&entries, &contexts()).unwrap();
        assert_eq!(sweep.runs.len(), 1);
        assert_eq!(sweep.missing.len(), 1);
        assert_eq!(sweep.missing[0].0, 8);
    }

    #[test]
    fn empty_k_set_is_an_error() {
        assert!(sweep_memory_lengths(&[], &contexts()).is_err());
    }

    #[test]
    fn median_of_even_and_odd_sets() {
        assert_eq!(median(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    }
}
