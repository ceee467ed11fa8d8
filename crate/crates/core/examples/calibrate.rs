// scratch calibration harness (not part of the deliverable)
use std::time::Instant;

use icae_core::data::{ingest_corpus, ChunkConfig};
use icae_core::encoder::LoraConfig;
use icae_core::eval::eval_restoration;
use icae_core::lm::params::seeded_rng;
use icae_core::lm::{ModelConfig, BYTE_VOCAB_SIZE};
use icae_core::pipeline::Icae;
use icae_core::synth::synth_corpus;
use icae_core::training::{warmup_backbone, Phase, TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let d_model: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(64);
    let n_layers: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    let k: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);
    let warmup_steps: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(400);
    let icae_steps: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(600);
    let lr: f32 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(3e-3);

    let cfg = ModelConfig {
        d_model,
        n_layers,
        n_heads: 4,
        d_ff: d_model * 4,
        vocab_size: BYTE_VOCAB_SIZE,
        max_positions: 512,
        rotary: true,
    };
    let texts = synth_corpus(11, 64, 8, 190);
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("corpus.jsonl");
    let body: String = texts
        .iter()
        .map(|t| format!("{}\n", serde_json::json!({"text": t})))
        .collect();
    std::fs::write(&corpus_path, body).unwrap();
    let chunks = ingest_corpus(&corpus_path, &ChunkConfig { max_context: 256, max_continuation: 64, seed: 5 })
        .unwrap()
        .chunks;
    println!("chunks: {} (lens {:?}..)", chunks.len(),
        chunks.iter().map(|c| c.context.len()).take(6).collect::<Vec<_>>());

    let mut icae = Icae::new(&cfg, LoraConfig::with_rank(32), k, &mut seeded_rng(1)).unwrap();

    let t0 = Instant::now();
    let mut wrng = seeded_rng(2);
    warmup_backbone(&mut icae.backbone, &chunks, warmup_steps, 8, 1e-3, &mut wrng, |s, l| {
        if s % 100 == 0 || s + 1 == warmup_steps {
            println!("warmup step {s}: loss {l:.4} ({:.1}s)", t0.elapsed().as_secs_f32());
        }
    })
    .unwrap();
    println!("warmup done in {:.1}s", t0.elapsed().as_secs_f32());

    let tc = TrainConfig {
        phase: Phase::Pretrain,
        p_ae: 1.0,
        batch_size: 8,
        learning_rate: lr,
        warmup_steps: 30,
        total_steps: icae_steps,
        weight_decay: 0.01,
        grad_clip: 1.0,
        seed: 3,
        checkpoint_every: 10_000,
        backbone_warmup_steps: 0,
        backbone_lr: 1e-3,
    };
    let mut trainer = Trainer::new(icae, tc).unwrap();
    let t1 = Instant::now();
    for s in 0..icae_steps {
        let r = trainer.pretrain_step(&chunks).unwrap();
        if s % 50 == 0 || s + 1 == icae_steps {
            println!(
                "icae step {s}: loss {:.4} gnorm {:.3} ({:.1}s)",
                r.loss,
                r.grad_norm,
                t1.elapsed().as_secs_f32()
            );
        }
    }
    println!("icae pretrain done in {:.1}s", t1.elapsed().as_secs_f32());

    trainer.icae.model_id = "calib".into();
    let contexts: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| icae_core::lm::tokenizer::tokenize(t).ids().to_vec())
        .collect();
    let t2 = Instant::now();
    let report = eval_restoration(&trainer.icae, &contexts, k).unwrap();
    println!(
        "eval done in {:.1}s: bleu median {:.4} mean {:.4} | em median {:.4} | loss mean {:.4}",
        t2.elapsed().as_secs_f32(),
        report.overall.bleu_median,
        report.overall.bleu_mean,
        report.overall.em_median,
        report.overall.loss_mean,
    );
    for b in &report.buckets {
        println!(
            "  bucket {:>4}: n={} bleu_med {:.3} em_med {:.3} loss {:.3}",
            b.bucket, b.summary.count, b.summary.bleu_median, b.summary.em_median, b.summary.loss_mean
        );
    }
}
