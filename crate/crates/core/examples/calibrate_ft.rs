// scratch calibration for the fine-tuning comparison (not a deliverable)
use std::time::Instant;

use icae_core::data::{ingest_corpus, ChunkConfig};
use icae_core::encoder::LoraConfig;
use icae_core::lm::params::seeded_rng;
use icae_core::lm::{ModelConfig, BYTE_VOCAB_SIZE};
use icae_core::pipeline::Icae;
use icae_core::plc::{generate_plc, StubGenerator};
use icae_core::synth::synth_corpus;
use icae_core::training::{prepare_plc, warmup_backbone, Phase, TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ft_steps: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let pre_steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(600);

    let cfg = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        vocab_size: BYTE_VOCAB_SIZE,
        max_positions: 512,
        rotary: true,
    };
    let k = 32;
    let texts = synth_corpus(11, 64, 8, 190);
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("corpus.jsonl");
    let body: String = texts.iter().map(|t| format!("{}\n", serde_json::json!({"text": t}))).collect();
    std::fs::write(&corpus_path, body).unwrap();
    let chunks = ingest_corpus(&corpus_path, &ChunkConfig { max_context: 256, max_continuation: 64, seed: 5 })
        .unwrap()
        .chunks;

    // PLC fixture: fresh texts from the same generator
    let plc_texts = synth_corpus(77, 14, 2, 190);
    let report = generate_plc(&plc_texts, &StubGenerator);
    let mut examples = report.examples;
    examples.truncate(200);
    let (tokenized, skipped) = prepare_plc(&cfg, k, 256, &examples);
    println!("plc: {} examples, {} skipped", tokenized.len(), skipped);
    let held_out = tokenized[160..].to_vec();
    let train_set = tokenized[..160].to_vec();

    // shared warmed backbone
    let mut icae = Icae::new(&cfg, LoraConfig::with_rank(32), k, &mut seeded_rng(1)).unwrap();
    let t0 = Instant::now();
    warmup_backbone(&mut icae.backbone, &chunks, 1000, 8, 1e-3, &mut seeded_rng(2), |_, _| {}).unwrap();
    println!("warmup done {:.0}s", t0.elapsed().as_secs_f32());

    // pretrain the adapter surface
    let tc = TrainConfig {
        phase: Phase::Pretrain,
        p_ae: 1.0,
        batch_size: 8,
        learning_rate: 1e-2,
        warmup_steps: 30,
        total_steps: pre_steps,
        weight_decay: 0.01,
        grad_clip: 1.0,
        seed: 3,
        checkpoint_every: 100_000,
        backbone_warmup_steps: 0,
        backbone_lr: 1e-3,
    };
    let mut pre = Trainer::new(icae, tc.clone()).unwrap();
    for _ in 0..pre_steps {
        pre.pretrain_step(&chunks).unwrap();
    }
    println!("pretrain done {:.0}s", t0.elapsed().as_secs_f32());

    // scratch counterpart: fresh adapters on a clone of the warmed backbone
    let scratch_icae = Icae::from_parts(
        pre.icae.backbone.clone(),
        icae_core::encoder::LoraWeights::init(&cfg, &LoraConfig::with_rank(32), &mut seeded_rng(40)),
        LoraConfig::with_rank(32),
        icae_core::encoder::MemoryTokenTable::init(k, cfg.d_model, &mut seeded_rng(41)),
        "scratch".into(),
    )
    .unwrap();

    let ft_cfg = TrainConfig {
        phase: Phase::Finetune,
        total_steps: ft_steps,
        warmup_steps: 20,
        learning_rate: 2e-3,
        batch_size: 8,
        seed: 5,
        ..tc
    };
    let mut ft_pre = Trainer::new(pre.icae, ft_cfg.clone()).unwrap();
    let mut ft_scratch = Trainer::new(scratch_icae, ft_cfg).unwrap();

    let l0_pre = ft_pre.held_out_response_loss(&held_out).unwrap();
    let l0_scr = ft_scratch.held_out_response_loss(&held_out).unwrap();
    println!("before ft: pretrained {l0_pre:.4} scratch {l0_scr:.4}");

    for s in 0..ft_steps {
        let a = ft_pre.finetune_step(&train_set).unwrap();
        let b = ft_scratch.finetune_step(&train_set).unwrap();
        if s % 50 == 0 || s + 1 == ft_steps {
            println!(
                "ft step {s}: pretrained train {:.4} | scratch train {:.4} ({:.0}s)",
                a.loss, b.loss, t0.elapsed().as_secs_f32()
            );
        }
    }
    let l1_pre = ft_pre.held_out_response_loss(&held_out).unwrap();
    let l1_scr = ft_scratch.held_out_response_loss(&held_out).unwrap();
    println!("after ft {ft_steps} steps: pretrained {l1_pre:.4} scratch {l1_scr:.4}");
    println!("pretrained strictly better: {}", l1_pre < l1_scr);
}
