//! Subcommand implementations. Every run creates a run directory with the
//! resolved config echoed as `config.json`, and writes its primary result
//! as a machine-readable artifact.

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use icae_core::checkpoint;
use icae_core::client::{HttpLlmClient, LlmClient};
use icae_core::data::{ingest_corpus, read_texts, ChunkConfig};
use icae_core::encoder::LoraConfig;
use icae_core::eval::{
    self, eval_restoration, judge_pair, position_swap_audit, sweep_memory_lengths, tally,
    write_plot_csv, JudgePair, StubJudge,
};
use icae_core::lm::params::seeded_rng;
use icae_core::lm::tokenizer::tokenize;
use icae_core::lm::ModelConfig;
use icae_core::pipeline::{compression_ratio, Icae, DEFAULT_MAX_CONTEXT};
use icae_core::plc::{generate_plc, load_plc, write_plc};
use icae_core::slots::{deserialize_slots, serialize_slots};
use icae_core::training::{prepare_plc, warmup_backbone, Phase, TrainConfig, Trainer};

use crate::config::{load_file_config, Cli, Command, Common, FileConfig};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { common, data, steps, k, r, p_ae } => {
            pretrain(common, data, steps, k, r, p_ae)
        }
        Command::Finetune { common, ckpt, from_scratch, data, steps, k, r } => {
            finetune(common, ckpt, from_scratch, data, steps, k, r)
        }
        Command::Encode { common, ckpt, input, k, out } => encode(common, ckpt, input, k, out),
        Command::Restore { common, ckpt, slots } => restore(common, ckpt, slots),
        Command::Continue { common, ckpt, slots, max_new } => {
            continue_text(common, ckpt, slots, max_new)
        }
        Command::Respond { common, ckpt, slots, input, prompt, max_new } => {
            respond(common, ckpt, slots, input, prompt, max_new)
        }
        Command::EvalAe { common, ckpt, data, k } => eval_ae(common, ckpt, data, k),
        Command::SweepK { common, ks, ckpt_dir, data } => sweep_k(common, ks, ckpt_dir, data),
        Command::GenPlc { common, data, out, stub, llm_url, llm_model } => {
            gen_plc(common, data, out, stub, llm_url, llm_model)
        }
        Command::Judge {
            common,
            data,
            summary_baseline,
            ckpt,
            out,
            stub_judge,
            judge_url,
            judge_model,
            swap_audit,
        } => judge(
            common,
            data,
            summary_baseline,
            ckpt,
            out,
            stub_judge,
            judge_url,
            judge_model,
            swap_audit,
        ),
        Command::Tally { common, data, out } => tally_cmd(common, data, out),
    }
}

fn run_dir(common: &Common, name: &str) -> anyhow::Result<PathBuf> {
    let dir = common
        .run_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(name));
    std::fs::create_dir_all(dir.join("reports"))
        .with_context(|| format!("creating run dir {}", dir.display()))?;
    Ok(dir)
}

fn echo_config(dir: &Path, value: serde_json::Value) -> anyhow::Result<()> {
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&value)?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn resolve_model(file: &FileConfig) -> ModelConfig {
    file.model.clone().unwrap_or_else(ModelConfig::toy)
}

fn resolve_train(file: &FileConfig, common: &Common, phase: Phase) -> TrainConfig {
    let mut tc = file.train.clone().unwrap_or_default();
    tc.phase = phase;
    tc.seed = common.seed;
    tc
}

fn chunk_config(file: &FileConfig, seed: u64) -> ChunkConfig {
    ChunkConfig {
        max_context: file.max_context.unwrap_or(512),
        max_continuation: file.max_continuation.unwrap_or(256),
        seed,
    }
}

struct TrainLog {
    file: std::fs::File,
}

impl TrainLog {
    fn create(dir: &Path) -> anyhow::Result<Self> {
        Ok(Self { file: std::fs::File::create(dir.join("log.jsonl"))? })
    }

    fn append<T: Serialize>(&mut self, value: &T) -> anyhow::Result<()> {
        use std::io::Write;
        writeln!(self.file, "{}", serde_json::to_string(value)?)?;
        Ok(())
    }
}

fn pretrain(
    common: Common,
    data: PathBuf,
    steps: Option<u64>,
    k: Option<usize>,
    r: Option<usize>,
    p_ae: Option<f64>,
) -> anyhow::Result<()> {
    let file = load_file_config(&common.config)?;
    let dir = run_dir(&common, "pretrain")?;
    let model_cfg = resolve_model(&file);
    let mut tc = resolve_train(&file, &common, Phase::Pretrain);
    if let Some(s) = steps {
        tc.total_steps = s;
    }
    if let Some(p) = p_ae {
        tc.p_ae = p;
    }
    let k = k.or(file.k).unwrap_or(128);
    let rank = r.or(file.rank).unwrap_or(32);
    let chunk_cfg = chunk_config(&file, common.seed);
    echo_config(
        &dir,
        serde_json::json!({
            "command": "pretrain",
            "seed": common.seed,
            "data": data.display().to_string(),
            "k": k,
            "r": rank,
            "model": model_cfg,
            "train": tc,
            "chunking": {"max_context": chunk_cfg.max_context,
                          "max_continuation": chunk_cfg.max_continuation},
        }),
    )?;

    let ingest = ingest_corpus(&data, &chunk_cfg)?;
    for (path, err) in &ingest.file_errors {
        eprintln!("warning: skipped {}: {err}", path.display());
    }
    println!(
        "corpus: {} chunks from {} documents ({} skipped short)",
        ingest.chunks.len(),
        ingest.docs_seen,
        ingest.docs_skipped_short
    );
    println!(
        "compression ratio at max context: {:.1}x",
        compression_ratio(chunk_cfg.max_context, k)
    );

    let mut rng = seeded_rng(common.seed);
    let mut icae = Icae::new(&model_cfg, LoraConfig::with_rank(rank), k, &mut rng)?;
    let mut log = TrainLog::create(&dir)?;

    if tc.backbone_warmup_steps > 0 {
        println!("backbone warmup: {} steps", tc.backbone_warmup_steps);
        warmup_backbone(
            &mut icae.backbone,
            &ingest.chunks,
            tc.backbone_warmup_steps,
            tc.batch_size,
            tc.backbone_lr,
            &mut rng,
            |s, l| {
                if s % 100 == 0 {
                    println!("  warmup step {s}: lm loss {l:.4}");
                }
            },
        )?;
        icae.refresh_adapters()?;
    }

    let mut trainer = Trainer::new(icae, tc.clone())?;
    let ckpt_root = dir.join("checkpoints");
    for s in 0..tc.total_steps {
        let report = trainer.pretrain_step(&ingest.chunks)?;
        log.append(&report)?;
        if s % 50 == 0 {
            println!("step {}: task {} loss {:.4}", report.step, report.task, report.loss);
        }
        if tc.checkpoint_every > 0 && report.step % tc.checkpoint_every == 0 {
            checkpoint::save_train_state(
                &ckpt_root.join(format!("step{}", report.step)),
                &mut trainer,
                common.seed,
            )?;
        }
    }
    let final_dir = ckpt_root.join("final");
    let id = checkpoint::save_train_state(&final_dir, &mut trainer, common.seed)?;
    write_json(
        &dir.join("reports/pretrain.json"),
        &serde_json::json!({
            "checkpoint": final_dir.display().to_string(),
            "model_id": id,
            "steps": tc.total_steps,
            "skipped_nonfinite": trainer.skipped_nonfinite,
        }),
    )?;
    println!("saved {}", final_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finetune(
    common: Common,
    ckpt: Option<PathBuf>,
    from_scratch: bool,
    data: PathBuf,
    steps: Option<u64>,
    k: Option<usize>,
    r: Option<usize>,
) -> anyhow::Result<()> {
    if ckpt.is_none() && !from_scratch {
        bail!("fine-tuning requires a pretraining checkpoint (--ckpt); pass --from-scratch to run the no-pretraining ablation");
    }
    let file = load_file_config(&common.config)?;
    let dir = run_dir(&common, "finetune")?;
    let mut tc = resolve_train(&file, &common, Phase::Finetune);
    if let Some(s) = steps {
        tc.total_steps = s;
    }

    let mut rng = seeded_rng(common.seed);
    let icae = match (&ckpt, from_scratch) {
        (Some(path), false) => checkpoint::load_model(path)?.0,
        (Some(path), true) => {
            // ablation: keep the checkpoint's backbone, reinitialize the
            // trainable surface
            let (loaded, _) = checkpoint::load_model(path)?;
            let cfg = loaded.config().clone();
            let lcfg = loaded.lora_cfg.clone();
            let kk = loaded.k();
            Icae::from_parts(
                loaded.backbone,
                icae_core::encoder::LoraWeights::init(&cfg, &lcfg, &mut rng),
                lcfg,
                icae_core::encoder::MemoryTokenTable::init(kk, cfg.d_model, &mut rng),
                "from-scratch".into(),
            )?
        }
        (None, _) => {
            let model_cfg = resolve_model(&file);
            let rank = r.or(file.rank).unwrap_or(32);
            let kk = k.or(file.k).unwrap_or(128);
            Icae::new(&model_cfg, LoraConfig::with_rank(rank), kk, &mut rng)?
        }
    };
    echo_config(
        &dir,
        serde_json::json!({
            "command": "finetune",
            "seed": common.seed,
            "data": data.display().to_string(),
            "ckpt": ckpt.as_ref().map(|p| p.display().to_string()),
            "from_scratch": from_scratch,
            "k": icae.k(),
            "r": icae.lora_cfg.rank,
            "model": icae.config(),
            "train": tc,
        }),
    )?;

    let load = load_plc(&data)?;
    for e in &load.errors {
        eprintln!("warning: {} line {}: {}", data.display(), e.line, e.message);
    }
    let (examples, skipped) =
        prepare_plc(icae.config(), icae.k(), DEFAULT_MAX_CONTEXT, &load.examples);
    if examples.is_empty() {
        bail!("no usable examples in {}", data.display());
    }
    println!("plc: {} usable examples ({} skipped for length)", examples.len(), skipped);

    let mut trainer = Trainer::new(icae, tc.clone())?;
    let mut log = TrainLog::create(&dir)?;
    let ckpt_root = dir.join("checkpoints");
    for s in 0..tc.total_steps {
        let report = trainer.finetune_step(&examples)?;
        log.append(&report)?;
        if s % 50 == 0 {
            println!("step {}: loss {:.4}", report.step, report.loss);
        }
        if tc.checkpoint_every > 0 && report.step % tc.checkpoint_every == 0 {
            checkpoint::save_train_state(
                &ckpt_root.join(format!("step{}", report.step)),
                &mut trainer,
                common.seed,
            )?;
        }
    }
    let final_dir = ckpt_root.join("final");
    let id = checkpoint::save_train_state(&final_dir, &mut trainer, common.seed)?;
    write_json(
        &dir.join("reports/finetune.json"),
        &serde_json::json!({
            "checkpoint": final_dir.display().to_string(),
            "model_id": id,
            "steps": tc.total_steps,
            "skipped_for_length": skipped,
        }),
    )?;
    println!("saved {}", final_dir.display());
    Ok(())
}

fn encode(
    common: Common,
    ckpt: PathBuf,
    input: PathBuf,
    k: Option<usize>,
    out: PathBuf,
) -> anyhow::Result<()> {
    let dir = run_dir(&common, "encode")?;
    let (icae, _) = checkpoint::load_model(&ckpt)?;
    if let Some(requested) = k {
        if requested != icae.k() {
            bail!(
                "requested k={requested} but checkpoint {} was trained with k={}",
                ckpt.display(),
                icae.k()
            );
        }
    }
    echo_config(
        &dir,
        serde_json::json!({
            "command": "encode", "seed": common.seed,
            "ckpt": ckpt.display().to_string(),
            "in": input.display().to_string(),
            "k": icae.k(),
            "out": out.display().to_string(),
        }),
    )?;
    let text = std::fs::read_to_string(&input)
        .with_context(|| format!("reading {}", input.display()))?;
    let token_len = tokenize(&text).len();
    let slots = icae.encode_text(&text)?;
    std::fs::write(&out, serialize_slots(&slots)?)
        .with_context(|| format!("writing {}", out.display()))?;
    write_json(
        &dir.join("reports/encode.json"),
        &serde_json::json!({
            "out": out.display().to_string(),
            "k": slots.k(),
            "d_model": slots.d_model(),
            "context_tokens": token_len,
            "compression_ratio": compression_ratio(token_len.max(1), slots.k()),
            "model_id": slots.model_id,
            "context_hash": slots.context_hash,
        }),
    )?;
    println!("wrote {} ({} x {})", out.display(), slots.k(), slots.d_model());
    Ok(())
}

fn load_model_and_slots(ckpt: &Path, slots_path: &Path) -> anyhow::Result<(Icae, icae_core::encoder::MemorySlots)> {
    let (icae, _) = checkpoint::load_model(ckpt)?;
    let bytes = std::fs::read(slots_path)
        .with_context(|| format!("reading {}", slots_path.display()))?;
    let slots = deserialize_slots(&bytes)?;
    Ok((icae, slots))
}

fn restore(common: Common, ckpt: PathBuf, slots_path: PathBuf) -> anyhow::Result<()> {
    let dir = run_dir(&common, "restore")?;
    echo_config(
        &dir,
        serde_json::json!({
            "command": "restore", "seed": common.seed,
            "ckpt": ckpt.display().to_string(),
            "slots": slots_path.display().to_string(),
        }),
    )?;
    let (icae, slots) = load_model_and_slots(&ckpt, &slots_path)?;
    let text = icae.restore(&slots)?;
    write_json(
        &dir.join("reports/restore.json"),
        &serde_json::json!({"text": text, "k": slots.k(), "model_id": slots.model_id}),
    )?;
    println!("{text}");
    Ok(())
}

fn continue_text(
    common: Common,
    ckpt: PathBuf,
    slots_path: PathBuf,
    max_new: usize,
) -> anyhow::Result<()> {
    let dir = run_dir(&common, "continue")?;
    echo_config(
        &dir,
        serde_json::json!({
            "command": "continue", "seed": common.seed,
            "ckpt": ckpt.display().to_string(),
            "slots": slots_path.display().to_string(),
            "max_new": max_new,
        }),
    )?;
    let (icae, slots) = load_model_and_slots(&ckpt, &slots_path)?;
    let text = icae.continue_text(&slots, max_new)?;
    write_json(
        &dir.join("reports/continue.json"),
        &serde_json::json!({"text": text, "k": slots.k(), "max_new": max_new}),
    )?;
    println!("{text}");
    Ok(())
}

fn respond(
    common: Common,
    ckpt: PathBuf,
    slots_path: Option<PathBuf>,
    input: Option<PathBuf>,
    prompt: String,
    max_new: usize,
) -> anyhow::Result<()> {
    let dir = run_dir(&common, "respond")?;
    echo_config(
        &dir,
        serde_json::json!({
            "command": "respond", "seed": common.seed,
            "ckpt": ckpt.display().to_string(),
            "slots": slots_path.as_ref().map(|p| p.display().to_string()),
            "in": input.as_ref().map(|p| p.display().to_string()),
            "prompt": prompt,
            "max_new": max_new,
        }),
    )?;
    let (icae, _) = checkpoint::load_model(&ckpt)?;
    let slots = match (&slots_path, &input) {
        (Some(sp), None) => {
            let bytes = std::fs::read(sp).with_context(|| format!("reading {}", sp.display()))?;
            deserialize_slots(&bytes)?
        }
        (None, Some(inp)) => {
            let text = std::fs::read_to_string(inp)
                .with_context(|| format!("reading {}", inp.display()))?;
            icae.encode_text(&text)?
        }
        _ => bail!("respond needs exactly one of --slots or --in"),
    };
    let answer = icae.respond(&slots, &prompt, max_new)?;
    write_json(
        &dir.join("reports/respond.json"),
        &serde_json::json!({"prompt": prompt, "response": answer, "k": slots.k()}),
    )?;
    println!("{answer}");
    Ok(())
}

fn eval_contexts(
    data: &Path,
    max_context: usize,
) -> anyhow::Result<(Vec<Vec<u32>>, usize)> {
    let texts = read_texts(data)?;
    let mut contexts = Vec::new();
    let mut skipped = 0usize;
    for (_, text) in texts {
        let ids = tokenize(&text).ids().to_vec();
        if ids.is_empty() || ids.len() > max_context {
            skipped += 1;
            continue;
        }
        contexts.push(ids);
    }
    Ok((contexts, skipped))
}

fn eval_ae(common: Common, ckpt: PathBuf, data: PathBuf, k: Option<usize>) -> anyhow::Result<()> {
    let dir = run_dir(&common, "eval-ae")?;
    let (icae, _) = checkpoint::load_model(&ckpt)?;
    let k = k.unwrap_or_else(|| icae.k());
    echo_config(
        &dir,
        serde_json::json!({
            "command": "eval-ae", "seed": common.seed,
            "ckpt": ckpt.display().to_string(),
            "data": data.display().to_string(),
            "k": k,
        }),
    )?;
    let cap = DEFAULT_MAX_CONTEXT.min(icae.config().max_positions.saturating_sub(icae.k()));
    let (contexts, skipped) = eval_contexts(&data, cap)?;
    if skipped > 0 {
        eprintln!("warning: {skipped} documents skipped (empty or longer than {cap} tokens)");
    }
    let report = eval_restoration(&icae, &contexts, k)?;
    write_json(&dir.join("reports/eval_ae.json"), &report)?;
    write_plot_csv(&report, &dir.join("reports/eval_ae.csv"))?;
    println!(
        "bleu median {:.4} | em median {:.4} | loss mean {:.4} over {} contexts",
        report.overall.bleu_median,
        report.overall.em_median,
        report.overall.loss_mean,
        report.overall.count
    );
    Ok(())
}

fn sweep_k(common: Common, ks: String, ckpt_dir: PathBuf, data: PathBuf) -> anyhow::Result<()> {
    let dir = run_dir(&common, "sweep-k")?;
    let parsed: Vec<usize> = ks
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| anyhow!("bad k '{s}': {e}")))
        .collect::<anyhow::Result<_>>()?;
    if parsed.is_empty() {
        bail!("--ks needs at least one memory length");
    }
    echo_config(
        &dir,
        serde_json::json!({
            "command": "sweep-k", "seed": common.seed,
            "ks": parsed,
            "ckpt_dir": ckpt_dir.display().to_string(),
            "data": data.display().to_string(),
        }),
    )?;
    let entries: Vec<(usize, PathBuf)> = parsed
        .iter()
        .map(|&k| (k, ckpt_dir.join(format!("k{k}"))))
        .collect();
    // the longest checkpoint constrains eval length; use the largest k
    let max_k = parsed.iter().copied().max().unwrap();
    let (contexts, skipped) = eval_contexts(&data, DEFAULT_MAX_CONTEXT)?;
    let _ = max_k;
    if skipped > 0 {
        eprintln!("warning: {skipped} documents skipped");
    }
    let sweep = sweep_memory_lengths(&entries, &contexts)?;
    write_json(&dir.join("reports/sweep_k.json"), &sweep)?;
    let mut csv = String::from("bucket,metric,value,k\n");
    for run in &sweep.runs {
        for b in &run.report.buckets {
            csv.push_str(&format!("{},bleu_median,{},{}\n", b.bucket, b.summary.bleu_median, run.k));
            csv.push_str(&format!("{},loss_mean,{},{}\n", b.bucket, b.summary.loss_mean, run.k));
        }
    }
    std::fs::write(dir.join("reports/sweep_k.csv"), csv)?;
    for run in &sweep.runs {
        println!(
            "k={}: bleu median {:.4} loss mean {:.4}",
            run.k, run.report.overall.bleu_median, run.report.overall.loss_mean
        );
    }
    if !sweep.missing.is_empty() {
        for (k, path, err) in &sweep.missing {
            eprintln!("missing k={k}: {path}: {err}");
        }
        bail!("{} of {} checkpoints unavailable", sweep.missing.len(), entries.len());
    }
    Ok(())
}

fn gen_plc(
    common: Common,
    data: PathBuf,
    out: PathBuf,
    stub: bool,
    llm_url: Option<String>,
    llm_model: String,
) -> anyhow::Result<()> {
    let dir = run_dir(&common, "gen-plc")?;
    echo_config(
        &dir,
        serde_json::json!({
            "command": "gen-plc", "seed": common.seed,
            "data": data.display().to_string(),
            "out": out.display().to_string(),
            "stub": stub,
            "llm_url": llm_url,
            "llm_model": llm_model,
        }),
    )?;
    let texts: Vec<String> = read_texts(&data)?.into_iter().map(|(_, t)| t).collect();
    if texts.is_empty() {
        bail!("no documents in {}", data.display());
    }
    let client: Box<dyn LlmClient> = if stub {
        Box::new(icae_core::plc::StubGenerator)
    } else {
        let url = llm_url.ok_or_else(|| anyhow!("--llm-url required without --stub"))?;
        Box::new(HttpLlmClient::new(url, llm_model)?)
    };
    let report = generate_plc(&texts, client.as_ref());
    write_plc(&report.examples, &out)?;
    write_json(
        &dir.join("reports/gen_plc.json"),
        &serde_json::json!({
            "texts": texts.len(),
            "examples": report.examples.len(),
            "parse_failures": report.parse_failures,
            "transport_failures": report.transport_failures,
            "count_warnings": report.count_warnings,
            "out": out.display().to_string(),
        }),
    )?;
    println!(
        "{} examples from {} texts ({} parse failures, {} transport failures)",
        report.examples.len(),
        texts.len(),
        report.parse_failures,
        report.transport_failures
    );
    Ok(())
}

/// One judged case as written to the judgments file.
#[derive(Debug, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub text: String,
    pub prompt: String,
    pub answer_a: String,
    pub answer_b: String,
    pub choice: Option<eval::JudgeChoice>,
    pub reason: String,
    pub raw_response: String,
}

#[allow(clippy::too_many_arguments)]
fn judge(
    common: Common,
    data: Option<PathBuf>,
    summary_baseline: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    out: PathBuf,
    stub_judge: bool,
    judge_url: Option<String>,
    judge_model: String,
    swap_audit: bool,
) -> anyhow::Result<()> {
    let dir = run_dir(&common, "judge")?;
    echo_config(
        &dir,
        serde_json::json!({
            "command": "judge", "seed": common.seed,
            "data": data.as_ref().map(|p| p.display().to_string()),
            "summary_baseline": summary_baseline.as_ref().map(|p| p.display().to_string()),
            "ckpt": ckpt.as_ref().map(|p| p.display().to_string()),
            "out": out.display().to_string(),
            "stub_judge": stub_judge,
            "judge_url": judge_url,
            "judge_model": judge_model,
            "swap_audit": swap_audit,
        }),
    )?;
    let judge_client: Box<dyn LlmClient> = if stub_judge {
        Box::new(StubJudge::tie())
    } else {
        let url = judge_url.ok_or_else(|| anyhow!("--judge-url required without --stub-judge"))?;
        Box::new(HttpLlmClient::new(url, judge_model.clone())?)
    };

    let pairs: Vec<JudgePair> = match (&data, &summary_baseline) {
        (Some(path), None) => {
            let raw = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            raw.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str::<JudgePair>(l).map_err(|e| anyhow!("{e}")))
                .collect::<anyhow::Result<_>>()?
        }
        (None, Some(plc_path)) => {
            let ckpt = ckpt.ok_or_else(|| anyhow!("--summary-baseline needs --ckpt"))?;
            let (icae, _) = checkpoint::load_model(&ckpt)?;
            let load = load_plc(plc_path)?;
            // the summarizer shares the judge transport (or its stub)
            eval::summary_baseline_pairs(&icae, &load.examples, judge_client.as_ref(), 128)?
        }
        _ => bail!("judge needs exactly one of --data or --summary-baseline"),
    };
    if pairs.is_empty() {
        bail!("no cases to judge");
    }

    let mut lines = String::new();
    let mut judgments = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let j = judge_pair(pair, judge_client.as_ref());
        let record = JudgmentRecord {
            text: pair.text.clone(),
            prompt: pair.prompt.clone(),
            answer_a: pair.answer_a.clone(),
            answer_b: pair.answer_b.clone(),
            choice: j.choice,
            reason: j.reason.clone(),
            raw_response: j.raw_response.clone(),
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
        judgments.push(j);
    }
    std::fs::write(&out, lines).with_context(|| format!("writing {}", out.display()))?;
    let t = tally(&judgments)?;
    write_json(&dir.join("reports/judge_tally.json"), &t)?;
    println!(
        "win {:.1}% / lose {:.1}% / tie {:.1}% (on par {:.1}%), {} parse failures",
        t.win_pct, t.lose_pct, t.tie_pct, t.on_par_pct, t.parse_failures
    );
    if swap_audit {
        let audit = position_swap_audit(&pairs, judge_client.as_ref());
        write_json(&dir.join("reports/swap_audit.json"), &audit)?;
        println!(
            "position-swap disagreement rate: {:.3} over {} compared pairs",
            audit.disagreement_rate, audit.compared
        );
    }
    Ok(())
}

fn tally_cmd(common: Common, data: PathBuf, out: Option<PathBuf>) -> anyhow::Result<()> {
    let dir = run_dir(&common, "tally")?;
    echo_config(
        &dir,
        serde_json::json!({
            "command": "tally", "seed": common.seed,
            "data": data.display().to_string(),
            "out": out.as_ref().map(|p| p.display().to_string()),
        }),
    )?;
    let raw = std::fs::read_to_string(&data)
        .with_context(|| format!("reading {}", data.display()))?;
    let mut judgments = Vec::new();
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let record: JudgmentRecord = serde_json::from_str(line)?;
        judgments.push(eval::Judgment {
            choice: record.choice,
            reason: record.reason,
            raw_response: record.raw_response,
        });
    }
    let t = tally(&judgments)?;
    let out_path = out.unwrap_or_else(|| dir.join("reports/tally.json"));
    write_json(&out_path, &t)?;
    println!(
        "win {:.1}% / lose {:.1}% / tie {:.1}% | on par {:.1}% | win/lose {}",
        t.win_pct,
        t.lose_pct,
        t.tie_pct,
        t.on_par_pct,
        t.win_lose_ratio.map_or("n/a".into(), |r| format!("{r:.2}")),
    );
    Ok(())
}
