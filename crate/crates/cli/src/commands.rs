//! Subcommand bodies. Each writes its artifacts and the resolved
//! configuration into the output directory and returns a JSON summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Stdio;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use eegfm_core::config::RunConfig;
use eegfm_core::eeg_data::{preprocess, read_corpus, synth_generate, write_corpus, EegRecording};
use eegfm_core::finetune::metrics::summary_csv;
use eegfm_core::finetune::probe::{features_of, sample_labels, LinearClassifier};
use eegfm_core::finetune::{
    align_recordings, channel_subset_eval, evaluate_samples, ncm_few_shot, probe_encoder, soup, summarize,
    two_step_finetune, FinetunedModel, MetricReport, Pooling, ProbeModel, SampleClassifier,
};
use eegfm_core::flops::flops_estimate;
use eegfm_core::model::Checkpoint;
use eegfm_core::montage::ElectrodeLayout;
use eegfm_core::optim::lr_curve_csv;
use eegfm_core::pretrain::{embed_sample, peak_lr, pretrain, Sample, StepLog};

use crate::{Cli, Command};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PROBE_FILE: &str = "probe.json";

pub fn run(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<Value> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_config(out, cfg)?;
    match &cli.command {
        Command::Synth => synth(cfg, out),
        Command::Preprocess { input } => preprocess_cmd(cfg, input, out),
        Command::Pretrain { data } => pretrain_cmd(cfg, data, out),
        Command::Embed { checkpoint, data } => embed(cfg, checkpoint, data, out),
        Command::Probe { checkpoint, train, test } => probe(cfg, checkpoint, train, test.as_deref(), out),
        Command::Finetune {
            checkpoint,
            train,
            val,
            test,
            seeds,
        } => {
            let inputs = FinetuneInputs {
                checkpoint,
                train,
                val: val.as_deref(),
                test: test.as_deref(),
            };
            finetune(cfg, &inputs, *seeds, cli.common.parallel, out)
        }
        Command::Soup { checkpoints } => soup_cmd(cfg, checkpoints, out),
        Command::Eval { checkpoint, data, probe } => eval(cfg, checkpoint, data, probe.as_deref(), out),
        Command::Flops => flops(cfg, out),
        Command::LrCurve => lr_curve(cfg, out),
    }
}

/// Applies a run seed to every seeded section.
pub fn apply_seed(cfg: &mut RunConfig, seed: u64) {
    cfg.seed = seed;
    cfg.synth.seed = seed;
    cfg.finetune.seed = seed;
    if let Some(l) = cfg.finetune.lora.as_mut() {
        l.seed = seed;
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(dir.join(CONFIG_FILE), cfg.to_json()?).with_context(|| format!("writing config into {}", dir.display()))
}

fn load_recordings(cfg: &RunConfig, dir: &Path) -> Result<Vec<EegRecording>> {
    let recs = read_corpus(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    if recs.is_empty() {
        bail!("corpus {} holds no recordings", dir.display());
    }
    if cfg.eval.euclidean_alignment {
        return Ok(align_recordings(&recs)?);
    }
    Ok(recs)
}

fn to_samples(cfg: &RunConfig, recs: &[EegRecording]) -> Result<Vec<Sample>> {
    recs.iter()
        .map(|r| Sample::from_recording(r, &cfg.patch).with_context(|| format!("recording {}", r.session_id)))
        .collect()
}

fn load_samples(cfg: &RunConfig, dir: &Path) -> Result<Vec<Sample>> {
    to_samples(cfg, &load_recordings(cfg, dir)?)
}

fn load_checkpoint(cfg: &RunConfig, dir: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if ck.manifest.config.patch_len != cfg.patch.w {
        bail!(
            "checkpoint patch length {} differs from patch.w {}",
            ck.manifest.config.patch_len,
            cfg.patch.w
        );
    }
    Ok(ck)
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let recs = synth_generate(&cfg.synth)?;
    write_corpus(out, &recs)?;
    Ok(json!({"command": "synth", "out": out, "recordings": recs.len()}))
}

fn preprocess_cmd(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Value> {
    let layout = ElectrodeLayout::standard();
    let recs = read_corpus(input)?
        .into_iter()
        .map(|r| match r.positions {
            Some(_) => Ok(r),
            None => {
                let pos = layout.resolve_positions(&r.channel_names)?;
                Ok(r.with_positions(pos)?)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let done = preprocess(recs, &cfg.preprocess)?;
    write_corpus(out, &done.kept)?;
    Ok(json!({
        "command": "preprocess",
        "out": out,
        "kept": done.kept.len(),
        "rejected": done.rejected,
    }))
}

fn pretrain_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Value> {
    let samples = load_samples(cfg, data)?;
    let mut log = String::from("step,lr,primary,secondary,total,grad_norm,wall_time_s\n");
    let mut last: Option<StepLog> = None;
    let state = pretrain(&samples, &cfg.model, &cfg.pretrain, &cfg.optim, cfg.seed, |s| {
        log.push_str(&format!(
            "{},{:e},{},{},{},{},{}\n",
            s.step, s.lr, s.primary, s.secondary, s.total, s.grad_norm, s.wall_time_s
        ));
        if s.step % 10 == 0 {
            eprintln!("step {:>5}  lr {:.3e}  primary {:.4}  secondary {:.4}", s.step, s.lr, s.primary, s.secondary);
        }
        last = Some(*s);
        Ok(())
    })?;
    let ck = Checkpoint::new(cfg.model.clone(), state.params, cfg.seed, state.step, json!({}));
    ck.save(out)?;
    fs::write(out.join("train_log.csv"), log)?;
    Ok(json!({
        "command": "pretrain",
        "out": out,
        "steps": state.step,
        "final": last,
    }))
}

#[derive(Serialize)]
struct EmbeddingRecord<'a> {
    session_id: &'a str,
    subject_id: &'a str,
    label: Option<usize>,
    n_channels: usize,
    n_patches: usize,
    dim: usize,
    tokens: &'a [f32],
    pooled: Option<&'a [f32]>,
}

fn embed(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<Value> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let recs = load_recordings(cfg, data)?;
    let samples = to_samples(cfg, &recs)?;
    let mut lines = String::new();
    for (r, s) in recs.iter().zip(&samples) {
        let e = embed_sample(s, &ck.params, &ck.manifest.config)?;
        let rec = EmbeddingRecord {
            session_id: &r.session_id,
            subject_id: &r.subject_id,
            label: r.label,
            n_channels: s.n_channels,
            n_patches: s.n_patches,
            dim: e.tokens.cols(),
            tokens: e.tokens.data(),
            pooled: e.pooled.as_ref().map(|p| p.data()),
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    fs::write(out.join("embeddings.jsonl"), lines)?;
    Ok(json!({"command": "embed", "out": out, "recordings": samples.len()}))
}

#[derive(Serialize, Deserialize)]
struct ProbeFile {
    pooling: Pooling,
    classifier: LinearClassifier,
}

fn probe(cfg: &RunConfig, checkpoint: &Path, train: &Path, test: Option<&Path>, out: &Path) -> Result<Value> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let train_s = load_samples(cfg, train)?;
    let (model, train_report) = probe_encoder(&train_s, &ck.params, &ck.manifest.config, &cfg.probe)?;
    let test_report = match test {
        Some(t) => Some(evaluate_samples(&model, &load_samples(cfg, t)?)?),
        None => None,
    };
    write_json(
        &out.join(PROBE_FILE),
        &ProbeFile {
            pooling: model.pooling,
            classifier: model.classifier.clone(),
        },
    )?;
    let metrics = json!({"train": train_report, "test": test_report});
    write_json(&out.join(METRICS_FILE), &metrics)?;
    Ok(json!({"command": "probe", "out": out, "metrics": metrics}))
}

struct FinetuneInputs<'a> {
    checkpoint: &'a Path,
    train: &'a Path,
    val: Option<&'a Path>,
    test: Option<&'a Path>,
}

/// Report used to compare seeds: test, else validation, else training.
fn headline(metrics: &Value) -> Result<MetricReport> {
    for key in ["test", "val", "train"] {
        if let Some(v) = metrics.get(key).filter(|v| !v.is_null()) {
            return Ok(serde_json::from_value(v.clone())?);
        }
    }
    bail!("metrics record holds no report")
}

fn finetune_one(cfg: &RunConfig, inputs: &FinetuneInputs, out: &Path) -> Result<Value> {
    let ck = load_checkpoint(cfg, inputs.checkpoint)?;
    let train = load_samples(cfg, inputs.train)?;
    let val = match inputs.val {
        Some(v) => load_samples(cfg, v)?,
        None => Vec::new(),
    };
    let labels = sample_labels(&train)?;
    let n_classes = cfg.probe.classes.max(labels.iter().max().map_or(0, |m| m + 1));
    let mut log = String::from("step,phase,lr,loss,backbone_grad_norm,head_grad_norm,val_loss,lr_reduced\n");
    let outcome = two_step_finetune(&ck.params, &ck.manifest.config, &train, &val, n_classes, &cfg.finetune, |l| {
        log.push_str(&format!(
            "{},{},{:e},{},{},{},{},{}\n",
            l.step,
            serde_json::to_value(l.phase)?.as_str().unwrap_or_default(),
            l.lr,
            l.loss,
            l.backbone_grad_norm,
            l.head_grad_norm,
            l.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            l.lr_reduced
        ));
        Ok(())
    })?;
    let model = outcome.model.merged()?;
    let train_report = evaluate_samples(&model, &train)?;
    let test_report = match inputs.test {
        Some(t) => Some(evaluate_samples(&model, &load_samples(cfg, t)?)?),
        None => None,
    };
    let steps = outcome.logs.len() as u64;
    Checkpoint::new(model.config.clone(), model.params, cfg.finetune.seed, steps, json!({"n_classes": n_classes}))
        .save(out)?;
    fs::write(out.join("finetune_log.csv"), log)?;
    let metrics = json!({"train": train_report, "val": outcome.val_metrics, "test": test_report});
    write_json(&out.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

fn finetune(cfg: &RunConfig, inputs: &FinetuneInputs, seeds: usize, parallel: usize, out: &Path) -> Result<Value> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    if seeds == 1 {
        let metrics = finetune_one(cfg, inputs, out)?;
        return Ok(json!({"command": "finetune", "out": out, "metrics": metrics}));
    }
    let runs: Vec<(u64, PathBuf)> = (0..seeds as u64)
        .map(|i| {
            let s = cfg.seed.wrapping_add(i);
            (s, out.join(format!("seed-{s}")))
        })
        .collect();
    if parallel > 1 {
        run_children(cfg, inputs, &runs, parallel, out)?;
    } else {
        for (s, dir) in &runs {
            let mut c = cfg.clone();
            apply_seed(&mut c, *s);
            c.out = Some(dir.display().to_string());
            fs::create_dir_all(dir)?;
            write_config(dir, &c)?;
            finetune_one(&c, inputs, dir)?;
        }
    }
    let reports = runs
        .iter()
        .map(|(_, dir)| {
            let text = fs::read_to_string(dir.join(METRICS_FILE))?;
            headline(&serde_json::from_str(&text)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&reports);
    fs::write(out.join("summary.csv"), summary_csv(&summary))?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(json!({"command": "finetune", "out": out, "seeds": runs.iter().map(|r| r.0).collect::<Vec<_>>(), "summary": summary}))
}

/// One child process per seed, at most `parallel` alive at a time. Each
/// child reads the parent's resolved config.
fn run_children(cfg: &RunConfig, inputs: &FinetuneInputs, runs: &[(u64, PathBuf)], parallel: usize, out: &Path) -> Result<()> {
    let exe = std::env::current_exe()?;
    let config = out.join(CONFIG_FILE);
    write_config(out, cfg)?;
    for chunk in runs.chunks(parallel) {
        let mut children = Vec::new();
        for (s, dir) in chunk {
            let mut cmd = std::process::Command::new(&exe);
            cmd.arg("--config")
                .arg(&config)
                .arg("--seed")
                .arg(s.to_string())
                .arg("--out")
                .arg(dir)
                .arg("finetune")
                .arg("--checkpoint")
                .arg(inputs.checkpoint)
                .arg("--train")
                .arg(inputs.train);
            if let Some(v) = inputs.val {
                cmd.arg("--val").arg(v);
            }
            if let Some(t) = inputs.test {
                cmd.arg("--test").arg(t);
            }
            cmd.stdout(Stdio::null()).stderr(Stdio::piped());
            children.push((*s, cmd.spawn().context("spawning fine-tuning child")?));
        }
        for (s, child) in children {
            let res = child.wait_with_output()?;
            if !res.status.success() {
                bail!("seed {s} failed: {}", String::from_utf8_lossy(&res.stderr).trim());
            }
        }
    }
    Ok(())
}

fn soup_cmd(cfg: &RunConfig, paths: &[PathBuf], out: &Path) -> Result<Value> {
    let cks = paths
        .iter()
        .map(|p| load_checkpoint(cfg, p))
        .collect::<Result<Vec<_>>>()?;
    let souped = soup(&cks)?;
    souped.save(out)?;
    Ok(json!({"command": "soup", "out": out, "ingredients": paths}))
}

fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, probe: Option<&Path>, out: &Path) -> Result<Value> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let recs = load_recordings(cfg, data)?;
    let model_cfg = ck.manifest.config.clone();
    let classifier: Option<Box<dyn SampleClassifier>> = match probe {
        Some(dir) => {
            let text = fs::read_to_string(dir.join(PROBE_FILE)).with_context(|| format!("reading probe {}", dir.display()))?;
            let pf: ProbeFile = serde_json::from_str(&text)?;
            Some(Box::new(ProbeModel {
                encoder: ck.params.clone(),
                config: model_cfg.clone(),
                pooling: pf.pooling,
                classifier: pf.classifier,
            }))
        }
        None => match ck.params.get("head.bias") {
            Some(bias) => Some(Box::new(FinetunedModel {
                params: ck.params.clone(),
                config: model_cfg.clone(),
                lora_scale: 1.0,
                n_classes: bias.cols(),
            })),
            None => None,
        },
    };
    if classifier.is_none() && cfg.eval.ncm_shots == 0 {
        bail!("checkpoint has no classifier head; pass --probe or set eval.ncm_shots");
    }
    let mut metrics = serde_json::Map::new();
    if let Some(model) = &classifier {
        let report = if cfg.eval.keep_channels.is_empty() {
            evaluate_samples(model.as_ref(), &to_samples(cfg, &recs)?)?
        } else {
            channel_subset_eval(model.as_ref(), &recs, &cfg.eval.keep_channels, &cfg.patch)?
        };
        metrics.insert("classifier".into(), serde_json::to_value(report)?);
    }
    if cfg.eval.ncm_shots > 0 {
        let samples = to_samples(cfg, &recs)?;
        let labels = sample_labels(&samples)?;
        let feats = features_of(&samples, &ck.params, &model_cfg, cfg.probe.pooling)?;
        let ncm = ncm_few_shot(&feats, &labels, cfg.eval.ncm_shots, cfg.eval.ncm_runs, cfg.seed)?;
        metrics.insert("ncm".into(), serde_json::to_value(ncm)?);
    }
    let metrics = Value::Object(metrics);
    write_json(&out.join(METRICS_FILE), &metrics)?;
    Ok(json!({"command": "eval", "out": out, "metrics": metrics}))
}

fn flops(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let est = flops_estimate(&cfg.flops)?;
    let record = json!({"inputs": cfg.flops, "estimate": est});
    write_json(&out.join("flops.json"), &record)?;
    Ok(json!({"command": "flops", "out": out, "estimate": est}))
}

fn lr_curve(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let peak = peak_lr(&cfg.model, &cfg.pretrain, &cfg.optim)?;
    let csv = lr_curve_csv(&cfg.schedule, peak)?;
    fs::write(out.join("lr_curve.csv"), csv)?;
    Ok(json!({"command": "lr-curve", "out": out, "peak_lr": peak, "steps": cfg.schedule.horizon()}))
}
