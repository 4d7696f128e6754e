use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stickbreaking::model::{AttentionVariant, Model, ModelConfig};
use stickbreaking::reference::PositionKind;
use stickbreaking::tasks::{eval_nll_at_length, pad_with_filler, write_jsonl, RecallTask, Vocab};
use stickbreaking::training::{run_sweep, ArmStatus, ExperimentSpec, TaskSpec};

use crate::run::{load, require, RunContext};
use crate::svg::{line_chart, Series};
use crate::{ConfigError, Outcome};

fn load_spec(config: Option<&Path>, command: &str) -> Result<ExperimentSpec> {
    let spec: ExperimentSpec = load(require(config, command)?)?;
    spec.validate().map_err(|e| ConfigError(e.to_string()))?;
    Ok(spec)
}

pub fn train(ctx: &mut RunContext, config: Option<&Path>) -> Result<Outcome> {
    ctx.require_f64()?;
    let mut spec = load_spec(config, "train")?;
    if let Some(seed) = ctx.seed {
        spec.sweep.seeds = vec![seed];
    }
    spec.out_dir = Some(ctx.out.clone());
    let report = run_sweep(&spec, ctx.exec())?;
    ctx.record("report.json");
    for arm in &report.arms {
        ctx.record(&arm.csv_name());
        let status = match &arm.status {
            ArmStatus::Completed => "completed".to_string(),
            ArmStatus::EarlyStopped { step } => format!("early stop at {step}"),
            ArmStatus::Failed { step, reason } => format!("failed at {step}: {reason}"),
        };
        println!(
            "lr {:.3e} seed {}: {} = {} ({status})",
            arm.lr,
            arm.seed,
            report.metric.name(),
            arm.metric.map_or("-".into(), |m| format!("{m:.4}"))
        );
    }
    match report.best_arm() {
        Some(best) => {
            ctx.record("best.json");
            println!(
                "best: lr {:.3e} seed {} {} {:.4}",
                best.lr,
                best.seed,
                report.metric.name(),
                best.metric.unwrap_or(f64::NAN)
            );
        }
        None => println!("every arm failed"),
    }
    ctx.write_manifest(&spec)?;
    Ok(Outcome::Pass)
}

/// Short name of a model's attention, e.g. `sb`, `softmax_rope`.
pub fn model_label(cfg: &ModelConfig) -> String {
    let variant = match cfg.attn.variant {
        AttentionVariant::Sb => "sb",
        AttentionVariant::SbRemainder => "sb_remainder",
        AttentionVariant::SbRemainderBias => "sb_remainder_bias",
        AttentionVariant::Softmax => "softmax",
    };
    let scheme = match cfg.attn.scheme.kind {
        PositionKind::None if cfg.attn.variant == AttentionVariant::Softmax => "_nope".to_string(),
        PositionKind::None => String::new(),
        PositionKind::Rope if cfg.attn.scheme.rope_scale != 1.0 => {
            format!("_rope_x{}", cfg.attn.scheme.rope_scale)
        }
        PositionKind::Rope => "_rope".to_string(),
        PositionKind::Alibi => "_alibi".to_string(),
    };
    let gn = if cfg.attn.group_norm { "_gn" } else { "" };
    format!("{variant}{scheme}{gn}")
}

#[derive(Serialize)]
struct EvalLengthResolved<'a> {
    spec: &'a ExperimentSpec,
    checkpoints: &'a [PathBuf],
    lengths: &'a [usize],
}

pub fn eval_length(
    ctx: &mut RunContext,
    config: Option<&Path>,
    checkpoints: &[PathBuf],
) -> Result<Outcome> {
    ctx.require_f64()?;
    let spec = load_spec(config, "eval-length")?;
    let TaskSpec::CharLm { seq_len, .. } = spec.task else {
        anyhow::bail!(ConfigError("eval-length needs a char_lm task".into()));
    };
    let lengths: Vec<usize> = [1, 2, 4, 8].iter().map(|m| m * seq_len).collect();
    let heldout = spec.task.heldout_text()?;
    let longest = *lengths.last().expect("four lengths");
    if heldout.len() < longest + 1 {
        anyhow::bail!(ConfigError(format!(
            "held-out text has {} bytes; evaluating at {longest} needs at least {}",
            heldout.len(),
            longest + 1
        )));
    }
    let mut models = Vec::new();
    if checkpoints.is_empty() {
        let model = Model::init(spec.model, ctx.seed.unwrap_or(0))?;
        models.push((
            format!("{} (untrained)", model_label(&model.cfg)),
            "-".to_string(),
            model,
        ));
    }
    for path in checkpoints {
        let model =
            Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        models.push((model_label(&model.cfg), path.display().to_string(), model));
    }
    let mut csv = String::from("model,checkpoint,L_eval,nll\n");
    let mut series = Vec::new();
    for (label, path, model) in &models {
        let mut points = Vec::new();
        for &l in &lengths {
            let nll = eval_nll_at_length(model, &heldout, l, ctx.exec())?;
            println!("{label} L={l}: nll {nll:.5}");
            csv.push_str(&format!("{label},{path},{l},{nll}\n"));
            points.push((l as f64, nll));
        }
        series.push(Series {
            label: label.clone(),
            points,
        });
    }
    ctx.write("eval_length.csv", csv)?;
    let chart = line_chart(
        "Held-out NLL by context length",
        "evaluation length",
        "NLL (nats)",
        &series,
    );
    ctx.write("eval_length.svg", chart)?;
    ctx.write_manifest(&EvalLengthResolved {
        spec: &spec,
        checkpoints,
        lengths: &lengths,
    })?;
    Ok(Outcome::Pass)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenTaskConfig {
    pub task: RecallTask,
    pub vocab: Vocab,
    pub count: usize,
    pub pad_to: Option<usize>,
    pub seed: u64,
}

impl Default for GenTaskConfig {
    fn default() -> Self {
        Self {
            task: RecallTask::Mqrar {
                n_kv: 16,
                n_queries: 16,
            },
            vocab: Vocab::standard(),
            count: 100,
            pad_to: None,
            seed: 0,
        }
    }
}

pub fn gen_task(
    ctx: &mut RunContext,
    config: Option<&Path>,
    count: Option<usize>,
) -> Result<Outcome> {
    let mut cfg: GenTaskConfig = crate::run::load_or_default(config)?;
    if let Some(c) = count {
        cfg.count = c;
    }
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let mut instances = cfg
        .task
        .batch(&cfg.vocab, cfg.count, cfg.seed, ctx.exec())
        .map_err(|e| ConfigError(e.to_string()))?;
    if let Some(len) = cfg.pad_to {
        instances = instances
            .iter()
            .map(|i| pad_with_filler(i, &cfg.vocab, len))
            .collect::<stickbreaking::Result<_>>()
            .map_err(|e| ConfigError(e.to_string()))?;
    }
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &instances)?;
    ctx.write("tasks.jsonl", buf)?;
    ctx.write_manifest(&cfg)?;
    println!("wrote {} instances", instances.len());
    Ok(Outcome::Pass)
}
