//! Training-based criteria: recall sweeps and length generalization.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use stickbreaking::model::{AttentionVariant, ModelConfig};
use stickbreaking::reference::PositionScheme;
use stickbreaking::tasks::{eval_nll_at_length, RecallTask, Vocab};
use stickbreaking::training::{
    run_sweep, train_arm, AdamConfig, ArmResult, CorpusSource, ExperimentSpec, PreparedTask,
    Schedule, SweepReport, SweepSpec, TaskSpec, DEFAULT_LRS,
};
use stickbreaking::Exec;

use crate::{Criterion, Verdict};

const D_MODEL: usize = 128;
const D_INTER: usize = 4 * D_MODEL;
const INIT_STD: f64 = 0.1;

const RECALL_STEPS: usize = 3000;
const RECALL_BATCH: usize = 64;
const RECALL_BUDGET: Duration = Duration::from_secs(30 * 60);
const RECALL_SEEDS: [u64; 3] = [0, 1, 2];

const LM_SEQ: usize = 128;
const LM_TRAIN_BYTES: usize = 2_000_000;
const LM_EVAL_WINDOWS: usize = 16;
const LM_BATCH: usize = 32;
const LM_EPOCHS: usize = 1;
const LM_LR: f64 = DEFAULT_LRS[2];

pub fn criteria() -> Vec<Criterion> {
    vec![
        Criterion {
            id: 8,
            name: "recall sweeps",
            budget: RECALL_BUDGET,
            run: c8_recall,
        },
        Criterion {
            id: 9,
            name: "length generalization",
            budget: Duration::from_secs(60 * 60),
            run: c9_length,
        },
    ]
}

fn out_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name)
}

fn model(vocab: usize, variant: AttentionVariant, scheme: PositionScheme) -> ModelConfig {
    let mut cfg = ModelConfig::single_head(vocab, D_MODEL, 2, D_INTER, variant);
    cfg.attn.scheme = scheme;
    cfg.init_std = INIT_STD;
    cfg
}

fn recall_spec(
    name: &str,
    task: RecallTask,
    variant: AttentionVariant,
    lrs: Vec<f64>,
    seeds: Vec<u64>,
) -> ExperimentSpec {
    let vocab = Vocab::for_pairs(task.n_kv());
    let scheme = if variant == AttentionVariant::Softmax {
        PositionScheme::rope()
    } else {
        PositionScheme::none()
    };
    ExperimentSpec {
        name: name.to_string(),
        model: model(vocab.size(), variant, scheme),
        task: TaskSpec::Recall {
            task,
            vocab,
            pad_to: None,
            eval_instances: 256,
        },
        sweep: SweepSpec {
            lrs,
            seeds,
            steps: RECALL_STEPS,
            batch_size: RECALL_BATCH,
        },
        optim: AdamConfig::default(),
        schedule: Schedule::Constant,
        eval_every: 100,
        early_stop: Some(0.99),
        eval_seed: 0,
        out_dir: Some(out_dir(name)),
    }
}

fn best_metric(report: &SweepReport) -> f64 {
    report.best_arm().and_then(|a| a.metric).unwrap_or(f64::NAN)
}

/// Arms of one recall sweep that finished before the deadline.
struct Partial {
    label: &'static str,
    total: usize,
    arms: Vec<ArmResult>,
}

impl Partial {
    fn best(&self) -> Option<&ArmResult> {
        self.arms
            .iter()
            .filter(|a| a.metric.is_some())
            .max_by(|a, b| a.metric.unwrap().total_cmp(&b.metric.unwrap()))
    }

    fn accuracy(&self) -> f64 {
        self.best().and_then(|a| a.metric).unwrap_or(f64::NAN)
    }

    fn describe(&self) -> String {
        let ran = format!("{}/{} arms", self.arms.len(), self.total);
        match self.best() {
            Some(b) => format!(
                "{} best {:.4} (lr {:.2e}, seed {}, {} steps; {ran})",
                self.label,
                b.metric.unwrap(),
                b.lr,
                b.seed,
                b.steps_run
            ),
            None => format!("{} no finished arm ({ran})", self.label),
        }
    }
}

/// Seed-major order; within a seed, learning rates nearest the grid's
/// geometric centre come first (larger wins ties).
fn arm_order(spec: &ExperimentSpec) -> Vec<(f64, u64)> {
    let logs: Vec<f64> = spec.sweep.lrs.iter().map(|lr| lr.ln()).collect();
    let centre = logs.iter().sum::<f64>() / logs.len() as f64;
    let key = |lr: f64| ((lr.ln() - centre).abs() * 1e6).round();
    let mut arms = spec.sweep.arms();
    arms.sort_by(|a, b| {
        a.1.cmp(&b.1)
            .then(key(a.0).total_cmp(&key(b.0)))
            .then(b.0.total_cmp(&a.0))
    });
    arms
}

fn c8_recall() -> Verdict {
    let exec = Exec::default();
    let deadline = Instant::now() + RECALL_BUDGET;
    let specs = [
        (
            "sb MQRAR(16)",
            recall_spec(
                "mqrar16_sb",
                RecallTask::Mqrar {
                    n_kv: 16,
                    n_queries: 16,
                },
                AttentionVariant::Sb,
                DEFAULT_LRS.to_vec(),
                RECALL_SEEDS.to_vec(),
            ),
        ),
        (
            "softmax+RoPE MQAR(8)",
            recall_spec(
                "mqar8_softmax_rope",
                RecallTask::Mqar { n_kv: 8 },
                AttentionVariant::Softmax,
                DEFAULT_LRS.to_vec(),
                RECALL_SEEDS.to_vec(),
            ),
        ),
    ];
    let mut prepared = Vec::new();
    for (_, spec) in &specs {
        match PreparedTask::new(spec, exec) {
            Ok(p) => prepared.push(p),
            Err(e) => return Verdict::new(false, e.to_string()),
        }
    }
    let orders: Vec<_> = specs.iter().map(|(_, s)| arm_order(s)).collect();
    let mut partial: Vec<Partial> = specs
        .iter()
        .zip(&orders)
        .map(|((label, _), o)| Partial {
            label,
            total: o.len(),
            arms: Vec::new(),
        })
        .collect();
    // Alternate between the two sweeps.
    for i in 0..orders.iter().map(Vec::len).max().unwrap_or(0) {
        for t in 0..specs.len() {
            let Some(&(lr, seed)) = orders[t].get(i) else {
                continue;
            };
            if Instant::now() >= deadline {
                continue;
            }
            match train_arm(&specs[t].1, &prepared[t], lr, seed, exec) {
                Ok(arm) => partial[t].arms.push(arm),
                Err(e) => return Verdict::new(false, format!("{}: {e}", partial[t].label)),
            }
        }
    }
    let complete = partial.iter().all(|p| p.arms.len() == p.total);
    let (sb_acc, sm_acc) = (partial[0].accuracy(), partial[1].accuracy());

    let trend_lr = partial[0].best().map_or(DEFAULT_LRS[2], |a| a.lr);
    let mut trend = Vec::new();
    for n_kv in [32, 48] {
        if Instant::now() >= deadline {
            trend.push(format!("n_kv={n_kv}: not run"));
            continue;
        }
        let task = RecallTask::Mqrar {
            n_kv,
            n_queries: n_kv,
        };
        let mut accs = Vec::new();
        for (label, variant) in [
            ("sb", AttentionVariant::Sb),
            ("softmax_rope", AttentionVariant::Softmax),
        ] {
            let spec = recall_spec(
                &format!("mqrar{n_kv}_{label}"),
                task,
                variant,
                vec![trend_lr],
                vec![0],
            );
            accs.push(run_sweep(&spec, exec).map_or(f64::NAN, |r| best_metric(&r)));
        }
        trend.push(format!(
            "n_kv={n_kv}: sb {:.3} vs softmax+RoPE {:.3}{}",
            accs[0],
            accs[1],
            if accs[0] >= accs[1] {
                ""
            } else {
                " (trend not observed)"
            }
        ));
    }

    let pass = complete && sb_acc >= 0.95 && sm_acc >= 0.90;
    Verdict::new(
        pass,
        format!(
            "{} (≥ 0.95); {} (≥ 0.90){}; reported trend at lr {trend_lr:.2e}: {}",
            partial[0].describe(),
            partial[1].describe(),
            if complete {
                ""
            } else {
                "; budget exhausted before the grid finished"
            },
            trend.join(", ")
        ),
    )
}

struct LengthCurve {
    label: &'static str,
    /// Seed-mean NLL at each evaluation length.
    mean: Vec<f64>,
    per_seed: Vec<Vec<f64>>,
}

const LM_LENGTHS: [usize; 4] = [LM_SEQ, 2 * LM_SEQ, 4 * LM_SEQ, 8 * LM_SEQ];

fn lm_spec(label: &str, variant: AttentionVariant, scheme: PositionScheme) -> ExperimentSpec {
    let windows = (LM_TRAIN_BYTES - 1) / LM_SEQ;
    ExperimentSpec {
        name: format!("charlm_{label}"),
        model: model(256, variant, scheme),
        task: TaskSpec::CharLm {
            corpus: CorpusSource::Synthetic { seed: 2024 },
            seq_len: LM_SEQ,
            train_bytes: LM_TRAIN_BYTES,
            val_bytes: LM_EVAL_WINDOWS * 8 * LM_SEQ + 1,
        },
        sweep: SweepSpec {
            lrs: vec![LM_LR],
            seeds: RECALL_SEEDS.to_vec(),
            steps: LM_EPOCHS * (windows / LM_BATCH),
            batch_size: LM_BATCH,
        },
        optim: AdamConfig::default().with_weight_decay(0.1),
        schedule: Schedule::warmup_cosine(),
        eval_every: 0,
        early_stop: None,
        eval_seed: 0,
        out_dir: Some(out_dir(&format!("charlm_{label}"))),
    }
}

fn length_curve(
    label: &'static str,
    variant: AttentionVariant,
    scheme: PositionScheme,
) -> Result<LengthCurve, String> {
    let spec = lm_spec(label, variant, scheme);
    let heldout = spec.task.heldout_text().map_err(|e| e.to_string())?;
    let report = run_sweep(&spec, Exec::default()).map_err(|e| e.to_string())?;
    let mut per_seed = Vec::new();
    for arm in &report.arms {
        let model = arm_model(arm)?;
        let nll: Result<Vec<f64>, _> = LM_LENGTHS
            .iter()
            .map(|&l| eval_nll_at_length(model, &heldout, l, Exec::default()))
            .collect();
        per_seed.push(nll.map_err(|e| e.to_string())?);
    }
    let mean = (0..LM_LENGTHS.len())
        .map(|i| per_seed.iter().map(|s| s[i]).sum::<f64>() / per_seed.len() as f64)
        .collect();
    Ok(LengthCurve {
        label,
        mean,
        per_seed,
    })
}

fn arm_model(arm: &ArmResult) -> Result<&stickbreaking::model::Model, String> {
    arm.model.as_ref().ok_or_else(|| {
        format!(
            "arm lr {} seed {} diverged: {:?}",
            arm.lr, arm.seed, arm.status
        )
    })
}

fn c9_length() -> Verdict {
    let runs = [
        ("sb", AttentionVariant::Sb, PositionScheme::none()),
        (
            "softmax_nope",
            AttentionVariant::Softmax,
            PositionScheme::none(),
        ),
        (
            "softmax_rope",
            AttentionVariant::Softmax,
            PositionScheme::rope(),
        ),
    ];
    let mut curves = Vec::new();
    for (label, variant, scheme) in runs {
        match length_curve(label, variant, scheme) {
            Ok(c) => curves.push(c),
            Err(e) => return Verdict::new(false, format!("{label}: {e}")),
        }
    }
    let gap = |c: &LengthCurve| c.mean[LM_LENGTHS.len() - 1] - c.mean[0];
    let sb_ok = gap(&curves[0]) <= 0.02;
    let softmax_gaps = [gap(&curves[1]), gap(&curves[2])];
    let softmax_ok =
        softmax_gaps.iter().all(|&g| g > 0.0) && softmax_gaps.iter().any(|&g| g >= 0.05);
    let table: Vec<String> = curves
        .iter()
        .map(|c| {
            let seeds: Vec<String> = c
                .per_seed
                .iter()
                .map(|s| format!("{:.3}→{:.3}", s[0], s[LM_LENGTHS.len() - 1]))
                .collect();
            format!(
                "{} mean NLL {} (Δ {:+.4}; seeds {})",
                c.label,
                c.mean
                    .iter()
                    .zip(LM_LENGTHS)
                    .map(|(v, l)| format!("{l}:{v:.4}"))
                    .collect::<Vec<_>>()
                    .join(" "),
                gap(c),
                seeds.join(", ")
            )
        })
        .collect();
    Verdict::new(
        sb_ok && softmax_ok,
        format!(
            "sb Δ(1024−128) ≤ 0.02, softmax Δ > 0 with one ≥ 0.05 | {}",
            table.join(" | ")
        ),
    )
}
