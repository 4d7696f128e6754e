//! Experiment specifications, single training runs and learning-rate sweeps.

use std::cmp::Ordering;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::optim::{adam_step_lr, AdamConfig, OptimState};
use super::schedule::Schedule;
use super::step::batch_loss_and_grads;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::derive_seed;
use crate::parallel::Exec;
use crate::tasks::{
    count_query_hits, eval_nll_at_length, pad_with_filler, synthetic_corpus, CorpusWindows,
    RecallTask, TaskInstance, Vocab, BYTE_VOCAB,
};

const INIT_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;
const VAL_STREAM: u64 = 3;
const TIE_STREAM: u64 = 4;

/// Where character-level text comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CorpusSource {
    Synthetic { seed: u64 },
    File { path: PathBuf },
}

impl CorpusSource {
    /// The first `n_bytes` of the source.
    pub fn load(&self, n_bytes: usize) -> Result<Vec<u8>> {
        match self {
            CorpusSource::Synthetic { seed } => Ok(synthetic_corpus(n_bytes, *seed)),
            CorpusSource::File { path } => {
                let mut bytes = std::fs::read(path)?;
                if bytes.len() < n_bytes {
                    return Err(Error::Config(format!(
                        "corpus {} has {} bytes, {n_bytes} required",
                        path.display(),
                        bytes.len()
                    )));
                }
                bytes.truncate(n_bytes);
                Ok(bytes)
            }
        }
    }
}

fn default_eval_instances() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskSpec {
    /// Fresh recall instances every step; validation on a fixed set.
    Recall {
        task: RecallTask,
        #[serde(default)]
        vocab: Vocab,
        /// Prefix every sequence with filler tokens up to this length.
        #[serde(default)]
        pad_to: Option<usize>,
        #[serde(default = "default_eval_instances")]
        eval_instances: usize,
    },
    /// Next-byte prediction on `train_bytes` of text; the following
    /// `val_bytes` are held out.
    CharLm {
        corpus: CorpusSource,
        seq_len: usize,
        train_bytes: usize,
        val_bytes: usize,
    },
}

impl TaskSpec {
    pub fn vocab_size(&self) -> usize {
        match self {
            TaskSpec::Recall { vocab, .. } => vocab.size(),
            TaskSpec::CharLm { .. } => BYTE_VOCAB,
        }
    }

    pub fn metric(&self) -> MetricKind {
        match self {
            TaskSpec::Recall { .. } => MetricKind::Accuracy,
            TaskSpec::CharLm { .. } => MetricKind::Nll,
        }
    }

    /// Held-out text of a character-level task.
    pub fn heldout_text(&self) -> Result<Vec<u8>> {
        match self {
            TaskSpec::CharLm {
                corpus,
                train_bytes,
                val_bytes,
                ..
            } => Ok(corpus
                .load(train_bytes + val_bytes)?
                .split_off(*train_bytes)),
            TaskSpec::Recall { .. } => {
                Err(Error::Config("recall tasks have no held-out text".into()))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Recall {
                task,
                vocab,
                pad_to,
                eval_instances,
            } => {
                if *eval_instances == 0 {
                    return Err(Error::Config("eval_instances must be positive".into()));
                }
                if pad_to.is_some() && !vocab.filler {
                    return Err(Error::Config(
                        "pad_to requires a vocabulary with a filler token".into(),
                    ));
                }
                task.generate(vocab, 0).map(|_| ())
            }
            TaskSpec::CharLm {
                seq_len,
                train_bytes,
                val_bytes,
                ..
            } => {
                if *seq_len < 2 || *train_bytes <= *seq_len || *val_bytes <= *seq_len {
                    return Err(Error::Config(format!(
                        "char-LM needs seq_len ≥ 2 and train/val text longer than seq_len (got {seq_len}, {train_bytes}, {val_bytes})"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Query accuracy on the validation instances; higher is better.
    Accuracy,
    /// Mean held-out NLL at the training length; lower is better.
    Nll,
}

impl MetricKind {
    /// `Greater` when `a` is strictly better than `b`.
    pub fn compare(&self, a: f64, b: f64) -> Ordering {
        match self {
            MetricKind::Accuracy => a.total_cmp(&b),
            MetricKind::Nll => b.total_cmp(&a),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Nll => "nll",
        }
    }
}

/// The learning-rate values swept for the synthetic tasks.
pub const DEFAULT_LRS: [f64; 4] = [
    1e-4,
    4.641_588_833_612_779e-4,
    2.154_434_690_031_884e-3,
    1e-2,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            lrs: DEFAULT_LRS.to_vec(),
            seeds: vec![0, 1, 2],
            steps: 2000,
            batch_size: 64,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "sweep needs at least one learning rate and one seed".into(),
            ));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "steps and batch_size must be positive".into(),
            ));
        }
        if let Some(lr) = self.lrs.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!(
                "learning rate {lr} must be positive"
            )));
        }
        Ok(())
    }

    /// `(lr, seed)` pairs in ascending key order.
    pub fn arms(&self) -> Vec<(f64, u64)> {
        let mut lrs = self.lrs.clone();
        lrs.sort_by(f64::total_cmp);
        lrs.dedup();
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        lrs.iter()
            .flat_map(|&lr| seeds.iter().map(move |&s| (lr, s)))
            .collect()
    }
}

fn default_eval_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub model: ModelConfig,
    pub task: TaskSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    /// Optimiser settings; `lr` is replaced by each sweep value.
    #[serde(default)]
    pub optim: AdamConfig,
    #[serde(default)]
    pub schedule: Schedule,
    /// Validation interval in steps (0 = only at the end).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Stop an arm once its validation metric reaches this value
    /// (accuracy tasks only).
    #[serde(default)]
    pub early_stop: Option<f64>,
    /// Seed of the shared validation data.
    #[serde(default)]
    pub eval_seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.sweep.validate()?;
        self.optim.validate()?;
        if self.model.vocab != self.task.vocab_size() {
            return Err(Error::Config(format!(
                "model vocabulary {} differs from task vocabulary {}",
                self.model.vocab,
                self.task.vocab_size()
            )));
        }
        Ok(())
    }
}

/// Task data shared by all arms of a sweep.
#[derive(Debug, Clone)]
pub enum PreparedTask {
    Recall {
        task: RecallTask,
        vocab: Vocab,
        pad_to: Option<usize>,
        val: Vec<TaskInstance>,
    },
    CharLm {
        windows: CorpusWindows,
        val: Arc<[u8]>,
        seq_len: usize,
    },
}

impl PreparedTask {
    pub fn new(spec: &ExperimentSpec, exec: Exec) -> Result<Self> {
        match &spec.task {
            TaskSpec::Recall {
                task,
                vocab,
                pad_to,
                eval_instances,
            } => {
                let val = recall_batch(
                    *task,
                    vocab,
                    *pad_to,
                    *eval_instances,
                    derive_seed(spec.eval_seed, VAL_STREAM),
                    exec,
                )?;
                Ok(PreparedTask::Recall {
                    task: *task,
                    vocab: *vocab,
                    pad_to: *pad_to,
                    val,
                })
            }
            TaskSpec::CharLm {
                corpus,
                seq_len,
                train_bytes,
                val_bytes,
            } => {
                let mut text = corpus.load(train_bytes + val_bytes)?;
                let val: Arc<[u8]> = Arc::from(text.split_off(*train_bytes));
                let windows = CorpusWindows::new(Arc::from(text), *seq_len, *seq_len)?;
                Ok(PreparedTask::CharLm {
                    windows,
                    val,
                    seq_len: *seq_len,
                })
            }
        }
    }

    /// Training batch for `step` of an arm whose data stream is `data_seed`.
    fn train_batch(
        &self,
        data_seed: u64,
        step: usize,
        batch_size: usize,
        exec: Exec,
    ) -> Result<Vec<TaskInstance>> {
        match self {
            PreparedTask::Recall {
                task,
                vocab,
                pad_to,
                ..
            } => recall_batch(
                *task,
                vocab,
                *pad_to,
                batch_size,
                derive_seed(data_seed, step as u64),
                exec,
            ),
            PreparedTask::CharLm { windows, .. } => {
                let per_epoch = windows.len() / batch_size;
                if per_epoch == 0 {
                    return Err(Error::Config(format!(
                        "{} training windows cannot fill a batch of {batch_size}",
                        windows.len()
                    )));
                }
                let epoch = step / per_epoch;
                let batches =
                    windows.epoch_batches(batch_size, derive_seed(data_seed, epoch as u64));
                Ok(batches[step % per_epoch]
                    .iter()
                    .map(|&i| windows.get(i).expect("index from epoch"))
                    .collect())
            }
        }
    }

    fn evaluate(&self, model: &Model, eval_seed: u64, exec: Exec) -> Result<f64> {
        match self {
            PreparedTask::Recall { vocab, val, .. } => {
                let hits =
                    count_query_hits(model, val, vocab, derive_seed(eval_seed, TIE_STREAM), exec)?;
                Ok(hits.fraction())
            }
            PreparedTask::CharLm { val, seq_len, .. } => {
                eval_nll_at_length(model, val, *seq_len, exec)
            }
        }
    }
}

fn recall_batch(
    task: RecallTask,
    vocab: &Vocab,
    pad_to: Option<usize>,
    count: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<TaskInstance>> {
    let batch = task.batch(vocab, count, seed, exec)?;
    match pad_to {
        Some(len) => batch
            .iter()
            .map(|inst| pad_with_filler(inst, vocab, len))
            .collect(),
        None => Ok(batch),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Validation metric, present on evaluation steps.
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum ArmStatus {
    Completed,
    EarlyStopped { step: usize },
    Failed { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub lr: f64,
    pub seed: u64,
    pub status: ArmStatus,
    pub steps_run: usize,
    pub final_loss: Option<f64>,
    /// Final validation metric (absent for failed arms).
    pub metric: Option<f64>,
    pub history: Vec<MetricRow>,
    #[serde(skip)]
    pub model: Option<Model>,
}

impl ArmResult {
    pub fn failed(&self) -> bool {
        matches!(self.status, ArmStatus::Failed { .. })
    }

    /// Per-step metrics: `step,lr,loss,grad_norm,metric` (metric empty on
    /// steps without validation).
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "step,lr,loss,grad_norm,metric")?;
        for r in &self.history {
            let metric = r.metric.map(|m| m.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.lr, r.loss, r.grad_norm, metric
            )?;
        }
        Ok(())
    }

    pub fn csv_name(&self) -> String {
        format!("arm_lr{:.3e}_seed{}.csv", self.lr, self.seed)
    }
}

/// Train one model at learning rate `lr` with seed `seed`.
///
/// Non-finite losses or gradients end the run with a `Failed` status rather
/// than an error; configuration problems are errors.
pub fn train_arm(
    spec: &ExperimentSpec,
    data: &PreparedTask,
    lr: f64,
    seed: u64,
    exec: Exec,
) -> Result<ArmResult> {
    let steps = spec.sweep.steps;
    let mut model = Model::init(spec.model, derive_seed(seed, INIT_STREAM))?;
    let mut state = OptimState::new(spec.optim.with_lr(lr), &model.params)?;
    let data_seed = derive_seed(seed, DATA_STREAM);
    let mut history = Vec::with_capacity(steps);
    let mut status = ArmStatus::Completed;
    let mut last_metric = None;
    for step in 0..steps {
        let batch = data.train_batch(data_seed, step, spec.sweep.batch_size, exec)?;
        let (loss, grads) = batch_loss_and_grads(&model, &batch, exec)?;
        let step_lr = spec.schedule.lr_at(lr, step, steps);
        if !loss.is_finite() {
            status = ArmStatus::Failed {
                step,
                reason: format!("loss became {loss}"),
            };
            break;
        }
        let info = match adam_step_lr(&mut model.params, grads, &mut state, step_lr) {
            Ok(info) => info,
            Err(e @ Error::NonFiniteGradient { .. }) => {
                status = ArmStatus::Failed {
                    step,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let is_last = step + 1 == steps;
        let eval_now = is_last || (spec.eval_every > 0 && (step + 1) % spec.eval_every == 0);
        let metric = if eval_now {
            let m = data.evaluate(&model, spec.eval_seed, exec)?;
            log::info!(
                "lr {lr:.3e} seed {seed} step {} loss {loss:.4} {} {m:.4}",
                step + 1,
                spec.task.metric().name()
            );
            last_metric = Some(m);
            Some(m)
        } else {
            None
        };
        history.push(MetricRow {
            step: step + 1,
            lr: step_lr,
            loss,
            grad_norm: info.grad_norm,
            metric,
        });
        if let (Some(target), Some(m), MetricKind::Accuracy) =
            (spec.early_stop, metric, spec.task.metric())
        {
            if m >= target && !is_last {
                status = ArmStatus::EarlyStopped { step: step + 1 };
                break;
            }
        }
    }
    let failed = matches!(status, ArmStatus::Failed { .. });
    if !failed && model.params.first_non_finite().is_some() {
        status = ArmStatus::Failed {
            step: history.len(),
            reason: "non-finite parameters".into(),
        };
    }
    let failed = matches!(status, ArmStatus::Failed { .. });
    Ok(ArmResult {
        lr,
        seed,
        steps_run: history.len(),
        final_loss: history.last().map(|r| r.loss),
        metric: if failed { None } else { last_metric },
        history,
        status,
        model: (!failed).then_some(model),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub metric: MetricKind,
    /// Arms in ascending `(lr, seed)` order.
    pub arms: Vec<ArmResult>,
    /// Index into `arms` of the best non-failed arm.
    pub best: Option<usize>,
}

impl SweepReport {
    pub fn best_arm(&self) -> Option<&ArmResult> {
        self.best.map(|i| &self.arms[i])
    }

    /// Best metric among arms with the given learning rate.
    pub fn best_for_lr(&self, lr: f64) -> Option<f64> {
        self.arms
            .iter()
            .filter(|a| a.lr == lr)
            .filter_map(|a| a.metric)
            .max_by(|a, b| self.metric.compare(*a, *b))
    }

    /// Mean final metric over the seeds of each learning rate, in ascending
    /// lr order; `None` where any seed failed.
    pub fn seed_means(&self) -> Vec<(f64, Option<f64>)> {
        let mut out: Vec<(f64, Option<f64>)> = Vec::new();
        for arm in &self.arms {
            if out.last().map(|(lr, _)| *lr) != Some(arm.lr) {
                let metrics: Option<Vec<f64>> = self
                    .arms
                    .iter()
                    .filter(|a| a.lr == arm.lr)
                    .map(|a| a.metric)
                    .collect();
                out.push((
                    arm.lr,
                    metrics.map(|m| m.iter().sum::<f64>() / m.len() as f64),
                ));
            }
        }
        out
    }

    /// `report.json`, one metrics CSV per arm and `best.json` (checkpoint of
    /// the best arm) under `dir`.
    pub fn write_to(&self, dir: &Path, model_cfg: &ModelConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        for arm in &self.arms {
            let f = std::fs::File::create(dir.join(arm.csv_name()))?;
            arm.write_csv(std::io::BufWriter::new(f))?;
        }
        if let Some(model) = self.best_arm().and_then(|a| a.model.as_ref()) {
            model.params.save(model_cfg, dir.join("best.json"))?;
        }
        Ok(())
    }
}

fn pick_best(metric: MetricKind, arms: &[ArmResult]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, arm) in arms.iter().enumerate() {
        let Some(m) = arm.metric.filter(|_| !arm.failed()) else {
            continue;
        };
        if best.is_none_or(|(_, b)| metric.compare(m, b) == Ordering::Greater) {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i)
}

/// Train every `(lr, seed)` arm and select the best by validation metric.
///
/// With more than one arm the arms run under `exec` and each arm is
/// single-threaded; a single arm uses `exec` internally instead. Either way
/// the report is a function of the spec alone.
pub fn run_sweep(spec: &ExperimentSpec, exec: Exec) -> Result<SweepReport> {
    spec.validate()?;
    let data = PreparedTask::new(spec, exec)?;
    let arms = spec.sweep.arms();
    let results: Vec<Result<ArmResult>> = if arms.len() == 1 {
        vec![train_arm(spec, &data, arms[0].0, arms[0].1, exec)]
    } else {
        exec.map(arms.len(), |i| {
            train_arm(spec, &data, arms[i].0, arms[i].1, Exec::Sequential)
        })
    };
    let arms: Vec<ArmResult> = results.into_iter().collect::<Result<_>>()?;
    let metric = spec.task.metric();
    let report = SweepReport {
        name: spec.name.clone(),
        metric,
        best: pick_best(metric, &arms),
        arms,
    };
    if let Some(dir) = &spec.out_dir {
        report.write_to(dir, &spec.model)?;
    }
    Ok(report)
}
