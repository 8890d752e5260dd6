//! SGD training with the lookahead inter-task affinity probe.
//!
//! At a probed step the trainer snapshots the shared parameters and, for every
//! source task `i`, forms the hypothetical update `θ_s − η ∇_{θ_s} L_i`. The
//! affinity onto target `j` is `1 − L_j(after) / L_j(before)`, evaluated on
//! one batch with `θ_j` held fixed. The real update is applied afterwards and
//! is never influenced by the probe.
//!
//! Steps are numbered `1..=steps`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TagError};
use crate::model::{sgd_step, Batch, MultiTaskModel, ParamVector, TaskSet, TaskSpec};
use crate::data::BatchSampler;
use crate::rng::derive_seed_labeled;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinitySample {
    pub step: usize,
    pub source: usize,
    pub target: usize,
    /// `None` when the target's pre-step loss is exactly zero.
    pub value: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchSource {
    Train,
    Validation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScheduleMode {
    EveryKSteps { k: usize },
    Window { start: f64, end: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSchedule {
    #[serde(flatten)]
    pub mode: ScheduleMode,
    pub batch_source: BatchSource,
}

impl ProbeSchedule {
    pub fn every(k: usize) -> Self {
        Self {
            mode: ScheduleMode::EveryKSteps { k },
            batch_source: BatchSource::Train,
        }
    }

    pub fn window(start: f64, end: f64) -> Self {
        Self {
            mode: ScheduleMode::Window { start, end },
            batch_source: BatchSource::Train,
        }
    }

    pub fn on(mut self, batch_source: BatchSource) -> Self {
        self.batch_source = batch_source;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ScheduleMode::EveryKSteps { k: 0 } => Err(TagError::invalid("schedule.k", "must be >= 1")),
            ScheduleMode::Window { start, end } if !(0.0 <= start && start < end && end <= 1.0) => Err(
                TagError::invalid("schedule.window", format!("need 0 <= start < end <= 1, got [{start}, {end}]")),
            ),
            _ => Ok(()),
        }
    }

    /// Step filter over a run of `total_steps` steps.
    pub fn filter(&self, total_steps: usize) -> StepFilter {
        match self.mode {
            ScheduleMode::EveryKSteps { k } => StepFilter::EveryK(k),
            ScheduleMode::Window { start, end } => StepFilter::Window {
                start,
                end,
                total_steps,
            },
        }
    }
}

/// Which recorded steps contribute to an average.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StepFilter {
    All,
    /// Keeps steps with `step % k == 0`.
    EveryK(usize),
    /// Keeps steps whose zero-based progress `(step − 1) / total_steps` lies in `[start, end)`.
    Window { start: f64, end: f64, total_steps: usize },
}

impl StepFilter {
    pub fn keeps(&self, step: usize) -> bool {
        match *self {
            StepFilter::All => true,
            StepFilter::EveryK(k) => k > 0 && step.is_multiple_of(k),
            StepFilter::Window {
                start,
                end,
                total_steps,
            } => {
                if step == 0 || total_steps == 0 {
                    return false;
                }
                let progress = (step - 1) as f64 / total_steps as f64;
                progress >= start && progress < end
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `None` disables the probe.
    pub schedule: Option<ProbeSchedule>,
    /// Abort when any task's batch loss exceeds this value.
    pub loss_ceiling: f64,
    /// Keep a copy of all parameters after every step.
    pub record_trajectory: bool,
}

impl TrainConfig {
    pub fn new(eta: f64, steps: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            eta,
            steps,
            batch_size,
            seed,
            schedule: None,
            loss_ceiling: 1e8,
            record_trajectory: false,
        }
    }

    pub fn with_schedule(mut self, schedule: ProbeSchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(TagError::invalid("trainer.eta", format!("must be positive, got {}", self.eta)));
        }
        if self.steps == 0 {
            return Err(TagError::invalid("trainer.steps", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(TagError::invalid("trainer.batch_size", "must be >= 1"));
        }
        if !(self.loss_ceiling > 0.0) {
            return Err(TagError::invalid("trainer.loss_ceiling", "must be positive"));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        Ok(())
    }
}

/// `θ_s − η g_i`; the caller's parameters are untouched.
pub fn lookahead_shared_update(shared: &ParamVector, source_grad: &ParamVector, eta: f64) -> Result<ParamVector> {
    sgd_step(shared, source_grad, eta)
}

/// Affinity of a lookahead update onto one target. `None` if the target's
/// loss before the update is zero.
pub fn lookahead_affinity(
    model: &MultiTaskModel,
    tasks: &TaskSet,
    lookahead_shared: &ParamVector,
    eval_batch: &Batch,
    target: usize,
) -> Result<Option<f64>> {
    let spec = unweighted(tasks.task(target)?);
    let before = model.task_loss(eval_batch, &spec)?;
    let after = model.task_loss_with_shared(lookahead_shared, eval_batch, &spec)?;
    Ok(ratio_affinity(before, after))
}

/// The target's loss weight cancels in the ratio, so targets are evaluated
/// with weight 1.
fn unweighted(spec: &TaskSpec) -> TaskSpec {
    TaskSpec {
        loss_weight: 1.0,
        ..spec.clone()
    }
}

fn ratio_affinity(before: f64, after: f64) -> Option<f64> {
    if before == 0.0 {
        None
    } else {
        Some((before - after) / before)
    }
}

/// Dense `n × n` matrix with optional entries, indexed `[source][target]`.
pub type OptMatrix = Vec<Vec<Option<f64>>>;

/// One probe step. Diagonal entries are computed with the same formula;
/// consumers decide whether to use them.
#[derive(Clone, Debug, PartialEq)]
pub struct StepAffinity {
    pub values: OptMatrix,
    /// Shared-parameter gradient of every source task on the gradient batch.
    pub source_gradients: Vec<ParamVector>,
}

impl StepAffinity {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn is_diagonal(i: usize, j: usize) -> bool {
        i == j
    }
}

/// Affinity matrix for a single step, with gradient and evaluation on the same batch.
pub fn step_affinity_matrix(model: &MultiTaskModel, tasks: &TaskSet, batch: &Batch, eta: f64) -> Result<StepAffinity> {
    step_affinity_matrix_split(model, tasks, batch, batch, eta)
}

/// Affinity with source gradients taken on `grad_batch` and target losses
/// measured on `eval_batch` (validation-mode probing).
pub fn step_affinity_matrix_split(
    model: &MultiTaskModel,
    tasks: &TaskSet,
    grad_batch: &Batch,
    eval_batch: &Batch,
    eta: f64,
) -> Result<StepAffinity> {
    let n = tasks.len();
    if model.n_tasks() != n {
        return Err(TagError::DimensionMismatch {
            what: "model heads vs task set",
            expected: n,
            got: model.n_tasks(),
        });
    }
    let grads = tasks
        .tasks()
        .iter()
        .map(|t| model.shared_gradient(grad_batch, t))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<TaskSpec> = tasks.tasks().iter().map(unweighted).collect();
    let before = targets
        .iter()
        .map(|t| model.task_loss(eval_batch, t))
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![vec![None; n]; n];
    for (i, g) in grads.iter().enumerate() {
        let look = lookahead_shared_update(model.shared(), g, eta)?;
        for (j, spec) in targets.iter().enumerate() {
            let after = model.task_loss_with_shared(&look, eval_batch, spec)?;
            values[i][j] = ratio_affinity(before[j], after);
        }
    }
    Ok(StepAffinity {
        values,
        source_gradients: grads,
    })
}

/// Pairwise cosine similarity of shared gradients. Rows and columns of a task
/// with a zero gradient are missing.
pub fn cosine_step_matrix(gradients: &[ParamVector]) -> Result<OptMatrix> {
    let n = gradients.len();
    if n < 2 {
        return Err(TagError::invalid("gradients", format!("need at least 2 tasks, got {n}")));
    }
    let norms: Vec<f64> = gradients.iter().map(ParamVector::norm).collect();
    let mut m = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let c = if i == j {
                1.0
            } else {
                (gradients[i].dot(&gradients[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            m[i][j] = Some(c);
            m[j][i] = Some(c);
        }
    }
    Ok(m)
}

/// Data pools the trainer samples from.
#[derive(Clone, Debug)]
pub struct TrainingData<'a> {
    pub train: &'a Batch,
    pub validation: &'a Batch,
}

/// Snapshot of all parameters after one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    pub shared: ParamVector,
    pub heads: Vec<ParamVector>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MultiTaskModel,
    /// Canonical order: (step, source, target).
    pub samples: Vec<AffinitySample>,
    /// Gradient cosine similarities recorded at the same steps (symmetric).
    pub cosine_samples: Vec<AffinitySample>,
    /// Pre-update batch loss per task, `[task][step − 1]`.
    pub loss_curves: Vec<Vec<f64>>,
    pub trajectory: Vec<ParamSnapshot>,
    pub probed_steps: Vec<usize>,
}

/// Trains all tasks jointly with the summed loss and records affinity samples
/// on scheduled steps before each real update.
pub fn train_with_probe(
    tasks: &TaskSet,
    model: MultiTaskModel,
    data: &TrainingData<'_>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = tasks.len();
    if model.n_tasks() != n {
        return Err(TagError::DimensionMismatch {
            what: "model heads vs task set",
            expected: n,
            got: model.n_tasks(),
        });
    }
    let mut model = model;
    let mut train_sampler = BatchSampler::new(derive_seed_labeled(config.seed, "train-batches"));
    let mut val_sampler = BatchSampler::new(derive_seed_labeled(config.seed, "validation-batches"));
    let filter = config.schedule.map(|s| s.filter(config.steps));

    let mut samples = Vec::new();
    let mut cosine_samples = Vec::new();
    let mut probed_steps = Vec::new();
    let mut loss_curves = vec![Vec::with_capacity(config.steps); n];
    let mut trajectory = Vec::new();

    for step in 1..=config.steps {
        let batch = train_sampler.draw(data.train, config.batch_size);

        let mut shared_sum = ParamVector::zeros(model.shared().len());
        let mut head_grads = Vec::with_capacity(n);
        for spec in tasks.tasks() {
            let ev = model.evaluate(&batch, spec, true, true)?;
            if !ev.loss.is_finite() || ev.loss > config.loss_ceiling {
                return Err(TagError::Diverged {
                    step,
                    task: spec.id,
                    loss: ev.loss,
                });
            }
            loss_curves[spec.id].push(ev.loss);
            shared_sum.add_assign(ev.shared_grad.as_ref().expect("requested"));
            head_grads.push(ev.head_grad.expect("requested"));
        }

        if let (Some(schedule), Some(filter)) = (config.schedule, filter) {
            if filter.keeps(step) {
                let probe = match schedule.batch_source {
                    BatchSource::Train => step_affinity_matrix(&model, tasks, &batch, config.eta)?,
                    BatchSource::Validation => {
                        let vb = val_sampler.draw(data.validation, config.batch_size);
                        step_affinity_matrix_split(&model, tasks, &batch, &vb, config.eta)?
                    }
                };
                push_matrix(&mut samples, step, &probe.values);
                push_matrix(&mut cosine_samples, step, &cosine_step_matrix_or_single(&probe.source_gradients));
                probed_steps.push(step);
            }
        }

        let shared = sgd_step(model.shared(), &shared_sum, config.eta).map_err(|e| diverged_or(e, step))?;
        let heads = model
            .heads()
            .iter()
            .zip(&head_grads)
            .map(|(h, g)| sgd_step(h, g, config.eta))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| diverged_or(e, step))?;
        model.set_params(shared, heads);
        if config.record_trajectory {
            trajectory.push(ParamSnapshot {
                shared: model.shared().clone(),
                heads: model.heads().to_vec(),
            });
        }
    }

    Ok(TrainOutcome {
        model,
        samples,
        cosine_samples,
        loss_curves,
        trajectory,
        probed_steps,
    })
}

/// Re-runs the probe along a recorded trajectory without training. Batches are
/// replayed from the same seeded streams as [`train_with_probe`], so with the
/// same task set the samples match the original run exactly; with a different
/// task set (for example reweighted losses) only the probe changes.
pub fn reprobe_trajectory(
    tasks: &TaskSet,
    initial: &MultiTaskModel,
    trajectory: &[ParamSnapshot],
    data: &TrainingData<'_>,
    config: &TrainConfig,
) -> Result<Vec<AffinitySample>> {
    config.validate()?;
    let schedule = config
        .schedule
        .ok_or_else(|| TagError::invalid("trainer.schedule", "re-probing needs a schedule"))?;
    if trajectory.len() + 1 < config.steps {
        return Err(TagError::DimensionMismatch {
            what: "trajectory snapshots",
            expected: config.steps,
            got: trajectory.len(),
        });
    }
    let filter = schedule.filter(config.steps);
    let mut train_sampler = BatchSampler::new(derive_seed_labeled(config.seed, "train-batches"));
    let mut val_sampler = BatchSampler::new(derive_seed_labeled(config.seed, "validation-batches"));
    let mut model = initial.clone();
    let mut samples = Vec::new();
    for step in 1..=config.steps {
        if step > 1 {
            let snap = &trajectory[step - 2];
            model.set_params(snap.shared.clone(), snap.heads.clone());
        }
        let batch = train_sampler.draw(data.train, config.batch_size);
        if filter.keeps(step) {
            let probe = match schedule.batch_source {
                BatchSource::Train => step_affinity_matrix(&model, tasks, &batch, config.eta)?,
                BatchSource::Validation => {
                    let vb = val_sampler.draw(data.validation, config.batch_size);
                    step_affinity_matrix_split(&model, tasks, &batch, &vb, config.eta)?
                }
            };
            push_matrix(&mut samples, step, &probe.values);
        }
    }
    Ok(samples)
}

fn diverged_or(e: TagError, step: usize) -> TagError {
    match e {
        TagError::NonFinite(_) => TagError::Diverged {
            step,
            task: usize::MAX,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn cosine_step_matrix_or_single(gradients: &[ParamVector]) -> OptMatrix {
    if gradients.len() < 2 {
        return vec![vec![(gradients[0].norm() > 0.0).then_some(1.0)]];
    }
    cosine_step_matrix(gradients).expect("at least two gradients")
}

fn push_matrix(out: &mut Vec<AffinitySample>, step: usize, m: &OptMatrix) {
    for (source, row) in m.iter().enumerate() {
        for (target, value) in row.iter().enumerate() {
            out.push(AffinitySample {
                step,
                source,
                target,
                value: *value,
            });
        }
    }
}

/// Raw sample dump: header `step,source,target,value`; missing values are empty.
pub fn samples_to_csv(samples: &[AffinitySample]) -> String {
    let mut s = String::from("step,source,target,value\n");
    for x in samples {
        match x.value {
            Some(v) => writeln!(s, "{},{},{},{}", x.step, x.source, x.target, v),
            None => writeln!(s, "{},{},{},", x.step, x.source, x.target),
        }
        .expect("write to string");
    }
    s
}

pub fn samples_from_csv(text: &str) -> Result<Vec<AffinitySample>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("step,source,target,value") => {}
        other => return Err(TagError::Parse(format!("unexpected sample header {other:?}"))),
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(TagError::Parse(format!("line {}: expected 4 fields", i + 2)));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| TagError::Parse(format!("line {}: {e}", i + 2)));
            let value = if f[3].is_empty() {
                None
            } else {
                Some(f[3].parse::<f64>().map_err(|e| TagError::Parse(format!("line {}: {e}", i + 2)))?)
            };
            Ok(AffinitySample {
                step: num(f[0])?,
                source: num(f[1])?,
                target: num(f[2])?,
                value,
            })
        })
        .collect()
}
