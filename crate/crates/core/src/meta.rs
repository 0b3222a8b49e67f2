//! First-order meta-training: local adaptation on sampled tasks, weighted
//! aggregation of the resulting parameter updates, and step-decayed
//! fine-tuning.
//!
//! One meta-epoch samples a batch of tasks, trains a private copy of the
//! meta-parameters on each, and moves the meta-parameters toward the task
//! solutions: `θ ← θ + β·Σ w_l·(θ_l − θ)`. Average weighting uses `w_l =
//! 1/L`; inverse-distance weighting sets `w_l ∝ 1/‖θ_l − θ‖²` so tasks that
//! wandered far from the meta-model count less. All aggregation arithmetic
//! runs in f64 and in task-index order, so results do not depend on worker
//! scheduling or task-list order.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::data::SliceSample;
use crate::losses::{loss_on_tape, LossKind, LossParams};
use crate::seed::{splitmix64, stream_seed};
use crate::segnet::{collect_param_grads, forward_on_tape, ParamVector};
use crate::tasks::{sample_meta_batch, stack_samples, SamplingWeights, Task, TaskRule, TaskSource};
use crate::{Error, Result};

/// Squared distances below this floor are treated as the floor when
/// inverting, so a task that leaves the parameters unchanged cannot divide
/// by zero.
pub const IDW_DIST_FLOOR: f64 = 1e-12;

/// How task updates are combined into the meta-update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateRule {
    /// Uniform `1/L` weighting.
    Average,
    /// Weights proportional to `1/‖θ_l − θ‖²`, normalized to sum 1.
    InverseDistance,
}

impl std::fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UpdateRule::Average => "aw",
            UpdateRule::InverseDistance => "idw",
        })
    }
}

impl std::str::FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aw" => Ok(UpdateRule::Average),
            "idw" => Ok(UpdateRule::InverseDistance),
            other => Err(Error::Config(format!("unknown update rule '{other}' (expected aw or idw)"))),
        }
    }
}

/// Full meta-training configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaConfig {
    /// Number of meta-epochs (outer updates).
    pub meta_epochs: usize,
    /// Tasks sampled per meta-epoch.
    pub tasks_per_epoch: usize,
    /// Shots per task.
    pub shots: usize,
    /// Learning rate of the local (inner) trainings.
    pub inner_lr: f64,
    /// Meta step size applied to the aggregated update.
    pub meta_lr: f64,
    /// Full passes over a task's shots during local training.
    pub inner_epochs: usize,
    /// Mini-batch size of the local trainings; 0 means one full-batch step
    /// per pass. Smaller batches take more steps per pass at the same cost.
    pub inner_batch: usize,
    /// L2 weight decay of the local trainings.
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay, applied to the inner lr across
    /// meta-epochs.
    pub lr_decay: f64,
    /// Meta-epochs between decay steps.
    pub decay_period: usize,
    pub update_rule: UpdateRule,
    pub task_rule: TaskRule,
    pub loss: LossKind,
    pub loss_params: LossParams,
    /// Root seed for task sampling.
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            meta_epochs: 100,
            tasks_per_epoch: 5,
            shots: 15,
            inner_lr: 0.01,
            meta_lr: 0.01,
            inner_epochs: 4,
            inner_batch: 1,
            weight_decay: 0.003,
            lr_decay: 0.7,
            decay_period: 2,
            update_rule: UpdateRule::Average,
            task_rule: TaskRule::VolumeBased,
            loss: LossKind::SoftIou,
            loss_params: LossParams::default(),
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_epochs == 0 || self.tasks_per_epoch == 0 || self.shots == 0 {
            return Err(Error::Config(format!(
                "meta-epochs, tasks-per-epoch, and shots must be at least 1, got {}/{}/{}",
                self.meta_epochs, self.tasks_per_epoch, self.shots
            )));
        }
        if !(self.inner_lr > 0.0) || !(self.meta_lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be positive, got inner {} meta {}",
                self.inner_lr, self.meta_lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.decay_period == 0 {
            return Err(Error::Config("decay period must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        self.loss_params.validate()
    }

    /// Local-training settings for one meta-epoch, with the lr decay
    /// applied across meta-epochs.
    pub fn inner_cfg(&self, meta_epoch: usize) -> InnerCfg {
        InnerCfg {
            lr: lr_at_epoch(self.inner_lr, self.lr_decay, self.decay_period, meta_epoch),
            weight_decay: self.weight_decay,
            epochs: self.inner_epochs,
            batch: self.inner_batch,
            shuffle_seed: splitmix64(stream_seed(self.seed, "meta/shuffle") ^ meta_epoch as u64),
            loss: self.loss,
            loss_params: self.loss_params,
        }
    }
}

/// Settings of one local (task-level) training run.
#[derive(Clone, Copy, Debug)]
pub struct InnerCfg {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Mini-batch size; 0 means one full-batch step per epoch.
    pub batch: usize,
    /// Seed of the per-epoch shot shuffle (irrelevant when `batch` is 0).
    pub shuffle_seed: u64,
    pub loss: LossKind,
    pub loss_params: LossParams,
}

/// Step-decayed learning rate: `base · decay^⌊epoch / period⌋`.
pub fn lr_at_epoch(base: f64, decay: f64, period: usize, epoch: usize) -> f64 {
    base * decay.powi((epoch / period) as i32)
}

/// The parameter displacement `θ_l − θ` produced by one task, with its
/// squared length. Differences are stored in f64 so adding a delta back
/// onto `θ` reproduces `θ_l` exactly.
#[derive(Clone, Debug)]
pub struct TaskUpdate {
    pub task_index: usize,
    delta: Vec<f64>,
    pub sq_dist: f64,
}

impl TaskUpdate {
    pub fn between(
        theta: &ParamVector<f32>,
        theta_l: &ParamVector<f32>,
        task_index: usize,
    ) -> Result<Self> {
        if theta.arch() != theta_l.arch() {
            return Err(Error::Dimension(format!(
                "task update between different architectures: {} vs {}",
                theta.arch(),
                theta_l.arch()
            )));
        }
        let delta: Vec<f64> = theta
            .values()
            .iter()
            .zip(theta_l.values())
            .map(|(&t, &l)| l as f64 - t as f64)
            .collect();
        let sq_dist = delta.iter().map(|d| d * d).sum();
        Ok(TaskUpdate { task_index, delta, sq_dist })
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }
}

fn idw_weights_from(sq_dists: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = sq_dists.iter().map(|d| 1.0 / d.max(IDW_DIST_FLOOR)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / total).collect()
}

/// Normalized inverse-distance weights, in the order of `updates`.
pub fn compute_idw_weights(updates: &[TaskUpdate]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::Config("weight computation requires at least one task update".into()));
    }
    Ok(idw_weights_from(&updates.iter().map(|u| u.sq_dist).collect::<Vec<_>>()))
}

/// Shannon entropy `-Σ w·ln w` of a weight vector (0·ln 0 taken as 0).
pub fn weight_entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>()
}

/// Sorted-by-task-index references, so aggregation never depends on the
/// order the task list arrives in.
fn sorted_refs(updates: &[TaskUpdate]) -> Vec<&TaskUpdate> {
    let mut refs: Vec<&TaskUpdate> = updates.iter().collect();
    refs.sort_by_key(|u| u.task_index);
    refs
}

fn combine(
    theta: &ParamVector<f32>,
    ordered: &[&TaskUpdate],
    weights: &[f64],
    beta: f64,
) -> Result<ParamVector<f32>> {
    for u in ordered {
        if u.delta.len() != theta.len() {
            return Err(Error::Dimension(format!(
                "task update has {} elements, parameters have {}",
                u.delta.len(),
                theta.len()
            )));
        }
    }
    let mut out = vec![0.0f32; theta.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (u, w) in ordered.iter().zip(weights) {
            acc += w * u.delta[i];
        }
        *slot = (theta.values()[i] as f64 + beta * acc) as f32;
    }
    ParamVector::from_values(theta.arch(), out)
}

/// Uniformly weighted meta-update: `θ + β·(1/L)·Σ (θ_l − θ)`.
pub fn aggregate_aw(
    theta: &ParamVector<f32>,
    updates: &[TaskUpdate],
    beta: f64,
) -> Result<ParamVector<f32>> {
    if updates.is_empty() {
        return Err(Error::Config("aggregation requires at least one task update".into()));
    }
    let ordered = sorted_refs(updates);
    let weights = vec![1.0 / ordered.len() as f64; ordered.len()];
    combine(theta, &ordered, &weights, beta)
}

/// Inverse-distance weighted meta-update: `θ + β·Σ w_l·(θ_l − θ)` with
/// `w_l` from [`compute_idw_weights`].
pub fn aggregate_idw(
    theta: &ParamVector<f32>,
    updates: &[TaskUpdate],
    beta: f64,
) -> Result<ParamVector<f32>> {
    if updates.is_empty() {
        return Err(Error::Config("aggregation requires at least one task update".into()));
    }
    let ordered = sorted_refs(updates);
    let weights = idw_weights_from(&ordered.iter().map(|u| u.sq_dist).collect::<Vec<_>>());
    combine(theta, &ordered, &weights, beta)
}

/// Loss of one forward pass, without touching the parameters.
pub fn batch_loss(
    theta: &ParamVector<f32>,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
    kind: LossKind,
    params: &LossParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let input = tape.leaf(images.clone())?;
    let (out, _) = forward_on_tape(&mut tape, theta, input)?;
    let loss = loss_on_tape(&mut tape, kind, params, out, masks)?;
    Ok(tape.value(loss).item()? as f64)
}

/// One full-batch gradient step in place. Returns the loss evaluated
/// before the step.
pub fn sgd_epoch(
    theta: &mut ParamVector<f32>,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
    lr: f64,
    weight_decay: f64,
    kind: LossKind,
    params: &LossParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let input = tape.leaf(images.clone())?;
    let (out, unit_vars) = forward_on_tape(&mut tape, theta, input)?;
    let loss = loss_on_tape(&mut tape, kind, params, out, masks)?;
    let value = tape.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    tape.backward(loss)?;
    let grads = collect_param_grads(&tape, &theta.arch(), &unit_vars);
    theta.sgd_step(&grads, lr as f32, weight_decay as f32)?;
    Ok(value)
}

/// One full pass over `shots`: shuffled mini-batches of `batch` samples
/// with one gradient step each, or a single full-batch step when `batch`
/// is 0 or at least the shot count. Returns the size-weighted mean of the
/// pre-step batch losses.
fn epoch_pass(
    phi: &mut ParamVector<f32>,
    shots: &[SliceSample],
    batch: usize,
    shuffle_seed: u64,
    lr: f64,
    weight_decay: f64,
    kind: LossKind,
    params: &LossParams,
) -> Result<f64> {
    let n = shots.len();
    if batch == 0 || batch >= n {
        let (images, masks) = stack_samples(shots)?;
        return sgd_epoch(phi, &images, &masks, lr, weight_decay, kind, params);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    let mut total = 0.0;
    for chunk in order.chunks(batch) {
        let (images, masks) = stack_samples(chunk.iter().map(|&i| &shots[i]))?;
        let loss = sgd_epoch(phi, &images, &masks, lr, weight_decay, kind, params)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Human-readable origin of a task, for error messages and logs.
pub fn task_label(task: &Task) -> String {
    match task.volume_id {
        Some(v) => format!("{}/v{v}", task.source_dataset),
        None => task.source_dataset.clone(),
    }
}

fn diverged(label: &str, epoch: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { .. } | Error::Numeric(_) => {
            Error::Diverged { task: format!("{label}: {err}"), epoch: Some(epoch) }
        }
        other => other,
    }
}

/// Train a private copy of `theta` on one task for `cfg.epochs` passes
/// over its shots. Returns the trained parameters and the mean loss
/// observed. `theta` itself is never modified; with `epochs == 0` the copy
/// is returned untouched and the loss is a single evaluation.
pub fn train_local(
    theta: &ParamVector<f32>,
    task: &Task,
    cfg: &InnerCfg,
) -> Result<(ParamVector<f32>, f64)> {
    let label = task_label(task);
    if task.shots.is_empty() {
        return Err(Error::InsufficientData(format!("task {label} has no shots")));
    }
    // Derived from the task's own label so parallel tasks shuffle
    // independently of scheduling and of each other.
    let shuffle_root = stream_seed(cfg.shuffle_seed, &label);
    let mut local = theta.clone();
    let mut losses = Vec::with_capacity(cfg.epochs.max(1));
    if cfg.epochs == 0 {
        let (images, masks) = stack_samples(&task.shots)?;
        losses.push(batch_loss(&local, &images, &masks, cfg.loss, &cfg.loss_params)?);
    }
    for epoch in 0..cfg.epochs {
        let loss = epoch_pass(
            &mut local,
            &task.shots,
            cfg.batch,
            splitmix64(shuffle_root ^ epoch as u64),
            cfg.lr,
            cfg.weight_decay,
            cfg.loss,
            &cfg.loss_params,
        )
        .map_err(|e| diverged(&label, epoch, e))?;
        losses.push(loss);
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((local, mean))
}

/// One row of the meta-training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over tasks of the per-task mean loss.
    pub mean_loss: f64,
    /// Mean squared parameter displacement of the epoch's tasks.
    pub mean_sq_dist: f64,
    /// Entropy of the aggregation weights actually used.
    pub weight_entropy: f64,
}

/// Run the full meta-training loop from `theta0`.
///
/// Each epoch: sample `tasks_per_epoch` tasks, train each on a private
/// copy of the current meta-parameters (in parallel when a multi-threaded
/// pool is installed; results are identical either way), then aggregate.
pub fn meta_train(
    sources: &[TaskSource],
    weights: &SamplingWeights,
    theta0: &ParamVector<f32>,
    cfg: &MetaConfig,
) -> Result<(ParamVector<f32>, Vec<EpochLog>)> {
    cfg.validate()?;
    let task_root = stream_seed(cfg.seed, "meta/tasks");
    let mut theta = theta0.clone();
    let mut log = Vec::with_capacity(cfg.meta_epochs);
    for epoch in 0..cfg.meta_epochs {
        let tasks = sample_meta_batch(
            sources,
            weights,
            cfg.tasks_per_epoch,
            cfg.shots,
            cfg.task_rule,
            splitmix64(task_root ^ epoch as u64),
        )?;
        let inner = cfg.inner_cfg(epoch);
        let trained: Vec<(ParamVector<f32>, f64)> = tasks
            .par_iter()
            .map(|t| train_local(&theta, t, &inner))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Diverged { task, epoch: inner_epoch } => Error::Diverged {
                    task: format!("{task} (meta-epoch {epoch})"),
                    epoch: inner_epoch,
                },
                other => other,
            })?;
        let updates: Vec<TaskUpdate> = trained
            .iter()
            .enumerate()
            .map(|(i, (local, _))| TaskUpdate::between(&theta, local, i))
            .collect::<Result<_>>()?;

        let l = updates.len() as f64;
        let mean_loss = trained.iter().map(|(_, loss)| loss).sum::<f64>() / l;
        let mean_sq_dist = updates.iter().map(|u| u.sq_dist).sum::<f64>() / l;
        let used_weights = match cfg.update_rule {
            UpdateRule::Average => vec![1.0 / l; updates.len()],
            UpdateRule::InverseDistance => compute_idw_weights(&updates)?,
        };
        theta = match cfg.update_rule {
            UpdateRule::Average => aggregate_aw(&theta, &updates, cfg.meta_lr)?,
            UpdateRule::InverseDistance => aggregate_idw(&theta, &updates, cfg.meta_lr)?,
        };
        log.push(EpochLog {
            epoch,
            mean_loss,
            mean_sq_dist,
            weight_entropy: weight_entropy(&used_weights),
        });
    }
    Ok((theta, log))
}

/// CSV header of the meta-training log.
pub const TRAINING_LOG_HEADER: &str = "epoch,mean_loss,mean_sq_dist,weight_entropy,update_rule,task_rule";

/// Write the per-epoch log as CSV.
pub fn write_training_log(
    path: impl AsRef<Path>,
    update_rule: UpdateRule,
    task_rule: TaskRule,
    rows: &[EpochLog],
) -> Result<()> {
    let mut out = String::from(TRAINING_LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{update_rule},{task_rule}",
            r.epoch, r.mean_loss, r.mean_sq_dist, r.weight_entropy
        );
    }
    std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

/// Fine-tuning settings: step-decayed supervised training on a handful of
/// target shots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    /// Mini-batch size; 0 means one full-batch step per epoch.
    pub batch: usize,
    /// Seed of the per-epoch shot shuffle (irrelevant when `batch` is 0).
    pub seed: u64,
    pub loss: LossKind,
    pub loss_params: LossParams,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 20,
            lr: 0.005,
            weight_decay: 3e-5,
            lr_decay: 0.7,
            decay_period: 2,
            batch: 1,
            seed: 0,
            loss: LossKind::SoftIou,
            loss_params: LossParams::default(),
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("fine-tune lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.decay_period == 0 {
            return Err(Error::Config("decay period must be at least 1".into()));
        }
        self.loss_params.validate()
    }
}

/// Supervised training on the given shots with a step-decayed learning
/// rate. Returns the adapted parameters and the per-epoch losses.
pub fn fine_tune(
    theta: &ParamVector<f32>,
    shots: &[SliceSample],
    cfg: &FineTuneConfig,
) -> Result<(ParamVector<f32>, Vec<f64>)> {
    cfg.validate()?;
    if shots.is_empty() {
        return Err(Error::InsufficientData("fine-tuning requires at least one shot".into()));
    }
    let shuffle_root = stream_seed(cfg.seed, "fine-tune/shuffle");
    let mut phi = theta.clone();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg.lr, cfg.lr_decay, cfg.decay_period, epoch);
        let loss = epoch_pass(
            &mut phi,
            shots,
            cfg.batch,
            splitmix64(shuffle_root ^ epoch as u64),
            lr,
            cfg.weight_decay,
            cfg.loss,
            &cfg.loss_params,
        )
        .map_err(|e| diverged("fine-tune", epoch, e))?;
        losses.push(loss);
    }
    Ok((phi, losses))
}
