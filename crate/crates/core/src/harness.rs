//! Experiment orchestration: the fine-tune/evaluate protocol with its
//! baselines, pooled supervised training, the inter-dataset distance
//! heatmap, and the ablation grid.
//!
//! The protocol holds one target dataset out, splits its volumes into a
//! fine-tuning pool and a test pool, and compares initializations: a fresh
//! random one, one transfer-trained on the pooled sources, and
//! meta-trained ones. Every method starts from the same random parameters
//! and fine-tunes on the same shot selections, so differences come from
//! the initialization alone.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, SliceSample};
use crate::losses::{eval_iou, LossKind, LossParams};
use crate::meta::{
    fine_tune, lr_at_epoch, meta_train, sgd_epoch, FineTuneConfig, MetaConfig, UpdateRule,
};
use crate::seed::stream_seed;
use crate::segnet::{build, forward, ArchDescriptor, ParamVector};
use crate::tasks::{compute_sampling_weights, sample_standard, TaskRule, TaskSource};
use crate::{Error, Result};

/// Initialization strategies compared by the protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    RandomInit,
    Transfer,
    MetaAw,
    MetaIdw,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::RandomInit, Method::Transfer, Method::MetaAw, Method::MetaIdw];
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::RandomInit => "random-init",
            Method::Transfer => "transfer",
            Method::MetaAw => "meta-aw",
            Method::MetaIdw => "meta-idw",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-init" => Ok(Method::RandomInit),
            "transfer" => Ok(Method::Transfer),
            "meta-aw" => Ok(Method::MetaAw),
            "meta-idw" => Ok(Method::MetaIdw),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected random-init, transfer, meta-aw, or meta-idw)"
            ))),
        }
    }
}

/// Number of fine-tuning shots: a fixed count or the whole pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShotSpec {
    Count(usize),
    All,
}

impl std::fmt::Display for ShotSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShotSpec::Count(k) => write!(f, "{k}"),
            ShotSpec::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for ShotSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(ShotSpec::All);
        }
        let k: usize = s
            .parse()
            .map_err(|_| Error::Config(format!("shots must be a count or 'all', got '{s}'")))?;
        if k == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        Ok(ShotSpec::Count(k))
    }
}

/// Outcome of one method under the protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    /// Method tag, e.g. "random-init" or a checkpoint name.
    pub method: String,
    /// Task rule used by meta-training, "-" for non-meta methods.
    pub task_rule: String,
    /// Update rule used by meta-training, "-" for non-meta methods.
    pub update_rule: String,
    /// Test IoU (percent) of each fine-tuning selection.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pooled supervised training settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PooledCfg {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Multiplicative lr decay across epochs (1.0 disables it).
    pub lr_decay: f64,
    pub decay_period: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub loss_params: LossParams,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for PooledCfg {
    fn default() -> Self {
        PooledCfg {
            epochs: 20,
            lr: 0.001,
            weight_decay: 3e-5,
            lr_decay: 1.0,
            decay_period: 2,
            batch_size: 32,
            loss: LossKind::SoftIou,
            loss_params: LossParams::default(),
            seed: 0,
        }
    }
}

/// Mini-batched supervised training over a pooled slice set. Returns the
/// trained parameters and the per-epoch mean losses.
pub fn train_pooled(
    theta0: &ParamVector<f32>,
    samples: &[SliceSample],
    cfg: &PooledCfg,
) -> Result<(ParamVector<f32>, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("pooled training requires at least one slice".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut theta = theta0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = lr_at_epoch(cfg.lr, cfg.lr_decay, cfg.decay_period, epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SliceSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (images, masks) = crate::tasks::stack_samples(batch.into_iter())?;
            epoch_loss += sgd_epoch(
                &mut theta,
                &images,
                &masks,
                lr,
                cfg.weight_decay,
                cfg.loss,
                &cfg.loss_params,
            )?;
            batches += 1;
        }
        losses.push(epoch_loss / batches as f64);
    }
    Ok((theta, losses))
}

/// All eligible slices of every dataset not in the target family.
pub fn pooled_source_samples(datasets: &[Dataset], target_family: &str) -> Result<Vec<SliceSample>> {
    let mut samples = Vec::new();
    for ds in datasets.iter().filter(|d| d.family != target_family) {
        for vol in &ds.volumes {
            for slice in ds.eligible_slices(vol) {
                samples.push(vol.sample(slice)?);
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no source slices remain after excluding family '{target_family}'"
        )));
    }
    Ok(samples)
}

/// Supervised baseline trained on all source slices pooled together.
pub fn train_transfer_baseline(
    datasets: &[Dataset],
    target_family: &str,
    theta0: &ParamVector<f32>,
    cfg: &PooledCfg,
) -> Result<(ParamVector<f32>, Vec<f64>)> {
    let samples = pooled_source_samples(datasets, target_family)?;
    train_pooled(theta0, &samples, cfg)
}

/// Mean evaluation IoU (percent) over all samples, computed in batches.
pub fn evaluate_on(
    theta: &ParamVector<f32>,
    samples: &[SliceSample],
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("evaluation requires at least one slice".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size) {
        let (images, masks) = crate::tasks::stack_samples(chunk.iter())?;
        let pred = forward(theta, &images)?;
        total += eval_iou(&pred, &masks, 0.5)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Split a dataset's volumes into a fine-tuning pool and a test pool
/// (half each, shuffled by `seed`). The halves share the id and metadata
/// of the original dataset but hold disjoint volumes.
pub fn split_target(target: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = target.volumes.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "target dataset {} has {n} volumes; need at least 2 to split",
            target.id
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = n / 2;
    let pick = |idx: &[usize]| Dataset {
        id: target.id.clone(),
        family: target.family.clone(),
        z: target.z,
        threshold: target.threshold,
        volumes: idx.iter().map(|&i| target.volumes[i].clone()).collect(),
    };
    let fine_tune_pool = pick(&order[..cut]);
    let test_pool = pick(&order[cut..]);

    let fine_ids: std::collections::BTreeSet<u32> =
        fine_tune_pool.volumes.iter().map(|v| v.volume_id).collect();
    if test_pool.volumes.iter().any(|v| fine_ids.contains(&v.volume_id)) {
        return Err(Error::Protocol(format!(
            "fine-tune and test pools of {} share a volume id",
            target.id
        )));
    }
    Ok((fine_tune_pool, test_pool))
}

fn eligible_samples(ds: &Dataset) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for vol in &ds.volumes {
        for slice in ds.eligible_slices(vol) {
            out.push(vol.sample(slice)?);
        }
    }
    Ok(out)
}

/// Everything shared by the protocol and the ablation grid: source
/// datasets (target family excluded), their sampling weights, the target's
/// fine-tune pool, and the test slices.
pub struct ExperimentContext {
    pub sources: Vec<Dataset>,
    pub weights: crate::tasks::SamplingWeights,
    pub fine_tune_pool: Dataset,
    pub test_samples: Vec<SliceSample>,
}

impl ExperimentContext {
    pub fn prepare(datasets: &[Dataset], target_id: &str, split_seed: u64) -> Result<Self> {
        let target = datasets
            .iter()
            .find(|d| d.id == target_id)
            .ok_or_else(|| Error::Config(format!("target dataset '{target_id}' not found")))?;
        let sources: Vec<Dataset> =
            datasets.iter().filter(|d| d.family != target.family).cloned().collect();
        if sources.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no source datasets remain after excluding family '{}'",
                target.family
            )));
        }
        let weights = compute_sampling_weights(&sources)?;
        let (fine_tune_pool, test_pool) = split_target(target, split_seed)?;
        let test_samples = eligible_samples(&test_pool)?;
        if test_samples.is_empty() {
            return Err(Error::InsufficientData(format!(
                "test pool of {} has no eligible slices",
                target.id
            )));
        }
        Ok(ExperimentContext { sources, weights, fine_tune_pool, test_samples })
    }

    /// Draw fine-tuning shots from the pool: a seeded selection of
    /// `Count(k)` distinct eligible slices, or every eligible slice.
    pub fn select_shots(&self, spec: ShotSpec, seed: u64) -> Result<Vec<SliceSample>> {
        let shots = match spec {
            ShotSpec::Count(k) => {
                let src = TaskSource::new(&self.fine_tune_pool);
                sample_standard(&src, k, seed)?.shots
            }
            ShotSpec::All => eligible_samples(&self.fine_tune_pool)?,
        };
        let pool_ids: std::collections::BTreeSet<u32> =
            self.fine_tune_pool.volumes.iter().map(|v| v.volume_id).collect();
        if shots.iter().any(|s| !pool_ids.contains(&s.volume_id)) {
            return Err(Error::Protocol(
                "a fine-tuning shot came from outside the fine-tune pool".into(),
            ));
        }
        Ok(shots)
    }
}

/// Full plan for one protocol run.
#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub arch: ArchDescriptor,
    pub methods: Vec<Method>,
    /// Meta-training settings; the update rule is overridden per method.
    pub meta: MetaConfig,
    /// Transfer-baseline training settings.
    pub transfer: PooledCfg,
    pub fine_tune: FineTuneConfig,
    pub shots: ShotSpec,
    /// Number of independent fine-tuning selections.
    pub selections: usize,
    pub eval_batch: usize,
    /// Root seed for init, split, and selections.
    pub seed: u64,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            arch: ArchDescriptor::default(),
            methods: Method::ALL.to_vec(),
            meta: MetaConfig::default(),
            transfer: PooledCfg::default(),
            fine_tune: FineTuneConfig::default(),
            shots: ShotSpec::Count(15),
            selections: 5,
            eval_batch: 64,
            seed: 0,
        }
    }
}

fn initialize_method(
    method: Method,
    theta0: &ParamVector<f32>,
    ctx: &ExperimentContext,
    plan: &ExperimentPlan,
) -> Result<ParamVector<f32>> {
    match method {
        Method::RandomInit => Ok(theta0.clone()),
        Method::Transfer => {
            let family = &ctx.fine_tune_pool.family;
            Ok(train_transfer_baseline(&ctx.sources, family, theta0, &plan.transfer)?.0)
        }
        Method::MetaAw | Method::MetaIdw => {
            let rule = if method == Method::MetaAw {
                UpdateRule::Average
            } else {
                UpdateRule::InverseDistance
            };
            let cfg = MetaConfig { update_rule: rule, ..plan.meta };
            let src: Vec<TaskSource> = ctx.sources.iter().map(TaskSource::new).collect();
            Ok(meta_train(&src, &ctx.weights, theta0, &cfg)?.0)
        }
    }
}

/// Fine-tune an initialization on one shot selection and evaluate it on
/// the test pool. `sel_seed` identifies the selection; it only drives the
/// order in which the shots are visited.
pub fn adapt_and_evaluate(
    init: &ParamVector<f32>,
    shots: &[SliceSample],
    sel_seed: u64,
    ctx: &ExperimentContext,
    plan: &ExperimentPlan,
) -> Result<f64> {
    let adapted = match plan.shots {
        ShotSpec::All => {
            // The whole pool can be large; train it mini-batched with the
            // fine-tuning schedule.
            let cfg = PooledCfg {
                epochs: plan.fine_tune.epochs,
                lr: plan.fine_tune.lr,
                weight_decay: plan.fine_tune.weight_decay,
                lr_decay: plan.fine_tune.lr_decay,
                decay_period: plan.fine_tune.decay_period,
                batch_size: plan.transfer.batch_size,
                loss: plan.fine_tune.loss,
                loss_params: plan.fine_tune.loss_params,
                seed: stream_seed(sel_seed, "protocol/full-data"),
            };
            train_pooled(init, shots, &cfg)?.0
        }
        ShotSpec::Count(_) => {
            let cfg = FineTuneConfig { seed: sel_seed, ..plan.fine_tune };
            fine_tune(init, shots, &cfg)?.0
        }
    };
    evaluate_on(&adapted, &ctx.test_samples, plan.eval_batch)
}

/// Run the protocol: initialize per method, fine-tune on `selections`
/// independent shot draws (shared across methods), evaluate each on the
/// held-out test pool.
pub fn run_protocol(
    datasets: &[Dataset],
    target_id: &str,
    plan: &ExperimentPlan,
) -> Result<Vec<ExperimentResult>> {
    if plan.selections == 0 {
        return Err(Error::Config("protocol needs at least one selection".into()));
    }
    let ctx = ExperimentContext::prepare(datasets, target_id, stream_seed(plan.seed, "protocol/split"))?;
    let theta0: ParamVector<f32> = build(plan.arch, stream_seed(plan.seed, "init"))?;
    let selection_seeds: Vec<u64> = (0..plan.selections)
        .map(|i| stream_seed(plan.seed, &format!("protocol/select/{i}")))
        .collect();

    let mut results = Vec::with_capacity(plan.methods.len());
    for &method in &plan.methods {
        let init = initialize_method(method, &theta0, &ctx, plan)?;
        let mut per_seed = Vec::with_capacity(plan.selections);
        for &sel_seed in &selection_seeds {
            let shots = ctx.select_shots(plan.shots, sel_seed)?;
            per_seed.push(adapt_and_evaluate(&init, &shots, sel_seed, &ctx, plan)?);
        }
        let (mean, std) = mean_std(&per_seed);
        let (task_rule, update_rule) = match method {
            Method::MetaAw => (plan.meta.task_rule.to_string(), "aw".to_string()),
            Method::MetaIdw => (plan.meta.task_rule.to_string(), "idw".to_string()),
            _ => ("-".to_string(), "-".to_string()),
        };
        results.push(ExperimentResult {
            method: method.to_string(),
            task_rule,
            update_rule,
            per_seed,
            mean,
            std,
        });
    }
    Ok(results)
}

/// CSV header of protocol results.
pub const RESULTS_HEADER: &str = "method,task_rule,update_rule,seed,iou";

/// Write per-selection results as CSV, one row per (method, selection).
pub fn write_results_csv(path: impl AsRef<Path>, results: &[ExperimentResult]) -> Result<()> {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in results {
        for (seed, iou) in r.per_seed.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{seed},{iou}", r.method, r.task_rule, r.update_rule);
        }
    }
    std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

/// Pairwise mean distances between datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub ids: Vec<String>,
    /// Row-major `n x n` distances.
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n() + j]
    }
}

/// Mean pixel-space Euclidean distance between random slice pairs of every
/// dataset pair. Inputs must already be at a common resolution (and
/// normalized, if comparability across intensity scales is wanted). The
/// diagonal is zero by definition; off-diagonal cells average the draws of
/// both orientations, so the matrix is exactly symmetric.
pub fn distance_heatmap(
    datasets: &[Dataset],
    pairs_per_cell: usize,
    seed: u64,
) -> Result<DistanceMatrix> {
    if datasets.len() < 2 {
        return Err(Error::Config(format!(
            "heatmap needs at least 2 datasets, got {}",
            datasets.len()
        )));
    }
    if pairs_per_cell == 0 {
        return Err(Error::Config("pairs-per-cell must be at least 1".into()));
    }
    let mut dims: Option<(usize, usize)> = None;
    for ds in datasets {
        if ds.volumes.is_empty() {
            return Err(Error::InsufficientData(format!("dataset {} has no volumes", ds.id)));
        }
        for v in &ds.volumes {
            let (_, h, w) = v.dims();
            match dims {
                None => dims = Some((h, w)),
                Some(prev) if prev != (h, w) => {
                    return Err(Error::Dimension(format!(
                        "heatmap needs a common resolution, got {h}x{w} and {}x{}",
                        prev.0, prev.1
                    )))
                }
                _ => {}
            }
        }
    }

    let n = datasets.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |ds: &Dataset| -> Result<SliceSample> {
        let v = &ds.volumes[rng.gen_range(0..ds.volumes.len())];
        let (depth, _, _) = v.dims();
        v.sample(rng.gen_range(0..depth))
    };

    let mut cells = vec![0.0f64; n * n];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let mut total = 0.0;
            for _ in 0..pairs_per_cell {
                let xa = draw(&datasets[a])?;
                let xb = draw(&datasets[b])?;
                let sq: f64 = xa
                    .image
                    .data()
                    .iter()
                    .zip(xb.image.data())
                    .map(|(p, q)| {
                        let d = *p as f64 - *q as f64;
                        d * d
                    })
                    .sum();
                total += sq.sqrt();
            }
            cells[a * n + b] = total / pairs_per_cell as f64;
        }
    }

    let mut values = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (cells[i * n + j] + cells[j * n + i]);
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(DistanceMatrix { ids: datasets.iter().map(|d| d.id.clone()).collect(), values })
}

/// Write the distance matrix as CSV: header row of ids, one labeled row
/// per dataset.
pub fn write_heatmap_csv(path: impl AsRef<Path>, m: &DistanceMatrix) -> Result<()> {
    let mut out = String::from("dataset");
    for id in &m.ids {
        let _ = write!(out, ",{id}");
    }
    out.push('\n');
    for (i, id) in m.ids.iter().enumerate() {
        let _ = write!(out, "{id}");
        for j in 0..m.n() {
            let _ = write!(out, ",{}", m.get(i, j));
        }
        out.push('\n');
    }
    std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

/// Write the distance matrix as a binary 8-bit PGM image, min-max scaled.
pub fn write_heatmap_pgm(path: impl AsRef<Path>, m: &DistanceMatrix) -> Result<()> {
    let n = m.n();
    let lo = m.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = m.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{n} {n}\n255\n").into_bytes();
    for v in &m.values {
        let scaled = if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
        bytes.push(scaled);
    }
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

/// One configuration of the ablation grid with its outcome.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub update_rule: UpdateRule,
    pub task_rule: TaskRule,
    pub loss: LossKind,
    /// Mean task loss of the final meta-epoch.
    pub final_mean_loss: f64,
    pub mean_iou: f64,
    pub std_iou: f64,
}

/// CSV header of the ablation grid.
pub const ABLATION_HEADER: &str = "update_rule,task_rule,loss,final_mean_loss,mean_iou,std_iou";

/// Run every (update rule x task rule x loss) combination: meta-train,
/// fine-tune on shared selections, evaluate. All configurations start from
/// the same initialization and use the same selection seeds.
pub fn run_ablation(
    datasets: &[Dataset],
    target_id: &str,
    plan: &ExperimentPlan,
) -> Result<Vec<AblationRow>> {
    if plan.selections == 0 {
        return Err(Error::Config("ablation needs at least one selection".into()));
    }
    let ctx = ExperimentContext::prepare(datasets, target_id, stream_seed(plan.seed, "protocol/split"))?;
    let theta0: ParamVector<f32> = build(plan.arch, stream_seed(plan.seed, "init"))?;
    let selection_seeds: Vec<u64> = (0..plan.selections)
        .map(|i| stream_seed(plan.seed, &format!("protocol/select/{i}")))
        .collect();
    let src: Vec<TaskSource> = ctx.sources.iter().map(TaskSource::new).collect();

    let mut rows = Vec::new();
    for update_rule in [UpdateRule::Average, UpdateRule::InverseDistance] {
        for task_rule in [TaskRule::Standard, TaskRule::VolumeBased] {
            for loss in LossKind::ALL {
                let cfg = MetaConfig { update_rule, task_rule, loss, ..plan.meta };
                let (theta, log) = meta_train(&src, &ctx.weights, &theta0, &cfg)?;
                let mut ious = Vec::with_capacity(plan.selections);
                for &sel_seed in &selection_seeds {
                    let ft = FineTuneConfig { loss, seed: sel_seed, ..plan.fine_tune };
                    let shots = ctx.select_shots(plan.shots, sel_seed)?;
                    let (phi, _) = fine_tune(&theta, &shots, &ft)?;
                    ious.push(evaluate_on(&phi, &ctx.test_samples, plan.eval_batch)?);
                }
                let (mean_iou, std_iou) = mean_std(&ious);
                rows.push(AblationRow {
                    update_rule,
                    task_rule,
                    loss,
                    final_mean_loss: log.last().map_or(f64::NAN, |r| r.mean_loss),
                    mean_iou,
                    std_iou,
                });
            }
        }
    }
    Ok(rows)
}

/// Write the ablation grid as CSV.
pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.update_rule, r.task_rule, r.loss, r.final_mean_loss, r.mean_iou, r.std_iou
        );
    }
    std::fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}
