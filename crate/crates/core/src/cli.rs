//! Command-line surface: configuration schema, file formats, and the four
//! subcommands (generate, meta-train, finetune-eval, heatmap).
//!
//! Configuration is a flat key=value schema. Values resolve with the
//! precedence CLI flag > config file > built-in default, unknown keys are
//! rejected, and every command echoes its fully-resolved configuration
//! next to its outputs so a run can be reproduced from the echo alone.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::io::{load_benchmark, save_benchmark};
use crate::data::synth::{default_families, generate_benchmark, OrganFamily};
use crate::data::prepare_datasets;
use crate::harness::{
    adapt_and_evaluate, distance_heatmap, mean_std, write_heatmap_csv, write_heatmap_pgm,
    write_results_csv, ExperimentContext, ExperimentPlan, ExperimentResult, Method, PooledCfg,
    ShotSpec,
};
use crate::losses::{LossKind, LossParams};
use crate::meta::{
    meta_train, write_training_log, FineTuneConfig, MetaConfig, UpdateRule,
};
use crate::seed::stream_seed;
use crate::segnet::{build, checkpoint, ArchDescriptor, ParamVector};
use crate::tasks::{compute_sampling_weights, TaskRule, TaskSource};
use crate::{Error, Result};

/// Fully-resolved run settings. One flat schema covers every subcommand;
/// commands read the keys they need.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Root seed; all randomness derives from it through named streams.
    pub seed: u64,
    pub workers: usize,
    /// Working resolution (slices are resized to resolution x resolution).
    pub resolution: usize,
    pub base_width: usize,
    pub depth: usize,
    pub data: String,
    pub out: String,
    /// Benchmark description: "default" or a family-spec CSV path.
    pub spec: String,
    pub target: String,
    /// Initialization checkpoint: "random" or an MMSG path.
    pub ckpt: String,
    pub meta_epochs: usize,
    pub tasks_per_epoch: usize,
    pub shots: usize,
    pub inner_epochs: usize,
    /// Inner-loop mini-batch size; 0 trains full-batch.
    pub inner_batch: usize,
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub meta_weight_decay: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    pub update_rule: UpdateRule,
    pub task_rule: TaskRule,
    pub loss: LossKind,
    pub loss_eps: f64,
    pub invert_pos_weight: bool,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    pub focal_gamma: f64,
    pub ft_shots: ShotSpec,
    pub ft_epochs: usize,
    /// Fine-tune mini-batch size; 0 trains full-batch.
    pub ft_batch: usize,
    pub ft_lr: f64,
    pub ft_weight_decay: f64,
    pub ft_lr_decay: f64,
    pub ft_decay_period: usize,
    pub selections: usize,
    pub transfer_epochs: usize,
    pub transfer_lr: f64,
    pub transfer_weight_decay: f64,
    pub transfer_batch: usize,
    pub eval_batch: usize,
    pub pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let meta = MetaConfig::default();
        let ft = FineTuneConfig::default();
        let lp = LossParams::default();
        RunConfig {
            seed: 0,
            workers: 1,
            resolution: 32,
            base_width: 8,
            depth: 3,
            data: String::new(),
            out: String::new(),
            spec: "default".into(),
            target: String::new(),
            ckpt: "random".into(),
            meta_epochs: meta.meta_epochs,
            tasks_per_epoch: meta.tasks_per_epoch,
            shots: meta.shots,
            inner_epochs: meta.inner_epochs,
            inner_batch: meta.inner_batch,
            inner_lr: meta.inner_lr,
            meta_lr: meta.meta_lr,
            meta_weight_decay: meta.weight_decay,
            lr_decay: meta.lr_decay,
            decay_period: meta.decay_period,
            update_rule: meta.update_rule,
            task_rule: meta.task_rule,
            loss: meta.loss,
            loss_eps: lp.eps,
            invert_pos_weight: lp.invert_pos_weight,
            tversky_alpha: lp.tversky_alpha,
            tversky_beta: lp.tversky_beta,
            focal_gamma: lp.focal_gamma,
            ft_shots: ShotSpec::Count(15),
            ft_epochs: ft.epochs,
            ft_batch: ft.batch,
            ft_lr: ft.lr,
            ft_weight_decay: ft.weight_decay,
            ft_lr_decay: ft.lr_decay,
            ft_decay_period: ft.decay_period,
            selections: 5,
            transfer_epochs: 20,
            transfer_lr: 0.001,
            transfer_weight_decay: 3e-5,
            transfer_batch: 32,
            eval_batch: 64,
            pairs: 100,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("config key '{key}': cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "config key '{key}': expected true or false, got '{value}'"
        ))),
    }
}

impl RunConfig {
    /// Set one schema key from its string form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            "resolution" => self.resolution = parse_num(key, value)?,
            "base_width" => self.base_width = parse_num(key, value)?,
            "depth" => self.depth = parse_num(key, value)?,
            "data" => self.data = value.into(),
            "out" => self.out = value.into(),
            "spec" => self.spec = value.into(),
            "target" => self.target = value.into(),
            "ckpt" => self.ckpt = value.into(),
            "meta_epochs" => self.meta_epochs = parse_num(key, value)?,
            "tasks_per_epoch" => self.tasks_per_epoch = parse_num(key, value)?,
            "shots" => self.shots = parse_num(key, value)?,
            "inner_epochs" => self.inner_epochs = parse_num(key, value)?,
            "inner_batch" => self.inner_batch = parse_num(key, value)?,
            "inner_lr" => self.inner_lr = parse_num(key, value)?,
            "meta_lr" => self.meta_lr = parse_num(key, value)?,
            "meta_weight_decay" => self.meta_weight_decay = parse_num(key, value)?,
            "lr_decay" => self.lr_decay = parse_num(key, value)?,
            "decay_period" => self.decay_period = parse_num(key, value)?,
            "update_rule" => self.update_rule = value.parse()?,
            "task_rule" => self.task_rule = value.parse()?,
            "loss" => self.loss = value.parse()?,
            "loss_eps" => self.loss_eps = parse_num(key, value)?,
            "invert_pos_weight" => self.invert_pos_weight = parse_bool(key, value)?,
            "tversky_alpha" => self.tversky_alpha = parse_num(key, value)?,
            "tversky_beta" => self.tversky_beta = parse_num(key, value)?,
            "focal_gamma" => self.focal_gamma = parse_num(key, value)?,
            "ft_shots" => self.ft_shots = value.parse()?,
            "ft_epochs" => self.ft_epochs = parse_num(key, value)?,
            "ft_batch" => self.ft_batch = parse_num(key, value)?,
            "ft_lr" => self.ft_lr = parse_num(key, value)?,
            "ft_weight_decay" => self.ft_weight_decay = parse_num(key, value)?,
            "ft_lr_decay" => self.ft_lr_decay = parse_num(key, value)?,
            "ft_decay_period" => self.ft_decay_period = parse_num(key, value)?,
            "selections" => self.selections = parse_num(key, value)?,
            "transfer_epochs" => self.transfer_epochs = parse_num(key, value)?,
            "transfer_lr" => self.transfer_lr = parse_num(key, value)?,
            "transfer_weight_decay" => self.transfer_weight_decay = parse_num(key, value)?,
            "transfer_batch" => self.transfer_batch = parse_num(key, value)?,
            "eval_batch" => self.eval_batch = parse_num(key, value)?,
            "pairs" => self.pairs = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Resolve a config: defaults, then the file, then the overrides.
    pub fn from_sources(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (key, value) in parse_kv_text(&text)? {
                cfg.set(&key, &value)?;
            }
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    /// Render every key in schema order; the output parses back losslessly.
    pub fn render(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("workers", self.workers.to_string());
        kv("resolution", self.resolution.to_string());
        kv("base_width", self.base_width.to_string());
        kv("depth", self.depth.to_string());
        kv("data", self.data.clone());
        kv("out", self.out.clone());
        kv("spec", self.spec.clone());
        kv("target", self.target.clone());
        kv("ckpt", self.ckpt.clone());
        kv("meta_epochs", self.meta_epochs.to_string());
        kv("tasks_per_epoch", self.tasks_per_epoch.to_string());
        kv("shots", self.shots.to_string());
        kv("inner_epochs", self.inner_epochs.to_string());
        kv("inner_batch", self.inner_batch.to_string());
        kv("inner_lr", self.inner_lr.to_string());
        kv("meta_lr", self.meta_lr.to_string());
        kv("meta_weight_decay", self.meta_weight_decay.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("decay_period", self.decay_period.to_string());
        kv("update_rule", self.update_rule.to_string());
        kv("task_rule", self.task_rule.to_string());
        kv("loss", self.loss.to_string());
        kv("loss_eps", self.loss_eps.to_string());
        kv("invert_pos_weight", self.invert_pos_weight.to_string());
        kv("tversky_alpha", self.tversky_alpha.to_string());
        kv("tversky_beta", self.tversky_beta.to_string());
        kv("focal_gamma", self.focal_gamma.to_string());
        kv("ft_shots", self.ft_shots.to_string());
        kv("ft_epochs", self.ft_epochs.to_string());
        kv("ft_batch", self.ft_batch.to_string());
        kv("ft_lr", self.ft_lr.to_string());
        kv("ft_weight_decay", self.ft_weight_decay.to_string());
        kv("ft_lr_decay", self.ft_lr_decay.to_string());
        kv("ft_decay_period", self.ft_decay_period.to_string());
        kv("selections", self.selections.to_string());
        kv("transfer_epochs", self.transfer_epochs.to_string());
        kv("transfer_lr", self.transfer_lr.to_string());
        kv("transfer_weight_decay", self.transfer_weight_decay.to_string());
        kv("transfer_batch", self.transfer_batch.to_string());
        kv("eval_batch", self.eval_batch.to_string());
        kv("pairs", self.pairs.to_string());
        s
    }

    pub fn arch(&self) -> ArchDescriptor {
        ArchDescriptor {
            in_channels: 1,
            base_width: self.base_width,
            depth: self.depth,
            out_channels: 1,
        }
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams {
            eps: self.loss_eps,
            invert_pos_weight: self.invert_pos_weight,
            tversky_alpha: self.tversky_alpha,
            tversky_beta: self.tversky_beta,
            focal_gamma: self.focal_gamma,
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            meta_epochs: self.meta_epochs,
            tasks_per_epoch: self.tasks_per_epoch,
            shots: self.shots,
            inner_lr: self.inner_lr,
            meta_lr: self.meta_lr,
            inner_epochs: self.inner_epochs,
            inner_batch: self.inner_batch,
            weight_decay: self.meta_weight_decay,
            lr_decay: self.lr_decay,
            decay_period: self.decay_period,
            update_rule: self.update_rule,
            task_rule: self.task_rule,
            loss: self.loss,
            loss_params: self.loss_params(),
            seed: self.seed,
        }
    }

    pub fn fine_tune_config(&self) -> FineTuneConfig {
        FineTuneConfig {
            epochs: self.ft_epochs,
            lr: self.ft_lr,
            weight_decay: self.ft_weight_decay,
            lr_decay: self.ft_lr_decay,
            decay_period: self.ft_decay_period,
            batch: self.ft_batch,
            seed: stream_seed(self.seed, "fine-tune"),
            loss: self.loss,
            loss_params: self.loss_params(),
        }
    }

    pub fn transfer_config(&self) -> PooledCfg {
        PooledCfg {
            epochs: self.transfer_epochs,
            lr: self.transfer_lr,
            weight_decay: self.transfer_weight_decay,
            lr_decay: 1.0,
            decay_period: 2,
            batch_size: self.transfer_batch,
            loss: self.loss,
            loss_params: self.loss_params(),
            seed: stream_seed(self.seed, "transfer"),
        }
    }

    pub fn plan(&self) -> ExperimentPlan {
        ExperimentPlan {
            arch: self.arch(),
            methods: Method::ALL.to_vec(),
            meta: self.meta_config(),
            transfer: self.transfer_config(),
            fine_tune: self.fine_tune_config(),
            shots: self.ft_shots,
            selections: self.selections,
            eval_batch: self.eval_batch,
            seed: self.seed,
        }
    }

    fn require(&self, key: &str, value: &str) -> Result<()> {
        if value.is_empty() {
            return Err(Error::Config(format!("missing required setting '{key}'")));
        }
        Ok(())
    }
}

/// Parse key=value lines; '#' lines and blank lines are skipped.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected key=value, got '{line}'", i + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Column order of a family-spec CSV.
pub const FAMILY_SPEC_HEADER: &str = "name,z,volumes,slices,height,width,threshold,\
body_axis_lo,body_axis_hi,body_level_lo,body_level_hi,object_axis_lo,object_axis_hi,\
eccentricity_lo,eccentricity_hi,contrast_lo,contrast_hi,noise,drift_lo,drift_hi";

/// Parse a family-spec CSV into organ families.
pub fn parse_family_spec(path: &Path) -> Result<Vec<OrganFamily>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == FAMILY_SPEC_HEADER => {}
        _ => {
            return Err(Error::Config(format!(
                "{}: family spec must start with header '{FAMILY_SPEC_HEADER}'",
                path.display()
            )))
        }
    }
    let mut families = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 20 {
            return Err(Error::Config(format!(
                "{}: line {}: expected 20 columns, got {}",
                path.display(),
                i + 1,
                cols.len()
            )));
        }
        let num = |idx: usize| -> Result<f64> {
            cols[idx].trim().parse().map_err(|_| {
                Error::Config(format!(
                    "{}: line {}: cannot parse '{}' in column {}",
                    path.display(),
                    i + 1,
                    cols[idx],
                    idx + 1
                ))
            })
        };
        families.push(OrganFamily {
            name: cols[0].trim().to_string(),
            z: num(1)? as u16,
            volumes: num(2)? as usize,
            slices: num(3)? as usize,
            height: num(4)? as usize,
            width: num(5)? as usize,
            threshold: num(6)? as u32,
            body_axis: (num(7)?, num(8)?),
            body_level: (num(9)?, num(10)?),
            object_axis: (num(11)?, num(12)?),
            eccentricity: (num(13)?, num(14)?),
            contrast: (num(15)?, num(16)?),
            noise: num(17)?,
            drift: (num(18)?, num(19)?),
        });
    }
    if families.is_empty() {
        return Err(Error::Config(format!("{}: family spec lists no families", path.display())));
    }
    Ok(families)
}

#[derive(Parser, Debug)]
#[command(name = "metaseg", version, about = "Few-shot segmentation meta-learning workbench")]
pub struct Cli {
    /// key=value config file, applied before flag overrides
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Extra override, repeatable (e.g. --set meta_epochs=30)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic volumetric benchmark
    Generate {
        /// "default" or a family-spec CSV
        #[arg(long)]
        spec: Option<String>,
        /// Output directory
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Meta-train an initialization on the source datasets
    MetaTrain {
        /// Benchmark directory
        #[arg(long)]
        data: Option<String>,
        /// Held-out target dataset id (its family is excluded from sources)
        #[arg(long)]
        target: Option<String>,
        /// Update rule: aw | idw
        #[arg(long)]
        rule: Option<String>,
        /// Task rule: standard | volume
        #[arg(long)]
        tasks: Option<String>,
        /// Loss kind
        #[arg(long)]
        loss: Option<String>,
        /// Checkpoint output path
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fine-tune an initialization on target shots and evaluate it
    FinetuneEval {
        /// "random" or an MMSG checkpoint path
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        target: Option<String>,
        /// Shots per selection: a count or "all"
        #[arg(long)]
        shots: Option<String>,
        /// Number of independent selections
        #[arg(long)]
        seeds: Option<usize>,
        /// Results CSV path
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pairwise dataset distance heatmap
    Heatmap {
        #[arg(long)]
        data: Option<String>,
        /// Random slice pairs per matrix cell
        #[arg(long)]
        pairs: Option<usize>,
        /// Output prefix (writes <prefix>.pgm and <prefix>.csv)
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn push_opt<T: std::fmt::Display>(over: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        over.push((key.to_string(), v.to_string()));
    }
}

/// Resolve the configuration for a parsed command line.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{s}'")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    match &cli.command {
        Command::Generate { spec, out, seed } => {
            push_opt(&mut overrides, "spec", spec);
            push_opt(&mut overrides, "out", out);
            push_opt(&mut overrides, "seed", seed);
        }
        Command::MetaTrain { data, target, rule, tasks, loss, out, seed, workers } => {
            push_opt(&mut overrides, "data", data);
            push_opt(&mut overrides, "target", target);
            push_opt(&mut overrides, "update_rule", rule);
            push_opt(&mut overrides, "task_rule", tasks);
            push_opt(&mut overrides, "loss", loss);
            push_opt(&mut overrides, "out", out);
            push_opt(&mut overrides, "seed", seed);
            push_opt(&mut overrides, "workers", workers);
        }
        Command::FinetuneEval { ckpt, data, target, shots, seeds, out, seed } => {
            push_opt(&mut overrides, "ckpt", ckpt);
            push_opt(&mut overrides, "data", data);
            push_opt(&mut overrides, "target", target);
            push_opt(&mut overrides, "ft_shots", shots);
            push_opt(&mut overrides, "selections", seeds);
            push_opt(&mut overrides, "out", out);
            push_opt(&mut overrides, "seed", seed);
        }
        Command::Heatmap { data, pairs, out, seed } => {
            push_opt(&mut overrides, "data", data);
            push_opt(&mut overrides, "pairs", pairs);
            push_opt(&mut overrides, "out", out);
            push_opt(&mut overrides, "seed", seed);
        }
    }
    RunConfig::from_sources(cli.config.as_deref(), &overrides)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_prepared(cfg: &RunConfig) -> Result<Vec<crate::data::Dataset>> {
    let datasets = load_benchmark(Path::new(&cfg.data))?;
    prepare_datasets(&datasets, cfg.resolution, cfg.resolution)
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    cfg.require("out", &cfg.out)?;
    let families = if cfg.spec == "default" {
        default_families()
    } else {
        parse_family_spec(Path::new(&cfg.spec))?
    };
    let datasets = generate_benchmark(&families, stream_seed(cfg.seed, "data"))?;
    let out = Path::new(&cfg.out);
    save_benchmark(out, &datasets)?;
    write_text(&out.join("config.txt"), &cfg.render())?;
    let volumes: usize = datasets.iter().map(|d| d.volumes.len()).sum();
    log::info!(
        "generated {} datasets ({volumes} volumes) into {}",
        datasets.len(),
        out.display()
    );
    Ok(())
}

fn cmd_meta_train(cfg: &RunConfig) -> Result<()> {
    cfg.require("data", &cfg.data)?;
    cfg.require("target", &cfg.target)?;
    cfg.require("out", &cfg.out)?;
    let prepared = load_prepared(cfg)?;
    let target = prepared
        .iter()
        .find(|d| d.id == cfg.target)
        .ok_or_else(|| Error::Config(format!("target dataset '{}' not found", cfg.target)))?;
    let sources: Vec<crate::data::Dataset> =
        prepared.iter().filter(|d| d.family != target.family).cloned().collect();
    if sources.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no source datasets remain after excluding family '{}'",
            target.family
        )));
    }
    log::info!(
        "meta-training on {} sources (target {} and its family excluded), rule={}, tasks={}, loss={}",
        sources.len(),
        cfg.target,
        cfg.update_rule,
        cfg.task_rule,
        cfg.loss
    );
    if cfg.task_rule == TaskRule::VolumeBased {
        log::info!("volume task rule: every task draws all its shots from a single volume");
    }
    let weights = compute_sampling_weights(&sources)?;
    let task_sources: Vec<TaskSource> = sources.iter().map(TaskSource::new).collect();
    let theta0: ParamVector<f32> = build(cfg.arch(), stream_seed(cfg.seed, "init"))?;
    let (theta, logs) = meta_train(&task_sources, &weights, &theta0, &cfg.meta_config())?;

    let out = Path::new(&cfg.out);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    checkpoint::save(out, &theta)?;
    write_training_log(out.with_extension("log.csv"), cfg.update_rule, cfg.task_rule, &logs)?;
    write_text(&out.with_extension("config.txt"), &cfg.render())?;
    if let Some(last) = logs.last() {
        log::info!(
            "finished {} meta-epochs; final mean task loss {:.6}",
            logs.len(),
            last.mean_loss
        );
    }
    Ok(())
}

fn cmd_finetune_eval(cfg: &RunConfig) -> Result<()> {
    cfg.require("data", &cfg.data)?;
    cfg.require("target", &cfg.target)?;
    cfg.require("out", &cfg.out)?;
    let prepared = load_prepared(cfg)?;
    let plan = cfg.plan();
    let ctx =
        ExperimentContext::prepare(&prepared, &cfg.target, stream_seed(cfg.seed, "protocol/split"))?;

    let (tag, init): (String, ParamVector<f32>) = if cfg.ckpt == "random" {
        ("random-init".into(), build(cfg.arch(), stream_seed(cfg.seed, "init"))?)
    } else {
        let path = Path::new(&cfg.ckpt);
        let params = checkpoint::load_expecting(path, &cfg.arch())?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into());
        (stem, params)
    };

    let mut per_seed = Vec::with_capacity(cfg.selections);
    for i in 0..cfg.selections {
        let sel_seed = stream_seed(cfg.seed, &format!("protocol/select/{i}"));
        let shots = ctx.select_shots(plan.shots, sel_seed)?;
        per_seed.push(adapt_and_evaluate(&init, &shots, sel_seed, &ctx, &plan)?);
    }
    let (mean, std) = mean_std(&per_seed);
    log::info!("{tag}: test IoU {mean:.2} +/- {std:.2} over {} selections", cfg.selections);
    let result = ExperimentResult {
        method: tag,
        task_rule: "-".into(),
        update_rule: "-".into(),
        per_seed,
        mean,
        std,
    };
    let out = Path::new(&cfg.out);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_results_csv(out, &[result])?;
    write_text(&out.with_extension("config.txt"), &cfg.render())?;
    Ok(())
}

fn cmd_heatmap(cfg: &RunConfig) -> Result<()> {
    cfg.require("data", &cfg.data)?;
    cfg.require("out", &cfg.out)?;
    let prepared = load_prepared(cfg)?;
    let matrix = distance_heatmap(&prepared, cfg.pairs, stream_seed(cfg.seed, "heatmap"))?;
    let pgm = PathBuf::from(format!("{}.pgm", cfg.out));
    if let Some(parent) = pgm.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    write_heatmap_pgm(&pgm, &matrix)?;
    write_heatmap_csv(PathBuf::from(format!("{}.csv", cfg.out)), &matrix)?;
    write_text(&PathBuf::from(format!("{}.config.txt", cfg.out)), &cfg.render())?;
    log::info!("wrote {}x{} distance matrix to {}.pgm/.csv", matrix.n(), matrix.n(), cfg.out);
    Ok(())
}

/// Execute a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    // One worker is the bit-reproducible default; more workers parallelize
    // task training, and results stay identical because aggregation orders
    // by task index.
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build_global()
        .ok();
    match cli.command {
        Command::Generate { .. } => cmd_generate(&cfg),
        Command::MetaTrain { .. } => cmd_meta_train(&cfg),
        Command::FinetuneEval { .. } => cmd_finetune_eval(&cfg),
        Command::Heatmap { .. } => cmd_heatmap(&cfg),
    }
}
