//! `train` configuration: a flat `key = value` file plus `--key value`
//! overrides, validated before any run starts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dct_lowrank::harness::{Activation, Layer, Loss, LrSchedule, OptimizerConfig, TaskKind, TaskSpec, TrainConfig};
use dct_lowrank::{AdamParams, BasisKind, EfMode, Hyper, NormMode, ProjectorKind};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Lowrank,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorName {
    Dct,
    Svd,
    Random,
    Randperm,
    IdentityCols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub update_period: u64,
    pub rank: usize,
    pub ef_mode: EfMode,
    pub projector: ProjectorName,
    /// Seed for the random and randperm projectors.
    pub projector_seed: u64,
    pub norm_mode: NormMode,
    pub basis: BasisKind,

    pub task: TaskName,
    pub d_in: usize,
    pub d_h: usize,
    pub d_out: usize,
    pub n_samples: usize,
    pub teacher_rank: usize,
    pub noise_std: f64,
    /// Data seed; when unset every run draws its task from its own seed.
    pub task_seed: Option<u64>,

    pub steps: u64,
    pub batch_size: usize,
    pub activation: Activation,
    pub loss: Loss,
    pub schedule: ScheduleName,
    pub warmup: u64,
    pub min_lr_factor: f64,
    pub full_rank_layers: Vec<Layer>,

    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = Hyper::default();
        let t = TaskSpec::default();
        Self {
            optimizer: OptimizerName::Lowrank,
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            update_period: h.update_period,
            rank: h.rank,
            ef_mode: h.ef_mode,
            projector: ProjectorName::Dct,
            projector_seed: 0,
            norm_mode: h.norm_mode,
            basis: BasisKind::Dct3,
            task: TaskName::Regression,
            d_in: t.d_in,
            d_h: t.d_h,
            d_out: t.d_out,
            n_samples: t.n_samples,
            teacher_rank: t.teacher_rank,
            noise_std: t.noise_std,
            task_seed: None,
            steps: 2000,
            batch_size: 64,
            activation: Activation::Tanh,
            loss: Loss::Mse,
            schedule: ScheduleName::Constant,
            warmup: 0,
            min_lr_factor: 0.1,
            full_rank_layers: Vec::new(),
            seeds: vec![0],
            out_dir: None,
        }
    }
}

/// Keys whose values are lists; a comma-separated override is accepted.
const LIST_KEYS: [&str; 2] = ["seeds", "full_rank_layers"];

fn parse_value(key: &str, raw: &str) -> toml::Value {
    let raw = raw.trim();
    if LIST_KEYS.contains(&key) && !raw.starts_with('[') {
        let items = raw.split(',').map(|s| parse_value("", s)).collect();
        return toml::Value::Array(items);
    }
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Splits `--key value` and `--key=value` pairs. Dashes in keys map to
/// underscores.
pub fn parse_overrides(args: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            bail!("unexpected argument '{arg}' (overrides take the form --key value)");
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().with_context(|| format!("override --{key} needs a value"))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?;
        for (k, v) in table.iter_mut() {
            // Let files write list keys as a plain comma-separated string too.
            if let (true, toml::Value::String(s)) = (LIST_KEYS.contains(&k.as_str()), &*v) {
                *v = parse_value(k, s);
            }
        }
        for (k, v) in overrides {
            table.insert(k.clone(), parse_value(k, v));
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task_spec(&self, run_seed: u64) -> TaskSpec {
        TaskSpec {
            kind: match self.task {
                TaskName::Regression => TaskKind::PlantedLowRankRegression,
                TaskName::Classification => TaskKind::SyntheticClassification,
            },
            d_in: self.d_in,
            d_h: self.d_h,
            d_out: self.d_out,
            n_samples: self.n_samples,
            teacher_rank: self.teacher_rank,
            noise_std: self.noise_std,
            seed: self.task_seed.unwrap_or(run_seed),
        }
    }

    pub fn hyper(&self) -> Hyper {
        let projector = match self.projector {
            ProjectorName::Dct => ProjectorKind::DctSelect,
            ProjectorName::Svd => ProjectorKind::Svd,
            ProjectorName::Random => ProjectorKind::RandomSemiOrthogonal { seed: self.projector_seed },
            ProjectorName::Randperm => ProjectorKind::RandPerm { seed: self.projector_seed },
            ProjectorName::IdentityCols => ProjectorKind::IdentityCols,
        };
        Hyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            update_period: self.update_period,
            rank: self.rank,
            ef_mode: self.ef_mode,
            projector,
            norm_mode: self.norm_mode,
        }
    }

    pub fn train_config(&self, run_seed: u64) -> TrainConfig {
        let hyper = self.hyper();
        let optimizer = match self.optimizer {
            OptimizerName::Lowrank => OptimizerConfig::LowRank { hyper, basis: self.basis },
            OptimizerName::Adamw => OptimizerConfig::AdamW { lr: self.lr, params: AdamParams::from(&hyper) },
        };
        TrainConfig {
            optimizer,
            steps: self.steps,
            batch_size: self.batch_size,
            schedule: match self.schedule {
                ScheduleName::Constant => LrSchedule::Constant,
                ScheduleName::Cosine => LrSchedule::Cosine { warmup: self.warmup, min_factor: self.min_lr_factor },
            },
            activation: self.activation,
            loss: self.loss,
            full_rank_layers: self.full_rank_layers.clone(),
            seed: run_seed,
        }
    }

    /// Checks everything the harness would reject, so no run starts on a
    /// config that fails later.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must not be empty");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        if self.steps == 0 {
            bail!("steps must be at least 1");
        }
        if self.batch_size == 0 || self.batch_size > self.n_samples {
            bail!("batch_size must be in 1..={}", self.n_samples);
        }
        if !(0.0..=1.0).contains(&self.min_lr_factor) {
            bail!("min_lr_factor must be in [0, 1]");
        }
        self.task_spec(0).validate()?;
        self.hyper().validate()?;
        if self.optimizer == OptimizerName::Lowrank {
            let projected: Vec<(Layer, (usize, usize))> = [
                (Layer::W1, (self.d_in, self.d_h)),
                (Layer::W2, (self.d_h, self.d_out)),
            ]
            .into_iter()
            .filter(|(l, _)| !self.full_rank_layers.contains(l))
            .collect();
            for (layer, (rows, cols)) in projected {
                let small = rows.min(cols);
                if self.rank > small {
                    bail!("rank {} exceeds the smaller dimension {small} of layer {layer:?}", self.rank);
                }
            }
        }
        Ok(())
    }
}
