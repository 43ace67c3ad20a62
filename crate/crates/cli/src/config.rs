//! Run configuration: flat `key = value` files plus flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use relmap::data::{Experiment, DEFAULT_VAL_FRACTION};
use relmap::supervised::{SparsityKind, TrainConfig};
use relmap::unsupervised::{DetectorConfig, UnsupervisedConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Supervised,
    Unsupervised,
    Fuzzy,
}

impl std::str::FromStr for RunMode {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "unsupervised" => Ok(Self::Unsupervised),
            "fuzzy" => Ok(Self::Fuzzy),
            other => bail!("unknown mode `{other}` (expected supervised, unsupervised or fuzzy)"),
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Supervised => "supervised",
            Self::Unsupervised => "unsupervised",
            Self::Fuzzy => "fuzzy",
        })
    }
}

/// Everything that determines a run, plus where it reads and writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub mode: RunMode,
    /// Number of tasks; `None` uses every task the experiment defines
    /// (5 for both experiments).
    pub tasks: Option<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr_w: f64,
    pub lr_m: f64,
    pub lr_beta: Option<f64>,
    pub mu: f64,
    pub beta: f64,
    pub map_mean: f64,
    pub map_sd: f64,
    pub sparsity: SparsityKind,
    pub sparsity_coeff: f64,
    /// Gaussian-noise penalty weight; `None` means 0 for supervised runs
    /// and 1 otherwise.
    pub gaussian: Option<f64>,
    pub patience: usize,
    pub val_fraction: f64,
    pub ramp: usize,
    pub tau: f64,
    pub window: usize,
    pub p_threshold: f64,
    pub dwell: usize,
    pub min_rise: f64,
    pub max_tasks: usize,
    pub rollback: usize,
    pub seeds: usize,
    pub seed_base: u64,
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let d = DetectorConfig::default();
        let u = UnsupervisedConfig::default();
        Self {
            experiment: Experiment::SplitMnist,
            mode: RunMode::Supervised,
            tasks: None,
            epochs: t.epochs,
            batch: t.batch_size,
            lr_w: t.lr_weights,
            lr_m: t.lr_maps,
            lr_beta: t.lr_beta,
            mu: t.mu,
            beta: t.beta,
            map_mean: t.map_init.mean,
            map_sd: t.map_init.sd,
            sparsity: t.sparsity,
            sparsity_coeff: t.sparsity_coeff,
            gaussian: None,
            patience: t.patience,
            val_fraction: DEFAULT_VAL_FRACTION,
            ramp: 20,
            tau: u.tau,
            window: d.window,
            p_threshold: d.p_threshold,
            dwell: d.dwell,
            min_rise: d.min_rise,
            max_tasks: u.max_tasks,
            rollback: u.rollback,
            seeds: 1,
            seed_base: 0,
            data_dir: None,
            out: PathBuf::from("runs"),
        }
    }
}

/// Keys accepted in config files, in documentation order.
pub const KEYS: &[&str] = &[
    "experiment",
    "mode",
    "tasks",
    "epochs",
    "batch",
    "lr_w",
    "lr_m",
    "lr_beta",
    "mu",
    "beta",
    "map_mean",
    "map_sd",
    "sparsity",
    "sparsity_coeff",
    "gaussian",
    "patience",
    "val_fraction",
    "ramp",
    "tau",
    "window",
    "p_threshold",
    "dwell",
    "min_rise",
    "max_tasks",
    "rollback",
    "seeds",
    "seed_base",
    "data_dir",
    "out",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value `{value}` for `{key}`: {e}"))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "experiment" => self.experiment = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "tasks" => self.tasks = Some(num(key, value)?),
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr_w" => self.lr_w = num(key, value)?,
            "lr_m" => self.lr_m = num(key, value)?,
            "lr_beta" => self.lr_beta = Some(num(key, value)?),
            "mu" => self.mu = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "map_mean" => self.map_mean = num(key, value)?,
            "map_sd" => self.map_sd = num(key, value)?,
            "sparsity" => self.sparsity = value.parse()?,
            "sparsity_coeff" => self.sparsity_coeff = num(key, value)?,
            "gaussian" => self.gaussian = Some(num(key, value)?),
            "patience" => self.patience = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "ramp" => self.ramp = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "p_threshold" => self.p_threshold = num(key, value)?,
            "dwell" => self.dwell = num(key, value)?,
            "min_rise" => self.min_rise = num(key, value)?,
            "max_tasks" => self.max_tasks = num(key, value)?,
            "rollback" => self.rollback = num(key, value)?,
            "seeds" => self.seeds = num(key, value)?,
            "seed_base" => self.seed_base = num(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    /// Applies a flat config text: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))?;
        Ok(cfg)
    }

    pub fn gaussian_coeff(&self) -> f64 {
        self.gaussian.unwrap_or(match self.mode {
            RunMode::Supervised => 0.0,
            _ => UnsupervisedConfig::default().train.gaussian_coeff,
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr_weights: self.lr_w,
            lr_maps: self.lr_m,
            lr_beta: self.lr_beta,
            mu: self.mu,
            beta: self.beta,
            map_init: relmap::MapInit {
                mean: self.map_mean,
                sd: self.map_sd,
            },
            sparsity: self.sparsity,
            sparsity_coeff: self.sparsity_coeff,
            gaussian_coeff: self.gaussian_coeff(),
            seed,
            patience: self.patience,
            ..TrainConfig::default()
        }
    }

    pub fn unsupervised_config(&self, seed: u64) -> UnsupervisedConfig {
        UnsupervisedConfig {
            train: self.train_config(seed),
            detector: DetectorConfig {
                window: self.window,
                p_threshold: self.p_threshold,
                dwell: self.dwell,
                min_rise: self.min_rise,
            },
            tau: self.tau,
            max_tasks: self.max_tasks,
            rollback: self.rollback,
        }
    }

    /// Checks everything before any data is read or compute spent.
    pub fn validate(&self) -> Result<()> {
        self.train_config(0).validate()?;
        if self.mode != RunMode::Supervised {
            self.unsupervised_config(0).validate()?;
        }
        if self.seeds == 0 {
            bail!("seeds must be at least 1");
        }
        if self.tasks == Some(0) || self.tasks.is_some_and(|t| t > 5) {
            bail!("tasks must lie in 1..=5");
        }
        if self.mode == RunMode::Fuzzy && self.ramp == 0 {
            bail!("fuzzy mode needs a ramp of at least one batch");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            bail!("val_fraction must lie in [0, 1)");
        }
        if self.mode == RunMode::Supervised && self.val_fraction == 0.0 {
            bail!("supervised runs need a validation split for the prune trigger");
        }
        Ok(())
    }

    /// The settings that determine results; paths and the seed list are left out.
    pub fn hashed_view(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            for k in ["data_dir", "out", "seeds", "seed_base"] {
                map.remove(k);
            }
        }
        v
    }

    pub fn config_hash(&self) -> Result<String> {
        Ok(relmap::record::config_hash(&self.hashed_view())?)
    }

    pub fn run_id(&self) -> Result<String> {
        Ok(format!("{}-{}-{}", self.experiment, self.mode, &self.config_hash()?[..12]))
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed_base + i).collect()
    }
}
