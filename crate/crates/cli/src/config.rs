//! Experiment configuration: one JSON document, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dafair_core::experiment::SweepPlan;
use dafair_core::trainer::DEFAULT_JTT_GRID;
use dafair_core::schedule::DEFAULT_LAMBDA_GRID;
use dafair_core::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// File name of the echoed effective configuration.
pub const EFFECTIVE_CONFIG: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Prototype file for `dafair`.
    #[serde(default)]
    pub prototypes: Option<PathBuf>,
    /// Partitions per group for data-driven (`semi_dafair`) prototypes.
    #[serde(default = "default_partitions")]
    pub n_partitions: usize,
    /// Keep only this many group labels per group when building data-driven
    /// prototypes. `None` uses every labeled training row.
    #[serde(default)]
    pub labels_per_group: Option<usize>,
    #[serde(default)]
    pub training: TrainConfig,
    /// Methods compared by `sweep` (the plain baseline always runs).
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_jtt_grid")]
    pub jtt_grid: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_partitions() -> usize {
    10
}

fn default_methods() -> Vec<Method> {
    vec![Method::Dafair]
}

fn default_lambda_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}

fn default_jtt_grid() -> Vec<f64> {
    DEFAULT_JTT_GRID.to_vec()
}

fn default_seeds() -> Vec<u64> {
    SweepPlan::default().seeds
}

fn default_jobs() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            train: None,
            validation: None,
            test: None,
            prototypes: None,
            n_partitions: default_partitions(),
            labels_per_group: None,
            training: TrainConfig::default(),
            methods: default_methods(),
            lambda_grid: default_lambda_grid(),
            jtt_grid: default_jtt_grid(),
            seeds: default_seeds(),
            jobs: default_jobs(),
            out: None,
        }
    }
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub method: Option<Method>,
    pub lambda_threshold: Option<f64>,
    pub k_pairs: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

/// The command a configuration is validated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Sweep,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => bail!("config {}: unsupported schema_version {v} (expected {SCHEMA_VERSION})", path.display()),
            None => bail!("config {}: missing field `schema_version`", path.display()),
        }
        let mut config: Self =
            serde_json::from_value(value).with_context(|| format!("parsing config {}", path.display()))?;
        // Relative paths are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.train, &mut config.validation, &mut config.test, &mut config.prototypes]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Applies flag overrides. For `sweep`, `--method` narrows the method
    /// list, `--lambda-threshold` replaces the grid and `--seed` the seed list.
    pub fn apply(&mut self, o: &Overrides, command: Command) {
        if let Some(dir) = &o.data {
            self.train = Some(dir.join("train"));
            self.validation = Some(dir.join("validation"));
            self.test = Some(dir.join("test"));
            let prototypes = dir.join("prototypes.json");
            if prototypes.exists() {
                self.prototypes = Some(prototypes);
            }
        }
        if let Some(k) = o.k_pairs {
            self.training.k_pairs = k;
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        match command {
            Command::Train => {
                if let Some(m) = o.method {
                    self.training.method = m;
                }
                if let Some(l) = o.lambda_threshold {
                    self.training.lambda_threshold = l;
                }
                if let Some(s) = o.seed {
                    self.training.seed = s;
                }
            }
            Command::Sweep => {
                if let Some(m) = o.method {
                    self.methods = vec![m];
                }
                if let Some(l) = o.lambda_threshold {
                    self.lambda_grid = vec![l];
                }
                if let Some(s) = o.seed {
                    self.seeds = vec![s];
                }
            }
        }
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        for (field, path) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            match path {
                None => bail!("missing field `{field}`: dataset directory required"),
                Some(p) if !p.is_dir() => bail!("field `{field}`: dataset directory {} does not exist", p.display()),
                Some(_) => {}
            }
        }
        if let Some(p) = &self.prototypes {
            ensure!(p.is_file(), "field `prototypes`: file {} does not exist", p.display());
        }
        ensure!(self.out.is_some(), "missing field `out`: output directory required");
        ensure!(self.n_partitions > 0, "field `n_partitions` must be positive");
        self.training.validate().context("field `training`")?;

        let methods: &[Method] = match command {
            Command::Train => std::slice::from_ref(&self.training.method),
            Command::Sweep => &self.methods,
        };
        if methods.contains(&Method::Dafair) && self.prototypes.is_none() {
            bail!("missing field `prototypes`: method dafair needs a prototype file");
        }
        if command == Command::Sweep {
            ensure!(!self.seeds.is_empty(), "field `seeds`: seed list is empty");
            ensure!(self.jobs > 0, "field `jobs` must be positive");
            if methods.iter().any(|m| m.uses_prototypes()) {
                ensure!(!self.lambda_grid.is_empty(), "field `lambda_grid`: grid is empty");
            }
            if methods.contains(&Method::Jtt) {
                ensure!(!self.jtt_grid.is_empty(), "field `jtt_grid`: grid is empty");
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().expect("validated config has an output directory")
    }

    /// Writes the effective config, with absolute dataset paths, so that it
    /// can be fed back through `--config`.
    pub fn echo(&self) -> Result<()> {
        let mut echoed = self.clone();
        for p in [&mut echoed.train, &mut echoed.validation, &mut echoed.test, &mut echoed.prototypes]
            .into_iter()
            .flatten()
        {
            *p = fs::canonicalize(&*p).with_context(|| format!("resolving {}", p.display()))?;
        }
        if let Some(out) = &mut echoed.out {
            *out = fs::canonicalize(&*out).with_context(|| format!("resolving {}", out.display()))?;
        }
        let path = self.out_dir().join(EFFECTIVE_CONFIG);
        fs::write(&path, serde_json::to_string_pretty(&echoed)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}
