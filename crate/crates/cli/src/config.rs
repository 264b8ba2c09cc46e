//! Run configuration: JSON file, then environment, then command-line flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use blp_core::battery::Q0Mode;
use blp_core::eval::{check_grid_values, SplitOptions, TrainConfig, TransferMode, DEFAULT_ALPHA};
use blp_core::ingest::FilterConfig;
use blp_core::models::{CyclePatchConfig, ModelSpec};
use blp_core::preprocess::LabelingOptions;
use blp_core::synth::SynthConfig;
use blp_core::{Error, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "BLP_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Target-domain manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    /// Source-domain manifest for `transfer`.
    pub source_manifest: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub q0_mode: Option<Q0Mode>,
    pub filter: FilterConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            source_manifest: None,
            lambda: None,
            q0_mode: None,
            filter: FilterConfig::default(),
        }
    }
}

impl DataSection {
    pub fn labeling(&self) -> LabelingOptions {
        LabelingOptions {
            lambda: self.lambda,
            q0_mode: self.q0_mode,
            filter: self.filter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    #[serde(rename = "S_values")]
    pub s_values: Vec<usize>,
    /// Sample cache read by the training commands when present.
    pub cache: Option<PathBuf>,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            s_values: vec![100],
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Replicate indices; each run seed is derived from the top-level seed and the index.
    pub seeds: Vec<u64>,
    /// Overrides the model's dropout when set.
    pub dropout: Option<f64>,
    pub patience: Option<usize>,
    pub standardize_inputs: bool,
    /// Restrict `lr` and `batch_size` to the hyperparameter grid.
    pub grid: bool,
}

impl Default for OptimSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        OptimSection {
            lr: t.adam.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seeds: vec![0, 1, 2],
            dropout: None,
            patience: t.patience,
            standardize_inputs: t.standardize_inputs,
            grid: false,
        }
    }
}

impl OptimSection {
    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            standardize_inputs: self.standardize_inputs,
            ..TrainConfig::default()
        };
        t.adam.lr = self.lr;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub alpha: f64,
    /// Usable-cycle counts for `sweep`.
    pub sweep: Vec<usize>,
    pub transfer: TransferMode,
    pub split: SplitOptions,
    /// Replicate whose split and checkpoint `eval` uses.
    pub replicate: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            alpha: DEFAULT_ALPHA,
            sweep: vec![10, 30, 50, 100],
            transfer: TransferMode::FineTune,
            split: SplitOptions::default(),
            replicate: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub preprocess: PreprocessSection,
    pub model: ModelSpec,
    pub optim: OptimSection,
    pub eval: EvalSection,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSection::default(),
            preprocess: PreprocessSection::default(),
            model: ModelSpec::Cpmlp(CyclePatchConfig::default()),
            optim: OptimSection::default(),
            eval: EvalSection::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Flags shared by every subcommand; each one overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Top-level seed (beats BLP_SEED and the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Worker threads for per-battery stages (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub source_manifest: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Usable-cycle counts, comma separated.
    #[arg(long = "s-values", value_delimiter = ',')]
    pub s_values: Option<Vec<usize>>,
    /// Usable-cycle counts for `sweep`, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    /// Replicate indices, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub n_batteries: Option<usize>,
    /// Restrict lr and batch size to the hyperparameter grid.
    #[arg(long)]
    pub grid: bool,
}

/// Read a config file, rejecting unknown keys with their JSON path.
pub fn load(path: &Path) -> Result<RunConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        Error::Config(format!("{}: at `{at}`: {}", path.display(), e.inner()))
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        for p in [&mut cfg.data.manifest, &mut cfg.data.source_manifest, &mut cfg.preprocess.cache]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
    Ok(cfg)
}

/// Defaults, then the config file, then `BLP_SEED`, then flags.
pub fn resolve(flags: &Overrides, env_seed: Option<String>) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = env_seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {s:?}")))?;
    }
    let f = flags.clone();
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.manifest {
        cfg.data.manifest = Some(v);
    }
    if let Some(v) = f.source_manifest {
        cfg.data.source_manifest = Some(v);
    }
    if let Some(v) = f.cache {
        cfg.preprocess.cache = Some(v);
    }
    if let Some(v) = f.s_values {
        cfg.preprocess.s_values = v;
    }
    if let Some(v) = f.sweep {
        cfg.eval.sweep = v;
    }
    if let Some(v) = f.seeds {
        cfg.optim.seeds = v;
    }
    if let Some(v) = f.epochs {
        cfg.optim.epochs = v;
    }
    if let Some(v) = f.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = f.batch_size {
        cfg.optim.batch_size = v;
    }
    if let Some(v) = f.alpha {
        cfg.eval.alpha = v;
    }
    if let Some(v) = f.n_batteries {
        cfg.synth.n_batteries = v;
    }
    cfg.optim.grid |= f.grid;
    if let Some(d) = cfg.optim.dropout {
        match &mut cfg.model {
            ModelSpec::Cpmlp(c) => c.dropout = d,
            ModelSpec::Mlp(c) => c.dropout = d,
            ModelSpec::Dummy => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.train_config().validate()?;
        if self.optim.seeds.is_empty() {
            return Err(Error::Config("optim.seeds is empty".into()));
        }
        let unique: BTreeSet<u64> = self.optim.seeds.iter().copied().collect();
        if unique.len() != self.optim.seeds.len() {
            return Err(Error::Config("optim.seeds contains duplicates".into()));
        }
        if self.optim.grid {
            check_grid_values(self.optim.lr, self.optim.batch_size)?;
        }
        if !(self.eval.alpha > 0.0) {
            return Err(Error::Config(format!("eval.alpha must be positive, got {}", self.eval.alpha)));
        }
        if let Some(l) = self.data.lambda {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::Config(format!("data.lambda must lie in (0, 1), got {l}")));
            }
        }
        self.synth.validate()
    }
}
