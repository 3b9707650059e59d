//! Run configuration, config files and lock files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rdsig_core::channel::PriorMode;
use rdsig_core::inference::{OptimizerSettings, PriorConfig};
use rdsig_core::rd::{BASettings, LambdaGrid};
use rdsig_core::records::SCHEMA_VERSION;
use rdsig_core::signatures::DEFAULT_BINS;
use rdsig_core::stats::WilcoxonMode;
use serde::{Deserialize, Serialize};

pub const LOCK_FILE: &str = "config.lock.json";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FitGrouping {
    /// One cost matrix per system × experiment, pooling conditions.
    #[default]
    Experiment,
    /// One cost matrix per system × experiment × condition.
    Condition,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NormGrouping {
    /// All systems and conditions of one experiment.
    #[default]
    Experiment,
    /// All systems within one experiment × condition block.
    Block,
    /// Every row of the table.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lo: 1e-2,
            hi: 1e3,
            n: 64,
        }
    }
}

impl GridConfig {
    pub fn grid(&self) -> Result<LambdaGrid> {
        Ok(LambdaGrid::log_spaced(self.lo, self.hi, self.n)?)
    }
}

/// Every setting a command reads. Unused fields are ignored by a command but
/// still recorded in its lock file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub labels: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    /// Prior used when tracing frontiers from counts.
    pub prior_mode: PriorMode,
    pub prior: PriorConfig,
    pub optimizer: OptimizerSettings,
    /// Compute Laplace standard errors for each fit.
    pub stderr: bool,
    pub grid: GridConfig,
    pub ba: BASettings,
    pub fit_grouping: FitGrouping,
    pub bins: usize,
    pub normalization: NormGrouping,
    /// Pseudocount for severity slopes.
    pub alpha: f64,
    pub wilcoxon_mode: WilcoxonMode,
    pub synth_spec: Option<PathBuf>,
    pub fits: Option<PathBuf>,
    pub signatures: Option<PathBuf>,
    pub contrasts: Option<PathBuf>,
    pub experiment: Option<String>,
    pub levels: Vec<String>,
    pub rho: Option<PathBuf>,
    pub svg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            labels: None,
            inputs: Vec::new(),
            output_dir: None,
            seed: 0,
            prior_mode: PriorMode::Empirical,
            prior: PriorConfig::default(),
            optimizer: OptimizerSettings::default(),
            stderr: true,
            grid: GridConfig::default(),
            ba: BASettings::default(),
            fit_grouping: FitGrouping::Experiment,
            bins: DEFAULT_BINS,
            normalization: NormGrouping::Experiment,
            alpha: 0.5,
            wilcoxon_mode: WilcoxonMode::Auto,
            synth_spec: None,
            fits: None,
            signatures: None,
            contrasts: None,
            experiment: None,
            levels: Vec::new(),
            rho: None,
            svg: false,
        }
    }
}

/// On-disk form of a config or lock file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default)]
    pub config: RunConfig,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

impl RunConfig {
    /// Loads a config or lock file. Relative paths resolve against the file's directory.
    pub fn load(path: &Path, command: &str) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let file: ConfigFile = serde_json::from_str(&text)
            .with_context(|| format!("invalid config file {}", path.display()))?;
        if file.schema_version != SCHEMA_VERSION {
            bail!(
                "{}: unsupported schema_version {}",
                path.display(),
                file.schema_version
            );
        }
        if let Some(c) = &file.command {
            if c != command {
                bail!("{} was written by `{c}`, not `{command}`", path.display());
            }
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = file.config;
        cfg.map_paths(|p| if p.is_relative() { base.join(p) } else { p.to_path_buf() });
        Ok(cfg)
    }

    fn map_paths(&mut self, mut f: impl FnMut(&Path) -> PathBuf) {
        for p in [
            &mut self.labels,
            &mut self.output_dir,
            &mut self.synth_spec,
            &mut self.fits,
            &mut self.signatures,
            &mut self.contrasts,
            &mut self.rho,
        ]
        .into_iter()
        .flatten()
        {
            *p = f(p);
        }
        for p in &mut self.inputs {
            *p = f(p);
        }
    }

    /// Same config with every path made absolute.
    pub fn absolutized(&self) -> Result<Self> {
        let mut out = self.clone();
        let mut err = None;
        out.map_paths(|p| match std::path::absolute(p) {
            Ok(a) => a,
            Err(e) => {
                err.get_or_insert(e);
                p.to_path_buf()
            }
        });
        match err {
            Some(e) => Err(e).context("cannot resolve path"),
            None => Ok(out),
        }
    }

    pub fn lock_json(&self, command: &str) -> Result<String> {
        let file = ConfigFile {
            schema_version: SCHEMA_VERSION,
            command: Some(command.to_string()),
            config: self.absolutized()?,
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.ba.validate()?;
        self.optimizer.ba.validate()?;
        self.grid.grid()?;
        if self.bins < 3 {
            bail!("bins must be >= 3, got {}", self.bins);
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            bail!("alpha must be finite and >= 0, got {}", self.alpha);
        }
        Ok(())
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .context("no output directory given (use --out)")
    }

    pub fn labels_path(&self) -> Result<&Path> {
        self.labels
            .as_deref()
            .context("no labels file given (use --labels)")
    }

    pub fn fits_dir(&self) -> Result<&Path> {
        self.fits
            .as_deref()
            .context("no fit directory given (use --fits)")
    }
}
