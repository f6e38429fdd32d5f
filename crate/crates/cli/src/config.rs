//! Experiment configuration: TOML file, command-line overrides and the echo.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vmfcal::calibrate::CalibrationConfig;
use vmfcal::synth::SynthSpec;
use vmfcal::trainer::TrainConfig;
use vmfcal::verify::VerifyConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenData,
    Train,
    Calibrate,
    SweepAlpha,
    AblateLoss,
    Diagnose,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Calibrate => "calibrate",
            Command::SweepAlpha => "sweep-alpha",
            Command::AblateLoss => "ablate-loss",
            Command::Diagnose => "diagnose",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    /// Whitespace-aligned columns.
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory to read. When absent the dataset is generated from `[data]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Weight-matrix CSV for calibrating a non-vMF classifier.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: None,
            checkpoint: None,
            weights: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Worker threads for sweeps; 1 runs them serially.
    pub parallel: usize,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            parallel: 1,
            checkpoint_every: 0,
        }
    }
}

/// Grid for the pairwise overlap surface with `kappa_j` held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceOptions {
    pub dim: usize,
    pub kappa_j: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub points: usize,
}

impl Default for SurfaceOptions {
    fn default() -> Self {
        SurfaceOptions {
            dim: 512,
            kappa_j: 16.0,
            kappa_min: 12.0,
            kappa_max: 20.0,
            points: 100,
        }
    }
}

impl SurfaceOptions {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(CliError::config("surface.dim must be at least 2"));
        }
        if self.points < 2 {
            return Err(CliError::config("surface.points must be at least 2"));
        }
        if !(self.kappa_min > 0.0 && self.kappa_max > self.kappa_min && self.kappa_max.is_finite()) {
            return Err(CliError::config(
                "surface needs 0 < kappa_min < kappa_max < infinity",
            ));
        }
        if !(self.kappa_j > 0.0 && self.kappa_j.is_finite()) {
            return Err(CliError::config("surface.kappa_j must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    pub output_format: OutputFormat,
    pub paths: Paths,
    pub run: RunOptions,
    pub data: SynthSpec,
    pub train: TrainConfig,
    pub calibration: CalibrationConfig,
    pub surface: SurfaceOptions,
    pub verify: VerifyConfig,
}

/// Command-line flags that override config-file fields.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Seed for data generation, training and verification.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true)]
    pub classes: Option<usize>,
    #[arg(long, value_enum, global = true)]
    pub format: Option<OutputFormat>,
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.data.seed = s;
            self.train.seed = s;
            self.verify.seed = s;
        }
        if let Some(p) = &o.out {
            self.paths.out = p.clone();
        }
        if let Some(a) = o.alpha {
            self.calibration.alpha = a;
        }
        if let Some(l) = o.lambda {
            self.train.loss.lambda = l;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(d) = o.dim {
            self.data.dim = d;
        }
        if let Some(c) = o.classes {
            self.data.num_classes = c;
        }
        if let Some(f) = o.format {
            self.output_format = f;
        }
        if let Some(n) = o.parallel {
            self.run.parallel = n;
        }
        if let Some(p) = &o.dataset {
            self.paths.dataset = Some(p.clone());
        }
        if let Some(p) = &o.checkpoint {
            self.paths.checkpoint = Some(p.clone());
        }
        if let Some(p) = &o.weights {
            self.paths.weights = Some(p.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: vmfcal::Result<()>| {
            r.map_err(|e| CliError::config(format!("[{name}] {e}")))
        };
        section("data", self.data.validate())?;
        section("train", self.train.validate())?;
        section("calibration", self.calibration.validate())?;
        self.surface.validate()?;
        if self.run.parallel == 0 {
            return Err(CliError::config("[run] parallel must be at least 1"));
        }
        if self.verify.mc_samples < 2 {
            return Err(CliError::config("[verify] mc_samples must be at least 2"));
        }
        Ok(())
    }

    /// The post-merge configuration as TOML.
    pub fn echo(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::config(format!("cannot serialise config: {e}")))
    }
}

pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").expect("writing to a String");
    }
    s
}
