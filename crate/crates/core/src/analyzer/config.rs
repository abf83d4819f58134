use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::{CalibConfig, FdOptions};
use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::quant::QuantConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Synth,
    Calibrate,
    Trace,
    Ablate,
    Sweep,
    Gradcheck,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Synth,
        Command::Calibrate,
        Command::Trace,
        Command::Ablate,
        Command::Sweep,
        Command::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Calibrate => "calibrate",
            Command::Trace => "trace",
            Command::Ablate => "ablate",
            Command::Sweep => "sweep",
            Command::Gradcheck => "gradcheck",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown command {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

/// Sweep grid. `iterations` counts calibration epochs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub samples: Vec<usize>,
    pub iterations: Vec<usize>,
    pub ranks: Vec<usize>,
    /// Replace the axes with the large-scale grid.
    pub large_axes: bool,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            samples: vec![8, 16, 32],
            iterations: vec![2, 5, 10],
            ranks: vec![4, 8, 16],
            large_axes: false,
        }
    }
}

impl SweepAxes {
    pub fn large() -> Self {
        Self {
            samples: vec![64, 128, 256],
            iterations: vec![5, 10, 20],
            ranks: vec![16, 32, 64],
            large_axes: true,
        }
    }

    /// The axes actually swept.
    pub fn resolved(&self) -> Self {
        if self.large_axes {
            Self::large()
        } else {
            self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.resolved();
        if a.samples.is_empty() || a.iterations.is_empty() || a.ranks.is_empty() {
            return Err(Error::config("sweep axes must be non-empty"));
        }
        if a.samples.contains(&0) || a.ranks.contains(&0) {
            return Err(Error::config("sweep samples and ranks must be positive"));
        }
        Ok(())
    }
}

/// Everything a command needs, read from a TOML file and overridden by CLI flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub seed: u64,
    pub spec: QuantConfig,
    pub format: ReportFormat,
    /// Report path.
    pub out: Option<PathBuf>,
    /// Input model file. Without it the model is synthesized from `[model_config]`.
    pub model: Option<PathBuf>,
    /// Model file written by `synth` and `calibrate`.
    pub artifact: Option<PathBuf>,
    /// Build the first-token-dominant construction at this strength instead
    /// of a plain random model.
    pub first_token_strength: Option<f64>,
    pub model_config: ModelConfig,
    pub data: DataSpec,
    /// Evaluation data shape; defaults to `data`.
    pub eval: Option<DataSpec>,
    pub calib: CalibConfig,
    pub sweep: SweepAxes,
    pub gradcheck: FdOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: 0,
            spec: QuantConfig::new(3, 3, Some(16)).expect("valid default spec"),
            format: ReportFormat::Json,
            out: None,
            model: None,
            artifact: None,
            first_token_strength: None,
            model_config: ModelConfig::default(),
            data: DataSpec::default(),
            eval: None,
            calib: CalibConfig::default(),
            sweep: SweepAxes::default(),
            gradcheck: FdOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.out, &mut cfg.model, &mut cfg.artifact].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn eval_spec(&self) -> DataSpec {
        self.eval.unwrap_or(self.data)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config.validate()?;
        self.calib.validate()?;
        self.sweep.validate()?;
        if let Some(s) = self.first_token_strength {
            if !s.is_finite() {
                return Err(Error::config("first_token_strength must be finite"));
            }
        }
        let g = &self.gradcheck;
        if !(g.h > 0.0 && g.tolerance > 0.0 && g.floor > 0.0) {
            return Err(Error::config("gradcheck h, tolerance and floor must be positive"));
        }
        Ok(())
    }

    pub fn command(&self) -> Result<Command> {
        self.command.ok_or_else(|| Error::config("no command given"))
    }

    pub fn report_path(&self) -> Result<PathBuf> {
        let cmd = self.command()?;
        Ok(self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("{cmd}.{}", self.format.extension()))))
    }

    /// Where `synth`/`calibrate` write their model file: `artifact`, or the
    /// report path with a `.bsmd` extension.
    pub fn artifact_path(&self) -> Result<PathBuf> {
        match &self.artifact {
            Some(p) => Ok(p.clone()),
            None => Ok(self.report_path()?.with_extension("bsmd")),
        }
    }
}
