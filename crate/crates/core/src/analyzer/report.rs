use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Command, ReportFormat};
use crate::calib::{FdEntry, FdExclusion, LayerCalibration};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ThetaSet;
use crate::quant::QuantConfig;

pub const SCHEMA: &str = "bisup-report";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub version: u32,
    pub command: Command,
    pub seed: u64,
    pub spec: Option<QuantConfig>,
    pub body: ReportBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReportBody {
    Synth(SynthReport),
    Calibrate(CalibrateReport),
    Trace(TraceReport),
    Ablate(AblationReport),
    Sweep(SweepReport),
    Gradcheck(GradcheckReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub config: ModelConfig,
    pub first_token_strength: Option<f64>,
    pub parameters: usize,
    pub file_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub first_epoch_mean: f64,
    pub last_epoch_mean: f64,
    pub steps: usize,
    pub lr: f64,
    pub restarted: bool,
}

impl LayerSummary {
    pub fn new(layer: usize, c: &LayerCalibration) -> Self {
        Self {
            layer,
            initial_loss: c.initial_loss,
            final_loss: c.final_loss,
            first_epoch_mean: c.epoch_means.first().copied().unwrap_or(c.initial_loss),
            last_epoch_mean: c.epoch_means.last().copied().unwrap_or(c.initial_loss),
            steps: c.losses.len(),
            lr: c.lr,
            restarted: c.restarted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateReport {
    pub samples: usize,
    pub epochs: usize,
    pub rank: usize,
    pub prompt_mixed: bool,
    pub layers: Vec<LayerSummary>,
    pub calib_final_mse: f64,
    pub eval_final_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLayer {
    pub layer: usize,
    pub baseline_calib: f64,
    pub bisup_calib: f64,
    pub baseline_eval: f64,
    pub bisup_eval: f64,
    pub suppression_calib: f64,
    pub suppression_eval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub layers: Vec<TraceLayer>,
}

impl TraceReport {
    pub fn final_layer(&self) -> Option<&TraceLayer> {
        self.layers.last()
    }
}

/// `1 - bisup / baseline`, and 0 when the baseline has no error.
pub fn suppression_rate(baseline: f64, bisup: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        1.0 - bisup / baseline
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub theta: ThetaSet,
    pub prompt_mixed: bool,
    pub calib_final_mse: f64,
    pub eval_final_mse: f64,
    /// Mean over layers of the final calibration loss.
    pub calibration_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub samples: usize,
    pub iterations: usize,
    pub rank: usize,
    pub calib_final_mse: f64,
    pub eval_final_mse: f64,
    pub calibration_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: Vec<FdEntry>,
    pub excluded: Vec<FdExclusion>,
}

impl Report {
    pub fn new(command: Command, seed: u64, spec: Option<QuantConfig>, body: ReportBody) -> Self {
        Self {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
            command,
            seed,
            spec,
            body,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::format(e.to_string()))?;
        if r.schema != SCHEMA || r.version != SCHEMA_VERSION {
            return Err(Error::format(format!(
                "unsupported report schema {} v{}",
                r.schema, r.version
            )));
        }
        Ok(r)
    }

    /// Flat table of the report's rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::format(e.to_string());
        match &self.body {
            ReportBody::Synth(s) => {
                w.write_record([
                    "n_layers",
                    "d_model",
                    "n_heads",
                    "d_hidden",
                    "vocab",
                    "parameters",
                    "file_bytes",
                ])
                .map_err(err)?;
                let c = &s.config;
                w.write_record(
                    [
                        c.n_layers,
                        c.d_model,
                        c.n_heads,
                        c.d_hidden,
                        c.vocab,
                        s.parameters,
                        s.file_bytes,
                    ]
                    .map(|v| v.to_string()),
                )
                .map_err(err)?;
            }
            ReportBody::Calibrate(c) => {
                for l in &c.layers {
                    w.serialize(l).map_err(err)?;
                }
            }
            ReportBody::Trace(t) => {
                for l in &t.layers {
                    w.serialize(l).map_err(err)?;
                }
            }
            ReportBody::Ablate(a) => {
                w.write_record([
                    "name",
                    "clip",
                    "smooth",
                    "lowrank",
                    "prompt_mixed",
                    "calib_final_mse",
                    "eval_final_mse",
                    "calibration_loss",
                ])
                .map_err(err)?;
                for r in &a.rows {
                    w.write_record([
                        r.name.clone(),
                        r.theta.clip.to_string(),
                        r.theta.smooth.to_string(),
                        r.theta.lowrank.to_string(),
                        r.prompt_mixed.to_string(),
                        r.calib_final_mse.to_string(),
                        r.eval_final_mse.to_string(),
                        r.calibration_loss.to_string(),
                    ])
                    .map_err(err)?;
                }
            }
            ReportBody::Sweep(s) => {
                for c in &s.cells {
                    w.serialize(c).map_err(err)?;
                }
            }
            ReportBody::Gradcheck(g) => {
                for e in &g.checked {
                    w.serialize(e).map_err(err)?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format(e.to_string()))
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
        }
    }

    pub fn write(&self, path: &Path, format: ReportFormat) -> Result<()> {
        fs::write(path, self.render(format)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ablation() -> Report {
        let row = |name: &str, v: f64| AblationRow {
            name: name.into(),
            theta: ThetaSet::ALL,
            prompt_mixed: false,
            calib_final_mse: v,
            eval_final_mse: v * 1.1,
            calibration_loss: v / 3.0,
        };
        Report::new(
            Command::Ablate,
            3,
            Some("W3A3-g16".parse().unwrap()),
            ReportBody::Ablate(AblationReport {
                rows: vec![row("rtn", 0.1234567890123), row("fwac", 1e-300)],
            }),
        )
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = ablation();
        let text = r.to_json().unwrap();
        assert!(text.contains("\"kind\": \"ablate\""));
        let back = Report::from_json(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn rejects_other_schema_versions() {
        let text = ablation()
            .to_json()
            .unwrap()
            .replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(Report::from_json(&text), Err(Error::Format(_))));
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let csv = ablation().to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("name,clip,smooth,lowrank"));
        assert!(lines[1].starts_with("rtn,true,true,true,false,0.1234567890123"));
    }

    #[test]
    fn suppression_rate_edges() {
        assert_eq!(suppression_rate(0.0, 0.0), 0.0);
        assert_eq!(suppression_rate(2.0, 2.0), 0.0);
        assert_eq!(suppression_rate(2.0, 0.0), 1.0);
        assert_eq!(suppression_rate(2.0, 0.5), 0.75);
    }
}
