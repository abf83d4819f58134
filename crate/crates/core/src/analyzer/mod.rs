//! Experiment commands behind the `bisup` binary: model synthesis,
//! calibration, propagation traces, the technique ablation ladder and
//! hyperparameter sweeps, each emitting a versioned report.

mod config;
mod report;

pub use config::{Command, ReportFormat, RunConfig, SweepAxes};
pub use report::{
    suppression_rate, AblationReport, AblationRow, CalibrateReport, GradcheckReport, LayerSummary, Report, ReportBody,
    SweepCell, SweepReport, SynthReport, TraceLayer, TraceReport, SCHEMA, SCHEMA_VERSION,
};

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{calibrate_model, layer_gradcheck, CalibConfig, Calibrated};
use crate::data::{DataSpec, Dataset};
use crate::error::{Error, Result};
use crate::io::ModelFile;
use crate::model::{trace_propagation, Model, ModelConfig, QuantizedModel, TraceTag};
use crate::params::ThetaSet;
use crate::quant::{QuantConfig, QuantPlan};

/// Environment variable capping the sweep's worker threads.
pub const THREADS_ENV: &str = "BISUP_THREADS";

/// A plain random model, or the first-token-dominant construction.
pub fn synth_model(cfg: &ModelConfig, seed: u64, first_token_strength: Option<f64>) -> Result<Model> {
    match first_token_strength {
        Some(s) => Model::first_token_dominant(cfg, seed, s),
        None => Model::random(cfg, seed),
    }
}

/// Calibration and evaluation data for `vocab`. The prompt depends only on
/// the seed and its length.
pub fn datasets(calib: &DataSpec, eval: &DataSpec, vocab: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let c = Dataset::calibration(calib, vocab, seed)?;
    let e = Dataset::evaluation(eval, vocab, seed)?;
    Ok((c, e))
}

fn final_mse(fp: &Model, q: &QuantizedModel, data: &Dataset, tag: TraceTag) -> Result<f64> {
    Ok(trace_propagation(fp, q, data, tag)?.final_mse())
}

fn mean_final_loss(c: &Calibrated) -> f64 {
    c.layers.iter().map(|l| l.final_loss).sum::<f64>() / c.layers.len().max(1) as f64
}

/// Calibrates `model` and measures the final-layer error on both datasets.
pub fn calibrate_and_measure(
    model: &Model,
    calib: &Dataset,
    eval: &Dataset,
    spec: &QuantConfig,
    cfg: &CalibConfig,
    seed: u64,
) -> Result<(Calibrated, CalibrateReport)> {
    let c = calibrate_model(model, calib, &QuantPlan::from(spec), cfg, seed)?;
    let report = CalibrateReport {
        samples: calib.sequences.len(),
        epochs: cfg.epochs,
        rank: cfg.rank,
        prompt_mixed: c.model.prompt_mixed,
        layers: c
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerSummary::new(i, l))
            .collect(),
        calib_final_mse: final_mse(model, &c.model, calib, TraceTag::Calib)?,
        eval_final_mse: final_mse(model, &c.model, eval, TraceTag::Eval)?,
    };
    Ok((c, report))
}

/// Per-layer error of `baseline` and `bisup` against `fp` on both datasets.
pub fn trace_report(
    fp: &Model,
    baseline: &QuantizedModel,
    bisup: &QuantizedModel,
    calib: &Dataset,
    eval: &Dataset,
) -> Result<TraceReport> {
    let bc = trace_propagation(fp, baseline, calib, TraceTag::Calib)?;
    let qc = trace_propagation(fp, bisup, calib, TraceTag::Calib)?;
    let be = trace_propagation(fp, baseline, eval, TraceTag::Eval)?;
    let qe = trace_propagation(fp, bisup, eval, TraceTag::Eval)?;
    let layers = (0..fp.layers.len())
        .map(|l| TraceLayer {
            layer: l,
            baseline_calib: bc.layer_mse[l],
            bisup_calib: qc.layer_mse[l],
            baseline_eval: be.layer_mse[l],
            bisup_eval: qe.layer_mse[l],
            suppression_calib: suppression_rate(bc.layer_mse[l], qc.layer_mse[l]),
            suppression_eval: suppression_rate(be.layer_mse[l], qe.layer_mse[l]),
        })
        .collect();
    Ok(TraceReport { layers })
}

/// The cumulative ladder: plain round-to-nearest, then learnable clipping,
/// smoothing, stabilized low-rank compensation and the mixed-precision prompt.
pub fn ablation_ladder(base: &CalibConfig) -> Vec<(&'static str, CalibConfig)> {
    let row = |theta: ThetaSet, prompt_mixed: bool| CalibConfig {
        theta,
        prompt_mixed,
        ..base.clone()
    };
    let rtn = CalibConfig {
        epochs: 0,
        theta: ThetaSet::NONE,
        prompt_mixed: false,
        act_clip_init: 1.0,
        weight_clip_search: false,
        ..base.clone()
    };
    let clip = ThetaSet {
        clip: true,
        smooth: false,
        lowrank: false,
    };
    let smooth = ThetaSet { smooth: true, ..clip };
    vec![
        ("rtn", rtn),
        ("+fwac", row(clip, false)),
        ("+swas", row(smooth, false)),
        ("+slrec", row(ThetaSet::ALL, false)),
        ("+prompt-mixed", row(ThetaSet::ALL, true)),
    ]
}

/// Runs every ladder row on the same model, data and seed.
pub fn run_ablation(
    model: &Model,
    calib: &Dataset,
    eval: &Dataset,
    spec: &QuantConfig,
    base: &CalibConfig,
    seed: u64,
) -> Result<AblationReport> {
    let rows = ablation_ladder(base)
        .into_iter()
        .map(|(name, cfg)| {
            let (c, r) = calibrate_and_measure(model, calib, eval, spec, &cfg, seed)?;
            Ok(AblationRow {
                name: name.into(),
                theta: cfg.theta,
                prompt_mixed: r.prompt_mixed,
                calib_final_mse: r.calib_final_mse,
                eval_final_mse: r.eval_final_mse,
                calibration_loss: mean_final_loss(&c),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}

/// Worker cap from [`THREADS_ENV`]; `None` when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub samples: usize,
    pub iterations: usize,
    pub rank: usize,
    pub wall_seconds: f64,
}

/// Sweep settings besides the grid.
#[derive(Debug, Clone, Default)]
pub struct SweepRun {
    pub threads: Option<usize>,
    /// Each finished cell is appended here as one JSON line.
    pub partial: Option<PathBuf>,
}

/// One calibration per grid cell. Cells are independent and run in
/// parallel; the report lists them in grid order.
pub fn run_sweep(model: &Model, cfg: &RunConfig, run: &SweepRun) -> Result<(SweepReport, Vec<CellTiming>)> {
    let axes = cfg.sweep.resolved();
    axes.validate()?;
    let mut grid = Vec::new();
    for &s in &axes.samples {
        for &i in &axes.iterations {
            for &r in &axes.ranks {
                grid.push((s, i, r));
            }
        }
    }
    let partial = match &run.partial {
        Some(p) => Some(Mutex::new(File::create(p)?)),
        None => None,
    };
    let cell = |&(samples, iterations, rank): &(usize, usize, usize)| -> Result<(SweepCell, CellTiming)> {
        let start = Instant::now();
        let data = DataSpec { samples, ..cfg.data };
        let (calib, eval) = datasets(&data, &cfg.eval_spec(), model.config.vocab, cfg.seed)?;
        let calib_cfg = CalibConfig {
            epochs: iterations,
            rank,
            ..cfg.calib.clone()
        };
        let (c, r) = calibrate_and_measure(model, &calib, &eval, &cfg.spec, &calib_cfg, cfg.seed)?;
        let cell = SweepCell {
            samples,
            iterations,
            rank,
            calib_final_mse: r.calib_final_mse,
            eval_final_mse: r.eval_final_mse,
            calibration_loss: mean_final_loss(&c),
        };
        if let Some(f) = &partial {
            let line = serde_json::to_string(&cell).map_err(|e| Error::format(e.to_string()))?;
            let mut f = f
                .lock()
                .map_err(|_| Error::State("partial results file poisoned".into()))?;
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        let timing = CellTiming {
            samples,
            iterations,
            rank,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        Ok((cell, timing))
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = run.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::config(e.to_string()))?;
    let results: Vec<(SweepCell, CellTiming)> =
        pool.install(|| grid.par_iter().map(cell).collect::<Result<Vec<_>>>())?;
    let (cells, timings) = results.into_iter().unzip();
    Ok((SweepReport { cells }, timings))
}

fn load_or_synth(cfg: &RunConfig) -> Result<ModelFile> {
    match &cfg.model {
        Some(p) => ModelFile::load(p),
        None => Ok(ModelFile::plain(synth_model(
            &cfg.model_config,
            cfg.seed,
            cfg.first_token_strength,
        )?)),
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs the configured command, writes its artifacts and report, and returns the report.
pub fn run(cfg: &RunConfig) -> Result<Report> {
    cfg.validate()?;
    let command = cfg.command()?;
    let out = cfg.report_path()?;
    let body = match command {
        Command::Synth => {
            let model = synth_model(&cfg.model_config, cfg.seed, cfg.first_token_strength)?;
            let bytes = ModelFile::plain(model.clone()).to_bytes()?;
            fs::write(cfg.artifact_path()?, &bytes)?;
            let parameters = model.embedding.len()
                + model
                    .layers
                    .iter()
                    .map(|l| l.named_tensors().iter().map(|(_, t)| t.len()).sum::<usize>())
                    .sum::<usize>();
            ReportBody::Synth(SynthReport {
                config: model.config,
                first_token_strength: cfg.first_token_strength,
                parameters,
                file_bytes: bytes.len(),
            })
        }
        Command::Calibrate => {
            let file = load_or_synth(cfg)?;
            let (calib, eval) = datasets(&cfg.data, &cfg.eval_spec(), file.model.config.vocab, cfg.seed)?;
            let (c, report) = calibrate_and_measure(&file.model, &calib, &eval, &cfg.spec, &cfg.calib, cfg.seed)?;
            ModelFile::calibrated(&c.model, cfg.spec).save(&cfg.artifact_path()?)?;
            ReportBody::Calibrate(report)
        }
        Command::Trace => {
            let file = load_or_synth(cfg)?;
            let (calib, eval) = datasets(&cfg.data, &cfg.eval_spec(), file.model.config.vocab, cfg.seed)?;
            let bisup = match &file.quant {
                Some(q) if q.spec != cfg.spec => {
                    return Err(Error::config(format!(
                        "model file was calibrated for {} but the run asks for {}",
                        q.spec, cfg.spec
                    )))
                }
                Some(_) => file.quantized().expect("quant section present")?,
                None => calibrate_model(&file.model, &calib, &QuantPlan::from(&cfg.spec), &cfg.calib, cfg.seed)?.model,
            };
            let baseline = QuantizedModel::rtn(file.model.clone(), QuantPlan::from(&cfg.spec))?;
            ReportBody::Trace(trace_report(&file.model, &baseline, &bisup, &calib, &eval)?)
        }
        Command::Ablate => {
            let file = load_or_synth(cfg)?;
            let (calib, eval) = datasets(&cfg.data, &cfg.eval_spec(), file.model.config.vocab, cfg.seed)?;
            ReportBody::Ablate(run_ablation(
                &file.model,
                &calib,
                &eval,
                &cfg.spec,
                &cfg.calib,
                cfg.seed,
            )?)
        }
        Command::Sweep => {
            let file = load_or_synth(cfg)?;
            let run = SweepRun {
                threads: threads_from_env()?,
                partial: Some(sidecar(&out, ".partial.jsonl")),
            };
            let start = Instant::now();
            let (report, timings) = run_sweep(&file.model, cfg, &run)?;
            let timing = serde_json::json!({
                "cells": timings,
                "total_seconds": start.elapsed().as_secs_f64(),
                "threads": rayon_threads(run.threads),
            });
            let text = serde_json::to_string_pretty(&timing).map_err(|e| Error::format(e.to_string()))?;
            fs::write(sidecar(&out, ".timing.json"), text + "\n")?;
            ReportBody::Sweep(report)
        }
        Command::Gradcheck => {
            let r = layer_gradcheck(cfg.seed, &cfg.gradcheck)?;
            ReportBody::Gradcheck(GradcheckReport {
                passed: r.passed(),
                max_rel_error: r.max_rel_error,
                tolerance: r.tolerance,
                checked: r.checked,
                excluded: r.excluded,
            })
        }
    };
    let spec = match command {
        Command::Synth => None,
        Command::Gradcheck => Some("W4A4-g4".parse()?),
        _ => Some(cfg.spec),
    };
    let report = Report::new(command, cfg.seed, spec, body);
    report.write(&out, cfg.format)?;
    Ok(report)
}

fn rayon_threads(cap: Option<usize>) -> usize {
    cap.unwrap_or_else(rayon::current_num_threads)
}
