//! Per-layer error propagation of plain and calibrated quantized models.
//!
//! `cargo run --release --example trace`

use bisup::analyzer::{datasets, trace_report};
use bisup::calib::{calibrate_model, CalibConfig};
use bisup::data::DataSpec;
use bisup::model::{Model, ModelConfig, QuantizedModel};
use bisup::quant::{QuantConfig, QuantPlan};

fn main() -> bisup::Result<()> {
    let cfg = ModelConfig {
        n_layers: 4,
        ..ModelConfig::default()
    };
    let model = Model::random(&cfg, 8)?;
    let plan = QuantPlan::from(&"W3A3-g16".parse::<QuantConfig>()?);
    let spec = DataSpec {
        samples: 16,
        ..DataSpec::default()
    };
    let (calib, eval) = datasets(&spec, &spec, cfg.vocab, 8)?;

    let baseline = QuantizedModel::rtn(model.clone(), plan.clone())?;
    let bisup = calibrate_model(&model, &calib, &plan, &CalibConfig::default(), 8)?.model;
    let report = trace_report(&model, &baseline, &bisup, &calib, &eval)?;

    println!(
        "{:>5} {:>12} {:>12} {:>12} {:>12} {:>8}",
        "layer", "rtn calib", "bisup calib", "rtn eval", "bisup eval", "supp"
    );
    for l in &report.layers {
        println!(
            "{:>5} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>7.1}%",
            l.layer,
            l.baseline_calib,
            l.bisup_calib,
            l.baseline_eval,
            l.bisup_eval,
            100.0 * l.suppression_eval
        );
    }
    Ok(())
}
