//! Calibrates a toy model under W3A3-g16 and compares it with plain
//! round-to-nearest on held-out data.
//!
//! `cargo run --release --example calibrate`

use bisup::analyzer::{calibrate_and_measure, datasets};
use bisup::calib::CalibConfig;
use bisup::data::DataSpec;
use bisup::model::{trace_propagation, Model, ModelConfig, QuantizedModel, TraceTag};
use bisup::quant::{QuantConfig, QuantPlan};

fn main() -> bisup::Result<()> {
    let seed = 3;
    let model = Model::random(&ModelConfig::default(), seed)?;
    let spec: QuantConfig = "W3A3-g16".parse()?;
    let data = DataSpec::default();
    let (calib, eval) = datasets(&data, &data, model.config.vocab, seed)?;

    let (calibrated, report) = calibrate_and_measure(&model, &calib, &eval, &spec, &CalibConfig::default(), seed)?;
    for l in &report.layers {
        println!(
            "layer {}: loss {:.4e} -> {:.4e} over {} steps",
            l.layer, l.initial_loss, l.final_loss, l.steps
        );
    }

    let rtn = QuantizedModel::rtn(model.clone(), QuantPlan::from(&spec))?;
    let base = trace_propagation(&model, &rtn, &eval, TraceTag::Eval)?.final_mse();
    println!(
        "eval final-layer mse: rtn {base:.4e}, calibrated {:.4e}",
        report.eval_final_mse
    );
    println!("ratio {:.3}", report.eval_final_mse / base);
    println!("prompt kept in full precision: {}", calibrated.model.prompt_mixed);
    Ok(())
}
