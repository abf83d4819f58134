//! The cumulative technique ladder on one seed.
//!
//! `cargo run --release --example ablate`

use bisup::analyzer::{datasets, run_ablation};
use bisup::calib::CalibConfig;
use bisup::data::DataSpec;
use bisup::model::{Model, ModelConfig};

fn main() -> bisup::Result<()> {
    let seed = 0;
    let model = Model::random(&ModelConfig::default(), seed)?;
    let data = DataSpec::default();
    let (calib, eval) = datasets(&data, &data, model.config.vocab, seed)?;
    let report = run_ablation(
        &model,
        &calib,
        &eval,
        &"W3A3-g16".parse()?,
        &CalibConfig::default(),
        seed,
    )?;
    let base = report.rows[0].eval_final_mse;
    println!("{:<14} {:>12} {:>8} {:>12}", "row", "eval mse", "ratio", "calib loss");
    for r in &report.rows {
        println!(
            "{:<14} {:>12.4e} {:>8.3} {:>12.4e}",
            r.name,
            r.eval_final_mse,
            r.eval_final_mse / base,
            r.calibration_loss
        );
    }
    Ok(())
}
