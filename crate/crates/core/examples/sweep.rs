//! A small samples × iterations × rank grid, run in parallel.
//!
//! `BISUP_THREADS=2 cargo run --release --example sweep`

use bisup::analyzer::{run_sweep, threads_from_env, RunConfig, SweepAxes, SweepRun};
use bisup::data::DataSpec;
use bisup::model::{Model, ModelConfig};

fn main() -> bisup::Result<()> {
    let cfg = RunConfig {
        model_config: ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        },
        data: DataSpec {
            samples: 16,
            seq_len: 16,
            prompt_len: 1,
        },
        sweep: SweepAxes {
            samples: vec![8, 16],
            iterations: vec![2, 5],
            ranks: vec![4, 16],
            large_axes: false,
        },
        ..RunConfig::default()
    };
    let model = Model::random(&cfg.model_config, cfg.seed)?;
    let run = SweepRun {
        threads: threads_from_env()?,
        partial: None,
    };
    let (report, timings) = run_sweep(&model, &cfg, &run)?;
    println!(
        "{:>7} {:>5} {:>4} {:>12} {:>8}",
        "samples", "iters", "rank", "eval mse", "seconds"
    );
    for (c, t) in report.cells.iter().zip(&timings) {
        println!(
            "{:>7} {:>5} {:>4} {:>12.4e} {:>8.2}",
            c.samples, c.iterations, c.rank, c.eval_final_mse, t.wall_seconds
        );
    }
    Ok(())
}
