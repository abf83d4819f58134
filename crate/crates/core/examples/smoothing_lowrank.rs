//! Smoothing and low-rank compensation on one weight matrix.
//!
//! Shows that inverse smoothing factors leave `X·W` unchanged, and how much
//! of the weight quantization error the top singular directions recover.
//!
//! `cargo run --example smoothing_lowrank`

use bisup::params::{apply_smoothing, lorc_svd_oracle};
use bisup::quant::{fake_quantize, Axis, Granularity, QuantSpec};
use bisup::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> bisup::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_fn(6, 16, |_, j| {
        rng.random_range(-1.0..1.0) * if j == 0 { 20.0 } else { 1.0 }
    });
    let w = Tensor::from_fn(16, 12, |_, _| rng.random_range(-0.25..0.25));

    let s: Vec<f64> = (0..16)
        .map(|j| {
            x.data()
                .iter()
                .skip(j)
                .step_by(16)
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .sqrt()
        })
        .collect();
    let inv: Vec<f64> = s.iter().map(|v| 1.0 / v).collect();
    let (xs, ws) = apply_smoothing(&x, &w, &inv, &s)?;
    let drift = xs.matmul(&ws)?.sub(&x.matmul(&w)?)?.max_abs();
    println!("max |X·W - (X/s)·(s·W)| = {drift:.2e}");
    println!("activation range {:.2} -> {:.2}", x.max_abs(), xs.max_abs());

    let spec = QuantSpec::symmetric(
        3,
        Granularity::Group {
            size: 4,
            axis: Axis::Column,
        },
    );
    let err = w.sub(&fake_quantize(&w, &spec)?)?;
    println!("\nW3 g4 weight error norm {:.4}", err.frobenius_norm());
    for r in [1, 2, 4, 8, 12] {
        let (a, b) = lorc_svd_oracle(&w, &spec, r)?;
        let left = err.sub(&a.matmul(&b)?)?.frobenius_norm();
        println!("rank {r:>2}: residual {left:.4}");
    }
    Ok(())
}
