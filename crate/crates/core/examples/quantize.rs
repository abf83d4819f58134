//! Round-to-nearest quantization of a small matrix at several granularities.
//!
//! `cargo run --example quantize`

use bisup::quant::{dequantize, quantize, Axis, ClipMode, Granularity, QuantSpec};
use bisup::Tensor;

fn main() -> bisup::Result<()> {
    // One outlier column, as in real activations.
    let x = Tensor::from_fn(4, 8, |i, j| {
        let base = ((i * 8 + j) as f64 * 0.37).sin();
        if j == 3 {
            12.0 * base
        } else {
            base
        }
    });

    let cases = [
        ("per-tensor", QuantSpec::symmetric(4, Granularity::Tensor)),
        ("per-token", QuantSpec::symmetric(4, Granularity::PerToken)),
        (
            "group of 4",
            QuantSpec::symmetric(
                4,
                Granularity::Group {
                    size: 4,
                    axis: Axis::Row,
                },
            ),
        ),
        (
            "group of 4, clip 0.8",
            QuantSpec::symmetric(
                4,
                Granularity::Group {
                    size: 4,
                    axis: Axis::Row,
                },
            )
            .with_clip(ClipMode::Fixed(0.8)),
        ),
        ("asymmetric per-token", QuantSpec::asymmetric(4, Granularity::PerToken)),
    ];

    println!("{:<22} {:>8} {:>12}", "layout", "groups", "mse");
    for (name, spec) in cases {
        let q = quantize(&x, &spec)?;
        let err = bisup::tensor::mse(&x, &dequantize(&q))?;
        println!("{name:<22} {:>8} {err:>12.3e}", q.scales.len());
    }

    let q = quantize(&x, &QuantSpec::symmetric(3, Granularity::PerToken))?;
    println!("\n3-bit codes of row 0: {:?}", &q.codes[..8]);
    println!("scale of row 0: {:.4}", q.scales[0]);
    Ok(())
}
