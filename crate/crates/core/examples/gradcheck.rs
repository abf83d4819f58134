//! Finite-difference check of every hand-written Θ gradient on a small layer.
//!
//! `cargo run --release --example gradcheck`

use bisup::calib::{layer_gradcheck, FdOptions};

fn main() -> bisup::Result<()> {
    let report = layer_gradcheck(0, &FdOptions::default())?;
    println!(
        "checked {} coordinates, excluded {}, max relative error {:.2e} (tolerance {:.0e})",
        report.checked.len(),
        report.excluded.len(),
        report.max_rel_error,
        report.tolerance
    );
    if let Some(w) = report.worst() {
        println!(
            "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    for e in report.excluded.iter().take(3) {
        println!("excluded {}[{}]: {}", e.param, e.index, e.reason);
    }
    println!("{}", if report.passed() { "PASS" } else { "FAIL" });
    Ok(())
}
