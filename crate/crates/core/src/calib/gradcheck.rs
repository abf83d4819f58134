//! Central finite-difference checks of the hand-written Θ gradients.
//!
//! The quantized forward is only piecewise smooth. Checks run against the
//! forward with its rounding offsets replayed from a recorded pass, so
//! within one regime (same clamp decisions, same group extrema) it is
//! smooth and its derivative is exactly the straight-through gradient.
//! Coordinates whose ±h probes land in a different regime are excluded.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{layer_backward, layer_forward, LayerQuant, LayerWeights, ModelConfig};
use crate::params::{BiSupParams, ThetaSet};
use crate::quant::{QuantConfig, QuantPlan, RoundingTape};
use crate::tensor::{mse, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, for gradients near zero.
    pub floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
        }
    }
}

/// One evaluation of the checked function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub loss: f64,
    /// Identifies the smooth piece the evaluation landed in.
    pub regime: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdExclusion {
    pub param: String,
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub checked: Vec<FdEntry>,
    pub excluded: Vec<FdExclusion>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        !self.checked.is_empty() && self.max_rel_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&FdEntry> {
        self.checked.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares `analytic[i]` with `(f(x0 + h·eᵢ) - f(x0 - h·eᵢ)) / 2h` for
/// every `i` in `coords`. `labels[i]` names coordinate `i`.
pub fn finite_diff_check<F>(
    x0: &[f64],
    analytic: &[f64],
    labels: &[(String, usize)],
    coords: &[usize],
    opts: &FdOptions,
    mut f: F,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<Probe>,
{
    if analytic.len() != x0.len() || labels.len() != x0.len() {
        return Err(Error::shape("finite-difference inputs disagree in length"));
    }
    let base = f(x0)?;
    let mut checked = Vec::new();
    let mut excluded = Vec::new();
    let mut x = x0.to_vec();
    for &i in coords {
        let (param, index) = labels
            .get(i)
            .cloned()
            .ok_or_else(|| Error::shape("coordinate out of range"))?;
        x[i] = x0[i] + opts.h;
        let plus = f(&x)?;
        x[i] = x0[i] - opts.h;
        let minus = f(&x)?;
        x[i] = x0[i];
        if plus.regime != base.regime || minus.regime != base.regime {
            excluded.push(FdExclusion {
                param,
                index,
                reason: "a clamp decision or group extremum changes within ±h (non-differentiable point)".into(),
            });
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * opts.h);
        let a = analytic[i];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        checked.push(FdEntry {
            param,
            index,
            analytic: a,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = checked.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(FdReport {
        checked,
        excluded,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}

/// Gradient check of the full Θ of a small quantized layer (4 tokens,
/// 8 features, W4A4 with groups of 4) against the full-precision layer output.
pub fn layer_gradcheck(seed: u64, opts: &FdOptions) -> Result<FdReport> {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_hidden: 16,
        vocab: 8,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = LayerWeights::random(&cfg, &mut rng)?;
    let x = Tensor::from_fn(4, 8, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
    let plan = QuantPlan::from(&"W4A4-g4".parse::<QuantConfig>()?);
    let mut theta = BiSupParams::neutral(&layer, &plan, 2, &mut rng)?;
    theta.perturb(&mut rng);
    let target = layer.forward(&x)?;
    theta_gradcheck(&layer, &x, &target, &plan, &theta, opts)
}

/// Checks every Θ coordinate of `theta` on `mse(layer(x), target)`.
pub fn theta_gradcheck(
    layer: &LayerWeights,
    x: &Tensor,
    target: &Tensor,
    plan: &QuantPlan,
    theta: &BiSupParams,
    opts: &FdOptions,
) -> Result<FdReport> {
    let mut tape = RoundingTape::record();
    let pass = layer_forward(layer, x, None, Some(LayerQuant { plan, theta }), Some(&mut tape))?;
    let n = pass.output.len() as f64;
    let g = pass.output.zip_map(target, |a, b| 2.0 * (a - b) / n)?;
    let mut grads = theta.clone();
    grads.zero_grad();
    layer_backward(layer, &pass.cache, &g, Some(&mut grads))?;

    let set = ThetaSet::ALL;
    let analytic = grads.flat_grads(set);
    let labels = theta.flat_labels(set);
    let x0 = theta.flatten(set);
    let coords: Vec<usize> = (0..x0.len()).collect();
    let mut tape = tape.into_replay();
    let mut probe_theta = theta.clone();
    finite_diff_check(&x0, &analytic, &labels, &coords, opts, |flat| {
        probe_theta.load_flat(set, flat)?;
        tape.rewind();
        let p = layer_forward(
            layer,
            x,
            None,
            Some(LayerQuant {
                plan,
                theta: &probe_theta,
            }),
            Some(&mut tape),
        )?;
        Ok(Probe {
            loss: mse(&p.output, target)?,
            regime: p.cache.regime(),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x0 = [1.5];
        let analytic = [2.0 * (1.5 - 0.25)];
        let labels = [("p".to_string(), 0)];
        let r = finite_diff_check(&x0, &analytic, &labels, &[0], &FdOptions::default(), |x| {
            Ok(Probe {
                loss: (x[0] - 0.25) * (x[0] - 0.25),
                regime: 0,
            })
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn regime_change_is_excluded_with_a_reason() {
        let labels = [("c".to_string(), 0)];
        // |x| at its kink: the regime flips with the sign.
        let r = finite_diff_check(&[0.0], &[0.0], &labels, &[0], &FdOptions::default(), |x| {
            Ok(Probe {
                loss: x[0].abs(),
                regime: (x[0] >= 0.0) as u64,
            })
        })
        .unwrap();
        assert!(r.checked.is_empty());
        assert_eq!(r.excluded.len(), 1);
        assert!(r.excluded[0].reason.contains("clamp"));
        assert!(!r.passed());
    }

    #[test]
    fn small_layer_gradients_pass() {
        let r = layer_gradcheck(0, &FdOptions::default()).unwrap();
        let worst = r.worst().unwrap();
        assert!(r.passed(), "worst {worst:?}");
        assert!(r.checked.len() > 3 * r.excluded.len(), "{} excluded", r.excluded.len());
    }
}
