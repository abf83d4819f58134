//! Layer-wise calibration of Θ against the full-precision model.
//!
//! Two activation streams run through the stack: `x_fp` through the
//! full-precision layers (the targets) and `x_int` through the already
//! calibrated quantized layers (the inputs the quantized layer will really
//! see). Each layer's Θ is freshly initialized, trained with AdamW on the
//! mean squared error between the two outputs, then frozen.

mod adamw;
mod gradcheck;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    layer_backward, layer_forward, precompute_system_prompt, LayerQuant, LayerWeights, Model, QuantizedModel,
};
use crate::params::{
    BiSupParams, CompensationForm, ThetaInit, ThetaSet, DEFAULT_ACT_CLIP, DEFAULT_RANK, LOWRANK_INIT_STD,
};
use crate::quant::{default_clip_grid, QuantPlan};
use crate::tensor::Tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use gradcheck::{finite_diff_check, layer_gradcheck, FdEntry, FdExclusion, FdOptions, FdReport, Probe};

/// Hook run on each layer before calibration. Only the identity is provided.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocess {
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub rank: usize,
    pub theta: ThetaSet,
    pub form: CompensationForm,
    pub prompt_mixed: bool,
    pub act_clip_init: f64,
    pub weight_clip_search: bool,
    pub lowrank_std: f64,
    pub preprocess: Preprocess,
    /// Loss ratio to the first step's loss that counts as divergence.
    pub divergence_factor: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            rank: DEFAULT_RANK,
            theta: ThetaSet::ALL,
            form: CompensationForm::Stabilized,
            prompt_mixed: true,
            act_clip_init: DEFAULT_ACT_CLIP,
            weight_clip_search: true,
            lowrank_std: LOWRANK_INIT_STD,
            preprocess: Preprocess::None,
            divergence_factor: 10.0,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.rank == 0 {
            return Err(Error::config("batch_size and rank must be positive"));
        }
        if !(self.act_clip_init > 0.0 && self.act_clip_init <= 1.0) {
            return Err(Error::config("act_clip_init must lie in (0, 1]"));
        }
        if self.divergence_factor.is_nan() || self.divergence_factor <= 1.0 {
            return Err(Error::config("divergence_factor must exceed 1"));
        }
        Ok(())
    }

    pub fn theta_init(&self) -> ThetaInit {
        ThetaInit {
            weight_clip_grid: self.weight_clip_search.then(default_clip_grid),
            act_clip: self.act_clip_init,
            rank: self.rank,
            lowrank_std: self.lowrank_std,
            form: self.form,
        }
    }
}

/// `mean((a - b)²)`.
pub fn mse_layer_loss(y_fp: &Tensor, y_int: &Tensor) -> Result<f64> {
    crate::tensor::mse(y_fp, y_int)
}

/// Calibration inputs of one layer: the quantized-stream inputs and the
/// full-precision targets, one entry per sequence.
#[derive(Debug, Clone)]
pub struct LayerData {
    pub x_int: Vec<Tensor>,
    pub target: Vec<Tensor>,
    /// Full-precision prompt keys/values the quantized layer attends to.
    pub prefix: Option<(Tensor, Tensor)>,
    /// Leading rows of the quantized output that are not compared (prompt
    /// positions when the quantized stream includes the prompt).
    pub skip: usize,
}

impl LayerData {
    /// Targets are the full-precision layer applied to `x_fp`, restricted to
    /// the user positions (the last `x_fp.rows() - prompt_len` rows).
    pub fn new(
        layer: &LayerWeights,
        x_fp: &[Tensor],
        x_int: Vec<Tensor>,
        prefix: Option<(Tensor, Tensor)>,
        prompt_len: usize,
    ) -> Result<Self> {
        if x_fp.len() != x_int.len() || x_fp.is_empty() {
            return Err(Error::shape(
                "calibration streams must hold the same, non-zero number of sequences",
            ));
        }
        let target = x_fp
            .iter()
            .map(|x| layer.forward(x)?.slice_rows(prompt_len..x.rows()))
            .collect::<Result<Vec<_>>>()?;
        let skip = if prefix.is_some() { 0 } else { prompt_len };
        for (xi, t) in x_int.iter().zip(&target) {
            if xi.rows() != t.rows() + skip {
                return Err(Error::shape("quantized stream and targets disagree in length"));
            }
        }
        Ok(Self {
            x_int,
            target,
            prefix,
            skip,
        })
    }

    pub fn len(&self) -> usize {
        self.x_int.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_int.is_empty()
    }

    fn prefix(&self) -> Option<(&Tensor, &Tensor)> {
        self.prefix.as_ref().map(|(k, v)| (k, v))
    }

    /// Quantized layer output for sequence `i`, all rows.
    pub fn forward(&self, layer: &LayerWeights, quant: LayerQuant<'_>, i: usize) -> Result<Tensor> {
        Ok(layer_forward(layer, &self.x_int[i], self.prefix(), Some(quant), None)?.output)
    }

    /// Mean squared error over the compared rows of the given sequences.
    pub fn loss(&self, layer: &LayerWeights, quant: LayerQuant<'_>, seqs: &[usize]) -> Result<f64> {
        let parts = seqs
            .par_iter()
            .map(|&i| {
                let out = self.forward(layer, quant, i)?;
                Ok(sq_err(&out, &self.target[i], self.skip))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.iter().sum::<f64>() / self.count(seqs) as f64)
    }

    fn count(&self, seqs: &[usize]) -> usize {
        seqs.iter().map(|&i| self.target[i].len()).sum()
    }

    /// Loss and Θ gradients (written into `theta`'s grad slots) on a batch.
    pub fn loss_and_grad(
        &self,
        layer: &LayerWeights,
        plan: &QuantPlan,
        theta: &mut BiSupParams,
        set: ThetaSet,
        seqs: &[usize],
    ) -> Result<f64> {
        let n = self.count(seqs) as f64;
        let base = &*theta;
        let parts = seqs
            .par_iter()
            .map(|&i| {
                let quant = LayerQuant { plan, theta: base };
                let pass = layer_forward(layer, &self.x_int[i], self.prefix(), Some(quant), None)?;
                let target = &self.target[i];
                let sq = sq_err(&pass.output, target, self.skip);
                let d = target.cols();
                let mut g = Tensor::zeros(pass.output.shape());
                for (k, gv) in g.data_mut()[self.skip * d..].iter_mut().enumerate() {
                    *gv = 2.0 * (pass.output.data()[self.skip * d + k] - target.data()[k]) / n;
                }
                let mut local = base.clone();
                local.zero_grad();
                layer_backward(layer, &pass.cache, &g, Some(&mut local))?;
                Ok((sq, local.flat_grads(set)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        let mut grad = vec![0.0; parts.first().map_or(0, |p| p.1.len())];
        for (sq, g) in &parts {
            total += sq;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        theta.zero_grad();
        let mut at = 0;
        for p in theta.params_mut(set) {
            let len = p.grad.len();
            p.grad.data_mut().copy_from_slice(&grad[at..at + len]);
            at += len;
        }
        Ok(total / n)
    }
}

fn sq_err(out: &Tensor, target: &Tensor, skip: usize) -> f64 {
    let d = target.cols();
    out.data()[skip * d..]
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Outcome of calibrating one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    /// Batch loss before each optimizer step.
    pub losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
    /// Loss on the whole calibration set with the initial and the final Θ.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub lr: f64,
    pub restarted: bool,
}

enum Attempt {
    Done(BiSupParams, Vec<f64>),
    Diverged { step: usize, loss: f64, first: f64 },
}

/// Trains `theta` on one layer. Loss blow-ups beyond
/// `divergence_factor × first loss` restart the layer once at half the
/// learning rate; a second blow-up or a non-finite loss is an error.
pub fn calibrate_layer(
    layer: &LayerWeights,
    data: &LayerData,
    plan: &QuantPlan,
    theta: BiSupParams,
    cfg: &CalibConfig,
) -> Result<(BiSupParams, LayerCalibration)> {
    cfg.validate()?;
    let all: Vec<usize> = (0..data.len()).collect();
    let initial_loss = data.loss(layer, LayerQuant { plan, theta: &theta }, &all)?;
    let mut lr = cfg.optimizer.lr;
    let mut restarted = false;
    let (trained, losses) = loop {
        match train(layer, data, plan, theta.clone(), cfg, lr)? {
            Attempt::Done(t, l) => break (t, l),
            Attempt::Diverged { step, loss, first } => {
                if restarted {
                    return Err(Error::numeric(format!(
                        "loss diverged again after halving the learning rate to {lr}: \
                         step {step} loss {loss:.4e} vs first {first:.4e}; lower optimizer.lr"
                    )));
                }
                restarted = true;
                lr *= 0.5;
            }
        }
    };
    let final_loss = data.loss(layer, LayerQuant { plan, theta: &trained }, &all)?;
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let epoch_means = losses
        .chunks(per_epoch.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    Ok((
        trained,
        LayerCalibration {
            losses,
            epoch_means,
            initial_loss,
            final_loss,
            lr,
            restarted,
        },
    ))
}

fn train(
    layer: &LayerWeights,
    data: &LayerData,
    plan: &QuantPlan,
    mut theta: BiSupParams,
    cfg: &CalibConfig,
    lr: f64,
) -> Result<Attempt> {
    let mut losses = Vec::new();
    if cfg.theta.is_empty() || cfg.epochs == 0 {
        return Ok(Attempt::Done(theta, losses));
    }
    let opt = AdamWConfig { lr, ..cfg.optimizer };
    let mut adam = AdamWState::new(opt, &theta.params_mut(cfg.theta));
    let order: Vec<usize> = (0..data.len()).collect();
    for _epoch in 0..cfg.epochs {
        for batch in order.chunks(cfg.batch_size) {
            let loss = data.loss_and_grad(layer, plan, &mut theta, cfg.theta, batch)?;
            if !loss.is_finite() || !theta.params(cfg.theta).iter().all(|p| p.grad.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite loss or gradient at step {} (loss {loss}); \
                     the learning rate {lr} is likely too high for this spec",
                    losses.len()
                )));
            }
            let first = *losses.first().unwrap_or(&loss);
            if loss > cfg.divergence_factor * first {
                return Ok(Attempt::Diverged {
                    step: losses.len(),
                    loss,
                    first,
                });
            }
            losses.push(loss);
            adam.step(&mut theta.params_mut(cfg.theta))?;
            theta.project_clips();
        }
    }
    Ok(Attempt::Done(theta, losses))
}

/// A calibrated model plus the per-layer training record.
#[derive(Debug, Clone)]
pub struct Calibrated {
    pub model: QuantizedModel,
    pub layers: Vec<LayerCalibration>,
}

/// Seed of layer `l`'s Θ initialization.
fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(layer as u64 + 1))
}

/// Calibrates every layer in order, feeding each the outputs of the
/// already quantized layers before it.
pub fn calibrate_model(
    model: &Model,
    data: &Dataset,
    plan: &QuantPlan,
    cfg: &CalibConfig,
    seed: u64,
) -> Result<Calibrated> {
    cfg.validate()?;
    model.validate()?;
    if data.sequences.is_empty() {
        return Err(Error::config("calibration needs at least one sequence"));
    }
    let p = data.prompt.len();
    let mixed = cfg.prompt_mixed && p > 0;
    let prompt_cache = if mixed {
        Some(precompute_system_prompt(model, &data.prompt)?)
    } else {
        None
    };
    let mut x_fp = (0..data.sequences.len())
        .map(|i| model.embed(&data.full_sequence(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut x_int = if mixed {
        data.sequences
            .iter()
            .map(|u| model.embed(u))
            .collect::<Result<Vec<_>>>()?
    } else {
        x_fp.clone()
    };

    let mut thetas = Vec::with_capacity(model.layers.len());
    let mut reports = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let mut run = || -> Result<(Vec<Tensor>, Vec<Tensor>)> {
            let prefix = match &prompt_cache {
                Some(c) => c.layer(l).materialize()?,
                None => None,
            };
            let layer_data = LayerData::new(layer, &x_fp, x_int.clone(), prefix, p)?;
            let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, l));
            let theta0 = BiSupParams::init(layer, plan, &cfg.theta_init(), &mut rng)?;
            let (theta, report) = calibrate_layer(layer, &layer_data, plan, theta0, cfg)?;
            let quant = LayerQuant { plan, theta: &theta };
            let next_int = (0..layer_data.len())
                .into_par_iter()
                .map(|i| layer_data.forward(layer, quant, i))
                .collect::<Result<Vec<_>>>()?;
            let next_fp = x_fp.par_iter().map(|x| layer.forward(x)).collect::<Result<Vec<_>>>()?;
            thetas.push(theta);
            reports.push(report);
            Ok((next_fp, next_int))
        };
        let (next_fp, next_int) = run().map_err(|e| e.in_layer(l))?;
        x_fp = next_fp;
        x_int = next_int;
    }
    Ok(Calibrated {
        model: QuantizedModel::new(model.clone(), plan.clone(), thetas, mixed)?,
        layers: reports,
    })
}
