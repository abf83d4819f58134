use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{layer_forward, LayerQuant, MixedKVCache, Model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::BiSupParams;
use crate::quant::QuantPlan;
use crate::tensor::Tensor;

/// A model with frozen per-layer Θ and a quantization plan.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub model: Model,
    pub plan: QuantPlan,
    pub theta: Vec<BiSupParams>,
    /// Keep the system prompt's keys/values at full precision.
    pub prompt_mixed: bool,
}

impl QuantizedModel {
    pub fn new(model: Model, plan: QuantPlan, theta: Vec<BiSupParams>, prompt_mixed: bool) -> Result<Self> {
        if theta.len() != model.layers.len() {
            return Err(Error::shape(format!(
                "{} Θ sets for {} layers",
                theta.len(),
                model.layers.len()
            )));
        }
        Ok(Self {
            model,
            plan,
            theta,
            prompt_mixed,
        })
    }

    /// Plain round-to-nearest: every clip at 1, no smoothing, no compensation.
    pub fn rtn(model: Model, plan: QuantPlan) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let theta = model
            .layers
            .iter()
            .map(|l| BiSupParams::neutral(l, &plan, 1, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(model, plan, theta, false)
    }

    pub fn layer_quant(&self, layer: usize) -> LayerQuant<'_> {
        LayerQuant {
            plan: &self.plan,
            theta: &self.theta[layer],
        }
    }

    /// Number of prompt tokens kept at full precision for a prompt of `prompt_len`.
    pub fn boundary(&self, prompt_len: usize) -> usize {
        if self.prompt_mixed {
            prompt_len
        } else {
            0
        }
    }

    /// Per-layer outputs at the `user` positions of `prompt ++ user`.
    pub fn forward_layers(&self, prompt: &[usize], user: &[usize]) -> Result<Vec<Tensor>> {
        if user.is_empty() {
            return Err(Error::shape("no user tokens to run"));
        }
        let mut cache = self.start_cache(prompt)?;
        let mut outs = Vec::with_capacity(self.model.layers.len());
        self.extend_inner(&mut cache, user, Some(&mut outs))?;
        Ok(outs)
    }

    /// A cache holding `prompt`: full precision when prompt mixing is on,
    /// otherwise processed by the quantized model like any other tokens.
    pub fn start_cache(&self, prompt: &[usize]) -> Result<MixedKVCache> {
        if self.prompt_mixed {
            return precompute_system_prompt(&self.model, prompt);
        }
        let mut cache = MixedKVCache::new(self.model.layers.len());
        if !prompt.is_empty() {
            self.extend(&mut cache, prompt)?;
        }
        Ok(cache)
    }

    /// Runs `tokens` after everything already in `cache`, appends their
    /// keys/values and returns the last layer's output for them.
    pub fn extend(&self, cache: &mut MixedKVCache, tokens: &[usize]) -> Result<Tensor> {
        self.extend_inner(cache, tokens, None)
    }

    fn extend_inner(
        &self,
        cache: &mut MixedKVCache,
        tokens: &[usize],
        mut per_layer: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        if cache.n_layers() != self.model.layers.len() {
            return Err(Error::shape("cache layer count differs from the model"));
        }
        let mut x = self.model.embed(tokens)?;
        for (i, layer) in self.model.layers.iter().enumerate() {
            let prefix = cache.layer(i).materialize()?;
            let pass = layer_forward(
                layer,
                &x,
                prefix.as_ref().map(|(k, v)| (k, v)),
                Some(self.layer_quant(i)),
                None,
            )
            .map_err(|e| e.in_layer(i))?;
            match &self.plan.kv {
                Some(spec) => cache.append_quantized(i, &pass.k_proj, &pass.v_proj, spec)?,
                None => cache.append_full(i, pass.k, pass.v)?,
            }
            x = pass.output;
            if let Some(outs) = per_layer.as_deref_mut() {
                outs.push(x.clone());
            }
        }
        Ok(x)
    }
}

/// Full-precision keys/values of `prompt` at every layer.
pub fn precompute_system_prompt(model: &Model, prompt: &[usize]) -> Result<MixedKVCache> {
    let mut cache = MixedKVCache::new(model.layers.len());
    if prompt.is_empty() {
        return Ok(cache);
    }
    let mut x = model.embed(prompt)?;
    for (i, layer) in model.layers.iter().enumerate() {
        let pass = layer_forward(layer, &x, None, None, None).map_err(|e| e.in_layer(i))?;
        cache.append_full(i, pass.k, pass.v)?;
        x = pass.output;
    }
    Ok(cache)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceTag {
    Calib,
    Eval,
}

/// Per-layer mean squared error between full-precision and quantized layer outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationTrace {
    pub tag: TraceTag,
    pub layer_mse: Vec<f64>,
}

impl PropagationTrace {
    pub fn final_mse(&self) -> f64 {
        self.layer_mse.last().copied().unwrap_or(0.0)
    }
}

/// Runs both models independently over every sequence and averages the
/// squared output difference at the user positions, per layer.
pub fn trace_propagation(
    fp: &Model,
    quant: &QuantizedModel,
    data: &Dataset,
    tag: TraceTag,
) -> Result<PropagationTrace> {
    if fp.config != quant.model.config {
        return Err(Error::shape("traced models have different architectures"));
    }
    let p = data.prompt.len();
    let per_seq: Vec<Result<Vec<(f64, usize)>>> = data
        .sequences
        .par_iter()
        .map(|user| {
            let full: Vec<usize> = data.prompt.iter().chain(user).copied().collect();
            let fp_outs = fp.forward_layers(&full)?;
            let q_outs = quant.forward_layers(&data.prompt, user)?;
            fp_outs
                .iter()
                .zip(&q_outs)
                .map(|(f, q)| {
                    let f = f.slice_rows(p..full.len())?;
                    let sq: f64 = f.data().iter().zip(q.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                    Ok((sq, f.len()))
                })
                .collect()
        })
        .collect();
    let mut sums = vec![(0.0, 0usize); fp.layers.len()];
    for seq in per_seq {
        for (acc, (sq, n)) in sums.iter_mut().zip(seq?) {
            acc.0 += sq;
            acc.1 += n;
        }
    }
    Ok(PropagationTrace {
        tag,
        layer_mse: sums
            .iter()
            .map(|(s, n)| if *n == 0 { 0.0 } else { s / *n as f64 })
            .collect(),
    })
}
