//! Differentiable quantize→dequantize with straight-through rounding.
//!
//! Backward passes treat `round(u)` as `u + r` with the offset `r` held
//! fixed, and clamping by the rounded code: an element whose rounded code
//! lies inside the integer range passes its gradient straight through,
//! one outside contributes only through the scale. Gradients also flow into
//! the scale through the group extrema (`max|x|`, or `min`/`max`), and into
//! clip values through `Δ = max|x| / qmax × c`.
//!
//! A [`RoundingTape`] records the offsets of one forward pass and can replay
//! them, which turns the quantized forward into a piecewise-smooth function
//! whose exact derivative is the straight-through gradient. Finite
//! differences are taken against that replayed function.

use std::hash::{Hash, Hasher};

use super::{round_half_away, symmetric_scale, GroupLayout, QuantSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct RoundingTape {
    replaying: bool,
    offsets: Vec<f64>,
    cursor: usize,
}

impl RoundingTape {
    pub fn record() -> Self {
        Self::default()
    }

    /// Rewinds a recorded tape so subsequent passes reuse its offsets.
    pub fn into_replay(mut self) -> Self {
        self.replaying = true;
        self.cursor = 0;
        self
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    fn round(&mut self, u: f64) -> Result<f64> {
        if self.replaying {
            let r = *self
                .offsets
                .get(self.cursor)
                .ok_or_else(|| Error::State("rounding tape exhausted during replay".into()))?;
            self.cursor += 1;
            Ok(u + r)
        } else {
            let w = round_half_away(u);
            self.offsets.push(w - u);
            Ok(w)
        }
    }
}

fn round_with(tape: &mut Option<&mut RoundingTape>, u: f64) -> Result<(f64, f64)> {
    let nearest = round_half_away(u);
    match tape {
        Some(t) => {
            let w = t.round(u)?;
            Ok((w, w - u))
        }
        None => Ok((nearest, nearest - u)),
    }
}

const INSIDE: i8 = 0;
const BELOW: i8 = -1;
const ABOVE: i8 = 1;

fn classify(code: f64, lo: f64, hi: f64) -> i8 {
    if code < lo {
        BELOW
    } else if code > hi {
        ABOVE
    } else {
        INSIDE
    }
}

/// Saved state of a symmetric fake-quantization, enough to run its backward pass.
#[derive(Debug, Clone)]
pub struct SymFakeQuant {
    layout: GroupLayout,
    assign: Vec<usize>,
    qmax: f64,
    lo: f64,
    n_clips: usize,
    slots: Vec<usize>,
    clips: Vec<f64>,
    absmax: Vec<f64>,
    argmax: Vec<usize>,
    argmax_sign: Vec<f64>,
    offsets: Vec<f64>,
    states: Vec<i8>,
}

impl SymFakeQuant {
    /// Quantizes and dequantizes `x` under `spec` (its own clip mode is
    /// ignored) with per-group clip values `clips`.
    pub fn forward(
        x: &Tensor,
        spec: &QuantSpec,
        clips: &[f64],
        mut tape: Option<&mut RoundingTape>,
    ) -> Result<(Tensor, Self)> {
        if !spec.symmetric {
            return Err(Error::config("symmetric fake-quant given an asymmetric spec"));
        }
        if !x.is_finite() {
            return Err(Error::numeric("cannot quantize non-finite activations"));
        }
        let layout = spec.layout(x.shape())?;
        let n = layout.n_groups();
        let slots = (0..n)
            .map(|g| layout.clip_slot(g, clips.len()))
            .collect::<Result<Vec<_>>>()?;
        let assign = layout.assignment();
        let qmax = spec.qmax() as f64;
        let (lo, hi) = (spec.qmin() as f64, qmax);

        let mut absmax = vec![0.0f64; n];
        let mut argmax = vec![usize::MAX; n];
        for (i, (v, &g)) in x.data().iter().zip(&assign).enumerate() {
            if argmax[g] == usize::MAX || v.abs() > absmax[g] {
                absmax[g] = v.abs();
                argmax[g] = i;
            }
        }
        let argmax_sign = argmax.iter().map(|&i| x.data()[i].signum()).collect();
        let scales: Vec<f64> = (0..n)
            .map(|g| symmetric_scale(absmax[g], qmax, clips[slots[g]]))
            .collect();

        let len = x.len();
        let mut out = Vec::with_capacity(len);
        let mut offsets = Vec::with_capacity(len);
        let mut states = Vec::with_capacity(len);
        for (v, &g) in x.data().iter().zip(&assign) {
            let delta = scales[g];
            let u = v / delta;
            let (w, r) = round_with(&mut tape, u)?;
            let state = classify(round_half_away(u), lo, hi);
            let code = match state {
                INSIDE => w,
                BELOW => lo,
                _ => hi,
            };
            out.push(code * delta);
            offsets.push(r);
            states.push(state);
        }
        let cache = Self {
            layout,
            assign,
            qmax,
            lo,
            n_clips: clips.len(),
            slots,
            clips: clips.to_vec(),
            absmax,
            argmax,
            argmax_sign,
            offsets,
            states,
        };
        Ok((Tensor::new(x.shape().to_vec(), out)?, cache))
    }

    /// Gradients with respect to the input and to each clip value.
    pub fn backward(&self, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if grad_out.len() != self.states.len() {
            return Err(Error::shape("fake-quant backward: gradient size mismatch"));
        }
        let n = self.layout.n_groups();
        let mut grad_x = vec![0.0; self.states.len()];
        let mut grad_delta = vec![0.0; n];
        for (i, &g) in self.assign.iter().enumerate() {
            let go = grad_out.data()[i];
            match self.states[i] {
                INSIDE => {
                    grad_x[i] += go;
                    grad_delta[g] += go * self.offsets[i];
                }
                BELOW => grad_delta[g] += go * self.lo,
                _ => grad_delta[g] += go * self.qmax,
            }
        }
        let mut grad_clip = vec![0.0; self.n_clips];
        for g in 0..n {
            if self.absmax[g] == 0.0 {
                continue;
            }
            let c = self.clips[self.slots[g]];
            grad_clip[self.slots[g]] += grad_delta[g] * (self.absmax[g] / self.qmax);
            grad_x[self.argmax[g]] += grad_delta[g] * (c / self.qmax) * self.argmax_sign[g];
        }
        Ok((Tensor::new(grad_out.shape().to_vec(), grad_x)?, grad_clip))
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    /// Hashes which piece of the piecewise-smooth surrogate this pass landed in.
    pub fn hash_regime<H: Hasher>(&self, h: &mut H) {
        self.states.hash(h);
        self.argmax.hash(h);
    }
}

/// Saved state of an asymmetric (min/max) fake-quantization.
#[derive(Debug, Clone)]
pub struct AsymFakeQuant {
    assign: Vec<usize>,
    qmax: f64,
    n_groups: usize,
    min: Vec<f64>,
    argmin: Vec<usize>,
    argmax: Vec<usize>,
    scale: Vec<f64>,
    zero_point: Vec<f64>,
    degenerate: Vec<bool>,
    offsets: Vec<f64>,
    codes: Vec<f64>,
    states: Vec<i8>,
}

impl AsymFakeQuant {
    pub fn forward(x: &Tensor, spec: &QuantSpec, mut tape: Option<&mut RoundingTape>) -> Result<(Tensor, Self)> {
        if spec.symmetric {
            return Err(Error::config("asymmetric fake-quant given a symmetric spec"));
        }
        if !x.is_finite() {
            return Err(Error::numeric("cannot quantize non-finite activations"));
        }
        let layout = spec.layout(x.shape())?;
        let n = layout.n_groups();
        let assign = layout.assignment();
        let qmax = spec.qmax() as f64;

        let mut min = vec![f64::INFINITY; n];
        let mut max = vec![f64::NEG_INFINITY; n];
        let mut argmin = vec![0; n];
        let mut argmax = vec![0; n];
        for (i, (&v, &g)) in x.data().iter().zip(&assign).enumerate() {
            if v < min[g] {
                min[g] = v;
                argmin[g] = i;
            }
            if v > max[g] {
                max[g] = v;
                argmax[g] = i;
            }
        }

        let mut scale = vec![0.0; n];
        let mut zero_point = vec![0.0; n];
        let mut zp_int = vec![0.0; n];
        let mut degenerate = vec![false; n];
        for g in 0..n {
            let (delta, zp, degen) = super::asymmetric_params(min[g], max[g], qmax);
            scale[g] = delta;
            degenerate[g] = degen;
            zp_int[g] = zp;
            zero_point[g] = if degen {
                zp
            } else {
                round_with(&mut tape, -min[g] / delta)?.0
            };
        }

        let len = x.len();
        let mut out = Vec::with_capacity(len);
        let mut offsets = Vec::with_capacity(len);
        let mut codes = Vec::with_capacity(len);
        let mut states = Vec::with_capacity(len);
        for (&v, &g) in x.data().iter().zip(&assign) {
            let delta = scale[g];
            let zp = zero_point[g];
            if degenerate[g] {
                let code = if v > 0.0 { 1.0 } else { 0.0 };
                out.push((code - zp) * delta);
                offsets.push(0.0);
                codes.push(code);
                states.push(INSIDE);
                continue;
            }
            let u = v / delta;
            let (w, r) = round_with(&mut tape, u)?;
            let state = classify(round_half_away(u) + zp_int[g], 0.0, qmax);
            let code = match state {
                INSIDE => w + zp,
                BELOW => 0.0,
                _ => qmax,
            };
            out.push((code - zp) * delta);
            offsets.push(r);
            codes.push(code);
            states.push(state);
        }
        let cache = Self {
            assign,
            qmax,
            n_groups: n,
            min,
            argmin,
            argmax,
            scale,
            zero_point,
            degenerate,
            offsets,
            codes,
            states,
        };
        Ok((Tensor::new(x.shape().to_vec(), out)?, cache))
    }

    pub fn backward(&self, grad_out: &Tensor) -> Result<Tensor> {
        if grad_out.len() != self.states.len() {
            return Err(Error::shape("fake-quant backward: gradient size mismatch"));
        }
        let n = self.n_groups;
        let mut grad_x = vec![0.0; self.states.len()];
        let mut grad_delta = vec![0.0; n];
        let mut grad_zp = vec![0.0; n];
        for (i, &g) in self.assign.iter().enumerate() {
            let go = grad_out.data()[i];
            if self.degenerate[g] {
                grad_x[i] += go;
                continue;
            }
            match self.states[i] {
                INSIDE => {
                    grad_x[i] += go;
                    grad_delta[g] += go * self.offsets[i];
                }
                _ => {
                    grad_delta[g] += go * (self.codes[i] - self.zero_point[g]);
                    grad_zp[g] -= go * self.scale[g];
                }
            }
        }
        for g in 0..n {
            if self.degenerate[g] {
                continue;
            }
            let delta = self.scale[g];
            // zp = -min/Δ + r
            let mut gmin = -grad_zp[g] / delta;
            let gd = grad_delta[g] + grad_zp[g] * self.min[g] / (delta * delta);
            // Δ = (max - min) / qmax
            gmin -= gd / self.qmax;
            grad_x[self.argmax[g]] += gd / self.qmax;
            grad_x[self.argmin[g]] += gmin;
        }
        Tensor::new(grad_out.shape().to_vec(), grad_x)
    }

    pub fn hash_regime<H: Hasher>(&self, h: &mut H) {
        self.states.hash(h);
        self.argmin.hash(h);
        self.argmax.hash(h);
    }
}
