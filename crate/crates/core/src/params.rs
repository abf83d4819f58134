//! The optimizable parameter spaces and their forward/backward application.
//!
//! * Θ1 [`ClipParams`]: one clip value per quantization group.
//! * Θ2 [`SmoothParams`]: an activation column scale `s1` and a weight row
//!   scale `s2`, stored as logarithms so they stay positive.
//! * Θ3 [`LowRankParams`]: `A·B` applied as `W ⊙ (1 + A·B)` (or, for
//!   comparison, the additive `W + A·B`).
//!
//! At initialization (`c` from the caller, `s1 = s2 = 1`, `B = 0`) every
//! transform is an exact identity, so the quantized forward reproduces the
//! plain round-to-nearest forward bit for bit.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{ActSite, LayerWeights, WeightId};
use crate::quant::{
    default_clip_grid, fake_quantize, grid_search_clip, Axis, QuantPlan, QuantSpec, RoundingTape, SymFakeQuant,
};
use crate::tensor::{svd_truncated, Tensor};

pub const CLIP_MIN: f64 = 0.3;
pub const CLIP_MAX: f64 = 1.0;
pub const DEFAULT_ACT_CLIP: f64 = 0.9;
pub const DEFAULT_RANK: usize = 32;
pub const LOWRANK_INIT_STD: f64 = 0.01;

/// A learnable tensor with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }

    pub(crate) fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub(crate) fn accumulate_slice(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.grad.len() {
            return Err(Error::shape("gradient length mismatch"));
        }
        for (a, b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }
}

/// Θ1: per-group clip values.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipParams {
    pub c: Param,
}

impl ClipParams {
    pub fn uniform(n: usize, c: f64) -> Self {
        Self {
            c: Param::new(Tensor::filled(&[n], c)),
        }
    }

    pub fn values(&self) -> &[f64] {
        self.c.value.data()
    }

    /// Keeps every clip value in `[CLIP_MIN, CLIP_MAX]`.
    pub fn project(&mut self) {
        for v in self.c.value.data_mut() {
            *v = v.clamp(CLIP_MIN, CLIP_MAX);
        }
    }
}

/// Θ2 for one activation/weight pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothParams {
    pub log_s1: Param,
    pub log_s2: Param,
}

impl SmoothParams {
    /// `s1 = s2 = 1`.
    pub fn identity(n: usize) -> Self {
        Self {
            log_s1: Param::new(Tensor::zeros(&[n])),
            log_s2: Param::new(Tensor::zeros(&[n])),
        }
    }

    /// Migration warm start: `s1 = 1/s`, `s2 = s` (so `s1·s2 = 1`).
    pub fn from_migration(s: &[f64]) -> Result<Self> {
        if s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::numeric("smoothing factors must be positive and finite"));
        }
        let ln: Vec<f64> = s.iter().map(|v| v.ln()).collect();
        Ok(Self {
            log_s1: Param::new(Tensor::vector(ln.iter().map(|v| -v).collect())?),
            log_s2: Param::new(Tensor::vector(ln)?),
        })
    }

    pub fn s1(&self) -> Vec<f64> {
        exp_all(&self.log_s1.value)
    }

    pub fn s2(&self) -> Vec<f64> {
        exp_all(&self.log_s2.value)
    }

    pub fn apply(&self, x: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor)> {
        apply_smoothing(x, w, &self.s1(), &self.s2())
    }
}

pub(crate) fn exp_all(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|v| v.exp()).collect()
}

/// `(x·diag(s1), diag(s2)·w)`.
pub fn apply_smoothing(x: &Tensor, w: &Tensor, s1: &[f64], s2: &[f64]) -> Result<(Tensor, Tensor)> {
    let (_, xc) = x.dims2()?;
    let (wr, _) = w.dims2()?;
    if s1.len() != xc || s2.len() != wr || xc != wr {
        return Err(Error::shape(format!(
            "smoothing: x has {xc} columns, w has {wr} rows, |s1| = {}, |s2| = {}",
            s1.len(),
            s2.len()
        )));
    }
    Ok((x.scale_cols(s1)?, w.scale_rows(s2)?))
}

/// Gradient of `xs = x·diag(s1)` with respect to `x` and `log s1`.
pub fn grad_smooth_act(x: &Tensor, s1: &[f64], grad_xs: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (r, c) = x.dims2()?;
    let grad_x = grad_xs.scale_cols(s1)?;
    let mut g = vec![0.0; c];
    for i in 0..r {
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += grad_xs.get(i, j) * x.get(i, j);
        }
    }
    for (gj, s) in g.iter_mut().zip(s1) {
        *gj *= s;
    }
    Ok((grad_x, g))
}

/// Gradient of `ws = diag(s2)·w` with respect to `w` and `log s2`.
pub fn grad_smooth_weight(w: &Tensor, s2: &[f64], grad_ws: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (r, c) = w.dims2()?;
    let grad_w = grad_ws.scale_rows(s2)?;
    let mut g = vec![0.0; r];
    for i in 0..r {
        let mut acc = 0.0;
        for j in 0..c {
            acc += grad_ws.get(i, j) * w.get(i, j);
        }
        g[i] = acc * s2[i];
    }
    Ok((grad_w, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompensationForm {
    /// `W ⊙ (1 + A·B)`, anchored by `W`.
    Stabilized,
    /// `W + A·B`, the LoRA-style form.
    Additive,
}

/// Θ3: `A` is `d1 × r`, `B` is `r × d2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankParams {
    pub a: Param,
    pub b: Param,
    pub form: CompensationForm,
}

impl LowRankParams {
    /// `A ~ N(0, std²)`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(
        d1: usize,
        d2: usize,
        rank: usize,
        std: f64,
        form: CompensationForm,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("low-rank compensation needs rank ≥ 1"));
        }
        let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let a = Tensor::from_fn(d1, rank, |_, _| normal.sample(rng));
        Ok(Self {
            a: Param::new(a),
            b: Param::new(Tensor::zeros(&[rank, d2])),
            form,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.value.cols()
    }

    pub fn product(&self) -> Result<Tensor> {
        self.a.value.matmul(&self.b.value)
    }
}

/// `w ⊙ (1 + a·b)` (or `w + a·b` in the additive form).
pub fn effective_weight(w: &Tensor, p: &LowRankParams) -> Result<Tensor> {
    let ab = p.product()?;
    if ab.shape() != w.shape() {
        return Err(Error::shape(format!(
            "low-rank product {:?} does not match weight {:?}",
            ab.shape(),
            w.shape()
        )));
    }
    match p.form {
        CompensationForm::Stabilized => w.zip_map(&ab, |wv, m| wv * (1.0 + m)),
        CompensationForm::Additive => w.add(&ab),
    }
}

/// Gradients of [`effective_weight`] with respect to `a` and `b`.
pub fn grad_lowrank(w: &Tensor, p: &LowRankParams, grad_eff: &Tensor) -> Result<(Tensor, Tensor)> {
    let dm = match p.form {
        CompensationForm::Stabilized => grad_eff.hadamard(w)?,
        CompensationForm::Additive => grad_eff.clone(),
    };
    let ga = dm.matmul_t(&p.b.value)?;
    let gb = p.a.value.t_matmul(&dm)?;
    Ok((ga, gb))
}

/// Training-free low-rank compensation: the top-`r` SVD factors `(û, v̂)` of
/// the weight quantization error `w - fq(w)`.
pub fn lorc_svd_oracle(w: &Tensor, spec: &QuantSpec, r: usize) -> Result<(Tensor, Tensor)> {
    let err = w.sub(&fake_quantize(w, spec)?)?;
    svd_truncated(&err, r)?.balanced_factors()
}

/// Θ for one activation quantization site.
#[derive(Debug, Clone, PartialEq)]
pub struct ActSiteParams {
    pub clip: ClipParams,
    pub log_s1: Param,
}

/// Θ for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightParams {
    pub clip: ClipParams,
    pub log_s2: Param,
    pub lowrank: LowRankParams,
}

/// Which parameter spaces are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ThetaSet {
    pub clip: bool,
    pub smooth: bool,
    pub lowrank: bool,
}

impl ThetaSet {
    pub const ALL: Self = Self {
        clip: true,
        smooth: true,
        lowrank: true,
    };
    pub const NONE: Self = Self {
        clip: false,
        smooth: false,
        lowrank: false,
    };

    pub fn is_empty(&self) -> bool {
        !(self.clip || self.smooth || self.lowrank)
    }
}

/// The full Θ of one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BiSupParams {
    pub act: Vec<ActSiteParams>,
    pub weights: Vec<WeightParams>,
}

impl BiSupParams {
    pub fn zero_grad(&mut self) {
        for s in &mut self.act {
            s.clip.c.zero_grad();
            s.log_s1.zero_grad();
        }
        for w in &mut self.weights {
            w.clip.c.zero_grad();
            w.log_s2.zero_grad();
            w.lowrank.a.zero_grad();
            w.lowrank.b.zero_grad();
        }
    }

    /// Parameters in a fixed order: activation sites, then weights.
    pub fn params_mut(&mut self, set: ThetaSet) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for s in &mut self.act {
            if set.clip {
                out.push(&mut s.clip.c);
            }
            if set.smooth {
                out.push(&mut s.log_s1);
            }
        }
        for w in &mut self.weights {
            if set.clip {
                out.push(&mut w.clip.c);
            }
            if set.smooth {
                out.push(&mut w.log_s2);
            }
            if set.lowrank {
                out.push(&mut w.lowrank.a);
                out.push(&mut w.lowrank.b);
            }
        }
        out
    }

    pub fn params(&self, set: ThetaSet) -> Vec<&Param> {
        let mut out = Vec::new();
        for s in &self.act {
            if set.clip {
                out.push(&s.clip.c);
            }
            if set.smooth {
                out.push(&s.log_s1);
            }
        }
        for w in &self.weights {
            if set.clip {
                out.push(&w.clip.c);
            }
            if set.smooth {
                out.push(&w.log_s2);
            }
            if set.lowrank {
                out.push(&w.lowrank.a);
                out.push(&w.lowrank.b);
            }
        }
        out
    }

    pub fn project_clips(&mut self) {
        for s in &mut self.act {
            s.clip.project();
        }
        for w in &mut self.weights {
            w.clip.project();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params(ThetaSet::ALL).iter().all(|p| p.value.is_finite())
    }
}

/// How a fresh per-layer Θ is initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaInit {
    /// Candidate clip values for the tensor-wide weight clip search; `None`
    /// starts every weight clip at 1.
    pub weight_clip_grid: Option<Vec<f64>>,
    pub act_clip: f64,
    pub rank: usize,
    pub lowrank_std: f64,
    pub form: CompensationForm,
}

impl Default for ThetaInit {
    fn default() -> Self {
        Self {
            weight_clip_grid: Some(default_clip_grid()),
            act_clip: DEFAULT_ACT_CLIP,
            rank: DEFAULT_RANK,
            lowrank_std: LOWRANK_INIT_STD,
            form: CompensationForm::Stabilized,
        }
    }
}

impl ThetaInit {
    /// All clips at 1: the plain round-to-nearest starting point.
    pub fn plain(rank: usize) -> Self {
        Self {
            weight_clip_grid: None,
            act_clip: 1.0,
            rank,
            ..Self::default()
        }
    }
}

/// Number of clip values an activation of `width` columns takes under `spec`.
pub fn act_clip_count(spec: Option<&QuantSpec>, width: usize) -> Result<usize> {
    let Some(spec) = spec else { return Ok(1) };
    let layout = spec.layout(&[1, width])?;
    match layout.axis {
        None | Some(Axis::Row) => Ok(layout.groups_per_row()),
        Some(Axis::Column) => Err(Error::config(
            "activation quantization must group along the feature axis",
        )),
    }
}

impl BiSupParams {
    pub fn init<R: Rng + ?Sized>(
        layer: &LayerWeights,
        plan: &QuantPlan,
        opts: &ThetaInit,
        rng: &mut R,
    ) -> Result<Self> {
        let mut act = Vec::with_capacity(ActSite::ALL.len());
        for site in ActSite::ALL {
            let width = site.width(layer);
            act.push(ActSiteParams {
                clip: ClipParams::uniform(act_clip_count(plan.act.as_ref(), width)?, opts.act_clip),
                log_s1: Param::new(Tensor::zeros(&[width])),
            });
        }
        let mut weights = Vec::with_capacity(WeightId::ALL.len());
        for id in WeightId::ALL {
            let w = layer.weight(id);
            let (d1, d2) = w.dims2()?;
            let (n_clips, c0) = match &plan.weight {
                Some(spec) => {
                    let c = match &opts.weight_clip_grid {
                        Some(grid) => grid_search_clip(w, spec, grid)?,
                        None => 1.0,
                    };
                    (spec.layout(w.shape())?.n_groups(), c)
                }
                None => (1, 1.0),
            };
            weights.push(WeightParams {
                clip: ClipParams::uniform(n_clips, c0),
                log_s2: Param::new(Tensor::zeros(&[d1])),
                lowrank: LowRankParams::init(d1, d2, opts.rank.min(d1.min(d2)), opts.lowrank_std, opts.form, rng)?,
            });
        }
        Ok(Self { act, weights })
    }

    /// Θ that leaves the plain round-to-nearest forward unchanged.
    pub fn neutral<R: Rng + ?Sized>(layer: &LayerWeights, plan: &QuantPlan, rank: usize, rng: &mut R) -> Result<Self> {
        Self::init(layer, plan, &ThetaInit::plain(rank), rng)
    }

    /// Moves every parameter off its identity initialization: clips into
    /// `[0.55, 0.8]`, smoothing logs into `±0.2`, `B` to `N(0, 0.1²)`.
    pub fn perturb<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        for p in self.params_mut(ThetaSet {
            clip: true,
            smooth: false,
            lowrank: false,
        }) {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.55..0.8));
        }
        for p in self.params_mut(ThetaSet {
            clip: false,
            smooth: true,
            lowrank: false,
        }) {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
        for w in &mut self.weights {
            w.lowrank
                .b
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = normal.sample(rng));
        }
    }

    pub fn flatten(&self, set: ThetaSet) -> Vec<f64> {
        self.params(set)
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self, set: ThetaSet) -> Vec<f64> {
        self.params(set)
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    /// Names of the parameters in `set`, one per flattened coordinate.
    pub fn flat_labels(&self, set: ThetaSet) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        let mut push = |name: String, n: usize| out.extend((0..n).map(|i| (name.clone(), i)));
        for (site, s) in ActSite::ALL.iter().zip(&self.act) {
            if set.clip {
                push(format!("{}.clip", site.name()), s.clip.c.value.len());
            }
            if set.smooth {
                push(format!("{}.log_s1", site.name()), s.log_s1.value.len());
            }
        }
        for (id, w) in WeightId::ALL.iter().zip(&self.weights) {
            if set.clip {
                push(format!("{}.clip", id.name()), w.clip.c.value.len());
            }
            if set.smooth {
                push(format!("{}.log_s2", id.name()), w.log_s2.value.len());
            }
            if set.lowrank {
                push(format!("{}.a", id.name()), w.lowrank.a.value.len());
                push(format!("{}.b", id.name()), w.lowrank.b.value.len());
            }
        }
        out
    }

    pub fn load_flat(&mut self, set: ThetaSet, flat: &[f64]) -> Result<()> {
        let mut params = self.params_mut(set);
        let total: usize = params.iter().map(|p| p.value.len()).sum();
        if total != flat.len() {
            return Err(Error::shape(format!("{} values for {total} parameters", flat.len())));
        }
        let mut at = 0;
        for p in params.iter_mut() {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// Forward state of one activation site, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ActSiteCache {
    input: Tensor,
    s1: Vec<f64>,
    fq: Option<SymFakeQuant>,
}

impl ActSiteCache {
    pub fn fake_quant(&self) -> Option<&SymFakeQuant> {
        self.fq.as_ref()
    }
}

/// `x → fq(x·diag(s1))`; quantization is skipped when `spec` is `None`.
pub fn act_site_forward(
    x: &Tensor,
    site: &ActSiteParams,
    spec: Option<&QuantSpec>,
    tape: Option<&mut RoundingTape>,
) -> Result<(Tensor, ActSiteCache)> {
    let s1 = exp_all(&site.log_s1.value);
    let xs = x.scale_cols(&s1)?;
    let (out, fq) = match spec {
        Some(spec) => {
            let (y, c) = SymFakeQuant::forward(&xs, spec, site.clip.values(), tape)?;
            (y, Some(c))
        }
        None => (xs, None),
    };
    Ok((
        out,
        ActSiteCache {
            input: x.clone(),
            s1,
            fq,
        },
    ))
}

/// Accumulates Θ gradients of the site and returns the gradient for its input.
pub fn act_site_backward(cache: &ActSiteCache, grad_out: &Tensor, site: &mut ActSiteParams) -> Result<Tensor> {
    let grad_xs = match &cache.fq {
        Some(fq) => {
            let (gx, gc) = fq.backward(grad_out)?;
            site.clip.c.accumulate_slice(&gc)?;
            gx
        }
        None => grad_out.clone(),
    };
    let (grad_x, g_s1) = grad_smooth_act(&cache.input, &cache.s1, &grad_xs)?;
    site.log_s1.accumulate_slice(&g_s1)?;
    Ok(grad_x)
}

/// Forward state of one weight transform.
#[derive(Debug, Clone)]
pub struct WeightCache {
    base: Tensor,
    compensated: Tensor,
    s2: Vec<f64>,
    fq: Option<SymFakeQuant>,
}

impl WeightCache {
    pub fn fake_quant(&self) -> Option<&SymFakeQuant> {
        self.fq.as_ref()
    }
}

/// `W → fq(diag(s2) · (W ⊙ (1 + A·B)))`.
pub fn weight_forward(
    w: &Tensor,
    wp: &WeightParams,
    spec: Option<&QuantSpec>,
    tape: Option<&mut RoundingTape>,
) -> Result<(Tensor, WeightCache)> {
    let compensated = effective_weight(w, &wp.lowrank)?;
    let s2 = exp_all(&wp.log_s2.value);
    let ws = compensated.scale_rows(&s2)?;
    let (out, fq) = match spec {
        Some(spec) => {
            let (y, c) = SymFakeQuant::forward(&ws, spec, wp.clip.values(), tape)?;
            (y, Some(c))
        }
        None => (ws, None),
    };
    Ok((
        out,
        WeightCache {
            base: w.clone(),
            compensated,
            s2,
            fq,
        },
    ))
}

/// Accumulates clip, smoothing and low-rank gradients from `∂L/∂Ŵ`.
pub fn weight_backward(cache: &WeightCache, grad_out: &Tensor, wp: &mut WeightParams) -> Result<()> {
    let grad_ws = match &cache.fq {
        Some(fq) => {
            let (gw, gc) = fq.backward(grad_out)?;
            wp.clip.c.accumulate_slice(&gc)?;
            gw
        }
        None => grad_out.clone(),
    };
    let (grad_comp, g_s2) = grad_smooth_weight(&cache.compensated, &cache.s2, &grad_ws)?;
    wp.log_s2.accumulate_slice(&g_s2)?;
    let (ga, gb) = grad_lowrank(&cache.base, &wp.lowrank, &grad_comp)?;
    wp.lowrank.a.accumulate(&ga)?;
    wp.lowrank.b.accumulate(&gb)?;
    Ok(())
}
