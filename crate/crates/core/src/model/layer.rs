//! The decoder layer: one forward/backward implementation for both the
//! full-precision path and the fake-quantized path.
//!
//! ```text
//! r1 = rmsnorm(x)            a1 = site(r1)      q,k,v = a1·Ŵq, a1·Ŵk, a1·Ŵv
//! k̂,v̂ = kvq(k), kvq(v)       o  = attn(q, [K_prefix; k̂], [V_prefix; v̂])
//! x2 = x + site(o)·Ŵo        r2 = rmsnorm(x2)   u = site(r2)·Ŵup
//! out = x2 + site(silu(u))·Ŵdown
//! ```
//!
//! `site` is `fq(· diag(s1))` and `Ŵ` is `fq(diag(s2)·(W ⊙ (1 + AB)))` in
//! the quantized path, identities in the full-precision path. Masking is
//! done by leaving future keys out of the softmax.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use super::LayerWeights;
use crate::error::{Error, Result};
use crate::params::{
    act_site_backward, act_site_forward, weight_backward, weight_forward, ActSiteCache, BiSupParams, WeightCache,
};
use crate::quant::{AsymFakeQuant, QuantPlan, RoundingTape};
use crate::tensor::{inv_rms, Tensor};

/// Activation quantization sites, in [`BiSupParams::act`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActSite {
    AttnIn,
    OIn,
    MlpIn,
    DownIn,
}

impl ActSite {
    pub const ALL: [ActSite; 4] = [ActSite::AttnIn, ActSite::OIn, ActSite::MlpIn, ActSite::DownIn];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ActSite::AttnIn => "attn_in",
            ActSite::OIn => "o_in",
            ActSite::MlpIn => "mlp_in",
            ActSite::DownIn => "down_in",
        }
    }

    /// Column count of the activation entering this site.
    pub fn width(self, w: &LayerWeights) -> usize {
        match self {
            ActSite::DownIn => w.d_hidden(),
            _ => w.d_model(),
        }
    }
}

/// Weight matrices, in [`BiSupParams::weights`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightId {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl WeightId {
    pub const ALL: [WeightId; 6] = [
        WeightId::Q,
        WeightId::K,
        WeightId::V,
        WeightId::O,
        WeightId::Up,
        WeightId::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightId::Q => "wq",
            WeightId::K => "wk",
            WeightId::V => "wv",
            WeightId::O => "wo",
            WeightId::Up => "w_up",
            WeightId::Down => "w_down",
        }
    }
}

/// Quantization settings and Θ for one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerQuant<'a> {
    pub plan: &'a QuantPlan,
    pub theta: &'a BiSupParams,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    x: Tensor,
    inv1: Vec<f64>,
    inv2: Vec<f64>,
    sites: Option<[ActSiteCache; 4]>,
    weights: Option<Vec<WeightCache>>,
    w_hat: Vec<Tensor>,
    a1: Tensor,
    q: Tensor,
    k_fq: Option<AsymFakeQuant>,
    v_fq: Option<AsymFakeQuant>,
    k_all: Tensor,
    v_all: Tensor,
    prefix: usize,
    /// Attention probabilities, per head then per query, each of length `prefix + i + 1`.
    probs: Vec<Vec<Vec<f64>>>,
    a2: Tensor,
    x2: Tensor,
    a3: Tensor,
    u: Tensor,
    a4: Tensor,
}

impl LayerCache {
    /// Fingerprint of every clamp decision and extremum position taken by
    /// the fake quantizers during this pass.
    pub fn regime(&self) -> u64 {
        let mut h = DefaultHasher::new();
        if let Some(sites) = &self.sites {
            for s in sites {
                if let Some(fq) = s.fake_quant() {
                    fq.hash_regime(&mut h);
                }
            }
        }
        if let Some(ws) = &self.weights {
            for w in ws {
                if let Some(fq) = w.fake_quant() {
                    fq.hash_regime(&mut h);
                }
            }
        }
        for fq in [&self.k_fq, &self.v_fq].into_iter().flatten() {
            fq.hash_regime(&mut h);
        }
        h.finish()
    }

    /// Mean attention weight on key 0 over every head and every query
    /// except the first one that sees only key 0.
    pub fn first_token_attention(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for head in &self.probs {
            for row in head.iter().filter(|r| r.len() > 1) {
                sum += row[0];
                n += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerPass {
    pub output: Tensor,
    /// Keys and values of the processed tokens as the attention saw them
    /// (after KV quantization when enabled).
    pub k: Tensor,
    pub v: Tensor,
    /// Keys and values before KV quantization.
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub cache: LayerCache,
}

/// Runs one layer over `x` (`n × d`), attending to `prefix` keys/values
/// (positions before `x`) and then causally within `x`.
pub fn layer_forward(
    w: &LayerWeights,
    x: &Tensor,
    prefix: Option<(&Tensor, &Tensor)>,
    quant: Option<LayerQuant<'_>>,
    mut tape: Option<&mut RoundingTape>,
) -> Result<LayerPass> {
    let (n, d) = x.dims2()?;
    if d != w.d_model() {
        return Err(Error::shape(format!(
            "layer input has {d} features, layer expects {}",
            w.d_model()
        )));
    }
    if let Some(q) = quant {
        check_theta(w, q.theta)?;
    }
    let eps = w.rms_eps;

    let (mut site_caches, mut weight_caches) = (Vec::new(), Vec::new());
    let mut w_hat = Vec::with_capacity(6);
    for id in WeightId::ALL {
        match quant {
            Some(q) => {
                let (wh, c) = weight_forward(
                    w.weight(id),
                    &q.theta.weights[id.index()],
                    q.plan.weight.as_ref(),
                    tape.as_deref_mut(),
                )?;
                w_hat.push(wh);
                weight_caches.push(c);
            }
            None => w_hat.push(w.weight(id).clone()),
        }
    }
    let mut site = |input: &Tensor, s: ActSite, tape: Option<&mut RoundingTape>| -> Result<Tensor> {
        match quant {
            Some(q) => {
                let (y, c) = act_site_forward(input, &q.theta.act[s.index()], q.plan.act.as_ref(), tape)?;
                site_caches.push(c);
                Ok(y)
            }
            None => Ok(input.clone()),
        }
    };

    let r1 = x.rmsnorm(&w.rms1, eps)?;
    let inv1 = (0..n).map(|i| inv_rms(x.row(i), eps)).collect();
    let a1 = site(&r1, ActSite::AttnIn, tape.as_deref_mut())?;
    let q = a1.matmul(&w_hat[WeightId::Q.index()])?;
    let k = a1.matmul(&w_hat[WeightId::K.index()])?;
    let v = a1.matmul(&w_hat[WeightId::V.index()])?;

    let kv_spec = quant.and_then(|q| q.plan.kv.as_ref());
    let (k_proj, v_proj) = (k.clone(), v.clone());
    let (k, k_fq, v, v_fq) = match kv_spec {
        Some(spec) => {
            let (kq, kc) = AsymFakeQuant::forward(&k, spec, tape.as_deref_mut())?;
            let (vq, vc) = AsymFakeQuant::forward(&v, spec, tape.as_deref_mut())?;
            (kq, Some(kc), vq, Some(vc))
        }
        None => (k, None, v, None),
    };
    let (k_all, v_all, p) = match prefix {
        Some((pk, pv)) => {
            if pk.shape() != pv.shape() || pk.cols() != d {
                return Err(Error::shape("prefix keys/values have the wrong shape"));
            }
            (
                Tensor::concat_rows(&[pk, &k])?,
                Tensor::concat_rows(&[pv, &v])?,
                pk.rows(),
            )
        }
        None => (k.clone(), v.clone(), 0),
    };
    let (o, probs) = attention(&q, &k_all, &v_all, p, w.n_heads)?;

    let a2 = site(&o, ActSite::OIn, tape.as_deref_mut())?;
    let x2 = x.add(&a2.matmul(&w_hat[WeightId::O.index()])?)?;
    let r2 = x2.rmsnorm(&w.rms2, eps)?;
    let inv2 = (0..n).map(|i| inv_rms(x2.row(i), eps)).collect();
    let a3 = site(&r2, ActSite::MlpIn, tape.as_deref_mut())?;
    let u = a3.matmul(&w_hat[WeightId::Up.index()])?;
    let g = u.map(silu);
    let a4 = site(&g, ActSite::DownIn, tape)?;
    let output = x2.add(&a4.matmul(&w_hat[WeightId::Down.index()])?)?;

    let sites = match quant {
        Some(_) => {
            Some(<[ActSiteCache; 4]>::try_from(site_caches).map_err(|_| Error::State("site cache count".into()))?)
        }
        None => None,
    };
    Ok(LayerPass {
        output,
        k,
        v,
        k_proj,
        v_proj,
        cache: LayerCache {
            x: x.clone(),
            inv1,
            inv2,
            sites,
            weights: quant.map(|_| weight_caches),
            w_hat,
            a1,
            q,
            k_fq,
            v_fq,
            k_all,
            v_all,
            prefix: p,
            probs,
            a2,
            x2,
            a3,
            u,
            a4,
        },
    })
}

fn check_theta(w: &LayerWeights, theta: &BiSupParams) -> Result<()> {
    if theta.act.len() != ActSite::ALL.len() || theta.weights.len() != WeightId::ALL.len() {
        return Err(Error::shape(format!(
            "Θ has {} activation sites and {} weights, the layer needs 4 and 6",
            theta.act.len(),
            theta.weights.len()
        )));
    }
    for s in ActSite::ALL {
        if theta.act[s.index()].log_s1.value.len() != s.width(w) {
            return Err(Error::shape(format!(
                "Θ smoothing vector for {} has the wrong length",
                s.name()
            )));
        }
    }
    Ok(())
}

pub(crate) fn silu(u: f64) -> f64 {
    u * sigmoid(u)
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn silu_grad(u: f64) -> f64 {
    let s = sigmoid(u);
    s * (1.0 + u * (1.0 - s))
}

/// Multi-head attention of `n` queries against `p + n` keys, query `i`
/// seeing keys `0..=p+i`.
fn attention(q: &Tensor, k: &Tensor, v: &Tensor, p: usize, heads: usize) -> Result<(Tensor, Vec<Vec<Vec<f64>>>)> {
    let (n, d) = q.dims2()?;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut head_probs = Vec::with_capacity(n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let mut s: Vec<f64> = (0..=p + i).map(|j| dot(qi, &k.row(j)[cols.clone()]) * scale).collect();
            crate::tensor::softmax_in_place(&mut s);
            let orow = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
            for (j, &pj) in s.iter().enumerate() {
                for (o, vv) in orow.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += pj * vv;
                }
            }
            head_probs.push(s);
        }
        probs.push(head_probs);
    }
    Ok((Tensor::matrix(n, d, out)?, probs))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backward of `y = rmsnorm(x)·gain` given the row inverse RMS values.
fn rmsnorm_backward(x: &Tensor, gain: &Tensor, inv: &[f64], dy: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let (xr, dyr) = (x.row(i), dy.row(i));
        let r = inv[i];
        let proj: f64 = (0..d).map(|j| gain.data()[j] * dyr[j] * xr[j]).sum();
        let coef = r * r * r * proj / d as f64;
        for j in 0..d {
            dx[i * d + j] = r * gain.data()[j] * dyr[j] - coef * xr[j];
        }
    }
    Tensor::matrix(n, d, dx)
}

/// Gradient of the layer input; Θ gradients are accumulated into `theta`.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub x: Tensor,
}

/// Backpropagates `grad_out` (`∂L/∂output`) through a cached forward pass.
/// Prefix keys/values are treated as constants.
pub fn layer_backward(
    w: &LayerWeights,
    cache: &LayerCache,
    grad_out: &Tensor,
    mut theta: Option<&mut BiSupParams>,
) -> Result<LayerGrads> {
    if grad_out.shape() != cache.x.shape() {
        return Err(Error::shape("layer backward: gradient shape differs from the output"));
    }
    let quantized = cache.sites.is_some();
    if quantized != theta.is_some() {
        return Err(Error::State(
            "layer backward: Θ must be given exactly when the forward pass was quantized".into(),
        ));
    }
    let wh = |id: WeightId| &cache.w_hat[id.index()];
    let site_back = |s: ActSite, g: Tensor, theta: &mut Option<&mut BiSupParams>| -> Result<Tensor> {
        match (&cache.sites, theta.as_deref_mut()) {
            (Some(sites), Some(t)) => act_site_backward(&sites[s.index()], &g, &mut t.act[s.index()]),
            _ => Ok(g),
        }
    };
    let weight_back = |id: WeightId, g: Tensor, theta: &mut Option<&mut BiSupParams>| -> Result<()> {
        if let (Some(ws), Some(t)) = (&cache.weights, theta.as_deref_mut()) {
            weight_backward(&ws[id.index()], &g, &mut t.weights[id.index()])?;
        }
        Ok(())
    };

    // out = x2 + a4·Ŵdown
    let mut dx2 = grad_out.clone();
    let d_a4 = grad_out.matmul_t(wh(WeightId::Down))?;
    if quantized {
        weight_back(WeightId::Down, cache.a4.t_matmul(grad_out)?, &mut theta)?;
    }
    let d_g = site_back(ActSite::DownIn, d_a4, &mut theta)?;
    let d_u = d_g.zip_map(&cache.u, |g, u| g * silu_grad(u))?;
    let d_a3 = d_u.matmul_t(wh(WeightId::Up))?;
    if quantized {
        weight_back(WeightId::Up, cache.a3.t_matmul(&d_u)?, &mut theta)?;
    }
    let d_r2 = site_back(ActSite::MlpIn, d_a3, &mut theta)?;
    dx2.add_assign(&rmsnorm_backward(&cache.x2, &w.rms2, &cache.inv2, &d_r2)?)?;

    // x2 = x + a2·Ŵo
    let d_a2 = dx2.matmul_t(wh(WeightId::O))?;
    if quantized {
        weight_back(WeightId::O, cache.a2.t_matmul(&dx2)?, &mut theta)?;
    }
    let d_o = site_back(ActSite::OIn, d_a2, &mut theta)?;

    let (d_q, d_k, d_v) = attention_backward(cache, &d_o, w.n_heads)?;
    let d_k = match &cache.k_fq {
        Some(fq) => fq.backward(&d_k)?,
        None => d_k,
    };
    let d_v = match &cache.v_fq {
        Some(fq) => fq.backward(&d_v)?,
        None => d_v,
    };
    let mut d_a1 = d_q.matmul_t(wh(WeightId::Q))?;
    d_a1.add_assign(&d_k.matmul_t(wh(WeightId::K))?)?;
    d_a1.add_assign(&d_v.matmul_t(wh(WeightId::V))?)?;
    if quantized {
        weight_back(WeightId::Q, cache.a1.t_matmul(&d_q)?, &mut theta)?;
        weight_back(WeightId::K, cache.a1.t_matmul(&d_k)?, &mut theta)?;
        weight_back(WeightId::V, cache.a1.t_matmul(&d_v)?, &mut theta)?;
    }
    let d_r1 = site_back(ActSite::AttnIn, d_a1, &mut theta)?;
    let mut dx = dx2;
    dx.add_assign(&rmsnorm_backward(&cache.x, &w.rms1, &cache.inv1, &d_r1)?)?;
    Ok(LayerGrads { x: dx })
}

/// Gradients of the queries and of the keys/values of the processed tokens.
fn attention_backward(cache: &LayerCache, d_o: &Tensor, heads: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = cache.q.dims2()?;
    let p = cache.prefix;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let total = p + n;
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; total * d];
    let mut dv = vec![0.0; total * d];
    for h in 0..heads {
        let c0 = h * hd;
        let cols = c0..c0 + hd;
        for i in 0..n {
            let probs = &cache.probs[h][i];
            let doi = &d_o.row(i)[cols.clone()];
            let qi = &cache.q.row(i)[cols.clone()];
            let dp: Vec<f64> = (0..probs.len())
                .map(|j| dot(doi, &cache.v_all.row(j)[cols.clone()]))
                .collect();
            let mix: f64 = probs.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (j, (&pj, &dpj)) in probs.iter().zip(&dp).enumerate() {
                let ds = pj * (dpj - mix) * scale;
                let kj = &cache.k_all.row(j)[cols.clone()];
                for c in 0..hd {
                    dq[i * d + c0 + c] += ds * kj[c];
                    dk[j * d + c0 + c] += ds * qi[c];
                    dv[j * d + c0 + c] += pj * doi[c];
                }
            }
        }
    }
    let dk = Tensor::matrix(total, d, dk)?.slice_rows(p..total)?;
    let dv = Tensor::matrix(total, d, dv)?.slice_rows(p..total)?;
    Ok((Tensor::matrix(n, d, dq)?, dk, dv))
}
