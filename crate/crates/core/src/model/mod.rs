//! A small pre-norm decoder stack with full-precision and fake-quantized
//! execution paths sharing one layer engine.

mod cache;
mod layer;
mod quantized;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cache::{KvBlock, LayerKv, MixedKVCache};
pub use layer::{layer_backward, layer_forward, ActSite, LayerCache, LayerGrads, LayerPass, LayerQuant, WeightId};
pub use quantized::{precompute_system_prompt, trace_propagation, PropagationTrace, QuantizedModel, TraceTag};

pub const DEFAULT_RMS_EPS: f64 = 1e-6;

/// Token id reserved for the beginning-of-sequence marker.
pub const BOS: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_hidden: usize,
    pub vocab: usize,
    pub rms_eps: f64,
    /// Feature channels whose RMSNorm gain is raised to `outlier_scale`,
    /// giving the activations the channel outliers real models show.
    pub outlier_channels: usize,
    pub outlier_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_hidden: 256,
            vocab: 256,
            rms_eps: DEFAULT_RMS_EPS,
            outlier_channels: 0,
            outlier_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_hidden == 0 || self.vocab == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.outlier_channels > self.d_model {
            return Err(Error::config("more outlier channels than features"));
        }
        if !(self.rms_eps > 0.0 && self.outlier_scale > 0.0) {
            return Err(Error::config("rms_eps and outlier_scale must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one decoder layer. Projections are stored `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub rms1: Tensor,
    pub rms2: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub n_heads: usize,
    pub rms_eps: f64,
}

impl LayerWeights {
    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w_up.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.n_heads
    }

    pub fn weight(&self, id: WeightId) -> &Tensor {
        match id {
            WeightId::Q => &self.wq,
            WeightId::K => &self.wk,
            WeightId::V => &self.wv,
            WeightId::O => &self.wo,
            WeightId::Up => &self.w_up,
            WeightId::Down => &self.w_down,
        }
    }

    pub fn weight_mut(&mut self, id: WeightId) -> &mut Tensor {
        match id {
            WeightId::Q => &mut self.wq,
            WeightId::K => &mut self.wk,
            WeightId::V => &mut self.wv,
            WeightId::O => &mut self.wo,
            WeightId::Up => &mut self.w_up,
            WeightId::Down => &mut self.w_down,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let h = self.d_hidden();
        let expect = [
            (&self.rms1, vec![d]),
            (&self.rms2, vec![d]),
            (&self.wq, vec![d, d]),
            (&self.wk, vec![d, d]),
            (&self.wv, vec![d, d]),
            (&self.wo, vec![d, d]),
            (&self.w_up, vec![d, h]),
            (&self.w_down, vec![h, d]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "layer tensor has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::numeric("layer weights contain non-finite values"));
            }
        }
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::shape(format!(
                "d_model {d} not divisible by {} heads",
                self.n_heads
            )));
        }
        Ok(())
    }

    /// Gaussian projections with σ = 1/√d, unit RMSNorm gains.
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, h) = (cfg.d_model, cfg.d_hidden);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).map_err(|e| Error::config(e.to_string()))?;
        let mut gauss = |r: usize, c: usize| Tensor::from_fn(r, c, |_, _| normal.sample(rng));
        let wq = gauss(d, d);
        let wk = gauss(d, d);
        let wv = gauss(d, d);
        let wo = gauss(d, d);
        let w_up = gauss(d, h);
        let w_down = gauss(h, d);
        let mut gains = vec![1.0; d];
        for g in gains.iter_mut().take(cfg.outlier_channels) {
            *g = cfg.outlier_scale;
        }
        let gains = Tensor::vector(gains)?;
        Ok(Self {
            rms1: gains.clone(),
            rms2: gains,
            wq,
            wk,
            wv,
            wo,
            w_up,
            w_down,
            n_heads: cfg.n_heads,
            rms_eps: cfg.rms_eps,
        })
    }

    pub(crate) fn named_tensors(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("rms1", &self.rms1),
            ("rms2", &self.rms2),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    /// Full-precision forward of a whole sequence.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(layer_forward(self, x, None, None, None)?.output)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `vocab × d_model`.
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
}

impl Model {
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (cfg.d_model as f64).sqrt()).map_err(|e| Error::config(e.to_string()))?;
        let embedding = Tensor::from_fn(cfg.vocab, cfg.d_model, |_, _| normal.sample(&mut rng));
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights::random(cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: *cfg,
            embedding,
            layers,
        })
    }

    /// A random model whose heads all attend mostly to the first token.
    ///
    /// Every token embedding gets a shared constant feature (channel 0) that
    /// the query projections map onto a fixed direction; the BOS embedding
    /// alone carries a large feature (channel 1) that the key projections map
    /// onto the same direction. Scores against position 0 then exceed the
    /// rest by roughly `strength²`.
    pub fn first_token_dominant(cfg: &ModelConfig, seed: u64, strength: f64) -> Result<Self> {
        if cfg.d_model < 2 {
            return Err(Error::config("first-token construction needs d_model ≥ 2"));
        }
        let mut m = Self::random(cfg, seed)?;
        let d = cfg.d_model;
        let emb = m.embedding.data_mut();
        for t in 0..cfg.vocab {
            emb[t * d] = 1.0;
            emb[t * d + 1] = if t == BOS { 4.0 } else { 0.0 };
        }
        let hd = cfg.head_dim();
        for layer in &mut m.layers {
            for (row, w) in [(0, WeightId::Q), (1, WeightId::K)] {
                let wd = layer.weight_mut(w).data_mut();
                for c in 0..d {
                    // One fixed unit direction per head.
                    wd[row * d + c] = if c % hd == 0 { strength } else { 0.0 };
                }
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cfg = &self.config;
        if self.embedding.shape() != [cfg.vocab, cfg.d_model] {
            return Err(Error::shape("embedding shape disagrees with the config"));
        }
        if self.layers.len() != cfg.n_layers {
            return Err(Error::shape("layer count disagrees with the config"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate().map_err(|e| e.in_layer(i))?;
            if l.d_model() != cfg.d_model || l.d_hidden() != cfg.d_hidden || l.n_heads != cfg.n_heads {
                return Err(Error::shape("layer dimensions disagree with the config").in_layer(i));
            }
        }
        Ok(())
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= self.config.vocab {
                return Err(Error::shape(format!(
                    "token id {t} outside vocab {}",
                    self.config.vocab
                )));
            }
            data.extend_from_slice(self.embedding.row(t));
        }
        Tensor::matrix(tokens.len(), d, data)
    }

    /// Full-precision layer outputs, one per layer.
    pub fn forward_layers(&self, tokens: &[usize]) -> Result<Vec<Tensor>> {
        let mut x = self.embed(tokens)?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            x = l.forward(&x)?;
            outs.push(x.clone());
        }
        Ok(outs)
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut x = self.embed(tokens)?;
        for l in &self.layers {
            x = l.forward(&x)?;
        }
        Ok(x)
    }
}
