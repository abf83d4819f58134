//! Key/value cache that keeps system-prompt tokens at full precision and
//! stores every later token as per-token asymmetric integer codes.

use crate::error::{Error, Result};
use crate::quant::{quantize, QuantSpec, QuantizedTensor};
use crate::tensor::Tensor;

/// A contiguous run of cached tokens.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum KvBlock {
    Full { k: Tensor, v: Tensor },
    Quantized { k: QuantizedTensor, v: QuantizedTensor },
}

impl KvBlock {
    pub fn len(&self) -> usize {
        match self {
            KvBlock::Full { k, .. } => k.rows(),
            KvBlock::Quantized { k, .. } => k.layout.rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full_precision(&self) -> bool {
        matches!(self, KvBlock::Full { .. })
    }

    /// Keys and values as the attention reads them.
    pub fn materialize(&self) -> (Tensor, Tensor) {
        match self {
            KvBlock::Full { k, v } => (k.clone(), v.clone()),
            KvBlock::Quantized { k, v } => (k.dequantize(), v.dequantize()),
        }
    }
}

/// The cached blocks of one layer, in token order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerKv {
    pub blocks: Vec<KvBlock>,
}

impl LayerKv {
    pub fn len(&self) -> usize {
        self.blocks.iter().map(KvBlock::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All cached keys and values, or `None` when nothing is cached.
    pub fn materialize(&self) -> Result<Option<(Tensor, Tensor)>> {
        if self.is_empty() {
            return Ok(None);
        }
        let parts: Vec<(Tensor, Tensor)> = self.blocks.iter().map(KvBlock::materialize).collect();
        let ks: Vec<&Tensor> = parts.iter().map(|p| &p.0).collect();
        let vs: Vec<&Tensor> = parts.iter().map(|p| &p.1).collect();
        Ok(Some((Tensor::concat_rows(&ks)?, Tensor::concat_rows(&vs)?)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedKVCache {
    layers: Vec<LayerKv>,
}

impl MixedKVCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); n_layers],
        }
    }

    /// Number of leading tokens held at full precision.
    pub fn boundary(&self) -> usize {
        self.layers.first().map_or(0, |l| {
            l.blocks
                .iter()
                .filter(|b| b.is_full_precision())
                .map(KvBlock::len)
                .sum()
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Tokens cached so far (the same for every layer between appends).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, i: usize) -> &LayerKv {
        &self.layers[i]
    }

    /// Appends full-precision entries; only allowed before any quantized entry.
    pub fn append_full(&mut self, layer: usize, k: Tensor, v: Tensor) -> Result<()> {
        let l = self.layer_mut(layer)?;
        if l.blocks.iter().any(|b| !b.is_full_precision()) {
            return Err(Error::State(
                "full-precision entries cannot follow quantized ones".into(),
            ));
        }
        check_pair(&k, &v)?;
        l.blocks.push(KvBlock::Full { k, v });
        Ok(())
    }

    /// Quantizes `k`, `v` per token with `spec` and appends them.
    pub fn append_quantized(&mut self, layer: usize, k: &Tensor, v: &Tensor, spec: &QuantSpec) -> Result<()> {
        check_pair(k, v)?;
        let block = KvBlock::Quantized {
            k: quantize(k, spec)?,
            v: quantize(v, spec)?,
        };
        self.layer_mut(layer)?.blocks.push(block);
        Ok(())
    }

    /// Squared error of every cached key/value row against reference rows,
    /// one `(k_err, v_err)` per token.
    pub fn row_errors(&self, layer: usize, k_ref: &Tensor, v_ref: &Tensor) -> Result<Vec<(f64, f64)>> {
        let Some((k, v)) = self.layers[layer].materialize()? else {
            return Ok(Vec::new());
        };
        if k.shape() != k_ref.shape() || v.shape() != v_ref.shape() {
            return Err(Error::shape("reference keys/values do not match the cache"));
        }
        Ok((0..k.rows())
            .map(|i| (sq_dist(k.row(i), k_ref.row(i)), sq_dist(v.row(i), v_ref.row(i))))
            .collect())
    }

    fn layer_mut(&mut self, layer: usize) -> Result<&mut LayerKv> {
        let n = self.layers.len();
        self.layers
            .get_mut(layer)
            .ok_or_else(|| Error::shape(format!("layer {layer} outside a {n}-layer cache")))
    }
}

fn check_pair(k: &Tensor, v: &Tensor) -> Result<()> {
    if k.shape() != v.shape() || k.rank() != 2 {
        return Err(Error::shape("keys and values must be equally shaped matrices"));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
