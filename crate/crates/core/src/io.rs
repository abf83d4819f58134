//! Binary tensor (`BSTN`) and model (`BSMD`) files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! BSTN   "BSTN" u32 rank, rank × u64 dims, f64 × Πdims
//! list   u32 count, count × (u32 name_len, name bytes, BSTN)
//! BSMD   "BSMD" u32 version
//!        u32 n_layers d_model n_heads d_hidden vocab outlier_channels
//!        f64 rms_eps outlier_scale
//!        list (embedding, layers.{i}.{rms1,rms2,wq,wk,wv,wo,w_up,w_down})
//!        u8 has_quant
//!        [quant] u32 spec_len, spec, u8 prompt_mixed, u8 form,
//!                3 × (u32 name_len, "theta1"|"theta2"|"theta3", list)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ActSite, LayerWeights, Model, ModelConfig, QuantizedModel, WeightId};
use crate::params::{ActSiteParams, BiSupParams, ClipParams, CompensationForm, LowRankParams, Param, WeightParams};
use crate::quant::{QuantConfig, QuantPlan};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"BSTN";
const MODEL_MAGIC: &[u8; 4] = b"BSMD";
pub const MODEL_VERSION: u32 = 1;
const THETA_SECTIONS: [&str; 3] = ["theta1", "theta2", "theta3"];

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format("missing BSTN tensor magic"));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("tensor size overflows"))?;
    let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| Error::format("tensor size overflows"))?];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_named<W: Write>(w: &mut W, items: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for (name, t) in items {
        write_str(w, name)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_named<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let n = read_u32(r)?;
    (0..n).map(|_| Ok((read_str(r)?, read_tensor(r)?))).collect()
}

/// Contents of a model file: the full-precision model and, for calibrated
/// artifacts, the quantization spec and frozen Θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub quant: Option<QuantSection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantSection {
    pub spec: QuantConfig,
    pub prompt_mixed: bool,
    pub theta: Vec<BiSupParams>,
}

impl ModelFile {
    pub fn plain(model: Model) -> Self {
        Self { model, quant: None }
    }

    /// Gradients are not stored, so Θ is copied with cleared gradients.
    pub fn calibrated(model: &QuantizedModel, spec: QuantConfig) -> Self {
        let mut theta = model.theta.clone();
        theta.iter_mut().for_each(BiSupParams::zero_grad);
        Self {
            model: model.model.clone(),
            quant: Some(QuantSection {
                spec,
                prompt_mixed: model.prompt_mixed,
                theta,
            }),
        }
    }

    pub fn quantized(&self) -> Option<Result<QuantizedModel>> {
        self.quant.as_ref().map(|q| {
            QuantizedModel::new(
                self.model.clone(),
                QuantPlan::from(&q.spec),
                q.theta.clone(),
                q.prompt_mixed,
            )
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let m = &self.model;
        let c = &m.config;
        out.extend_from_slice(MODEL_MAGIC);
        for v in [
            MODEL_VERSION,
            c.n_layers as u32,
            c.d_model as u32,
            c.n_heads as u32,
            c.d_hidden as u32,
            c.vocab as u32,
            c.outlier_channels as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.rms_eps.to_le_bytes());
        out.extend_from_slice(&c.outlier_scale.to_le_bytes());
        let mut items = vec![("embedding".to_string(), &m.embedding)];
        for (i, l) in m.layers.iter().enumerate() {
            for (name, t) in l.named_tensors() {
                items.push((format!("layers.{i}.{name}"), t));
            }
        }
        write_named(&mut out, &items)?;
        match &self.quant {
            None => out.push(0),
            Some(q) => {
                out.push(1);
                write_str(&mut out, &q.spec.to_string())?;
                out.push(q.prompt_mixed as u8);
                let form = q.theta.first().and_then(|t| t.weights.first()).map(|w| w.lowrank.form);
                out.push(matches!(form, Some(CompensationForm::Additive)) as u8);
                let sections = theta_sections(&q.theta);
                for (name, items) in THETA_SECTIONS.iter().zip(&sections) {
                    write_str(&mut out, name)?;
                    let refs: Vec<(String, &Tensor)> = items.iter().map(|(n, t)| (n.clone(), *t)).collect();
                    write_named(&mut out, &refs)?;
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::format("not a BSMD model file"));
        }
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::format(format!("unsupported model file version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = read_u32(r)? as usize;
        }
        let config = ModelConfig {
            n_layers: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            d_hidden: dims[3],
            vocab: dims[4],
            outlier_channels: dims[5],
            rms_eps: read_f64(r)?,
            outlier_scale: read_f64(r)?,
        };
        config
            .validate()
            .map_err(|e| Error::format(format!("model header: {e}")))?;
        let mut tensors = Lookup(read_named(r)?);
        let embedding = tensors.take("embedding")?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut t = |name: &str| tensors.take(&format!("layers.{i}.{name}"));
            layers.push(LayerWeights {
                rms1: t("rms1")?,
                rms2: t("rms2")?,
                wq: t("wq")?,
                wk: t("wk")?,
                wv: t("wv")?,
                wo: t("wo")?,
                w_up: t("w_up")?,
                w_down: t("w_down")?,
                n_heads: config.n_heads,
                rms_eps: config.rms_eps,
            });
        }
        let model = Model {
            config,
            embedding,
            layers,
        };
        model
            .validate()
            .map_err(|e| Error::format(format!("model tensors: {e}")))?;

        let quant = match read_u8(r)? {
            0 => None,
            1 => {
                let spec: QuantConfig = read_str(r)?.parse()?;
                let prompt_mixed = read_u8(r)? != 0;
                let form = if read_u8(r)? != 0 {
                    CompensationForm::Additive
                } else {
                    CompensationForm::Stabilized
                };
                let mut all = Vec::new();
                for expected in THETA_SECTIONS {
                    let name = read_str(r)?;
                    if name != expected {
                        return Err(Error::format(format!("expected section {expected}, found {name}")));
                    }
                    all.extend(read_named(r)?);
                }
                let mut lookup = Lookup(all);
                let theta = (0..model.config.n_layers)
                    .map(|l| theta_from(&mut lookup, l, form))
                    .collect::<Result<Vec<_>>>()?;
                Some(QuantSection {
                    spec,
                    prompt_mixed,
                    theta,
                })
            }
            f => return Err(Error::format(format!("bad quantization flag {f}"))),
        };
        if !bytes.is_empty() {
            return Err(Error::format("trailing bytes after model file"));
        }
        Ok(Self { model, quant })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn theta_sections(theta: &[BiSupParams]) -> [Vec<(String, &Tensor)>; 3] {
    let mut s: [Vec<(String, &Tensor)>; 3] = Default::default();
    for (l, t) in theta.iter().enumerate() {
        for (site, p) in ActSite::ALL.iter().zip(&t.act) {
            s[0].push((format!("layers.{l}.{}.clip", site.name()), &p.clip.c.value));
            s[1].push((format!("layers.{l}.{}.log_s1", site.name()), &p.log_s1.value));
        }
        for (id, w) in WeightId::ALL.iter().zip(&t.weights) {
            s[0].push((format!("layers.{l}.{}.clip", id.name()), &w.clip.c.value));
            s[1].push((format!("layers.{l}.{}.log_s2", id.name()), &w.log_s2.value));
            s[2].push((format!("layers.{l}.{}.a", id.name()), &w.lowrank.a.value));
            s[2].push((format!("layers.{l}.{}.b", id.name()), &w.lowrank.b.value));
        }
    }
    s
}

fn theta_from(lookup: &mut Lookup, l: usize, form: CompensationForm) -> Result<BiSupParams> {
    let mut act = Vec::new();
    for site in ActSite::ALL {
        act.push(ActSiteParams {
            clip: ClipParams {
                c: Param::new(lookup.take(&format!("layers.{l}.{}.clip", site.name()))?),
            },
            log_s1: Param::new(lookup.take(&format!("layers.{l}.{}.log_s1", site.name()))?),
        });
    }
    let mut weights = Vec::new();
    for id in WeightId::ALL {
        let mut t = |k: &str| lookup.take(&format!("layers.{l}.{}.{k}", id.name()));
        weights.push(WeightParams {
            clip: ClipParams {
                c: Param::new(t("clip")?),
            },
            log_s2: Param::new(t("log_s2")?),
            lowrank: LowRankParams {
                a: Param::new(t("a")?),
                b: Param::new(t("b")?),
                form,
            },
        });
    }
    Ok(BiSupParams { act, weights })
}

struct Lookup(Vec<(String, Tensor)>);

impl Lookup {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        let i = self
            .0
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
        Ok(self.0.swap_remove(i).1)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > 1 << 16 {
        return Err(Error::format("implausible name length"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::format("name is not UTF-8"))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{calibrate_model, CalibConfig};
    use crate::data::{DataSpec, Dataset};

    fn small() -> Model {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_hidden: 16,
            vocab: 16,
            ..ModelConfig::default()
        };
        Model::random(&cfg, 11).unwrap()
    }

    #[test]
    fn tensor_round_trip() {
        let t = Tensor::from_fn(3, 2, |i, j| i as f64 - 0.1 * j as f64);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 16 + 48);
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn model_round_trip_and_determinism() {
        let m = small();
        let bytes = ModelFile::plain(m.clone()).to_bytes().unwrap();
        assert_eq!(bytes, ModelFile::plain(small()).to_bytes().unwrap());
        let back = ModelFile::from_bytes(&bytes).unwrap();
        assert_eq!(back.model, m);
        assert!(back.quant.is_none());
        let toks = [0, 3, 5, 7];
        assert_eq!(back.model.forward(&toks).unwrap(), m.forward(&toks).unwrap());
    }

    #[test]
    fn calibrated_round_trip() {
        let m = small();
        let spec: QuantConfig = "W4A4-g4".parse().unwrap();
        let data = Dataset::calibration(
            &DataSpec {
                samples: 4,
                seq_len: 6,
                prompt_len: 1,
            },
            16,
            0,
        )
        .unwrap();
        let cfg = CalibConfig {
            epochs: 1,
            batch_size: 2,
            rank: 2,
            ..CalibConfig::default()
        };
        let q = calibrate_model(&m, &data, &QuantPlan::from(&spec), &cfg, 0)
            .unwrap()
            .model;
        let file = ModelFile::calibrated(&q, spec);
        let back = ModelFile::from_bytes(&file.to_bytes().unwrap()).unwrap();
        assert_eq!(back, file);
        let q2 = back.quantized().unwrap().unwrap();
        assert_eq!(
            q2.forward_layers(&[0], &[3, 4, 5]).unwrap(),
            q.forward_layers(&[0], &[3, 4, 5]).unwrap()
        );
    }

    #[test]
    fn rejects_corruption() {
        let bytes = ModelFile::plain(small()).to_bytes().unwrap();
        assert!(ModelFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelFile::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(ModelFile::from_bytes(&extra).is_err());
    }
}
