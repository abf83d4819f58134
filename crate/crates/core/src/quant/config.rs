use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Axis, Granularity, QuantSpec};
use crate::error::{Error, Result};

/// Weight/activation precision in the `W4A4`, `W3A3-g16` notation.
///
/// Weights and activations share the group size; the KV cache follows the
/// activation bit-width and is never grouped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QuantConfig {
    pub weight_bits: u8,
    pub act_bits: u8,
    pub group_size: Option<usize>,
}

impl QuantConfig {
    pub fn new(weight_bits: u8, act_bits: u8, group_size: Option<usize>) -> Result<Self> {
        for b in [weight_bits, act_bits] {
            if !(2..=8).contains(&b) {
                return Err(Error::config(format!("bit-width {b} outside 2..=8")));
            }
        }
        if group_size == Some(0) {
            return Err(Error::config("group size must be positive"));
        }
        Ok(Self {
            weight_bits,
            act_bits,
            group_size,
        })
    }

    /// Symmetric, per output channel (or channel groups along `d_in`).
    pub fn weight_spec(&self) -> QuantSpec {
        let g = match self.group_size {
            None => Granularity::PerChannel,
            Some(size) => Granularity::Group {
                size,
                axis: Axis::Column,
            },
        };
        QuantSpec::symmetric(self.weight_bits, g)
    }

    /// Symmetric, per token (or token groups along the feature axis).
    pub fn act_spec(&self) -> QuantSpec {
        let g = match self.group_size {
            None => Granularity::PerToken,
            Some(size) => Granularity::Group { size, axis: Axis::Row },
        };
        QuantSpec::symmetric(self.act_bits, g)
    }

    pub fn kv_spec(&self) -> QuantSpec {
        QuantSpec::asymmetric(self.act_bits, Granularity::PerToken)
    }
}

impl fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W{}A{}", self.weight_bits, self.act_bits)?;
        if let Some(g) = self.group_size {
            write!(f, "-g{g}")?;
        }
        Ok(())
    }
}

impl FromStr for QuantConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::config(format!(
                "malformed quantization spec {s:?} (expected e.g. W4A4 or W3A3-g16)"
            ))
        };
        let (head, group) = match s.split_once('-') {
            Some((h, g)) => (h, Some(g)),
            None => (s, None),
        };
        let rest = head.strip_prefix('W').ok_or_else(bad)?;
        let (w, a) = rest.split_once('A').ok_or_else(bad)?;
        let digits = |t: &str| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit());
        if !digits(w) || !digits(a) {
            return Err(bad());
        }
        let weight_bits: u8 = w.parse().map_err(|_| bad())?;
        let act_bits: u8 = a.parse().map_err(|_| bad())?;
        let group_size = match group {
            None => None,
            Some(g) => {
                let n = g.strip_prefix('g').filter(|n| digits(n)).ok_or_else(bad)?;
                Some(n.parse().map_err(|_| bad())?)
            }
        };
        Self::new(weight_bits, act_bits, group_size)
    }
}

impl TryFrom<String> for QuantConfig {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QuantConfig> for String {
    fn from(c: QuantConfig) -> Self {
        c.to_string()
    }
}

/// Which quantization sites are active in a forward pass. Clip values are
/// supplied separately, so the specs here carry none.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPlan {
    pub weight: Option<QuantSpec>,
    pub act: Option<QuantSpec>,
    pub kv: Option<QuantSpec>,
}

impl QuantPlan {
    pub fn disabled() -> Self {
        Self {
            weight: None,
            act: None,
            kv: None,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.weight.is_none() && self.act.is_none() && self.kv.is_none()
    }
}

impl From<&QuantConfig> for QuantPlan {
    fn from(c: &QuantConfig) -> Self {
        Self {
            weight: Some(c.weight_spec()),
            act: Some(c.act_spec()),
            kv: Some(c.kv_spec()),
        }
    }
}
