//! Seeded synthetic token datasets.
//!
//! Toy models have no language, so calibration and evaluation data are
//! uniform random token ids. Every sequence starts with a shared system
//! prompt; the rest are "user" tokens. Id [`BOS`] only appears in the prompt.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BOS;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub prompt: Vec<usize>,
    /// User tokens of each sequence (the prompt is not repeated here).
    pub sequences: Vec<Vec<usize>>,
}

/// Shape of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub samples: usize,
    /// Total length including the prompt.
    pub seq_len: usize,
    pub prompt_len: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            samples: 32,
            seq_len: 32,
            prompt_len: 1,
        }
    }
}

/// Stream offsets so calibration and evaluation data never share a seed.
const CALIB_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

impl Dataset {
    /// `prompt = [BOS, t1, …]` followed by uniform user tokens in `1..vocab`.
    pub fn synthetic(spec: &DataSpec, vocab: usize, seed: u64, stream: u64) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::config("vocab must hold BOS and at least one other token"));
        }
        if spec.samples == 0 || spec.seq_len <= spec.prompt_len {
            return Err(Error::config(format!(
                "need at least one sample with user tokens (samples {}, seq_len {}, prompt_len {})",
                spec.samples, spec.seq_len, spec.prompt_len
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let prompt = (0..spec.prompt_len)
            .map(|i| if i == 0 { BOS } else { rng.random_range(1..vocab) })
            .collect();
        let sequences = (0..spec.samples)
            .map(|_| {
                (spec.prompt_len..spec.seq_len)
                    .map(|_| rng.random_range(1..vocab))
                    .collect()
            })
            .collect();
        Ok(Self { prompt, sequences })
    }

    pub fn calibration(spec: &DataSpec, vocab: usize, seed: u64) -> Result<Self> {
        Self::synthetic(spec, vocab, seed, CALIB_STREAM)
    }

    /// Evaluation data with the calibration prompt but fresh user tokens.
    pub fn evaluation(spec: &DataSpec, vocab: usize, seed: u64) -> Result<Self> {
        let calib = Self::calibration(spec, vocab, seed)?;
        let mut eval = Self::synthetic(spec, vocab, seed, EVAL_STREAM)?;
        eval.prompt = calib.prompt;
        Ok(eval)
    }

    pub fn user_len(&self) -> usize {
        self.sequences.first().map_or(0, Vec::len)
    }

    /// Prompt followed by the user tokens of sequence `i`.
    pub fn full_sequence(&self, i: usize) -> Vec<usize> {
        self.prompt.iter().chain(&self.sequences[i]).copied().collect()
    }

    /// The first `n` sequences.
    pub fn take(&self, n: usize) -> Self {
        Self {
            prompt: self.prompt.clone(),
            sequences: self.sequences.iter().take(n).cloned().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_disjoint_streams() {
        let spec = DataSpec::default();
        let a = Dataset::calibration(&spec, 64, 9).unwrap();
        assert_eq!(a, Dataset::calibration(&spec, 64, 9).unwrap());
        let e = Dataset::evaluation(&spec, 64, 9).unwrap();
        assert_eq!(a.prompt, e.prompt);
        assert_ne!(a.sequences, e.sequences);
        assert_eq!(a.prompt, vec![BOS]);
        assert_eq!(a.user_len(), 31);
        assert!(a.sequences.iter().flatten().all(|&t| (1..64).contains(&t)));
    }

    #[test]
    fn rejects_sequences_without_user_tokens() {
        let spec = DataSpec {
            samples: 4,
            seq_len: 2,
            prompt_len: 2,
        };
        assert!(Dataset::calibration(&spec, 8, 0).is_err());
    }
}
