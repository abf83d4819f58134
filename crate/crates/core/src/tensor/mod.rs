//! Dense row-major `f64` tensors and the handful of kernels the rest of the
//! crate is built on.
//!
//! Every reduction runs in a fixed loop order, so results are bit-identical
//! from run to run and across the fp/quantized execution paths that share them.

mod svd;

use std::ops::Range;

use crate::error::{Error, Result};

pub use svd::{svd_truncated, SvdResult, SVD_MAX_SWEEPS, SVD_TOLERANCE};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{op}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_t inner dimensions disagree: {m}x{k} · ({n}x{k2})ᵀ"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (a, b) in arow.iter().zip(brow) {
                    s += a * b;
                }
                out[i * n + j] = s;
            }
        }
        Self::matrix(m, n, out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "t_matmul inner dimensions disagree: ({k}x{m})ᵀ · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        Ok(Self::from_fn(c, r, |i, j| self.data[j * c + i]))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other, "elementwise op")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Multiplies column `j` by `s[j]`, i.e. `self · diag(s)`.
    pub fn scale_cols(&self, s: &[f64]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if s.len() != c {
            return Err(Error::shape(format!(
                "column scale of length {} for {c} columns",
                s.len()
            )));
        }
        Ok(Self::from_fn(r, c, |i, j| self.data[i * c + j] * s[j]))
    }

    /// Multiplies row `i` by `s[i]`, i.e. `diag(s) · self`.
    pub fn scale_rows(&self, s: &[f64]) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if s.len() != r {
            return Err(Error::shape(format!("row scale of length {} for {r} rows", s.len())));
        }
        Ok(Self::from_fn(r, c, |i, j| s[i] * self.data[i * c + j]))
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if range.end > r || range.start >= range.end {
            return Err(Error::shape(format!("row range {range:?} out of 0..{r}")));
        }
        Self::matrix(range.len(), c, self.data[range.start * c..range.end * c].to_vec())
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if range.end > c || range.start >= range.end {
            return Err(Error::shape(format!("column range {range:?} out of 0..{c}")));
        }
        let w = range.len();
        Ok(Self::from_fn(r, w, |i, j| self.data[i * c + range.start + j]))
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = p.dims2()?;
            if pc != c {
                return Err(Error::shape(format!("concat_rows: {pc} columns vs {c}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, c, data)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = self.data.clone();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        Self::new(self.shape.clone(), out)
    }

    pub fn rmsnorm(&self, weight: &Self, eps: f64) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if weight.len() != c {
            return Err(Error::shape(format!(
                "rmsnorm weight of length {} for {c} features",
                weight.len()
            )));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.row(i);
            let inv = inv_rms(row, eps);
            out.extend(row.iter().zip(&weight.data).map(|(x, w)| x * inv * w));
        }
        Self::new(self.shape.clone(), out)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn inv_rms(row: &[f64], eps: f64) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (ms + eps).sqrt()
}

/// Mean squared difference between two equally shaped tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b, "mse")?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_small_cases() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);

        let row = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let col = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop_exactly() {
        let a = random(8, 8, 1);
        let b = random(8, 8, 2);
        let got = a.matmul(&b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for k in 0..8 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(got.get(i, j).to_bits(), s.to_bits());
            }
        }
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = random(5, 3, 3);
        let b = random(4, 3, 4);
        let c = random(5, 4, 5);
        assert_eq!(a.matmul_t(&b).unwrap(), a.matmul(&b.transpose().unwrap()).unwrap());
        assert_eq!(a.t_matmul(&c).unwrap(), a.transpose().unwrap().matmul(&c).unwrap());
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn constructor_checks_element_count() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn softmax_cases() {
        let t = Tensor::from_rows(&[&[0.0, 0.0, 0.0]]).unwrap();
        for v in t.softmax_rows().unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let t = Tensor::from_rows(&[&[1000.0, 0.0]]).unwrap().softmax_rows().unwrap();
        assert!((t.data()[0] - 1.0).abs() < 1e-12 && t.data()[1].abs() < 1e-12);
        let t = Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap().softmax_rows().unwrap();
        for (got, want) in t.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((got - want).abs() < 1e-8);
        }
    }

    #[test]
    fn rmsnorm_cases() {
        let ones = Tensor::filled(&[1, 4], 1.0);
        let w = Tensor::filled(&[4], 1.0);
        assert_eq!(ones.rmsnorm(&w, 0.0).unwrap(), ones);
        let zero_w = Tensor::zeros(&[4]);
        assert!(ones.rmsnorm(&zero_w, 0.0).unwrap().data().iter().all(|&v| v == 0.0));
        let x = Tensor::from_rows(&[&[3.0, 4.0]]).unwrap();
        let y = x.rmsnorm(&Tensor::filled(&[2], 1.0), 0.0).unwrap();
        assert!((y.data()[0] - 0.848528).abs() < 1e-6);
        assert!((y.data()[1] - 1.131371).abs() < 1e-6);
        assert!(x.rmsnorm(&Tensor::filled(&[3], 1.0), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let t = Tensor::matrix(3, 4, vals).unwrap().softmax_rows().unwrap();
            for i in 0..3 {
                let s: f64 = t.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(t.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn rmsnorm_scales_with_weight(vals in proptest::collection::vec(-5.0f64..5.0, 8),
                                      w in proptest::collection::vec(-2.0f64..2.0, 4)) {
            let x = Tensor::matrix(2, 4, vals).unwrap();
            let w1 = Tensor::vector(w.clone()).unwrap();
            let w2 = Tensor::vector(w.iter().map(|v| 2.0 * v).collect()).unwrap();
            let a = x.rmsnorm(&w1, 1e-6).unwrap().scale(2.0);
            let b = x.rmsnorm(&w2, 1e-6).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn matmul_with_identity_is_exact(vals in proptest::collection::vec(-1e3f64..1e3, 15)) {
            let a = Tensor::matrix(3, 5, vals).unwrap();
            prop_assert_eq!(a.matmul(&Tensor::eye(5)).unwrap(), a);
        }
    }
}
