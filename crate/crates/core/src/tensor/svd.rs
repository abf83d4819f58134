//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of a working copy are orthogonalised pairwise by plane rotations
//! until every pair is orthogonal to within [`SVD_TOLERANCE`] (relative).
//! The column norms are then the singular values and the normalised columns
//! the left singular vectors; the accumulated rotations give `V`.

use super::Tensor;
use crate::error::{Error, Result};

pub const SVD_MAX_SWEEPS: usize = 100;
pub const SVD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `d1 × r`, orthonormal columns.
    pub u: Tensor,
    /// Length `r`, non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// `r × d2`, orthonormal rows.
    pub v_t: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `u · diag(s) · v_t`.
    pub fn reconstruct(&self) -> Result<Tensor> {
        self.u.scale_cols(&self.singular_values)?.matmul(&self.v_t)
    }

    /// Splits the factors into `(u·diag(√s), diag(√s)·v_t)` so their product reconstructs.
    pub fn balanced_factors(&self) -> Result<(Tensor, Tensor)> {
        let root: Vec<f64> = self.singular_values.iter().map(|s| s.sqrt()).collect();
        Ok((self.u.scale_cols(&root)?, self.v_t.scale_rows(&root)?))
    }
}

/// Top-`r` singular triplets of `e`.
pub fn svd_truncated(e: &Tensor, r: usize) -> Result<SvdResult> {
    let (d1, d2) = e.dims2()?;
    if r == 0 || r > d1.min(d2) {
        return Err(Error::shape(format!(
            "rank {r} outside 1..={} for a {d1}x{d2} matrix",
            d1.min(d2)
        )));
    }
    if !e.is_finite() {
        return Err(Error::numeric("svd input has non-finite entries"));
    }
    if d1 >= d2 {
        let (u, s, v) = jacobi_tall(e)?;
        let (u, s, v) = truncate(u, s, v, r);
        Ok(SvdResult {
            u,
            singular_values: s,
            v_t: v.transpose()?,
        })
    } else {
        // eᵀ = U S Vᵀ  ⇒  e = V S Uᵀ
        let (u, s, v) = jacobi_tall(&e.transpose()?)?;
        let (u, s, v) = truncate(u, s, v, r);
        Ok(SvdResult {
            u: v,
            singular_values: s,
            v_t: u.transpose()?,
        })
    }
}

/// Full thin SVD of an `m × n` matrix with `m ≥ n`: returns `(U m×n, s, V n×n)`
/// sorted by decreasing singular value.
fn jacobi_tall(e: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let (m, n) = e.dims2()?;
    // Column-major working copies make the column rotations contiguous.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| e.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric(format!(
            "jacobi svd did not converge after {SVD_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let scale = norms.iter().cloned().fold(0.0, f64::max);
    let tiny = scale * (m.max(n) as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    for &j in &order {
        let sigma = norms[j];
        if sigma > tiny {
            u_cols.push(a[j].iter().map(|x| x / sigma).collect());
            s.push(sigma);
        } else {
            u_cols.push(complete_basis(&u_cols, m));
            s.push(0.0);
        }
        v_cols.push(v[j].clone());
    }

    let u = Tensor::from_fn(m, n, |i, j| u_cols[j][i]);
    let vt = Tensor::from_fn(n, n, |i, j| v_cols[j][i]);
    Ok((u, s, vt))
}

fn truncate(u: Tensor, s: Vec<f64>, v: Tensor, r: usize) -> (Tensor, Vec<f64>, Tensor) {
    let u = u.slice_cols(0..r).expect("r within bounds");
    let v = v.slice_cols(0..r).expect("r within bounds");
    (u, s[..r].to_vec(), v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// A unit vector orthogonal to every column in `basis` (Gram–Schmidt over the standard basis).
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best = vec![0.0; m];
    let mut best_norm = -1.0;
    for k in 0..m {
        let mut cand = vec![0.0; m];
        cand[k] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                for (c, bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = cand;
        }
        if norm > 0.5 {
            break;
        }
    }
    best.iter().map(|x| x / best_norm).collect()
}
