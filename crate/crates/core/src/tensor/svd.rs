//! One-sided (Hestenes) Jacobi singular value decomposition.

use super::DenseMatrix;
use crate::error::{LorsError, Result};

/// Off-diagonal convergence threshold: a column pair is treated as orthogonal
/// once `|<u_p, u_q>| <= SVD_TOLERANCE * |u_p| |u_q|`.
pub const SVD_TOLERANCE: f64 = 1e-12;
pub const SVD_MAX_SWEEPS: usize = 60;

/// Thin SVD `M = U diag(S) Vᵀ` with `k = min(m, n)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn rank_k(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let us = DenseMatrix::from_fn(self.u.rows(), self.s.len(), |i, j| self.u.get(i, j) * self.s[j]);
        super::matmul(&us, &self.v.transpose()).expect("svd factors compose")
    }

    /// The first `r` right singular vectors as rows of an `r×n` matrix.
    pub fn top_right_rows(&self, r: usize) -> DenseMatrix {
        assert!(r <= self.s.len());
        DenseMatrix::from_fn(r, self.v.rows(), |i, j| self.v.get(j, i))
    }

    /// `sqrt(Σ_{i >= r} σ_i²)`, the Frobenius error of the best rank-`r` fit.
    pub fn tail_norm(&self, r: usize) -> f64 {
        self.s.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Computes the thin SVD of `m`.
///
/// Singular values are sorted nonincreasing. Each column of `V` has its first
/// nonzero entry nonnegative; `U` columns are flipped along with it. Columns of
/// `U` belonging to zero singular values are completed to an orthonormal set.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    if !m.all_finite() {
        return Err(LorsError::Numeric { message: "svd input contains non-finite entries".into(), residual: None });
    }
    if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m)?;
        Ok(canonical_signs(u, s, v))
    } else {
        // Mᵀ = U' S V'ᵀ  =>  M = V' S U'ᵀ
        let (u_t, s, v_t) = jacobi_tall(&m.transpose())?;
        Ok(canonical_signs(v_t, s, u_t))
    }
}

/// Column-major working copy so rotations touch contiguous memory.
fn columns_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.cols()).map(|j| m.column(j)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn jacobi_tall(m: &DenseMatrix) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let (rows, n) = m.shape();
    let mut u = columns_of(m);
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();

    // Columns this short are rounding noise: they are left out of the sweeps
    // (rotating them against each other need not converge) and get zero
    // singular values.
    let negligible = (rows.max(n) as f64) * f64::EPSILON * m.frobenius_norm();
    let floor = negligible * negligible;
    let mut converged = false;
    let mut worst = 0.0;
    for _ in 0..SVD_MAX_SWEEPS {
        worst = 0.0f64;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = dot(&u[p], &u[p]);
                let beta = dot(&u[q], &u[q]);
                let gamma = dot(&u[p], &u[q]);
                if gamma == 0.0 || alpha <= floor || beta <= floor {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                worst = worst.max(ratio);
                if ratio <= SVD_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if worst <= SVD_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LorsError::Numeric {
            message: format!("jacobi svd did not converge in {SVD_MAX_SWEEPS} sweeps"),
            residual: Some(worst),
        });
    }

    let norms: Vec<f64> = u.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let cutoff = negligible;
    let mut u_sorted: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s_sorted = Vec::with_capacity(n);
    let mut v_sorted = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > cutoff && sigma > 0.0 {
            u_sorted.push(u[j].iter().map(|x| x / sigma).collect());
        } else {
            u_sorted.push(vec![0.0; rows]);
            deficient.push(slot);
        }
        s_sorted.push(if deficient.last() == Some(&slot) { 0.0 } else { sigma });
        v_sorted.push(v[j].clone());
    }
    complete_basis(&mut u_sorted, &deficient);
    Ok((u_sorted, s_sorted, v_sorted))
}

/// Replaces the listed columns with unit vectors orthogonal to all others.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    for &slot in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[e] = 1.0;
            // Two Gram-Schmidt passes against every filled column.
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == slot || (missing.contains(&k) && other.iter().all(|x| *x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&cand, other);
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= proj * o;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("dimension is positive");
        cols[slot] = cand.into_iter().map(|x| x / norm).collect();
    }
}

fn canonical_signs(mut u: Vec<Vec<f64>>, s: Vec<f64>, mut v: Vec<Vec<f64>>) -> SvdResult {
    for (uc, vc) in u.iter_mut().zip(v.iter_mut()) {
        if let Some(first) = vc.iter().find(|x| **x != 0.0) {
            if *first < 0.0 {
                vc.iter_mut().for_each(|x| *x = -*x);
                uc.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
    let k = s.len();
    let u_rows = u[0].len();
    let v_rows = v[0].len();
    SvdResult {
        u: DenseMatrix::from_fn(u_rows, k, |i, j| u[j][i]),
        s,
        v: DenseMatrix::from_fn(v_rows, k, |i, j| v[j][i]),
    }
}
