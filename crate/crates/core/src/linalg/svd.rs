//! Singular value decomposition by one-sided Jacobi rotations.
//!
//! Pairs of columns are rotated until every pair is numerically orthogonal;
//! the column norms are then the singular values and the accumulated
//! rotations form `V`. Accurate and dependency-free at the sizes used here
//! (up to a few hundred columns).

use super::Matrix;
use crate::error::{Error, Result};

pub const MAX_SWEEPS: usize = 60;

/// Thin factorization `W = U · diag(s) · Vᵀ` with `r = min(m, n)` triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// m×r, orthonormal columns.
    pub u: Matrix,
    /// Length r, descending, non-negative.
    pub s: Vec<f64>,
    /// r×n, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U · diag(s) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_cols(&self.s)
            .and_then(|us| us.matmul(&self.vt))
            .expect("svd factors conform by construction")
    }

    /// Keeps the leading `k` triplets: `(U[:, :k], s[:k], Vᵀ[:k, :])`.
    pub fn truncate(&self, k: usize) -> Result<SvdResult> {
        if k == 0 || k > self.s.len() {
            return Err(Error::invalid(format!(
                "truncate_svd: k = {k} outside 1..={}",
                self.s.len()
            )));
        }
        Ok(SvdResult {
            u: self.u.slice_cols(0, k),
            s: self.s[..k].to_vec(),
            vt: self.vt.slice_rows(0, k),
        })
    }
}

/// Free-function form of [`SvdResult::truncate`].
pub fn truncate_svd(f: &SvdResult, k: usize) -> Result<SvdResult> {
    f.truncate(k)
}

/// Deterministic SVD. For every triplet the entry of largest magnitude in the
/// `u` column is non-negative (ties go to the lowest row index).
pub fn svd(w: &Matrix) -> Result<SvdResult> {
    if w.rows() == 0 || w.cols() == 0 {
        return Err(Error::invalid("svd of an empty matrix"));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if w.rows() >= w.cols() {
        let (a, s, v) = jacobi_tall(w)?;
        Ok(finalize(a, s, v, false))
    } else {
        // Wᵀ = U' S V'ᵀ  ⇒  W = V' S U'ᵀ
        let (a, s, v) = jacobi_tall(&w.transpose())?;
        Ok(finalize(a, s, v, true))
    }
}

type Columns = Vec<Vec<f64>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided Jacobi on a matrix with `rows >= cols`. Returns the rotated
/// columns (U·S, unnormalized), their norms, and the accumulated V columns.
fn jacobi_tall(w: &Matrix) -> Result<(Columns, Vec<f64>, Columns)> {
    let (m, n) = w.shape();
    let mut a: Columns = (0..n).map(|j| w.col(j)).collect();
    let mut v: Columns = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let tol = (m as f64) * f64::EPSILON;
    let floor = {
        let f = 1e-14 * w.frobenius_norm();
        f * f * f64::EPSILON
    };

    let mut converged = false;
    let mut residual = 0.0f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                let scale = (alpha * beta).sqrt();
                if gamma.abs() <= floor || scale == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / scale;
                residual = residual.max(rel);
                if rel <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
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
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }
    let s = a.iter().map(|col| dot(col, col).sqrt()).collect();
    Ok((a, s, v))
}

fn rotate(cols: &mut Columns, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Sorts triplets, normalizes and completes the rotated side, and fixes signs.
/// `a` holds the rotated columns (singular vectors times singular values) and
/// `v` the accumulated rotations. When `wide`, the factorization was of `Wᵀ`
/// and the two sides swap roles.
fn finalize(a: Columns, s: Vec<f64>, v: Columns, wide: bool) -> SvdResult {
    let m = a[0].len();
    let r = s.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));

    let s_max = s[order[0]];
    let tiny = s_max * (m.max(r) as f64) * f64::EPSILON;

    let mut rotated: Columns = Vec::with_capacity(r);
    for &j in &order {
        let sigma = s[j];
        let mut col = None;
        if sigma > tiny && sigma > 0.0 {
            let mut c: Vec<f64> = a[j].iter().map(|x| x / sigma).collect();
            if orthonormalize_against(&mut c, &rotated) {
                col = Some(c);
            }
        }
        let col = col.unwrap_or_else(|| complete_basis(&rotated, m));
        rotated.push(col);
    }
    let accumulated: Columns = order.iter().map(|&j| v[j].clone()).collect();
    let sorted_s: Vec<f64> = order.iter().map(|&j| s[j]).collect();

    let (mut left, mut right) = if wide {
        (accumulated, rotated)
    } else {
        (rotated, accumulated)
    };
    for (l, rgt) in left.iter_mut().zip(right.iter_mut()) {
        let mut pivot = 0;
        for i in 1..l.len() {
            if l[i].abs() > l[pivot].abs() {
                pivot = i;
            }
        }
        if l[pivot] < 0.0 {
            l.iter_mut().for_each(|x| *x = -*x);
            rgt.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let rows = left[0].len();
    let cols = right[0].len();
    let u = Matrix::from_fn(rows, r, |i, j| left[j][i]);
    let vt = Matrix::from_fn(r, cols, |i, j| right[i][j]);
    SvdResult { u, s: sorted_s, vt }
}

/// Two passes of modified Gram-Schmidt then normalization. Returns false if
/// the vector collapses.
fn orthonormalize_against(c: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let before = dot(c, c).sqrt();
    for _ in 0..2 {
        for b in basis {
            let proj = dot(c, b);
            for (x, y) in c.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
    }
    let norm = dot(c, c).sqrt();
    if norm <= 0.5 * before || norm == 0.0 {
        return false;
    }
    c.iter_mut().for_each(|x| *x /= norm);
    true
}

fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        if orthonormalize_against(&mut e, basis) {
            return e;
        }
    }
    unreachable!("fewer than m orthonormal vectors always leave room in R^m")
}
