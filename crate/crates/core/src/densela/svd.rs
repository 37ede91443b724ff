//! One-sided (Hestenes) Jacobi SVD.
//!
//! The columns of a working copy of the (tall) matrix are rotated pairwise
//! until mutually orthogonal; column norms are then the singular values. The
//! relative orthogonality test gives small singular values to high relative
//! accuracy, which matters for condition numbers near singularity.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `A = U diag(sigma) Vᵀ` with `r = min(m, n)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdFactors {
    /// m×r, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// r×n, orthonormal rows.
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank_cap(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma[0]
    }

    pub fn sigma_min(&self) -> f64 {
        *self.sigma.last().unwrap()
    }

    /// `U diag(s) Vᵀ` for replacement singular values `s`.
    pub fn reconstruct_with(&self, s: &[f64]) -> Matrix {
        assert_eq!(s.len(), self.sigma.len());
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, sj) in s.iter().enumerate() {
                us[(i, j)] *= sj;
            }
        }
        us.matmul(&self.vt)
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(&self.sigma)
    }

    /// Column `i` of V.
    pub fn v_col(&self, i: usize) -> Vec<f64> {
        self.vt.row(i).to_vec()
    }

    pub fn u_col(&self, i: usize) -> Vec<f64> {
        self.u.column(i)
    }
}

/// Columns stored contiguously; Jacobi rotations touch whole columns.
struct Columns {
    len: usize,
    data: Vec<Vec<f64>>,
}

impl Columns {
    fn from_matrix(a: &Matrix) -> Self {
        Self {
            len: a.rows(),
            data: (0..a.cols()).map(|j| a.column(j)).collect(),
        }
    }

    fn identity(n: usize) -> Self {
        Self {
            len: n,
            data: (0..n)
                .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    fn rotate(&mut self, p: usize, q: usize, c: f64, s: f64) {
        let (lo, hi) = self.data.split_at_mut(q);
        let (wp, wq) = (&mut lo[p], &mut hi[0]);
        for (x, y) in wp.iter_mut().zip(wq.iter_mut()) {
            let (a, b) = (*x, *y);
            *x = c * a - s * b;
            *y = s * a + c * b;
        }
    }
}

/// Orthogonalizes the columns of a tall `a` (m ≥ n). Returns the rotated
/// columns (A V) and, when requested, the accumulated V.
fn jacobi_columns(a: &Matrix, want_v: bool) -> (Columns, Option<Columns>) {
    let n = a.cols();
    let mut w = Columns::from_matrix(a);
    let mut v = want_v.then(|| Columns::identity(n));
    let mut norms: Vec<f64> = w.data.iter().map(|c| dot(c, c)).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&w.data[p], &w.data[q]);
                if gamma.abs() <= f64::EPSILON * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                w.rotate(p, q, c, s);
                if let Some(v) = v.as_mut() {
                    v.rotate(p, q, c, s);
                }
                norms[p] = dot(&w.data[p], &w.data[p]);
                norms[q] = dot(&w.data[q], &w.data[q]);
            }
        }
        if !rotated {
            break;
        }
    }
    (w, v)
}

/// Normalizes the rotated columns into orthonormal left vectors. Columns are
/// taken in order of decreasing norm and re-orthogonalized against the ones
/// already accepted; columns at roundoff level are replaced by an orthonormal
/// completion.
fn left_vectors(w: &Columns, sigma: &[f64]) -> Vec<Vec<f64>> {
    let m = w.len;
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let tiny = (m.max(sigma.len()) as f64) * f64::EPSILON * smax;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let mut out: Vec<Vec<f64>> = vec![Vec::new(); sigma.len()];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(sigma.len());
    for &j in &order {
        let s = sigma[j];
        let candidate = if s > tiny {
            let mut u: Vec<f64> = w.data[j].iter().map(|x| x / s).collect();
            orthogonalize(&mut u, &basis);
            let nrm = dot(&u, &u).sqrt();
            (nrm > 0.5).then(|| u.into_iter().map(|x| x / nrm).collect())
        } else {
            None
        };
        let u = candidate.unwrap_or_else(|| completion(m, &basis));
        basis.push(u.clone());
        out[j] = u;
    }
    out
}

fn orthogonalize(e: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let proj = dot(e, b);
            for (x, y) in e.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
    }
}

/// The standard basis vector with the largest component outside `basis`,
/// projected and normalized.
fn completion(m: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..m {
        let mut e = vec![0.0; m];
        e[k] = 1.0;
        orthogonalize(&mut e, basis);
        let nrm = dot(&e, &e).sqrt();
        if best.as_ref().is_none_or(|(bn, _)| nrm > *bn) {
            best = Some((nrm, e));
        }
    }
    let (nrm, e) = best.expect("m >= 1");
    e.into_iter().map(|x| x / nrm).collect()
}

/// Thin SVD of a finite matrix.
///
/// Sign convention: the first entry of each U column whose magnitude exceeds
/// 1e-12 is positive; the matching V column is flipped with it.
pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    if !a.is_finite() {
        return Err(Error::invalid("svd of a non-finite matrix"));
    }
    let (m, n) = a.shape();
    let wide = m < n;
    let tall = if wide { a.transpose() } else { a.clone() };
    let (w, v) = jacobi_columns(&tall, true);
    let v = v.unwrap();
    let raw_sigma: Vec<f64> = w.data.iter().map(|c| dot(c, c).sqrt()).collect();
    let left = left_vectors(&w, &raw_sigma);

    let r = raw_sigma.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| raw_sigma[j].total_cmp(&raw_sigma[i]).then(i.cmp(&j)));

    let sigma: Vec<f64> = order.iter().map(|&k| raw_sigma[k]).collect();
    // For the tall problem: tall = L diag(s) Rᵀ.
    let mut lcols: Vec<Vec<f64>> = order.iter().map(|&k| left[k].clone()).collect();
    let mut rcols: Vec<Vec<f64>> = order.iter().map(|&k| v.data[k].clone()).collect();

    // A = tall or tallᵀ; U are the left vectors of A itself.
    let (ucols, vcols) = if wide {
        (&mut rcols, &mut lcols)
    } else {
        (&mut lcols, &mut rcols)
    };
    for (uc, vc) in ucols.iter_mut().zip(vcols.iter_mut()) {
        if let Some(first) = uc.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                uc.iter_mut().for_each(|x| *x = -*x);
                vc.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
    let u = Matrix::from_fn(m, r, |i, j| ucols[j][i]);
    let vt = Matrix::from_fn(r, n, |i, j| vcols[i][j]);
    Ok(SvdFactors { u, sigma, vt })
}

/// Singular values only, non-increasing. Skips accumulation of V.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    if !a.is_finite() {
        return Err(Error::invalid("singular values of a non-finite matrix"));
    }
    let tall = if a.rows() < a.cols() {
        a.transpose()
    } else {
        a.clone()
    };
    let (w, _) = jacobi_columns(&tall, false);
    let mut s: Vec<f64> = w.data.iter().map(|c| dot(c, c).sqrt()).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}
