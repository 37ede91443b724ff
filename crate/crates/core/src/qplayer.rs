//! The optimization layer.
//!
//! Forward: `min ½ zᵀQz + qᵀz  s.t.  Az = b`, solved through its KKT system
//! `[[Q, Aᵀ], [A, 0]] [z; ν] = [−q; b]`. A numerically singular KKT matrix is
//! reported through [`QpStatus::SingularKkt`] with NaN-filled outputs rather
//! than as an error, because the attack loop needs to observe it.
//!
//! Backward: implicit differentiation of the KKT conditions.

use serde::{Deserialize, Serialize};

use crate::densela::{self, dot, norm2, Matrix, Tolerances};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpProblem {
    #[serde(rename = "Q")]
    pub q_mat: Matrix,
    #[serde(rename = "q")]
    pub q_vec: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl QpProblem {
    pub fn new(q_mat: Matrix, q_vec: Vec<f64>, a: Matrix, b: Vec<f64>) -> Result<Self> {
        let p = Self { q_mat, q_vec, a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.q_mat.rows()
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q_mat.rows();
        if !self.q_mat.is_square()
            || self.q_vec.len() != n
            || self.a.cols() != n
            || self.b.len() != self.a.rows()
        {
            return Err(Error::invalid(format!(
                "QP dimensions: Q {:?}, q {}, A {:?}, b {}",
                self.q_mat.shape(),
                self.q_vec.len(),
                self.a.shape(),
                self.b.len()
            )));
        }
        if !self.q_mat.is_finite()
            || !self.a.is_finite()
            || self.q_vec.iter().chain(&self.b).any(|x| !x.is_finite())
        {
            return Err(Error::invalid("QP data must be finite"));
        }
        if self.q_mat.sub(&self.q_mat.transpose()).max_abs() > 1e-12 {
            return Err(Error::invalid("Q is not symmetric"));
        }
        let shifted = self.q_mat.add(&Matrix::identity(n).scale(1e-10));
        if densela::cholesky(&shifted).is_none() {
            return Err(Error::invalid("Q is not positive semidefinite"));
        }
        Ok(())
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        0.5 * dot(z, &self.q_mat.matvec(z)) + dot(&self.q_vec, z)
    }

    fn kkt_matrix(&self) -> Matrix {
        let n = self.n();
        let m = self.m();
        Matrix::from_fn(n + m, n + m, |i, j| match (i < n, j < n) {
            (true, true) => self.q_mat[(i, j)],
            (true, false) => self.a[(j - n, i)],
            (false, true) => self.a[(i - n, j)],
            (false, false) => 0.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    SingularKkt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSolution {
    pub z: Vec<f64>,
    pub nu: Vec<f64>,
    pub kkt_residual: f64,
    pub status: QpStatus,
}

impl QpSolution {
    fn failed(n: usize, m: usize) -> Self {
        Self {
            z: vec![f64::NAN; n],
            nu: vec![f64::NAN; m],
            kkt_residual: f64::INFINITY,
            status: QpStatus::SingularKkt,
        }
    }

    pub fn is_solved(&self) -> bool {
        self.status == QpStatus::Solved
    }
}

/// Gradients of a scalar loss with respect to the QP data.
#[derive(Debug, Clone)]
pub struct QpGrads {
    pub q_mat: Matrix,
    pub q_vec: Vec<f64>,
    pub a: Matrix,
    pub b: Vec<f64>,
}

pub fn solve_eq_qp(p: &QpProblem) -> QpSolution {
    solve_eq_qp_with(p, &Tolerances::default())
}

pub fn solve_eq_qp_with(p: &QpProblem, tol: &Tolerances) -> QpSolution {
    let (n, m) = (p.n(), p.m());
    let rhs: Vec<f64> = p
        .q_vec
        .iter()
        .map(|x| -x)
        .chain(p.b.iter().copied())
        .collect();
    let sol = match densela::solve_linear_with(&p.kkt_matrix(), &Matrix::column_vector(&rhs), tol) {
        Ok(x) => x.into_vec(),
        Err(_) => return QpSolution::failed(n, m),
    };
    let z = sol[..n].to_vec();
    let nu = sol[n..].to_vec();

    let mut stat = p.q_mat.matvec(&z);
    for (s, (q, atn)) in stat.iter_mut().zip(p.q_vec.iter().zip(p.a.matvec_t(&nu))) {
        *s += q + atn;
    }
    let feas: Vec<f64> =
        p.a.matvec(&z)
            .iter()
            .zip(&p.b)
            .map(|(x, y)| x - y)
            .collect();
    let residual = norm2(&stat).max(norm2(&feas));
    let scale = 1f64.max(norm2(&p.b)).max(norm2(&p.q_vec));
    if !residual.is_finite() || residual > 1e-8 * scale {
        return QpSolution::failed(n, m);
    }
    QpSolution {
        z,
        nu,
        kkt_residual: residual,
        status: QpStatus::Solved,
    }
}

/// Backpropagates `grad_z = ∂ℓ/∂z` to `(Q, q, A, b)`.
///
/// Solves `K [d_z; d_ν] = [−grad_z; 0]` with the (symmetric) KKT matrix K and
/// assembles `dQ = ½(d_z zᵀ + z d_zᵀ)`, `dq = d_z`, `dA = d_ν zᵀ + ν d_zᵀ`,
/// `db = −d_ν`.
pub fn backward_eq_qp(p: &QpProblem, sol: &QpSolution, grad_z: &[f64]) -> Result<QpGrads> {
    backward_eq_qp_with(p, sol, grad_z, &Tolerances::default())
}

pub fn backward_eq_qp_with(
    p: &QpProblem,
    sol: &QpSolution,
    grad_z: &[f64],
    tol: &Tolerances,
) -> Result<QpGrads> {
    if !sol.is_solved() {
        return Err(Error::NonFiniteForward);
    }
    let (n, m) = (p.n(), p.m());
    if grad_z.len() != n {
        return Err(Error::invalid("grad_z length does not match the QP"));
    }
    let rhs: Vec<f64> = grad_z
        .iter()
        .map(|g| -g)
        .chain(std::iter::repeat_n(0.0, m))
        .collect();
    let d = densela::solve_linear_with(&p.kkt_matrix(), &Matrix::column_vector(&rhs), tol)
        .map_err(|_| Error::NonFiniteForward)?
        .into_vec();
    let (dz, dnu) = d.split_at(n);

    let dzz = Matrix::outer(dz, &sol.z);
    let q_mat = dzz.add(&dzz.transpose()).scale(0.5);
    let a = Matrix::outer(dnu, &sol.z).add(&Matrix::outer(&sol.nu, dz));
    Ok(QpGrads {
        q_mat,
        q_vec: dz.to_vec(),
        a,
        b: dnu.iter().map(|x| -x).collect(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BoxQpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BoxQpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100_000,
        }
    }
}

/// `min ½ zᵀHz + cᵀz  s.t.  z ≥ lower` by accelerated projected gradient.
///
/// `lower` entries may be `-inf`. Converged when the projected-gradient
/// residual `‖z − P(z − ∇f(z))‖₂` drops to `tol`.
pub fn solve_lower_bounded_qp(h: &Matrix, c: &[f64], lower: &[f64]) -> Result<Vec<f64>> {
    solve_lower_bounded_qp_with(h, c, lower, None, BoxQpOptions::default())
}

pub fn solve_lower_bounded_qp_with(
    h: &Matrix,
    c: &[f64],
    lower: &[f64],
    warm_start: Option<&[f64]>,
    opts: BoxQpOptions,
) -> Result<Vec<f64>> {
    let n = h.rows();
    if !h.is_square() || c.len() != n || lower.len() != n {
        return Err(Error::invalid("box QP dimensions"));
    }
    if h.sub(&h.transpose()).max_abs() > 1e-10 * h.max_abs().max(1.0) {
        return Err(Error::invalid("box QP Hessian is not symmetric"));
    }
    let project = |z: &mut [f64]| {
        for (zi, &lo) in z.iter_mut().zip(lower) {
            if *zi < lo {
                *zi = lo;
            }
        }
    };
    let grad = |z: &[f64]| -> Vec<f64> {
        let mut g = h.matvec(z);
        g.iter_mut().zip(c).for_each(|(gi, ci)| *gi += ci);
        g
    };
    let residual = |z: &[f64], g: &[f64]| -> f64 {
        let mut step: Vec<f64> = z.iter().zip(g).map(|(a, b)| a - b).collect();
        project(&mut step);
        z.iter()
            .zip(&step)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };

    let lip = densela::power_iteration_psd(h, 2000, 1e-12) * 1.05;
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };

    let mut z: Vec<f64> = match warm_start {
        Some(w) if w.len() == n => w.to_vec(),
        _ => lower
            .iter()
            .map(|&lo| if lo.is_finite() { lo.max(0.0) } else { 0.0 })
            .collect(),
    };
    project(&mut z);
    let mut prev = z.clone();
    let mut t = 1.0f64;
    let mut best = z.clone();
    let mut best_res = f64::INFINITY;

    for iter in 0..opts.max_iter {
        let g = grad(&z);
        let res = residual(&z, &g);
        if res < best_res {
            best_res = res;
            best.clone_from(&z);
        }
        if res <= opts.tol {
            return Ok(z);
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        let y: Vec<f64> = z
            .iter()
            .zip(&prev)
            .map(|(a, b)| a + beta * (a - b))
            .collect();
        let gy = grad(&y);
        let mut next: Vec<f64> = y.iter().zip(&gy).map(|(a, b)| a - step * b).collect();
        project(&mut next);
        // Restart momentum when it points uphill.
        let uphill: f64 = y
            .iter()
            .zip(&next)
            .zip(&z)
            .map(|((yi, ni), zi)| (yi - ni) * (ni - zi))
            .sum();
        t = if uphill > 0.0 { 1.0 } else { t_next };
        prev = std::mem::replace(&mut z, next);
        if iter + 1 == opts.max_iter {
            let g = grad(&z);
            let res = residual(&z, &g);
            if res < best_res {
                best_res = res;
                best.clone_from(&z);
            }
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        residual: best_res,
        best,
    })
}

/// Shifts the constraint right-hand side to `b − k A g`.
///
/// With `g = ∇f` at the constrained optimum, the optimal value of the shifted
/// problem grows without bound in `k` while `A` (and so its conditioning) is
/// untouched.
pub fn lemma2_shift(a: &Matrix, b: &[f64], grad_at_opt: &[f64], k: f64) -> Vec<f64> {
    let ag = a.matvec(grad_at_opt);
    b.iter().zip(ag).map(|(bi, agi)| bi - k * agi).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn min_norm_problem(a: &[&[f64]], b: &[f64]) -> QpProblem {
        let a = Matrix::from_rows(a).unwrap();
        let n = a.cols();
        QpProblem::new(Matrix::identity(n).scale(2.0), vec![0.0; n], a, b.to_vec()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let s = solve_eq_qp(&min_norm_problem(&[&[1.0, 1.0]], &[2.0]));
        assert!(s.is_solved());
        assert!((s.z[0] - 1.0).abs() < 1e-12 && (s.z[1] - 1.0).abs() < 1e-12);

        let s = solve_eq_qp(&min_norm_problem(&[&[1.0, 0.0]], &[1.0]));
        assert!((s.z[0] - 1.0).abs() < 1e-12 && s.z[1].abs() < 1e-12);

        let s = solve_eq_qp(&min_norm_problem(&[&[1.0, 1.0], &[0.0, 0.0]], &[1.0, 1.0]));
        assert_eq!(s.status, QpStatus::SingularKkt);
        assert!(s.z.iter().all(|x| x.is_nan()));
    }

    #[test]
    fn rejects_invalid_problems() {
        let a = Matrix::from_rows(&[&[1.0, 1.0]]).unwrap();
        let nonsym = Matrix::from_rows(&[&[1.0, 0.5], &[0.0, 1.0]]).unwrap();
        assert!(QpProblem::new(nonsym, vec![0.0; 2], a.clone(), vec![1.0]).is_err());
        let indef = Matrix::from_diag(&[1.0, -1.0]);
        assert!(QpProblem::new(indef, vec![0.0; 2], a.clone(), vec![1.0]).is_err());
        assert!(QpProblem::new(Matrix::identity(2), vec![0.0; 3], a, vec![1.0]).is_err());
    }

    #[test]
    fn backward_zero_upstream_and_singular() {
        let p = min_norm_problem(&[&[1.0, 1.0]], &[2.0]);
        let s = solve_eq_qp(&p);
        let g = backward_eq_qp(&p, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(g.q_mat.max_abs(), 0.0);
        assert_eq!(g.a.max_abs(), 0.0);
        assert!(g.q_vec.iter().chain(&g.b).all(|x| *x == 0.0));

        let bad = min_norm_problem(&[&[0.0, 0.0]], &[1.0]);
        let s = solve_eq_qp(&bad);
        assert!(matches!(
            backward_eq_qp(&bad, &s, &[1.0, 0.0]),
            Err(Error::NonFiniteForward)
        ));
    }

    #[test]
    fn backward_matches_central_differences_on_a() {
        let p = min_norm_problem(&[&[1.0, 1.0]], &[2.0]);
        let s = solve_eq_qp(&p);
        let g = backward_eq_qp(&p, &s, &[1.0, 0.0]).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut pp = p.clone();
            pp.a[(0, j)] += h;
            let mut pm = p.clone();
            pm.a[(0, j)] -= h;
            let fd = (solve_eq_qp(&pp).z[0] - solve_eq_qp(&pm).z[0]) / (2.0 * h);
            assert!(
                (fd - g.a[(0, j)]).abs() <= 1e-4 * fd.abs().max(1.0),
                "{fd} vs {}",
                g.a[(0, j)]
            );
        }
    }

    #[test]
    fn box_qp_examples() {
        let z = solve_lower_bounded_qp(&Matrix::identity(2).scale(2.0), &[-2.0, -2.0], &[0.0, 0.0])
            .unwrap();
        assert!((z[0] - 1.0).abs() < 1e-6 && (z[1] - 1.0).abs() < 1e-6);
        let z = solve_lower_bounded_qp(&Matrix::identity(1).scale(2.0), &[2.0], &[0.0]).unwrap();
        assert!(z[0].abs() < 1e-9);
        let z = solve_lower_bounded_qp(
            &Matrix::identity(2).scale(2.0),
            &[2.0, -2.0],
            &[f64::NEG_INFINITY, 0.0],
        )
        .unwrap();
        assert!((z[0] + 1.0).abs() < 1e-6 && (z[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn box_qp_unbounded_reports_not_converged() {
        let r = solve_lower_bounded_qp_with(
            &Matrix::zeros(1, 1),
            &[1.0],
            &[f64::NEG_INFINITY],
            None,
            BoxQpOptions {
                tol: 1e-6,
                max_iter: 50,
            },
        );
        match r {
            Err(Error::NotConverged { best, .. }) => assert_eq!(best.len(), 1),
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn lemma2_shift_examples() {
        let p = min_norm_problem(&[&[1.0, 1.0]], &[2.0]);
        let s = solve_eq_qp(&p);
        let g: Vec<f64> = p.q_mat.matvec(&s.z);
        assert_eq!(lemma2_shift(&p.a, &p.b, &g, 0.0), p.b);
        let base = p.objective(&s.z);
        let mut shifted = p.clone();
        shifted.b = lemma2_shift(&p.a, &p.b, &g, 10.0);
        let s10 = solve_eq_qp(&shifted);
        assert!(shifted.objective(&s10.z) > base);
    }

    #[test]
    fn random_problem_satisfies_kkt() {
        let mut r = SeedStream::new(5).stream(0);
        let n = 6;
        let l = Matrix::from_fn(n, n, |_, _| r.normal());
        let q = l.matmul(&l.transpose());
        let a = Matrix::from_fn(3, n, |_, _| r.normal());
        let p = QpProblem::new(q, r.normal_vec(n), a, r.normal_vec(3)).unwrap();
        let s = solve_eq_qp(&p);
        assert!(s.is_solved());
        assert!(s.kkt_residual <= 1e-8);
    }
}
