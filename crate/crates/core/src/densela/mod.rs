//! Dense linear algebra: matrices, SVD, pseudoinverse, condition numbers and
//! a linear solver that refuses numerically singular systems.

mod matrix;
mod svd;

pub use matrix::{dot, norm2, Matrix};
pub use svd::{singular_values, svd, SvdFactors};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative singularity threshold on `sigma_min / sigma_max`.
pub const TAU_SING: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// A matrix is numerically singular when `sigma_min <= tau_sing * sigma_max`.
    pub tau_sing: f64,
    /// Multiplier on the pseudoinverse cutoff `max(m, n) * eps * sigma_max`.
    pub pinv_scale: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            tau_sing: TAU_SING,
            pinv_scale: 1.0,
        }
    }
}

impl Tolerances {
    pub fn pinv_cutoff(&self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        self.pinv_scale * rows.max(cols) as f64 * f64::EPSILON * sigma_max
    }

    pub fn is_singular(&self, sigma_min: f64, sigma_max: f64) -> bool {
        sigma_max == 0.0 || sigma_min <= self.tau_sing * sigma_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondNorm {
    Two,
    Frobenius,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingularityVerdict {
    pub norm: CondNorm,
    /// `sigma_max / sigma_min` for the 2-norm, `‖A‖_F ‖A⁺‖_F` for Frobenius;
    /// `+inf` whenever the matrix is numerically singular.
    pub kappa: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub is_numerically_singular: bool,
}

pub fn pseudoinverse(a: &Matrix) -> Matrix {
    pseudoinverse_with(a, &Tolerances::default())
}

/// `V Σ⁺ Uᵀ`, inverting only singular values above the cutoff.
pub fn pseudoinverse_with(a: &Matrix, tol: &Tolerances) -> Matrix {
    let f = svd(a).expect("pseudoinverse of a non-finite matrix");
    pinv_from_factors(&f, a.rows(), a.cols(), tol)
}

pub(crate) fn pinv_from_factors(f: &SvdFactors, m: usize, n: usize, tol: &Tolerances) -> Matrix {
    let cutoff = tol.pinv_cutoff(m, n, f.sigma_max());
    let mut out = Matrix::zeros(n, m);
    for (k, &s) in f.sigma.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..n {
            let vik = f.vt[(k, i)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..m {
                out[(i, j)] += vik * f.u[(j, k)];
            }
        }
    }
    out
}

pub fn condition_number(a: &Matrix, norm: CondNorm) -> Result<SingularityVerdict> {
    condition_number_with(a, norm, &Tolerances::default())
}

pub fn condition_number_with(
    a: &Matrix,
    norm: CondNorm,
    tol: &Tolerances,
) -> Result<SingularityVerdict> {
    if !a.is_finite() {
        return Err(Error::invalid("condition number of a non-finite matrix"));
    }
    let s = singular_values(a)?;
    let sigma_max = s[0];
    let sigma_min = *s.last().unwrap();
    let singular = tol.is_singular(sigma_min, sigma_max);
    let kappa = if singular {
        f64::INFINITY
    } else {
        match norm {
            CondNorm::Two => sigma_max / sigma_min,
            CondNorm::Frobenius => {
                let fa = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                let fp = s.iter().map(|x| 1.0 / (x * x)).sum::<f64>().sqrt();
                fa * fp
            }
        }
    };
    Ok(SingularityVerdict {
        norm,
        kappa,
        sigma_min,
        sigma_max,
        is_numerically_singular: singular,
    })
}

/// 2-norm condition number; `+inf` when numerically singular.
pub fn kappa2(a: &Matrix) -> f64 {
    condition_number(a, CondNorm::Two)
        .map(|v| v.kappa)
        .unwrap_or(f64::NAN)
}

pub fn spectral_norm(a: &Matrix) -> f64 {
    singular_values(a).expect("spectral norm of a non-finite matrix")[0]
}

/// 2-norm distance to the nearest singular matrix, which is `sigma_min`.
///
/// Reported as exactly zero when the matrix is numerically singular, so that
/// a zero distance and a singular verdict always agree.
pub fn distance_to_singularity(a: &Matrix) -> f64 {
    distance_to_singularity_with(a, &Tolerances::default())
}

pub fn distance_to_singularity_with(a: &Matrix, tol: &Tolerances) -> f64 {
    let s = singular_values(a).expect("distance of a non-finite matrix");
    let (smax, smin) = (s[0], *s.last().unwrap());
    if tol.is_singular(smin, smax) {
        0.0
    } else {
        smin
    }
}

pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    solve_linear_with(a, b, &Tolerances::default())
}

/// Solves `A X = B` for square `A` by LU with partial pivoting.
///
/// Numerically singular `A` is an error, never a garbage solution; so is any
/// non-finite entry in the result.
pub fn solve_linear_with(a: &Matrix, b: &Matrix, tol: &Tolerances) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::invalid(format!(
            "solve_linear needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.rows() != a.rows() {
        return Err(Error::invalid(format!(
            "rhs has {} rows, matrix has {}",
            b.rows(),
            a.rows()
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid("solve_linear with non-finite input"));
    }
    let s = singular_values(a)?;
    let (smax, smin) = (s[0], *s.last().unwrap());
    if tol.is_singular(smin, smax) {
        return Err(Error::SingularSystem {
            ratio: if smax == 0.0 { 0.0 } else { smin / smax },
        });
    }

    let n = a.rows();
    let k = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| lu[(i, col)].abs().total_cmp(&lu[(j, col)].abs()))
            .unwrap();
        if lu[(piv, col)] == 0.0 {
            return Err(Error::SingularSystem { ratio: 0.0 });
        }
        if piv != col {
            for j in 0..n {
                let t = lu[(col, j)];
                lu[(col, j)] = lu[(piv, j)];
                lu[(piv, j)] = t;
            }
            for j in 0..k {
                let t = x[(col, j)];
                x[(col, j)] = x[(piv, j)];
                x[(piv, j)] = t;
            }
        }
        let p = lu[(col, col)];
        for i in (col + 1)..n {
            let f = lu[(i, col)] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu[(i, j)] -= f * lu[(col, j)];
            }
            for j in 0..k {
                x[(i, j)] -= f * x[(col, j)];
            }
        }
    }
    for j in 0..k {
        for i in (0..n).rev() {
            let mut acc = x[(i, j)];
            for c in (i + 1)..n {
                acc -= lu[(i, c)] * x[(c, j)];
            }
            x[(i, j)] = acc / lu[(i, i)];
        }
    }
    if !x.is_finite() {
        return Err(Error::SingularSystem { ratio: smin / smax });
    }
    Ok(x)
}

/// Lower Cholesky factor of a symmetric matrix, or `None` if a pivot is not
/// strictly positive.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    if !a.is_square() || !a.is_finite() {
        return None;
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_iteration_psd(h: &Matrix, max_iter: usize, tol: f64) -> f64 {
    let n = h.rows();
    let mut x: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.1 * ((i * 7 + 3) % 11) as f64)
        .collect();
    let nx = norm2(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let y = h.matvec(&x);
        let ny = norm2(&y);
        if ny == 0.0 {
            return 0.0;
        }
        let next = dot(&x, &y);
        x = y.into_iter().map(|v| v / ny).collect();
        if (next - lambda).abs() <= tol * next.abs() {
            return next.max(ny);
        }
        lambda = next;
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    #[test]
    fn cholesky_and_power_iteration() {
        let a = Matrix::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        assert!(l.matmul(&l.transpose()).sub(&a).max_abs() < 1e-14);
        assert!(cholesky(&Matrix::from_diag(&[1.0, 0.0])).is_none());
        let lam = power_iteration_psd(&a, 1000, 1e-14);
        let exact = (7.0 + 17.0f64.sqrt()) / 2.0;
        assert!((lam - exact).abs() < 1e-8);
    }

    fn random(m: usize, n: usize, seed: u64) -> Matrix {
        let mut r = SeedStream::new(seed).stream(0);
        Matrix::from_fn(m, n, |_, _| r.normal())
    }

    #[test]
    fn pinv_examples() {
        let p = pseudoinverse(&Matrix::from_diag(&[2.0, 4.0]));
        assert!(p.sub(&Matrix::from_diag(&[0.5, 0.25])).max_abs() < 1e-15);
        let z = pseudoinverse(&Matrix::zeros(3, 2));
        assert_eq!(z, Matrix::zeros(2, 3));
    }

    #[test]
    fn pinv_moore_penrose_identities() {
        let a = random(4, 6, 3);
        let p = pseudoinverse(&a);
        let apa = a.matmul(&p).matmul(&a);
        let pap = p.matmul(&a).matmul(&p);
        let ap = a.matmul(&p);
        let pa = p.matmul(&a);
        assert!(apa.sub(&a).max_abs() <= 1e-8);
        assert!(pap.sub(&p).max_abs() <= 1e-8);
        assert!(ap.sub(&ap.transpose()).max_abs() <= 1e-8);
        assert!(pa.sub(&pa.transpose()).max_abs() <= 1e-8);
    }

    #[test]
    fn condition_examples() {
        let v = condition_number(&Matrix::identity(4), CondNorm::Two).unwrap();
        assert_eq!(v.kappa, 1.0);
        let v = condition_number(&Matrix::from_diag(&[3.0, 1.0]), CondNorm::Two).unwrap();
        assert!((v.kappa - 3.0).abs() < 1e-15);
        let v = condition_number(&Matrix::from_diag(&[3.0, 1.0]), CondNorm::Frobenius).unwrap();
        assert!((v.kappa - (10.0f64.sqrt() * (1.0 + 1.0 / 9.0f64).sqrt())).abs() < 1e-14);

        let a = random(5, 5, 4);
        let k1 = kappa2(&a);
        let k7 = kappa2(&a.scale(7.0));
        assert!(((k1 - k7) / k1).abs() <= 1e-9);

        let v = condition_number(&Matrix::zeros(2, 2), CondNorm::Two).unwrap();
        assert!(v.is_numerically_singular && v.kappa.is_infinite());
        let bad = Matrix::from_raw(1, 1, vec![f64::NAN]).unwrap();
        assert!(condition_number(&bad, CondNorm::Two).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(
            distance_to_singularity(&Matrix::from_diag(&[3.0, 1.0])),
            1.0
        );
        let rd = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]).unwrap();
        assert_eq!(distance_to_singularity(&rd), 0.0);
    }

    #[test]
    fn solve_examples() {
        let x = solve_linear(&Matrix::identity(2), &Matrix::column_vector(&[1.0, 2.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
        let e = solve_linear(
            &Matrix::from_diag(&[2.0, 0.0]),
            &Matrix::column_vector(&[1.0, 1.0]),
        );
        assert!(matches!(e, Err(Error::SingularSystem { .. })));
        assert!(solve_linear(&Matrix::zeros(2, 3), &Matrix::zeros(2, 1)).is_err());
        assert!(solve_linear(&Matrix::identity(2), &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn solve_random_residual() {
        let a = random(6, 6, 5).add(&Matrix::identity(6).scale(6.0));
        let b = random(6, 2, 6);
        let x = solve_linear(&a, &b).unwrap();
        let r = a.matmul(&x).sub(&b).frobenius_norm();
        assert!(r <= 1e-8 * b.frobenius_norm().max(1.0));
    }
}
