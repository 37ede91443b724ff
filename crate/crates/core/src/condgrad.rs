//! Closed-form derivatives of condition numbers with respect to matrix
//! entries, built on the differential of the Moore–Penrose pseudoinverse
//!
//! ```text
//! d(A⁺) = −A⁺ dA A⁺ + (I − A⁺A) dAᵀ (A⁺)ᵀA⁺ + A⁺(A⁺)ᵀ dAᵀ (I − AA⁺)
//! ```
//!
//! which holds wherever the rank of `A` is locally constant.

use serde::{Deserialize, Serialize};

use crate::densela::{self, svd, Matrix, SvdFactors, Tolerances};
use crate::diffgraph::{Network, Upstream};
use crate::error::{Error, Result};

/// Relative gap (to `sigma_max`) below which an extreme singular value is
/// treated as repeated.
pub const SIMPLE_GAP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMethod {
    TwoNormClosedForm,
    FrobeniusClosedForm,
    FiniteDifference,
}

#[derive(Debug, Clone)]
pub struct CondGradReport {
    /// `∂κ/∂A`, same shape as `A`.
    pub grad_wrt_a: Matrix,
    pub kappa: f64,
    pub method: GradMethod,
}

struct PinvParts {
    a: Matrix,
    x: Matrix,
    f: SvdFactors,
}

fn nonsingular_parts(a: &Matrix, tol: &Tolerances) -> Result<PinvParts> {
    let f = svd(a)?;
    let (smax, smin) = (f.sigma_max(), f.sigma_min());
    if tol.is_singular(smin, smax) {
        return Err(Error::SingularInput {
            ratio: if smax == 0.0 { 0.0 } else { smin / smax },
        });
    }
    let x = densela::pinv_from_factors(&f, a.rows(), a.cols(), tol);
    Ok(PinvParts { a: a.clone(), x, f })
}

impl PinvParts {
    /// `I − A⁺A` (n×n).
    fn row_complement(&self) -> Matrix {
        Matrix::identity(self.a.cols()).sub(&self.x.matmul(&self.a))
    }

    /// `I − AA⁺` (m×m).
    fn col_complement(&self) -> Matrix {
        Matrix::identity(self.a.rows()).sub(&self.a.matmul(&self.x))
    }
}

/// Directional derivative of `A⁺` along `da`.
pub fn pinv_differential(a: &Matrix, da: &Matrix) -> Result<Matrix> {
    if a.shape() != da.shape() {
        return Err(Error::invalid("pinv_differential: da shape differs from a"));
    }
    let p = nonsingular_parts(a, &Tolerances::default())?;
    let x = &p.x;
    let dat = da.transpose();
    let t1 = x.matmul(da).matmul(x).scale(-1.0);
    let t2 = p
        .row_complement()
        .matmul(&dat)
        .matmul(&x.transpose())
        .matmul(x);
    let t3 = x
        .matmul(&x.transpose())
        .matmul(&dat)
        .matmul(&p.col_complement());
    Ok(t1.add(&t2).add(&t3))
}

/// Adjoint of [`pinv_differential`]: the matrix `M` with
/// `⟨G, d(A⁺)⟩ = ⟨M, dA⟩` for every `dA`, i.e. the gradient with respect to
/// `A` of a scalar whose gradient with respect to `A⁺` is `g`.
pub fn pinv_adjoint(a: &Matrix, g: &Matrix) -> Result<Matrix> {
    if g.shape() != (a.cols(), a.rows()) {
        return Err(Error::invalid("pinv_adjoint: g must have the shape of A⁺"));
    }
    let p = nonsingular_parts(a, &Tolerances::default())?;
    Ok(pinv_adjoint_parts(&p, g))
}

fn pinv_adjoint_parts(p: &PinvParts, g: &Matrix) -> Matrix {
    let x = &p.x;
    let xt = x.transpose();
    let gt = g.transpose();
    let t1 = xt.matmul(g).matmul(&xt).scale(-1.0);
    let t2 = xt.matmul(x).matmul(&gt).matmul(&p.row_complement());
    let t3 = p.col_complement().matmul(&gt).matmul(x).matmul(&xt);
    t1.add(&t2).add(&t3)
}

/// `∂κ₂/∂A` for `κ₂ = ‖A‖₂‖A⁺‖₂`.
///
/// With `B = ‖A⁺‖₂ v₁u₁ᵀ` and `C = ‖A‖₂ u_r v_rᵀ` the gradient is
/// `Bᵀ − (A⁺CA⁺)ᵀ + (A⁺)ᵀA⁺C(I − A⁺A) + (I − AA⁺)CA⁺(A⁺)ᵀ`.
/// Requires the largest and smallest singular values to be simple.
pub fn grad_kappa2(a: &Matrix) -> Result<CondGradReport> {
    grad_kappa2_with(a, &Tolerances::default())
}

pub fn grad_kappa2_with(a: &Matrix, tol: &Tolerances) -> Result<CondGradReport> {
    let p = nonsingular_parts(a, tol)?;
    let s = &p.f.sigma;
    let r = s.len();
    let smax = s[0];
    let smin = s[r - 1];
    if r >= 2 {
        let gap = (s[0] - s[1]).min(s[r - 2] - s[r - 1]);
        if gap <= SIMPLE_GAP * smax {
            return Err(Error::DegenerateSpectrum { gap: gap / smax });
        }
    }
    let (m, n) = a.shape();
    let u1 = p.f.u_col(0);
    let v1 = p.f.v_col(0);
    let ur = p.f.u_col(r - 1);
    let vr = p.f.v_col(r - 1);
    // B is n×m, C is m×n.
    let b = Matrix::outer(&v1, &u1).scale(1.0 / smin);
    let c = Matrix::outer(&ur, &vr).scale(smax);
    let x = &p.x;
    let xt = x.transpose();

    let mut g = b.transpose();
    g.add_assign_scaled(-1.0, &x.matmul(&c).matmul(x).transpose());
    g.add_assign_scaled(1.0, &xt.matmul(x).matmul(&c).matmul(&p.row_complement()));
    g.add_assign_scaled(1.0, &p.col_complement().matmul(&c).matmul(x).matmul(&xt));
    debug_assert_eq!(g.shape(), (m, n));
    Ok(CondGradReport {
        grad_wrt_a: g,
        kappa: smax / smin,
        method: GradMethod::TwoNormClosedForm,
    })
}

/// `∂κ_F/∂A` for `κ_F = ‖A‖_F‖A⁺‖_F`:
/// `(‖A⁺‖/‖A‖) A + (‖A‖/‖A⁺‖)((A⁺)ᵀA⁺(A⁺)ᵀ − (A⁺)ᵀA⁺(A⁺)ᵀA⁺A − AA⁺(A⁺)ᵀA⁺(A⁺)ᵀ)`.
pub fn grad_kappa_f(a: &Matrix) -> Result<CondGradReport> {
    let p = nonsingular_parts(a, &Tolerances::default())?;
    let x = &p.x;
    let xt = x.transpose();
    let na = a.frobenius_norm();
    let nx = x.frobenius_norm();
    let xtxxt = xt.matmul(x).matmul(&xt);
    let inner = xtxxt
        .sub(&xtxxt.matmul(x).matmul(a))
        .sub(&a.matmul(x).matmul(&xtxxt));
    let g = a.scale(nx / na).add(&inner.scale(na / nx));
    Ok(CondGradReport {
        grad_wrt_a: g,
        kappa: na * nx,
        method: GradMethod::FrobeniusClosedForm,
    })
}

/// Central-difference gradient of `σ_max/σ_min`, used when the closed form is
/// unavailable because an extreme singular value is repeated.
pub fn grad_kappa2_fd(a: &Matrix, h: f64) -> Result<CondGradReport> {
    let kappa_of = |m: &Matrix| -> Result<f64> {
        let s = densela::singular_values(m)?;
        Ok(s[0] / s[s.len() - 1])
    };
    let kappa = kappa_of(a)?;
    if !kappa.is_finite() {
        return Err(Error::SingularInput { ratio: 0.0 });
    }
    let mut g = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let step = h * a[(i, j)].abs().max(1.0);
            let mut ap = a.clone();
            ap[(i, j)] += step;
            let mut am = a.clone();
            am[(i, j)] -= step;
            g[(i, j)] = (kappa_of(&ap)? - kappa_of(&am)?) / (2.0 * step);
        }
    }
    Ok(CondGradReport {
        grad_wrt_a: g,
        kappa,
        method: GradMethod::FiniteDifference,
    })
}

/// `∂ log κ₂(A(u)) / ∂u` where `A(u)` is the matrix the network head emits
/// (before any defense) at input `u`.
pub fn grad_log_kappa2_wrt_input(net: &Network, u: &[f64]) -> Result<(Vec<f64>, CondGradReport)> {
    let fwd = net.forward(u)?;
    if !fwd.a.is_finite() {
        return Err(Error::NonFiniteForward);
    }
    let report = grad_kappa2_with(&fwd.a, &net.tolerances)?;
    let grad = net.input_grad_from_matrix(&fwd, &report.grad_wrt_a.scale(1.0 / report.kappa))?;
    Ok((grad, report))
}

/// Same as [`grad_log_kappa2_wrt_input`] but takes the gradient with respect
/// to `A` from a caller (e.g. the finite-difference fallback).
pub(crate) fn chain_matrix_grad(
    net: &Network,
    fwd: &crate::diffgraph::Forward,
    grad_a: &Matrix,
) -> Result<Vec<f64>> {
    let (m, n) = net.arch.matrix_shape();
    let mut theta_grad = vec![0.0; net.arch.output_dim()];
    theta_grad[..m * n].copy_from_slice(grad_a.as_slice());
    Ok(net.backward(fwd, Upstream::Theta(theta_grad))?.input)
}
