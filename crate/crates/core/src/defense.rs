//! Condition-number clamping and the baseline defenses it is compared with.

use serde::{Deserialize, Serialize};

use crate::densela::{self, svd, Matrix, SvdFactors, Tolerances};
use crate::error::{Error, Result};

/// Bounds used across the experiment grid.
pub const BOUND_GRID: [f64; 4] = [2.0, 10.0, 100.0, 200.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub enabled: bool,
    #[serde(rename = "bound")]
    pub bound_b: f64,
}

impl DefenseConfig {
    /// Disabled. The bound is ignored and stored as 0 so it stays
    /// JSON-representable.
    pub fn off() -> Self {
        Self {
            enabled: false,
            bound_b: 0.0,
        }
    }

    pub fn with_bound(bound_b: f64) -> Result<Self> {
        let cfg = Self {
            enabled: true,
            bound_b,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.bound_b > 1.0) {
            return Err(Error::invalid(format!(
                "condition bound must exceed 1, got {}",
                self.bound_b
            )));
        }
        Ok(())
    }
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self::off()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub clamped: bool,
    /// `‖A′ − A‖₂`.
    pub delta_norm2: f64,
    /// `σ_max / B`.
    pub bound_delta: f64,
    /// `κ₂(A) / B`, the bound on the relative change of the canonical solution.
    pub bound_rel_solution_err: f64,
}

/// Raises every singular value below `σ_max / B` to that floor.
///
/// Matrices already within the bound are returned unchanged (bit for bit).
/// The floor, not a ceiling, is what bounds `κ₂(A′)` by `B`.
pub fn clamp_condition(a: &Matrix, cfg: &DefenseConfig) -> Result<(Matrix, DefenseReport)> {
    let c = clamp_condition_factored(a, cfg)?;
    Ok((c.a_prime, c.report))
}

/// Output of [`clamp_condition_factored`]. `factors` is the SVD of the input
/// and is kept only when the clamp actually changed the matrix.
#[derive(Debug, Clone)]
pub struct Clamped {
    pub a_prime: Matrix,
    pub report: DefenseReport,
    pub factors: Option<SvdFactors>,
}

pub fn clamp_condition_factored(a: &Matrix, cfg: &DefenseConfig) -> Result<Clamped> {
    cfg.validate()?;
    let f = svd(a)?;
    let smax = f.sigma_max();
    if smax == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let smin = f.sigma_min();
    let kappa = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    let floor = smax / cfg.bound_b;
    let mut report = DefenseReport {
        clamped: false,
        delta_norm2: 0.0,
        bound_delta: floor,
        bound_rel_solution_err: kappa / cfg.bound_b,
    };
    if !cfg.enabled || kappa <= cfg.bound_b {
        return Ok(Clamped {
            a_prime: a.clone(),
            report,
            factors: None,
        });
    }
    let clamped: Vec<f64> = f.sigma.iter().map(|&s| s.max(floor)).collect();
    let a_prime = f.reconstruct_with(&clamped);
    report.clamped = true;
    // A and A′ share singular vectors, so the 2-norm of the change is the
    // largest singular-value shift.
    report.delta_norm2 = clamped
        .iter()
        .zip(&f.sigma)
        .map(|(c, s)| c - s)
        .fold(0.0, f64::max);
    Ok(Clamped {
        a_prime,
        report,
        factors: Some(f),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolutionBound {
    pub rel_err: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Relative distance between the canonical solutions `A⁺b` and `A′⁺b`,
/// against the bound `κ₂(A)/B`.
pub fn prop2_solution_bound(
    a: &Matrix,
    a_prime: &Matrix,
    b: &[f64],
    bound_b: f64,
) -> Result<SolutionBound> {
    if a.shape() != a_prime.shape() || b.len() != a.rows() {
        return Err(Error::invalid("solution bound: shape mismatch"));
    }
    let tol = Tolerances::default();
    let x = densela::pseudoinverse_with(a, &tol).matvec(b);
    let xp = densela::pseudoinverse_with(a_prime, &tol).matvec(b);
    let nxp = densela::norm2(&xp);
    if nxp == 0.0 {
        return Err(Error::DegenerateRhs);
    }
    let diff: Vec<f64> = x.iter().zip(&xp).map(|(p, q)| p - q).collect();
    let rel_err = densela::norm2(&diff) / nxp;
    let s = densela::singular_values(a)?;
    let smin = *s.last().unwrap();
    let kappa = if smin > 0.0 {
        s[0] / smin
    } else {
        f64::INFINITY
    };
    let bound = kappa / bound_b;
    Ok(SolutionBound {
        rel_err,
        bound,
        holds: rel_err <= bound,
    })
}

/// `A + ηI`. Only meaningful for square matrices, and not a defense at all
/// when `A` has an eigenvalue at `−η`.
pub fn eta_identity_baseline(a: &Matrix, eta: f64) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::invalid("eta·I baseline needs a square matrix"));
    }
    Ok(a.add(&Matrix::identity(a.rows()).scale(eta)))
}

/// Caps every singular value at `lip`. Bounds `‖A‖₂` but leaves a zero
/// singular value at zero.
pub fn spectral_clamp_baseline(a: &Matrix, lip: f64) -> Result<Matrix> {
    if !(lip > 0.0) {
        return Err(Error::invalid("spectral clamp needs lip > 0"));
    }
    let f = svd(a)?;
    if f.sigma_max() <= lip {
        return Ok(a.clone());
    }
    let capped: Vec<f64> = f.sigma.iter().map(|&s| s.min(lip)).collect();
    Ok(f.reconstruct_with(&capped))
}
