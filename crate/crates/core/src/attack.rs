//! Input-space attacks that push the emitted constraint matrix toward
//! singularity, plus the negative controls they are compared with.

use serde::{Deserialize, Serialize};

use crate::condgrad::{self, GradMethod};
use crate::densela::{self, svd, CondNorm, Matrix, Tolerances};
use crate::diffgraph::{Forward, HeadKind, Network, Upstream};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    AllZeroRowCol,
    ZeroSingularValue,
    ConditionGrad,
    MaxOutput,
    TargetZeroMatrix,
    /// The inequality-infeasibility attack; not part of [`AttackMethod::ALL`].
    FarkasInfeasibility,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 5] = [
        AttackMethod::AllZeroRowCol,
        AttackMethod::ZeroSingularValue,
        AttackMethod::ConditionGrad,
        AttackMethod::MaxOutput,
        AttackMethod::TargetZeroMatrix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::AllZeroRowCol => "all_zero_row_col",
            AttackMethod::ZeroSingularValue => "zero_singular_value",
            AttackMethod::ConditionGrad => "condition_grad",
            AttackMethod::MaxOutput => "max_output",
            AttackMethod::TargetZeroMatrix => "target_zero_matrix",
            AttackMethod::FarkasInfeasibility => "farkas_infeasibility",
        }
    }

    fn target_based(self) -> bool {
        matches!(
            self,
            AttackMethod::AllZeroRowCol
                | AttackMethod::ZeroSingularValue
                | AttackMethod::TargetZeroMatrix
        )
    }
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attack method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Radius of the L∞ ball around the starting input.
    #[serde(default)]
    pub linf_eps: Option<f64>,
    /// Per-coordinate `[lo, hi]` box.
    #[serde(default)]
    pub clamp_box: Option<(f64, f64)>,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(method: AttackMethod, learning_rate: f64, max_epochs: usize, seed: u64) -> Self {
        Self {
            method,
            learning_rate,
            max_epochs,
            linf_eps: None,
            clamp_box: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if let Some(eps) = self.linf_eps {
            if !(eps > 0.0) {
                return Err(Error::invalid("linf_eps must be positive"));
            }
        }
        if let Some((lo, hi)) = self.clamp_box {
            if !(lo <= hi) {
                return Err(Error::invalid("clamp_box needs lo <= hi"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub method: AttackMethod,
    pub success: bool,
    pub u_star: Vec<f64>,
    pub epochs_used: usize,
    /// `(epoch, κ₂)` of the matrix the deployed model hands to its solver.
    /// Epoch 0 is the starting input; `+inf` marks a numerically singular
    /// matrix (serialized as `null`).
    #[serde(with = "kappa_serde")]
    pub kappa_trajectory: Vec<(usize, f64)>,
    /// Attack objective per epoch (the target distance for target methods,
    /// `log κ₂` or `Σ|z|` for the ascent methods).
    pub loss_trajectory: Vec<f64>,
    pub final_output_nonfinite: bool,
    pub distortion_l2: f64,
    pub learning_rate: f64,
}

impl AttackResult {
    pub fn kappa_csv(&self) -> String {
        let mut out = String::from("epoch,kappa2\n");
        for (e, k) in &self.kappa_trajectory {
            out.push_str(&format!("{e},{k:?}\n"));
        }
        out
    }

    pub fn max_kappa(&self) -> f64 {
        self.kappa_trajectory
            .iter()
            .map(|p| p.1)
            .fold(0.0, f64::max)
    }
}

mod kappa_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[(usize, f64)], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&(e, k)| (e, k.is_finite().then_some(k)))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(usize, f64)>, D::Error> {
        let raw = Vec::<(usize, Option<f64>)>::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|(e, k)| (e, k.unwrap_or(f64::INFINITY)))
            .collect())
    }
}

/// Zeroes the first row when `m ≤ n`, else the first column.
pub fn make_target_zero_rowcol(a: &Matrix) -> Matrix {
    let mut t = a.clone();
    if a.rows() <= a.cols() {
        for j in 0..a.cols() {
            t[(0, j)] = 0.0;
        }
    } else {
        for i in 0..a.rows() {
            t[(i, 0)] = 0.0;
        }
    }
    t
}

/// `U Σ′ Vᵀ` with the smallest singular value set to zero, the nearest
/// singular matrix in the 2-norm.
pub fn make_target_zero_sv(a: &Matrix) -> Result<Matrix> {
    let tol = Tolerances::default();
    let f = svd(a)?;
    if tol.is_singular(f.sigma_min(), f.sigma_max()) {
        return Err(Error::AlreadySingular);
    }
    let mut s = f.sigma.clone();
    *s.last_mut().unwrap() = 0.0;
    Ok(f.reconstruct_with(&s))
}

/// True when the forward pass failed to produce a usable answer.
pub fn detect_failure(fwd: &Forward) -> bool {
    let bad = |v: &[f64]| v.iter().any(|x| !x.is_finite());
    bad(&fwd.qp_out)
        || bad(&fwd.probs)
        || fwd.qp.as_ref().is_some_and(|s| !s.is_solved())
        || !fwd.a_used.is_finite()
}

/// `κ₂` of the deployed matrix and whether it counts as singular.
fn deployed_kappa(net: &Network, fwd: &Forward) -> (f64, bool) {
    if !fwd.a_used.is_finite() {
        return (f64::INFINITY, true);
    }
    match densela::condition_number_with(&fwd.a_used, CondNorm::Two, &net.tolerances) {
        Ok(v) => (v.kappa, v.is_numerically_singular),
        Err(_) => (f64::INFINITY, true),
    }
}

/// Success as seen by the deployed model: a failed solve or a numerically
/// singular matrix reaching the solver.
pub fn attack_succeeded(net: &Network, fwd: &Forward) -> bool {
    detect_failure(fwd) || deployed_kappa(net, fwd).1
}

pub fn distortion_l2(u0: &[f64], u: &[f64]) -> f64 {
    let d = u0.len().max(1) as f64;
    (u0.iter()
        .zip(u)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / d)
        .sqrt()
}

fn project(u: &mut [f64], u0: &[f64], cfg: &AttackConfig) {
    if let Some(eps) = cfg.linf_eps {
        for (x, &c) in u.iter_mut().zip(u0) {
            *x = x.clamp(c - eps, c + eps);
            // c ± eps rounds; step inward until the computed deviation fits.
            while *x - c > eps {
                *x = x.next_down();
            }
            while c - *x > eps {
                *x = x.next_up();
            }
        }
    }
    if let Some((lo, hi)) = cfg.clamp_box {
        for x in u.iter_mut() {
            *x = x.clamp(lo, hi);
        }
    }
}

/// Objective value and its input gradient, oriented for descent.
fn step_direction(
    net: &Network,
    fwd: &Forward,
    method: AttackMethod,
    target: Option<&Matrix>,
) -> Result<(f64, Vec<f64>)> {
    match method {
        AttackMethod::FarkasInfeasibility => Err(Error::invalid(
            "use farkas::run_farkas_attack for this method",
        )),
        AttackMethod::AllZeroRowCol
        | AttackMethod::ZeroSingularValue
        | AttackMethod::TargetZeroMatrix => {
            let diff = fwd.a.sub(target.expect("target methods carry a target"));
            let loss = diff.frobenius_dot(&diff);
            let g = net.input_grad_from_matrix(fwd, &diff.scale(2.0))?;
            Ok((loss, g))
        }
        AttackMethod::ConditionGrad => {
            let report = match condgrad::grad_kappa2_with(&fwd.a, &net.tolerances) {
                Ok(r) => r,
                Err(Error::DegenerateSpectrum { .. }) => {
                    let h = 1e-6 * fwd.a.max_abs().max(1e-300);
                    condgrad::grad_kappa2_fd(&fwd.a, h)?
                }
                Err(e) => return Err(e),
            };
            debug_assert!(matches!(
                report.method,
                GradMethod::TwoNormClosedForm | GradMethod::FiniteDifference
            ));
            let g =
                net.input_grad_from_matrix(fwd, &report.grad_wrt_a.scale(1.0 / report.kappa))?;
            Ok((report.kappa.ln(), g.into_iter().map(|x| -x).collect()))
        }
        AttackMethod::MaxOutput => {
            if net.arch.head != HeadKind::EqQp {
                return Err(Error::invalid("max_output needs a QP head"));
            }
            let sign: Vec<f64> = fwd.qp_out.iter().map(|z| z.signum()).collect();
            let total: f64 = fwd.qp_out.iter().map(|z| z.abs()).sum();
            let g = net.backward(fwd, Upstream::QpOut(sign))?.input;
            Ok((total, g.into_iter().map(|x| -x).collect()))
        }
    }
}

/// Plain gradient descent on the method's objective, projected after every
/// step, stopping at the first input the deployed model fails on.
///
/// Target methods build their target once from the matrix at `u0`; all
/// gradients are taken through the raw (pre-defense) matrix.
pub fn run_attack(net: &Network, u0: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let fwd0 = net.forward(u0)?;
    if detect_failure(&fwd0) {
        return Err(Error::invalid("attack start already fails to evaluate"));
    }
    let target = match cfg.method {
        AttackMethod::AllZeroRowCol => Some(make_target_zero_rowcol(&fwd0.a)),
        AttackMethod::ZeroSingularValue => Some(make_target_zero_sv(&fwd0.a)?),
        AttackMethod::TargetZeroMatrix => Some(Matrix::zeros(fwd0.a.rows(), fwd0.a.cols())),
        _ => None,
    };
    debug_assert_eq!(target.is_some(), cfg.method.target_based());

    let mut u = u0.to_vec();
    let mut fwd = fwd0;
    let (k0, singular0) = deployed_kappa(net, &fwd);
    let mut kappa_trajectory = vec![(0, k0)];
    let mut loss_trajectory = Vec::new();
    let mut success = singular0;
    let mut epochs_used = 0;

    while !success && epochs_used < cfg.max_epochs {
        let (loss, grad) = match step_direction(net, &fwd, cfg.method, target.as_ref()) {
            Ok(v) => v,
            // The raw matrix left the region where the objective is
            // differentiable (e.g. singular before the defense); stop.
            Err(Error::SingularInput { .. } | Error::NonFiniteForward) => break,
            Err(e) => return Err(e),
        };
        loss_trajectory.push(loss);
        if grad.iter().any(|g| !g.is_finite()) {
            break;
        }
        let mut next: Vec<f64> = u
            .iter()
            .zip(&grad)
            .map(|(x, g)| x - cfg.learning_rate * g)
            .collect();
        project(&mut next, u0, cfg);
        if next.iter().any(|x| !x.is_finite()) {
            break;
        }
        u = next;
        epochs_used += 1;
        fwd = net.forward(&u)?;
        let (k, singular) = deployed_kappa(net, &fwd);
        kappa_trajectory.push((epochs_used, k));
        success = singular || detect_failure(&fwd);
    }

    Ok(AttackResult {
        method: cfg.method,
        success,
        distortion_l2: distortion_l2(u0, &u),
        final_output_nonfinite: detect_failure(&fwd),
        u_star: u,
        epochs_used,
        kappa_trajectory,
        loss_trajectory,
        learning_rate: cfg.learning_rate,
    })
}

/// Learning rates tried, in order, when the rate is left to the harness.
pub const AUTO_LR_GRID: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Runs the grid and returns the first successful run, or the last one.
pub fn run_attack_auto_lr(net: &Network, u0: &[f64], cfg: &AttackConfig) -> Result<AttackResult> {
    let mut last = None;
    for lr in AUTO_LR_GRID {
        let res = run_attack(
            net,
            u0,
            &AttackConfig {
                learning_rate: lr,
                ..cfg.clone()
            },
        )?;
        if res.success {
            return Ok(res);
        }
        last = Some(res);
    }
    Ok(last.expect("grid is not empty"))
}
