//! Driving a system of inequalities `A x ≤ b` to infeasibility.
//!
//! `A x ≤ b` has no solution iff some `y ≥ 0` has `Aᵀy = 0`, `bᵀy < 0`.
//! Writing `K = [Aᵀ; bᵀ]` and `q = [0; −1]`, that is `K y = q` with `y ≥ 0`.
//! The attack first makes `K y = q` solvable (the prerequisite loss), then
//! pulls its solution set onto the non-negative orthant (the distance loss).

use serde::{Deserialize, Serialize};

use crate::attack::{distortion_l2, AttackMethod, AttackResult};
use crate::condgrad;
use crate::densela::{self, dot, norm2, Matrix, Tolerances};
use crate::diffgraph::{HeadKind, Network};
use crate::error::{Error, Result};
use crate::qplayer::{self, BoxQpOptions};

pub const RESIDUAL_TOL: f64 = 1e-6;
pub const NEGATIVITY_MARGIN: f64 = 1e-8;
pub const NONNEG_TOL: f64 = -1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarkasParams {
    /// Weight of the prerequisite loss; `1 − gamma` goes to the distance loss.
    pub gamma: f64,
    /// Margin `y ≥ ν` used inside the distance program.
    pub nu_margin: f64,
    /// Regularization on the `v` block of the distance program.
    pub eta_reg: f64,
}

impl Default for FarkasParams {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            nu_margin: 1e-3,
            eta_reg: 1e-6,
        }
    }
}

impl FarkasParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid("gamma must lie in (0, 1)"));
        }
        if !(self.nu_margin > 0.0) {
            return Err(Error::invalid("nu must be positive"));
        }
        if !(self.eta_reg >= 0.0) {
            return Err(Error::invalid("eta must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FarkasInstance {
    pub a_ineq: Matrix,
    pub b_ineq: Vec<f64>,
    pub k_mat: Matrix,
    pub q_rhs: Vec<f64>,
    pub nu_margin: f64,
    pub gamma: f64,
    pub eta_reg: f64,
}

impl FarkasInstance {
    pub fn new(a_ineq: Matrix, b_ineq: Vec<f64>, params: FarkasParams) -> Result<Self> {
        params.validate()?;
        let (m, n) = a_ineq.shape();
        if b_ineq.len() != m {
            return Err(Error::invalid("b must have one entry per inequality"));
        }
        if !a_ineq.is_finite() || b_ineq.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("inequality data must be finite"));
        }
        let k_mat = Matrix::from_fn(
            n + 1,
            m,
            |i, j| {
                if i < n {
                    a_ineq[(j, i)]
                } else {
                    b_ineq[j]
                }
            },
        );
        let mut q_rhs = vec![0.0; n + 1];
        q_rhs[n] = -1.0;
        Ok(Self {
            a_ineq,
            b_ineq,
            k_mat,
            q_rhs,
            nu_margin: params.nu_margin,
            gamma: params.gamma,
            eta_reg: params.eta_reg,
        })
    }

    /// Number of inequalities.
    pub fn m(&self) -> usize {
        self.a_ineq.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarkasCertificate {
    pub residual_eq: f64,
    pub value_bty: f64,
    pub min_y: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifiedSystem {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub y: Vec<f64>,
    pub certificate: FarkasCertificate,
}

/// Checks the three certificate conditions for `y`.
pub fn verify_infeasible(a_ineq: &Matrix, b_ineq: &[f64], y: &[f64]) -> Result<FarkasCertificate> {
    if y.len() != a_ineq.rows() || b_ineq.len() != a_ineq.rows() {
        return Err(Error::invalid("certificate dimensions"));
    }
    let residual_eq = norm2(&a_ineq.matvec_t(y));
    let value_bty = dot(b_ineq, y);
    let min_y = y.iter().copied().fold(f64::INFINITY, f64::min);
    let valid =
        residual_eq <= RESIDUAL_TOL && value_bty < -NEGATIVITY_MARGIN && min_y >= NONNEG_TOL;
    Ok(FarkasCertificate {
        residual_eq,
        value_bty,
        min_y,
        valid,
    })
}

/// `‖K K⁺ q − q‖₂`, zero iff `K y = q` is solvable.
pub fn prereq_loss(inst: &FarkasInstance) -> f64 {
    let kp = densela::pseudoinverse(&inst.k_mat);
    norm2(&prereq_residual(&inst.k_mat, &kp, &inst.q_rhs))
}

fn prereq_residual(k: &Matrix, kp: &Matrix, q: &[f64]) -> Vec<f64> {
    let kkq = k.matvec(&kp.matvec(q));
    kkq.iter().zip(q).map(|(a, b)| a - b).collect()
}

/// `B = [I, K⁺K − I]`.
pub fn optdist_b(k: &Matrix) -> Matrix {
    let kp = densela::pseudoinverse(k);
    b_from_pinv(k, &kp)
}

fn b_from_pinv(k: &Matrix, kp: &Matrix) -> Matrix {
    let m = k.cols();
    let p = kp.matmul(k);
    Matrix::from_fn(m, 2 * m, |i, j| {
        if j < m {
            if i == j {
                1.0
            } else {
                0.0
            }
        } else {
            let jj = j - m;
            p[(i, jj)] - if i == jj { 1.0 } else { 0.0 }
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptdistResult {
    /// `‖B z*‖²`, without the regularization term.
    pub value: f64,
    /// `[y − K⁺q; v]` at the minimizer.
    pub z_star: Vec<f64>,
    /// `y` recovered from `z_star`.
    pub y: Vec<f64>,
    /// False when the solver hit its budget; `z_star` is then its best iterate.
    pub converged: bool,
}

/// Squared distance between the solution set of `K y = q` (shifted by its
/// least-squares point) and the orthant `y ≥ ν`.
pub fn optdist(inst: &FarkasInstance) -> Result<OptdistResult> {
    optdist_with(inst, None, BoxQpOptions::default())
}

pub fn optdist_with(
    inst: &FarkasInstance,
    warm_start: Option<&[f64]>,
    opts: BoxQpOptions,
) -> Result<OptdistResult> {
    let kp = densela::pseudoinverse(&inst.k_mat);
    optdist_inner(inst, &kp, warm_start, opts, true)
}

fn optdist_inner(
    inst: &FarkasInstance,
    kp: &Matrix,
    warm_start: Option<&[f64]>,
    opts: BoxQpOptions,
    strict: bool,
) -> Result<OptdistResult> {
    let m = inst.m();
    let b = b_from_pinv(&inst.k_mat, kp);
    let kpq = kp.matvec(&inst.q_rhs);
    let mut h = b.transpose().matmul(&b);
    for i in m..2 * m {
        h[(i, i)] += inst.eta_reg;
    }
    let h = h.scale(2.0);
    let c = vec![0.0; 2 * m];
    let mut lower = vec![f64::NEG_INFINITY; 2 * m];
    for i in 0..m {
        lower[i] = -kpq[i] + inst.nu_margin;
    }
    let (z, converged) =
        match qplayer::solve_lower_bounded_qp_with(&h, &c, &lower, warm_start, opts) {
            Ok(z) => (z, true),
            Err(Error::NotConverged { best, .. }) if !strict => (best, false),
            Err(e) => return Err(e),
        };
    let bz = b.matvec(&z);
    let y = (0..m).map(|i| z[i] + kpq[i]).collect();
    Ok(OptdistResult {
        value: dot(&bz, &bz),
        z_star: z,
        y,
        converged,
    })
}

/// Loss values with their gradients with respect to `K`.
struct LossEval {
    /// `s = K K⁺ q − q`.
    resid: Vec<f64>,
    prereq: f64,
    dist: OptdistResult,
    /// `∂L_dist/∂K`.
    grad_k_dist: Matrix,
    /// `∂s_i/∂K`, one per component.
    grad_k_resid: Vec<Matrix>,
}

impl LossEval {
    fn combined(&self, gamma: f64) -> f64 {
        gamma * self.prereq + (1.0 - gamma) * self.dist.value
    }
}

/// Below this prerequisite loss the iterate is treated as sitting on the
/// non-differentiable set `s = 0` of `‖s‖`, up to a restoration step.
const KINK_TOL: f64 = 1e-4;

/// The line search compares loss values that differ by `rate·‖g‖²`, so the
/// inner solve has to be much tighter than the default.
const EVAL_QP: BoxQpOptions = BoxQpOptions {
    tol: 1e-12,
    max_iter: 100_000,
};

fn evaluate(inst: &FarkasInstance, warm: Option<&[f64]>) -> Result<LossEval> {
    let k = &inst.k_mat;
    let m = k.cols();
    let kp = densela::pseudoinverse(k);
    let q = &inst.q_rhs;
    let resid = prereq_residual(k, &kp, q);
    let prereq = norm2(&resid);

    // Distance: value-function gradient with (y, v) held at the minimizer.
    // f = ‖r‖², r = y − K⁺q − (I − K⁺K) v, so
    // df = ⟨dK⁺, 2 r (K v − q)ᵀ⟩ + ⟨dK, 2 (K⁺)ᵀ r vᵀ⟩.
    let dist = optdist_inner(inst, &kp, warm, EVAL_QP, false)?;
    let b = b_from_pinv(k, &kp);
    let r = b.matvec(&dist.z_star);
    let v = &dist.z_star[m..];
    let kv_q: Vec<f64> = k.matvec(v).iter().zip(q).map(|(a, b)| a - b).collect();
    let mut grad_k_dist = Matrix::outer(&kp.matvec_t(&r), v).scale(2.0);
    add_through_pinv(&mut grad_k_dist, k, &Matrix::outer(&r, &kv_q).scale(2.0))?;

    // ds = dK K⁺q + K dK⁺ q, so ∂sᵢ/∂K = eᵢ(K⁺q)ᵀ + adj(Kᵀeᵢ qᵀ).
    let kpq = kp.matvec(q);
    let mut grad_k_resid = Vec::with_capacity(k.rows());
    for i in 0..k.rows() {
        let mut ei = vec![0.0; k.rows()];
        ei[i] = 1.0;
        let mut g = Matrix::outer(&ei, &kpq);
        add_through_pinv(&mut g, k, &Matrix::outer(k.row(i), q))?;
        grad_k_resid.push(g);
    }
    Ok(LossEval {
        resid,
        prereq,
        dist,
        grad_k_dist,
        grad_k_resid,
    })
}

/// Adds the `A`-gradient of a scalar whose `K⁺`-gradient is `g`.
fn add_through_pinv(acc: &mut Matrix, k: &Matrix, g: &Matrix) -> Result<()> {
    match condgrad::pinv_adjoint(k, g) {
        Ok(d) => acc.add_assign_scaled(1.0, &d),
        // K is rank-deficient: K⁺ is not differentiable here, keep the rest.
        Err(Error::SingularInput { .. }) => {}
        Err(e) => return Err(e),
    }
    Ok(())
}

/// `K = [Aᵀ; bᵀ]` with `b` fixed, so `∂/∂A` is the transpose of the top block.
fn k_grad_to_a(grad_k: &Matrix) -> Matrix {
    let n = grad_k.rows() - 1;
    Matrix::from_fn(grad_k.cols(), n, |i, j| grad_k[(j, i)])
}

const RESTORE_STEPS: usize = 3;
const RESTORE_TOL: f64 = 1e-12;

/// One Gauss-Newton step `u − J⁺ s` toward `s = 0`.
fn restore(net: &Network, u: &[f64], eval: &LossEval) -> Result<Vec<f64>> {
    let fwd = net.forward(u)?;
    let rows = eval
        .grad_k_resid
        .iter()
        .map(|g| net.input_grad_from_matrix(&fwd, &k_grad_to_a(g)))
        .collect::<Result<Vec<_>>>()?;
    let jac = Matrix::from_fn(rows.len(), u.len(), |i, j| rows[i][j]);
    let du = densela::pseudoinverse(&jac).matvec(&eval.resid);
    Ok(u.iter().zip(&du).map(|(x, d)| x - d).collect())
}

/// Minimum-norm element of `{M w + g : ‖w‖ ≤ 1}`, where the columns of `M`
/// are `jac` (each scaled by `scale`).
fn min_norm_subgradient(jac: &[Vec<f64>], scale: f64, g: &[f64]) -> Result<Vec<f64>> {
    let m = Matrix::from_fn(g.len(), jac.len(), |i, j| scale * jac[j][i]);
    let f = densela::svd(&m)?;
    let cutoff = f.sigma_max() * 1e-12;
    let c = f.u.matvec_t(g);
    // With M = UΣVᵀ, w(λ) = −V Σ(Σ² + λ)⁻¹ Uᵀg, whose norm falls as λ grows.
    let coef = |lam: f64| -> Vec<f64> {
        f.sigma
            .iter()
            .zip(&c)
            .map(|(&s, &ci)| {
                if s > cutoff {
                    s * ci / (s * s + lam)
                } else {
                    0.0
                }
            })
            .collect()
    };
    let mut lam = 0.0;
    if norm2(&coef(0.0)) > 1.0 {
        let (mut lo, mut hi) = (
            0.0,
            norm2(
                &f.sigma
                    .iter()
                    .zip(&c)
                    .map(|(s, ci)| s * ci)
                    .collect::<Vec<_>>(),
            ),
        );
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if norm2(&coef(mid)) > 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lam = hi;
    }
    // Mw + g = g − U diag(σ²/(σ² + λ)) Uᵀg.
    let shrink: Vec<f64> = coef(lam).iter().zip(&f.sigma).map(|(k, s)| k * s).collect();
    let mut out = g.to_vec();
    for (j, sj) in shrink.iter().enumerate() {
        for (i, o) in out.iter_mut().enumerate() {
            *o -= f.u[(i, j)] * sj;
        }
    }
    Ok(out)
}

/// Candidate certificates for the current system: the distance program's `y`
/// and the least-squares solution of `K y = q`.
fn certify(inst: &FarkasInstance, dist_y: &[f64]) -> Result<Option<CertifiedSystem>> {
    let kpq = densela::pseudoinverse(&inst.k_mat).matvec(&inst.q_rhs);
    for y in [dist_y.to_vec(), kpq] {
        let cert = verify_infeasible(&inst.a_ineq, &inst.b_ineq, &y)?;
        if cert.valid {
            return Ok(Some(CertifiedSystem {
                a: inst.a_ineq.clone(),
                b: inst.b_ineq.clone(),
                y,
                certificate: cert,
            }));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FarkasAttackResult {
    pub attack: AttackResult,
    pub certified: Option<CertifiedSystem>,
    /// `(prerequisite, distance)` loss pairs, one per evaluated input.
    pub losses: Vec<(f64, f64)>,
    pub final_learning_rate: f64,
}

/// Gradient descent on `γ L_prereq + (1 − γ) L_dist` over the input of a
/// network whose head emits the inequality matrix, with `b` fixed.
///
/// `L_prereq = ‖s‖` is not differentiable where `s = 0`. Close to that set
/// the iterate is first pulled onto it with Gauss-Newton steps on `s`, and the
/// descent step then follows the minimum-norm subgradient, which slides along
/// the solvable set instead of bouncing across it. A step that raises the
/// combined loss is rejected and the rate halved; accepted steps let it grow
/// back toward `lr`.
/// Success requires a certificate that passes [`verify_infeasible`].
pub fn run_farkas_attack(
    net: &Network,
    u0: &[f64],
    b_ineq: &[f64],
    params: FarkasParams,
    lr: f64,
    epochs: usize,
) -> Result<FarkasAttackResult> {
    params.validate()?;
    if net.arch.head != HeadKind::Matrix {
        return Err(Error::invalid("farkas attack needs a matrix head"));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::invalid("learning rate must be non-negative"));
    }
    if net.arch.m > 8 || net.arch.n > 8 {
        return Err(Error::invalid("farkas attack is limited to 8×8 systems"));
    }
    let gamma = params.gamma;
    let instance_at = |u: &[f64]| -> Result<FarkasInstance> {
        let fwd = net.forward(u)?;
        FarkasInstance::new(fwd.a_used.clone(), b_ineq.to_vec(), params)
    };
    let tol = Tolerances::default();
    let kappa_of = |inst: &FarkasInstance| {
        densela::condition_number_with(&inst.a_ineq, densela::CondNorm::Two, &tol)
            .map(|v| v.kappa)
            .unwrap_or(f64::INFINITY)
    };

    let mut u = u0.to_vec();
    let mut inst = instance_at(&u)?;
    let mut eval = evaluate(&inst, None)?;
    let mut kappa_trajectory = vec![(0, kappa_of(&inst))];
    let mut loss_trajectory = vec![eval.combined(gamma)];
    let mut losses = vec![(eval.prereq, eval.dist.value)];
    let mut certified = certify(&inst, &eval.dist.y)?;
    let mut rate = lr;
    let mut epochs_used = 0;
    let mut direction: Option<Vec<f64>> = None;

    while certified.is_none() && epochs_used < epochs && rate > 0.0 {
        epochs_used += 1;
        if direction.is_none() && eval.prereq <= KINK_TOL && eval.prereq > RESTORE_TOL {
            // Subgradient steps run tangent to `s = 0`; pull back onto it.
            let mut moved = false;
            for _ in 0..RESTORE_STEPS {
                let next = restore(net, &u, &eval)?;
                let next_inst = instance_at(&next)?;
                let next_eval = evaluate(&next_inst, Some(&eval.dist.z_star))?;
                if !(next_eval.prereq < eval.prereq) {
                    break;
                }
                (u, inst, eval) = (next, next_inst, next_eval);
                moved = true;
                if eval.prereq <= RESTORE_TOL {
                    break;
                }
            }
            if moved {
                kappa_trajectory.push((epochs_used, kappa_of(&inst)));
                loss_trajectory.push(eval.combined(gamma));
                losses.push((eval.prereq, eval.dist.value));
                certified = certify(&inst, &eval.dist.y)?;
                if certified.is_some() {
                    break;
                }
            }
        }
        let dir = match direction.take() {
            Some(d) => d,
            None => {
                let fwd = net.forward(&u)?;
                let to_u = |gk: &Matrix| net.input_grad_from_matrix(&fwd, &k_grad_to_a(gk));
                let g_dist: Vec<f64> = to_u(&eval.grad_k_dist)?
                    .into_iter()
                    .map(|x| (1.0 - gamma) * x)
                    .collect();
                if eval.prereq > KINK_TOL {
                    let unit: Vec<f64> = eval.resid.iter().map(|x| x / eval.prereq).collect();
                    let kpq = densela::pseudoinverse(&inst.k_mat).matvec(&inst.q_rhs);
                    let g_pre = to_u(&Matrix::outer(&unit, &kpq))?;
                    g_pre
                        .iter()
                        .zip(&g_dist)
                        .map(|(a, b)| gamma * a + b)
                        .collect()
                } else {
                    let jac = eval
                        .grad_k_resid
                        .iter()
                        .map(to_u)
                        .collect::<Result<Vec<_>>>()?;
                    min_norm_subgradient(&jac, gamma, &g_dist)?
                }
            }
        };
        if dir.iter().any(|x| !x.is_finite()) || dir.iter().all(|x| *x == 0.0) {
            break;
        }
        let cand: Vec<f64> = u.iter().zip(&dir).map(|(x, gi)| x - rate * gi).collect();
        let cand_inst = instance_at(&cand)?;
        let cand_eval = evaluate(&cand_inst, Some(&eval.dist.z_star))?;
        if cand_eval.combined(gamma) > eval.combined(gamma) {
            rate *= 0.5;
            if rate < lr * 1e-12 {
                break;
            }
            direction = Some(dir);
            continue;
        }
        rate = (rate * 2.0).min(lr);
        u = cand;
        inst = cand_inst;
        eval = cand_eval;
        kappa_trajectory.push((epochs_used, kappa_of(&inst)));
        loss_trajectory.push(eval.combined(gamma));
        losses.push((eval.prereq, eval.dist.value));
        certified = certify(&inst, &eval.dist.y)?;
    }

    let fwd = net.forward(&u)?;
    Ok(FarkasAttackResult {
        attack: AttackResult {
            method: AttackMethod::FarkasInfeasibility,
            success: certified.is_some(),
            distortion_l2: distortion_l2(u0, &u),
            final_output_nonfinite: !fwd.a_used.is_finite(),
            u_star: u,
            epochs_used,
            kappa_trajectory,
            loss_trajectory,
            learning_rate: lr,
        },
        certified,
        losses,
        final_learning_rate: rate,
    })
}

/// Checks feasibility of a 2-variable system by sampling a grid over
/// `[-r, r]²`. Returns a feasible point if one is found.
pub fn grid_feasible_point(a: &Matrix, b: &[f64], radius: f64, steps: usize) -> Option<[f64; 2]> {
    assert_eq!(a.cols(), 2, "grid check is for two variables");
    for i in 0..=steps {
        for j in 0..=steps {
            let x = [
                -radius + 2.0 * radius * i as f64 / steps as f64,
                -radius + 2.0 * radius * j as f64 / steps as f64,
            ];
            if (0..a.rows()).all(|r| a[(r, 0)] * x[0] + a[(r, 1)] * x[1] <= b[r]) {
                return Some(x);
            }
        }
    }
    None
}
