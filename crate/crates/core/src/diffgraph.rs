//! Reverse-mode differentiation for the fixed network shape used here:
//!
//! ```text
//! u → [dense → act]* → dense → θ → reshape (A, b) → [clamp] → QP → softmax
//! ```
//!
//! Each forward pass records a [`Tape`] of the primitive steps with their
//! cached values; [`Network::backward`] walks it in reverse.

use serde::{Deserialize, Serialize};

use crate::defense::{self, DefenseConfig, DefenseReport};
use crate::densela::{Matrix, SvdFactors, Tolerances};
use crate::error::{Error, Result};
use crate::qplayer::{self, QpProblem, QpSolution};
use crate::rng::SeedStream;

/// Broadening of `1/(σᵢ² − σⱼ²)` in the SVD backward pass.
pub const EPS_BROAD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Celu,
    Tanh,
}

impl Activation {
    /// Values and derivatives. CeLU uses α = 1.
    pub fn apply(self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        x.iter().map(|&v| self.scalar(v)).unzip()
    }

    fn scalar(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Celu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    let e = x.exp();
                    (e - 1.0, e)
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                (t, 1.0 - t * t)
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "celu" => Ok(Activation::Celu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// θ = (A, b); the QP `min ½ q_scale ‖z‖² s.t. Az = b` follows.
    EqQp,
    /// θ = A only.
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Rows of the constraint matrix.
    pub m: usize,
    /// Columns of the constraint matrix (QP variables).
    pub n: usize,
    pub head: HeadKind,
    /// The QP uses `Q = q_scale · I`, `q = 0`.
    pub q_scale: f64,
}

impl Arch {
    pub fn synthetic(input_dim: usize, hidden: usize, m: usize, n: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![hidden, hidden],
            activation: Activation::Relu,
            m,
            n,
            head: HeadKind::EqQp,
            q_scale: 0.1,
        }
    }

    pub fn matrix_shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadKind::EqQp => self.m * self.n + self.m,
            HeadKind::Matrix => self.m * self.n,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim());
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.m == 0 || self.n == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("architecture dimensions must be positive"));
        }
        if self.head == HeadKind::EqQp && !(self.q_scale > 0.0) {
            return Err(Error::invalid("q_scale must be positive"));
        }
        if self.head == HeadKind::EqQp && self.m > self.n {
            return Err(Error::invalid(format!(
                "{} equality constraints on {} variables",
                self.m, self.n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out × in.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub arch: Arch,
    pub seed: u64,
    pub layers: Vec<DenseLayer>,
    pub defense: DefenseConfig,
    pub tolerances: Tolerances,
}

/// One recorded primitive with the values it produced.
#[derive(Debug, Clone)]
pub enum Op {
    Dense {
        layer: usize,
        input: Vec<f64>,
        output: Vec<f64>,
    },
    Activate {
        kind: Activation,
        derivative: Vec<f64>,
        output: Vec<f64>,
    },
    Reshape {
        m: usize,
        n: usize,
    },
    Clamp {
        bound_b: f64,
        factors: Box<SvdFactors>,
        output: Matrix,
    },
    Qp {
        problem: Box<QpProblem>,
        solution: QpSolution,
    },
    Softmax {
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    pub ops: Vec<Op>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub input: Vec<f64>,
    pub theta: Vec<f64>,
    /// Matrix emitted by the network, before any defense.
    pub a: Matrix,
    pub b: Vec<f64>,
    /// Matrix handed to the QP (after the defense, if enabled).
    pub a_used: Matrix,
    pub defense: Option<DefenseReport>,
    pub qp: Option<QpSolution>,
    pub qp_out: Vec<f64>,
    pub probs: Vec<f64>,
    /// Set when any stage produced a non-finite value or the QP failed.
    pub nonfinite: bool,
    pub tape: Tape,
}

/// Where backpropagation starts.
#[derive(Debug, Clone)]
pub enum Upstream {
    /// `∂ℓ/∂probs`.
    Probs(Vec<f64>),
    /// `∂ℓ/∂z` for the QP output (e.g. softmax cross-entropy folded in).
    QpOut(Vec<f64>),
    /// `∂ℓ/∂θ` for the raw network output.
    Theta(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// `(∂ℓ/∂W, ∂ℓ/∂bias)` per dense layer.
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy `−log p_label` and its gradient with respect to the QP
/// output (the softmax logits): `p − onehot(label)`.
pub fn cross_entropy(probs: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    (loss, g)
}

impl Network {
    /// Weights and biases drawn from `uniform(−1/√fan_in, 1/√fan_in)`.
    pub fn init(arch: Arch, seed: u64, defense: DefenseConfig) -> Result<Self> {
        arch.validate()?;
        defense.validate()?;
        let seeds = SeedStream::new(seed);
        let widths = arch.widths();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut r = seeds.stream(1000 + l as u64);
                let weight = Matrix::from_fn(fan_out, fan_in, |_, _| r.uniform(-bound, bound));
                let bias = (0..fan_out).map(|_| r.uniform(-bound, bound)).collect();
                DenseLayer { weight, bias }
            })
            .collect();
        Ok(Self {
            arch,
            seed,
            layers,
            defense,
            tolerances: Tolerances::default(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count(), "parameter vector length");
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
    }

    /// Network output θ only.
    pub fn theta(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_input(u)?;
        let mut h = u.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = dense(layer, &h);
            if l < last {
                h = self.arch.activation.apply(&h).0;
            }
        }
        Ok(h)
    }

    fn check_input(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.arch.input_dim {
            return Err(Error::invalid(format!(
                "input has {} features, network expects {}",
                u.len(),
                self.arch.input_dim
            )));
        }
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("input has non-finite entries"));
        }
        Ok(())
    }

    pub fn forward(&self, u: &[f64]) -> Result<Forward> {
        self.check_input(u)?;
        let mut tape = Tape::default();
        let mut h = u.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let out = dense(layer, &h);
            tape.ops.push(Op::Dense {
                layer: l,
                input: std::mem::take(&mut h),
                output: out.clone(),
            });
            h = out;
            if l < last {
                let kind = self.arch.activation;
                let (v, d) = kind.apply(&h);
                tape.ops.push(Op::Activate {
                    kind,
                    derivative: d,
                    output: v.clone(),
                });
                h = v;
            }
        }
        let theta = h;
        let (m, n) = self.arch.matrix_shape();
        tape.ops.push(Op::Reshape { m, n });
        let a = Matrix::from_raw(m, n, theta[..m * n].to_vec())?;
        let b = match self.arch.head {
            HeadKind::EqQp => theta[m * n..].to_vec(),
            HeadKind::Matrix => Vec::new(),
        };
        let mut fwd = Forward {
            input: u.to_vec(),
            theta,
            a: a.clone(),
            b,
            a_used: a,
            defense: None,
            qp: None,
            qp_out: Vec::new(),
            probs: Vec::new(),
            nonfinite: false,
            tape,
        };
        if !fwd.a.is_finite() || fwd.b.iter().any(|x| !x.is_finite()) {
            fwd.nonfinite = true;
            if self.arch.head == HeadKind::EqQp {
                fwd.qp_out = vec![f64::NAN; n];
                fwd.probs = vec![f64::NAN; n];
            }
            return Ok(fwd);
        }

        if self.defense.enabled {
            match defense::clamp_condition_factored(&fwd.a, &self.defense) {
                Ok(c) => {
                    fwd.defense = Some(c.report);
                    if let Some(factors) = c.factors {
                        fwd.tape.ops.push(Op::Clamp {
                            bound_b: self.defense.bound_b,
                            factors: Box::new(factors),
                            output: c.a_prime.clone(),
                        });
                        fwd.a_used = c.a_prime;
                    }
                }
                // A zero matrix has nothing to clamp; the QP flags it below.
                Err(Error::ZeroMatrix) => {}
                Err(e) => return Err(e),
            }
        }
        if self.arch.head == HeadKind::Matrix {
            return Ok(fwd);
        }

        let problem = QpProblem {
            q_mat: Matrix::identity(n).scale(self.arch.q_scale),
            q_vec: vec![0.0; n],
            a: fwd.a_used.clone(),
            b: fwd.b.clone(),
        };
        let solution = qplayer::solve_eq_qp_with(&problem, &self.tolerances);
        fwd.qp_out = solution.z.clone();
        fwd.probs = softmax(&fwd.qp_out);
        fwd.nonfinite = !solution.is_solved() || fwd.probs.iter().any(|p| !p.is_finite());
        fwd.qp = Some(solution.clone());
        fwd.tape.ops.push(Op::Qp {
            problem: Box::new(problem),
            solution,
        });
        fwd.tape.ops.push(Op::Softmax {
            probs: fwd.probs.clone(),
        });
        Ok(fwd)
    }

    /// Reverse pass from `upstream`. Fresh gradient buffers are returned on
    /// every call.
    pub fn backward(&self, fwd: &Forward, upstream: Upstream) -> Result<Gradients> {
        let ops = &fwd.tape.ops;
        let (m, n) = self.arch.matrix_shape();

        // Position (exclusive) in the tape where the reverse walk over the
        // dense stack begins, plus the θ gradient feeding it.
        let reshape_at = ops
            .iter()
            .position(|o| matches!(o, Op::Reshape { .. }))
            .expect("tape always has a reshape");

        let grad_theta = match upstream {
            Upstream::Theta(g) => {
                if g.len() != self.arch.output_dim() {
                    return Err(Error::invalid("theta gradient length"));
                }
                if fwd.theta.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteForward);
                }
                g
            }
            Upstream::Probs(_) | Upstream::QpOut(_) => {
                if self.arch.head != HeadKind::EqQp {
                    return Err(Error::invalid("network has no QP layer"));
                }
                if fwd.nonfinite {
                    return Err(Error::NonFiniteForward);
                }
                let grad_z = match upstream {
                    Upstream::Probs(g) => {
                        if g.len() != n {
                            return Err(Error::invalid("probs gradient length"));
                        }
                        let p = &fwd.probs;
                        let pg: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
                        p.iter().zip(&g).map(|(pi, gi)| pi * (gi - pg)).collect()
                    }
                    Upstream::QpOut(g) => {
                        if g.len() != n {
                            return Err(Error::invalid("QP output gradient length"));
                        }
                        g
                    }
                    Upstream::Theta(_) => unreachable!(),
                };
                let (problem, solution) = ops
                    .iter()
                    .find_map(|o| match o {
                        Op::Qp { problem, solution } => Some((problem, solution)),
                        _ => None,
                    })
                    .ok_or(Error::NonFiniteForward)?;
                let g = qplayer::backward_eq_qp_with(problem, solution, &grad_z, &self.tolerances)?;
                let mut grad_a = g.a;
                if let Some(Op::Clamp {
                    bound_b, factors, ..
                }) = ops.iter().find(|o| matches!(o, Op::Clamp { .. }))
                {
                    grad_a = svd_backward(factors, *bound_b, &grad_a);
                }
                let mut gt = grad_a.into_vec();
                gt.extend_from_slice(&g.b);
                debug_assert_eq!(gt.len(), m * n + m);
                gt
            }
        };

        let mut grads: Vec<(Matrix, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (Matrix::zeros(l.weight.rows(), l.weight.cols()), Vec::new()))
            .collect();
        let mut g = grad_theta;
        for op in ops[..reshape_at].iter().rev() {
            match op {
                Op::Activate { derivative, .. } => {
                    g.iter_mut().zip(derivative).for_each(|(gi, d)| *gi *= d);
                }
                Op::Dense { layer, input, .. } => {
                    let w = &self.layers[*layer].weight;
                    grads[*layer] = (Matrix::outer(&g, input), g.clone());
                    g = w.matvec_t(&g);
                }
                _ => unreachable!("only dense/activation ops precede the reshape"),
            }
        }
        Ok(Gradients {
            layers: grads,
            input: g,
        })
    }

    /// Gradient with respect to the input of `⟨G, A⟩` where `A` is the raw
    /// (pre-defense) matrix the network emits.
    pub fn input_grad_from_matrix(&self, fwd: &Forward, grad_a: &Matrix) -> Result<Vec<f64>> {
        crate::condgrad::chain_matrix_grad(self, fwd, grad_a)
    }

    /// Re-runs the forward pass and checks every cached value is reproduced
    /// bit for bit.
    pub fn replay_matches(&self, fwd: &Forward) -> bool {
        let Ok(again) = self.forward(&fwd.input) else {
            return false;
        };
        let same = |x: &[f64], y: &[f64]| {
            x.len() == y.len() && x.iter().zip(y).all(|(a, b)| a.to_bits() == b.to_bits())
        };
        same(&again.theta, &fwd.theta)
            && same(again.a_used.as_slice(), fwd.a_used.as_slice())
            && same(&again.qp_out, &fwd.qp_out)
            && same(&again.probs, &fwd.probs)
            && again.tape.ops.len() == fwd.tape.ops.len()
    }
}

fn dense(layer: &DenseLayer, x: &[f64]) -> Vec<f64> {
    let mut y = layer.weight.matvec(x);
    y.iter_mut().zip(&layer.bias).for_each(|(a, b)| *a += b);
    y
}

/// Gradient of a thin SVD's factors back to the matrix.
///
/// `gu` (m×r), `gsigma` (r), `gv` (n×r, gradient with respect to V, not Vᵀ).
/// The `1/(σⱼ² − σᵢ²)` coupling and `1/σ` terms are broadened by
/// `eps_broad` so near-degenerate spectra stay finite.
pub fn svd_factor_backward(
    f: &SvdFactors,
    gu: &Matrix,
    gsigma: &[f64],
    gv: &Matrix,
    eps_broad: f64,
) -> Matrix {
    let u = &f.u;
    let v = f.vt.transpose();
    let s = &f.sigma;
    let r = s.len();
    let (m, n) = (u.rows(), v.rows());

    let coupling = |i: usize, j: usize| -> f64 {
        if i == j {
            return 0.0;
        }
        let d = s[j] * s[j] - s[i] * s[i];
        if d == 0.0 {
            0.0
        } else {
            d.signum() / d.abs().max(eps_broad)
        }
    };
    let inv_s: Vec<f64> = s.iter().map(|&x| 1.0 / x.max(eps_broad)).collect();

    let utgu = u.transpose().matmul(gu);
    let vtgv = v.transpose().matmul(gv);
    let mut inner = Matrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            let fij = coupling(i, j);
            let jterm = fij * (utgu[(i, j)] - utgu[(j, i)]) * s[j];
            let kterm = s[i] * fij * (vtgv[(i, j)] - vtgv[(j, i)]);
            inner[(i, j)] = jterm + kterm;
        }
        inner[(i, i)] += gsigma[i];
    }
    let mut ga = u.matmul(&inner).matmul(&f.vt);

    if m > r {
        let proj = Matrix::identity(m).sub(&u.matmul(&u.transpose()));
        let mut gus = gu.clone();
        for i in 0..m {
            for j in 0..r {
                gus[(i, j)] *= inv_s[j];
            }
        }
        ga.add_assign_scaled(1.0, &proj.matmul(&gus).matmul(&f.vt));
    }
    if n > r {
        let proj = Matrix::identity(n).sub(&v.matmul(&f.vt));
        let mut us = u.clone();
        for i in 0..m {
            for j in 0..r {
                us[(i, j)] *= inv_s[j];
            }
        }
        ga.add_assign_scaled(1.0, &us.matmul(&gv.transpose()).matmul(&proj));
    }
    ga
}

/// Backward pass of the condition clamp `A′ = U max(Σ, σ_max/B) Vᵀ`.
///
/// `factors` is the SVD of the pre-clamp `A`. Callers only reach this when
/// the clamp was active; otherwise the layer is the identity and the
/// upstream gradient passes through unchanged.
pub fn svd_backward(factors: &SvdFactors, bound_b: f64, grad_out: &Matrix) -> Matrix {
    let s = &factors.sigma;
    let r = s.len();
    let floor = s[0] / bound_b;
    let clamped: Vec<f64> = s.iter().map(|&x| x.max(floor)).collect();
    let v = factors.vt.transpose();

    let g_v = grad_out.matmul(&v); // G V, m×r
    let gt_u = grad_out.transpose().matmul(&factors.u); // Gᵀ U, n×r
    let mut gu = g_v.clone();
    let mut gv = gt_u.clone();
    for j in 0..r {
        for i in 0..gu.rows() {
            gu[(i, j)] *= clamped[j];
        }
        for i in 0..gv.rows() {
            gv[(i, j)] *= clamped[j];
        }
    }
    let mut gsigma = vec![0.0; r];
    for k in 0..r {
        // ∂ℓ/∂σ′_k = u_kᵀ G v_k
        let gk: f64 = (0..factors.u.rows())
            .map(|i| factors.u[(i, k)] * g_v[(i, k)])
            .sum();
        if s[k] < floor {
            gsigma[0] += gk / bound_b;
        } else {
            gsigma[k] += gk;
        }
    }
    svd_factor_backward(factors, &gu, &gsigma, &gv, EPS_BROAD)
}

/// Adam on a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// JSON checkpoint: `{arch, seed, weights, defense: {enabled, bound}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: Arch,
    pub seed: u64,
    pub weights: Vec<LayerWeights>,
    pub defense: DefenseConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl From<&Network> for Checkpoint {
    fn from(net: &Network) -> Self {
        Checkpoint {
            arch: net.arch.clone(),
            seed: net.seed,
            weights: net
                .layers
                .iter()
                .map(|l| LayerWeights {
                    w: (0..l.weight.rows())
                        .map(|i| l.weight.row(i).to_vec())
                        .collect(),
                    b: l.bias.clone(),
                })
                .collect(),
            defense: net.defense,
        }
    }
}

impl TryFrom<Checkpoint> for Network {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        let mut net = Network::init(c.arch, c.seed, c.defense)?;
        if c.weights.len() != net.layers.len() {
            return Err(Error::invalid("checkpoint layer count does not match arch"));
        }
        for (layer, lw) in net.layers.iter_mut().zip(c.weights) {
            let rows: Vec<&[f64]> = lw.w.iter().map(|r| r.as_slice()).collect();
            let w = Matrix::from_rows(&rows)?;
            if w.shape() != layer.weight.shape() || lw.b.len() != layer.bias.len() {
                return Err(Error::invalid("checkpoint layer shape does not match arch"));
            }
            layer.weight = w;
            layer.bias = lw.b;
        }
        Ok(net)
    }
}
