//! Shared instance generators and finite-difference oracles.
#![allow(dead_code)]

use condguard::condgrad;
use condguard::defense::{self, DefenseConfig};
use condguard::densela::{self, CondNorm, Matrix};
use condguard::diffgraph::{self, Activation, Arch, HeadKind, Network, Upstream};
use condguard::qplayer::{self, QpProblem};
use condguard::rng::{Rng, SeedStream};

pub fn rng(seed: u64, stream: u64) -> Rng {
    SeedStream::new(seed).stream(stream)
}

pub fn gaussian(rng: &mut Rng, m: usize, n: usize) -> Matrix {
    Matrix::new(m, n, rng.normal_vec(m * n)).unwrap()
}

/// `‖g − r‖₂ / ‖r‖₂`, with a floor on the denominator for all-zero references.
pub fn rel_err(g: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(g.len(), reference.len());
    let diff: Vec<f64> = g.iter().zip(reference).map(|(a, b)| a - b).collect();
    densela::norm2(&diff) / densela::norm2(reference).max(1e-12)
}

/// Central differences of a scalar function of a vector.
pub fn fd_vec(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let up = f(&x);
            x[i] = x0 - h;
            let dn = f(&x);
            x[i] = x0;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

pub fn fd_matrix(a: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let g = fd_vec(a.as_slice(), h, |x| {
        f(&Matrix::new(a.rows(), a.cols(), x.to_vec()).unwrap())
    });
    Matrix::new(a.rows(), a.cols(), g).unwrap()
}

/// Relative gaps `(σ₁ − σ₂)/σ₁`, `(σ_{r−1} − σ_r)/σ₁` and `σ_r/σ₁`.
pub fn extreme_gaps(a: &Matrix) -> (f64, f64, f64) {
    let s = densela::singular_values(a).unwrap();
    let r = s.len();
    if r < 2 {
        return (1.0, 1.0, s[0].min(1.0));
    }
    (
        (s[0] - s[1]) / s[0],
        (s[r - 2] - s[r - 1]) / s[0],
        s[r - 1] / s[0],
    )
}

/// A Gaussian matrix of a random shape in the given ranges whose extreme
/// singular values are simple (gap ≥ 1e-3) and whose `σ_min/σ_max ≥ 1e-2`.
pub fn gapped_matrix(seed: u64, rows: (usize, usize), cols: (usize, usize)) -> Matrix {
    let mut r = rng(seed, 0);
    loop {
        let m = rows.0 + r.below(rows.1 - rows.0 + 1);
        let n = cols.0 + r.below(cols.1 - cols.0 + 1);
        let a = gaussian(&mut r, m, n);
        let (g1, g2, c) = extreme_gaps(&a);
        if g1 >= 1e-3 && g2 >= 1e-3 && c >= 1e-2 {
            return a;
        }
    }
}

pub fn kappa_f(a: &Matrix) -> f64 {
    densela::condition_number(a, CondNorm::Frobenius)
        .unwrap()
        .kappa
}

pub fn check_pinv_differential(seed: u64) -> f64 {
    let mut r = rng(seed, 1);
    let m = 2 + r.below(5);
    let n = 2 + r.below(5);
    let a = gaussian(&mut r, m, n);
    let da = gaussian(&mut r, m, n);
    let h = 1e-6;
    let up = densela::pseudoinverse(&a.add(&da.scale(h)));
    let dn = densela::pseudoinverse(&a.sub(&da.scale(h)));
    let fd = up.sub(&dn).scale(0.5 / h);
    let d = condgrad::pinv_differential(&a, &da).unwrap();
    rel_err(d.as_slice(), fd.as_slice())
}

pub fn check_grad_kappa2(seed: u64) -> f64 {
    let a = gapped_matrix(seed, (2, 8), (2, 12));
    let g = condgrad::grad_kappa2(&a).unwrap().grad_wrt_a;
    let fd = fd_matrix(&a, 1e-6, densela::kappa2);
    rel_err(g.as_slice(), fd.as_slice())
}

pub fn check_grad_kappa_f(seed: u64) -> f64 {
    let a = gapped_matrix(seed, (2, 8), (2, 12));
    let g = condgrad::grad_kappa_f(&a).unwrap().grad_wrt_a;
    let fd = fd_matrix(&a, 1e-6, kappa_f);
    rel_err(g.as_slice(), fd.as_slice())
}

pub fn random_qp(seed: u64) -> QpProblem {
    let mut r = rng(seed, 2);
    let n = 2 + r.below(11);
    let m = 1 + r.below((n - 1).min(8));
    let l = gaussian(&mut r, n, n);
    let q_mat = l
        .transpose()
        .matmul(&l)
        .add(&Matrix::identity(n).scale(0.1));
    let q_vec = r.normal_vec(n);
    let a = gaussian(&mut r, m, n);
    let b = r.normal_vec(m);
    QpProblem::new(q_mat, q_vec, a, b).unwrap()
}

/// Gradient of `wᵀz*` with respect to all of Q (symmetric perturbations), q,
/// A and b, against central differences.
pub fn check_qp_backward(seed: u64) -> f64 {
    let p = random_qp(seed);
    let (m, n) = (p.m(), p.n());
    let w = rng(seed, 3).normal_vec(n);
    let sol = qplayer::solve_eq_qp(&p);
    assert!(sol.is_solved());
    let g = qplayer::backward_eq_qp(&p, &sol, &w).unwrap();
    let value = |p: &QpProblem| -> f64 {
        let s = qplayer::solve_eq_qp(p);
        assert!(s.is_solved());
        densela::dot(&s.z, &w)
    };
    let h = 1e-6;
    let mut got = Vec::new();
    let mut want = Vec::new();
    for i in 0..n {
        for j in i..n {
            let shift = |c: f64| {
                let mut q = p.clone();
                q.q_mat[(i, j)] += c;
                if i != j {
                    q.q_mat[(j, i)] += c;
                }
                value(&q)
            };
            want.push((shift(h) - shift(-h)) / (2.0 * h));
            got.push(if i == j {
                g.q_mat[(i, i)]
            } else {
                g.q_mat[(i, j)] + g.q_mat[(j, i)]
            });
        }
    }
    want.extend(fd_vec(&p.q_vec, h, |x| {
        let mut q = p.clone();
        q.q_vec = x.to_vec();
        value(&q)
    }));
    got.extend_from_slice(&g.q_vec);
    want.extend(fd_vec(p.a.as_slice(), h, |x| {
        let mut q = p.clone();
        q.a = Matrix::new(m, n, x.to_vec()).unwrap();
        value(&q)
    }));
    got.extend_from_slice(g.a.as_slice());
    want.extend(fd_vec(&p.b, h, |x| {
        let mut q = p.clone();
        q.b = x.to_vec();
        value(&q)
    }));
    got.extend_from_slice(&g.b);
    rel_err(&got, &want)
}

/// Clamp layer `A ↦ A′` with the clamp active and every singular value kept
/// away from the floor, so the map is smooth around `A`.
pub fn check_svd_backward(seed: u64) -> f64 {
    let mut r = rng(seed, 4);
    let (a, bound) = loop {
        let m = 2 + r.below(5);
        let n = 2 + r.below(5);
        let a = gaussian(&mut r, m, n);
        let s = densela::singular_values(&a).unwrap();
        let kappa = s[0] / s[s.len() - 1];
        if kappa.is_nan() || kappa <= 3.0 {
            continue;
        }
        let bound = 1.0 + (kappa - 1.0) * r.uniform(0.2, 0.8);
        let floor = s[0] / bound;
        let gaps_ok = s.windows(2).all(|w| w[0] - w[1] > 1e-2 * s[0])
            && s.iter().all(|x| (x - floor).abs() > 1e-2 * s[0]);
        if gaps_ok {
            break (a, bound);
        }
    };
    let cfg = DefenseConfig::with_bound(bound).unwrap();
    let w = gaussian(&mut r, a.rows(), a.cols());
    let c = defense::clamp_condition_factored(&a, &cfg).unwrap();
    let factors = c.factors.expect("clamp active");
    let g = diffgraph::svd_backward(&factors, bound, &w);
    let fd = fd_matrix(&a, 1e-6, |x| {
        defense::clamp_condition(x, &cfg)
            .unwrap()
            .0
            .frobenius_dot(&w)
    });
    rel_err(g.as_slice(), fd.as_slice())
}

pub fn small_network(seed: u64) -> Network {
    let mut r = rng(seed, 5);
    let activation = [Activation::Relu, Activation::Celu, Activation::Tanh][r.below(3)];
    let m = 2 + r.below(2);
    let arch = Arch {
        input_dim: 3 + r.below(3),
        hidden: vec![4 + r.below(4), 4 + r.below(4)],
        activation,
        m,
        n: m + 1 + r.below(2),
        head: HeadKind::EqQp,
        q_scale: 0.1,
    };
    Network::init(arch, seed, DefenseConfig::off()).unwrap()
}

/// Every weight and input of a small network with the QP head, against
/// central differences of `wᵀ probs`. Odd seeds put an active clamp in front
/// of the QP.
pub fn check_network_backward(seed: u64) -> f64 {
    let mut net = small_network(seed);
    let mut r = rng(seed, 6);
    let u = r.normal_vec(net.arch.input_dim);
    if seed % 2 == 1 {
        let s = densela::singular_values(&net.forward(&u).unwrap().a).unwrap();
        let kappa = s[0] / s[s.len() - 1];
        net.defense = DefenseConfig::with_bound(1.0 + (kappa - 1.0) * 0.5).unwrap();
    }
    let w = r.normal_vec(net.arch.n);
    let fwd = net.forward(&u).unwrap();
    assert!(!fwd.nonfinite);
    let grads = net.backward(&fwd, Upstream::Probs(w.clone())).unwrap();
    let h = 1e-6;
    let loss = |net: &Network, u: &[f64]| densela::dot(&net.forward(u).unwrap().probs, &w);
    let params = net.params();
    let mut probe = net.clone();
    let mut want = fd_vec(&params, h, |p| {
        probe.set_params(p);
        loss(&probe, &u)
    });
    want.extend(fd_vec(&u, h, |x| loss(&net, x)));
    let mut got = grads.flat();
    got.extend_from_slice(&grads.input);
    rel_err(&got, &want)
}

/// `∂ log κ₂(A(u)) / ∂u` through a matrix-head network.
pub fn check_log_kappa_chain(seed: u64) -> f64 {
    let mut r = rng(seed, 7);
    let (net, u) = loop {
        let mut net = small_network(
            seed.wrapping_mul(7919)
                .wrapping_add(r.below(1 << 20) as u64),
        );
        net.arch.head = HeadKind::Matrix;
        let net = Network::init(net.arch.clone(), net.seed, DefenseConfig::off()).unwrap();
        let u = r.normal_vec(net.arch.input_dim);
        let (g1, g2, c) = extreme_gaps(&net.forward(&u).unwrap().a);
        if g1 >= 1e-3 && g2 >= 1e-3 && c >= 1e-2 {
            break (net, u);
        }
    };
    let (g, _) = condgrad::grad_log_kappa2_wrt_input(&net, &u).unwrap();
    let fd = fd_vec(&u, 1e-6, |x| {
        densela::kappa2(&net.forward(x).unwrap().a).ln()
    });
    rel_err(&g, &fd)
}

/// Worst error of `check` over `count` seeds.
pub fn worst(count: u64, check: impl Fn(u64) -> f64) -> f64 {
    (0..count).map(check).fold(0.0, f64::max)
}
