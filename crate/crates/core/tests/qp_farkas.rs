mod common;

use common::*;
use condguard::densela::{self, Matrix};
use condguard::farkas::{self, FarkasInstance, FarkasParams};
use condguard::harness::{self, FarkasRunConfig};
use condguard::qplayer::{self, BoxQpOptions, QpProblem};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

fn na(a: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice())
}

/// Minimizer of `½zᵀHz + cᵀz` over `z ≥ lower` by enumerating which bounds
/// are active and keeping the KKT point with the lowest objective.
fn active_set_oracle(h: &Matrix, c: &[f64], lower: &[f64]) -> Vec<f64> {
    let n = c.len();
    let hn = na(h);
    let objective = |z: &[f64]| 0.5 * densela::dot(z, &h.matvec(z)) + densela::dot(c, z);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << n) {
        let fixed: Vec<bool> = (0..n)
            .map(|i| mask & (1 << i) != 0 && lower[i].is_finite())
            .collect();
        if (0..n).any(|i| mask & (1 << i) != 0 && !lower[i].is_finite()) {
            continue;
        }
        let free: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
        let mut z: Vec<f64> = (0..n)
            .map(|i| if fixed[i] { lower[i] } else { 0.0 })
            .collect();
        if !free.is_empty() {
            let hff = DMatrix::from_fn(free.len(), free.len(), |a, b| hn[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                -c[free[a]]
                    - (0..n)
                        .filter(|&j| fixed[j])
                        .map(|j| hn[(free[a], j)] * lower[j])
                        .sum::<f64>()
            });
            let Some(sol) = hff.lu().solve(&rhs) else {
                continue;
            };
            for (a, &i) in free.iter().enumerate() {
                z[i] = sol[a];
            }
        }
        let grad: Vec<f64> = h.matvec(&z).iter().zip(c).map(|(a, b)| a + b).collect();
        let primal = free.iter().all(|&i| z[i] >= lower[i] - 1e-12);
        let dual = (0..n).filter(|&i| fixed[i]).all(|i| grad[i] >= -1e-12);
        if primal && dual {
            let f = objective(&z);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, z));
            }
        }
    }
    best.unwrap().1
}

#[test]
fn box_qp_matches_active_set_enumeration() {
    for seed in 0..30 {
        let mut r = rng(seed, 20);
        let l = gaussian(&mut r, 6, 6);
        let h = l
            .transpose()
            .matmul(&l)
            .add(&Matrix::identity(6).scale(0.1));
        let c = r.normal_vec(6);
        let lower: Vec<f64> = (0..6)
            .map(|i| {
                if i % 3 == 2 {
                    f64::NEG_INFINITY
                } else {
                    r.normal()
                }
            })
            .collect();
        // The default stop (projected-gradient residual 1e-6) bounds the
        // error only by 1e-6/λ_min(H); tighten it to compare iterates.
        let opts = BoxQpOptions {
            tol: 1e-10,
            ..BoxQpOptions::default()
        };
        let z = qplayer::solve_lower_bounded_qp_with(&h, &c, &lower, None, opts).unwrap();
        let z_default = qplayer::solve_lower_bounded_qp(&h, &c, &lower).unwrap();
        let proj: Vec<f64> = {
            let g: Vec<f64> = h
                .matvec(&z_default)
                .iter()
                .zip(&c)
                .map(|(a, b)| a + b)
                .collect();
            (0..6)
                .map(|i| z_default[i] - (z_default[i] - g[i]).max(lower[i]))
                .collect()
        };
        assert!(densela::norm2(&proj) <= 1e-6);
        let want = active_set_oracle(&h, &c, &lower);
        let diff = z
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6, "seed {seed}: {diff:e}");
    }
}

#[test]
fn eq_qp_kkt_residuals_on_random_problems() {
    for seed in 0..100 {
        let p = random_qp(seed);
        let s = qplayer::solve_eq_qp(&p);
        assert!(s.is_solved() && s.z.iter().chain(&s.nu).all(|x| x.is_finite()));
        let scale = 1.0
            + p.b
                .iter()
                .chain(&p.q_vec)
                .fold(0.0f64, |m, x| m.max(x.abs()));
        let stat: Vec<f64> = p
            .q_mat
            .matvec(&s.z)
            .iter()
            .zip(&p.q_vec)
            .zip(p.a.matvec_t(&s.nu))
            .map(|((a, b), c)| a + b + c)
            .collect();
        let feas: Vec<f64> =
            p.a.matvec(&s.z)
                .iter()
                .zip(&p.b)
                .map(|(a, b)| a - b)
                .collect();
        assert!(densela::norm2(&stat) <= 1e-8 * scale, "seed {seed}");
        assert!(densela::norm2(&feas) <= 1e-8 * scale, "seed {seed}");
    }
}

#[test]
fn lemma2_shift_grows_objective_without_touching_a() {
    let q = Matrix::identity(2).scale(2.0);
    let a = Matrix::from_rows(&[&[1.0, 1.0]]).unwrap();
    let p = QpProblem::new(q.clone(), vec![0.0; 2], a.clone(), vec![2.0]).unwrap();
    let s = qplayer::solve_eq_qp(&p);
    let grad = q.matvec(&s.z);
    let base = p.objective(&s.z);
    assert_eq!(qplayer::lemma2_shift(&a, &p.b, &grad, 0.0), p.b);
    let objective_at = |k: f64| {
        let b2 = qplayer::lemma2_shift(&a, &p.b, &grad, k);
        let p2 = QpProblem::new(q.clone(), vec![0.0; 2], a.clone(), b2).unwrap();
        p2.objective(&qplayer::solve_eq_qp(&p2).z)
    };
    assert!(objective_at(10.0) > base);
    let seq: Vec<f64> = [1.0, 2.0, 4.0, 8.0].map(objective_at).to_vec();
    assert!(seq.windows(2).all(|w| w[1] >= w[0]), "{seq:?}");
}

#[test]
fn prereq_matches_normal_equations_on_rank_deficient_k() {
    for seed in 0..30 {
        let mut r = rng(seed, 21);
        let (n, m) = (2 + r.below(4), 2 + r.below(4));
        let rank = 1 + r.below(n.min(m));
        let u = gaussian(&mut r, n + 1, rank);
        let k = u.matmul(&gaussian(&mut r, rank, m));
        let a = Matrix::from_fn(m, n, |i, j| k[(j, i)]);
        let b = k.row(n).to_vec();
        let inst = FarkasInstance::new(a, b, FarkasParams::default()).unwrap();
        // Projection onto range(K) = range(U) through UᵀU x = Uᵀq.
        let un = na(&u);
        let q = DVector::from_fn(n + 1, |i, _| if i == n { -1.0 } else { 0.0 });
        let x = (un.transpose() * &un)
            .cholesky()
            .unwrap()
            .solve(&(un.transpose() * &q));
        let want = (&un * x - q).norm();
        assert!(
            (farkas::prereq_loss(&inst) - want).abs() <= 1e-8,
            "seed {seed}"
        );
    }
    let zero =
        FarkasInstance::new(Matrix::zeros(2, 2), vec![0.0; 2], FarkasParams::default()).unwrap();
    assert_eq!(farkas::prereq_loss(&zero), 1.0);
}

#[test]
fn regularized_gram_is_positive_definite() {
    for seed in 0..50 {
        let mut r = rng(seed, 22);
        let (rows, cols) = (3 + r.below(4), 2 + r.below(4));
        let k = gaussian(&mut r, rows, cols);
        let b = farkas::optdist_b(&k);
        let g = b.transpose().matmul(&b);
        let m = k.cols();
        let ev = SymmetricEigen::new(na(&g)).eigenvalues;
        assert!(ev.min() <= 1e-8 * ev.max());
        for eta in [1e-8, 1e-6, 1e-3] {
            let mut reg = g.clone();
            for i in m..2 * m {
                reg[(i, i)] += eta;
            }
            assert!(densela::cholesky(&reg).is_some(), "seed {seed} eta {eta}");
        }
    }
}

#[test]
fn farkas_successes_are_certified_and_grid_checked() {
    for seed in 0..6 {
        let rec = harness::run_farkas(&FarkasRunConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        if let Some(c) = &rec.result.certified {
            let again = farkas::verify_infeasible(&c.a, &c.b, &c.y).unwrap();
            assert!(again.valid);
            assert_eq!(rec.grid_confirms_infeasible, Some(true));
        } else {
            assert!(!rec.result.attack.success);
        }
    }
}

#[test]
fn farkas_zero_rate_is_a_no_op() {
    let net = harness::farkas_network(2, 3).unwrap();
    let u0 = rng(3, 1).normal_vec(4);
    let r = farkas::run_farkas_attack(
        &net,
        &u0,
        &harness::farkas_rhs(2),
        FarkasParams::default(),
        0.0,
        50,
    )
    .unwrap();
    assert_eq!(r.attack.u_star, u0);
    assert!(!r.attack.success || r.attack.epochs_used == 0);
}
