mod common;

use common::*;
use condguard::condgrad;
use condguard::defense::DefenseConfig;
use condguard::densela::{self, Matrix};
use condguard::diffgraph::{Arch, HeadKind, Network};

#[test]
fn kappa2_gradient_is_orthogonal_to_a() {
    for seed in 0..50 {
        let a = gapped_matrix(seed, (2, 8), (2, 12));
        let g = condgrad::grad_kappa2(&a).unwrap().grad_wrt_a;
        let inner = g.frobenius_dot(&a).abs();
        assert!(
            inner <= 1e-6 * g.frobenius_norm() * a.frobenius_norm(),
            "seed {seed}: {inner:e}"
        );
    }
}

#[test]
fn kappa_f_gradient_is_orthogonal_to_a() {
    let g = condgrad::grad_kappa_f(&Matrix::identity(2))
        .unwrap()
        .grad_wrt_a;
    assert!(g.frobenius_dot(&Matrix::identity(2)).abs() < 1e-12);
    for seed in 0..50 {
        let a = gapped_matrix(seed, (2, 6), (2, 6));
        let g = condgrad::grad_kappa_f(&a).unwrap().grad_wrt_a;
        assert!(g.frobenius_dot(&a).abs() <= 1e-6 * g.frobenius_norm() * a.frobenius_norm());
    }
}

#[test]
fn pinv_differential_is_linear() {
    for seed in 0..30 {
        let mut r = rng(seed, 11);
        let a = gaussian(&mut r, 3, 5);
        let (x, y) = (gaussian(&mut r, 3, 5), gaussian(&mut r, 3, 5));
        let (s, t) = (r.normal(), r.normal());
        let lhs = condgrad::pinv_differential(&a, &x.scale(s).add(&y.scale(t))).unwrap();
        let rhs = condgrad::pinv_differential(&a, &x)
            .unwrap()
            .scale(s)
            .add(&condgrad::pinv_differential(&a, &y).unwrap().scale(t));
        assert!(lhs.sub(&rhs).max_abs() <= 1e-10 * (1.0 + rhs.max_abs()));
        let zero = condgrad::pinv_differential(&a, &Matrix::zeros(3, 5)).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }
}

#[test]
fn frozen_network_has_zero_input_gradient() {
    let arch = Arch {
        head: HeadKind::Matrix,
        ..Arch::synthetic(4, 6, 3, 3)
    };
    let mut net = Network::init(arch, 2, DefenseConfig::off()).unwrap();
    let w0 = net.layers[0].weight.as_slice().len();
    let mut p = net.params();
    p[..w0].iter_mut().for_each(|x| *x = 0.0);
    net.set_params(&p);
    let u = rng(2, 1).normal_vec(4);
    match condgrad::grad_log_kappa2_wrt_input(&net, &u) {
        Ok((g, _)) => assert!(g.iter().all(|x| *x == 0.0)),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn log_kappa_ascent_increases_kappa() {
    let arch = Arch {
        head: HeadKind::Matrix,
        ..Arch::synthetic(6, 16, 3, 4)
    };
    let net = Network::init(arch, 9, DefenseConfig::off()).unwrap();
    let mut u = rng(9, 2).normal_vec(6);
    let mut last = densela::kappa2(&net.forward(&u).unwrap().a);
    for step in 0..50 {
        let (g, _) = condgrad::grad_log_kappa2_wrt_input(&net, &u).unwrap();
        let scale = 1e-3 / densela::norm2(&g);
        u.iter_mut().zip(&g).for_each(|(x, gi)| *x += scale * gi);
        let k = densela::kappa2(&net.forward(&u).unwrap().a);
        assert!(k > last, "step {step}: {k} <= {last}");
        last = k;
    }
}

#[test]
fn fd_kappa_matches_closed_form() {
    for seed in 0..10 {
        let a = gapped_matrix(seed, (2, 5), (2, 5));
        let c = condgrad::grad_kappa2(&a).unwrap().grad_wrt_a;
        let f = condgrad::grad_kappa2_fd(&a, 1e-6).unwrap().grad_wrt_a;
        assert!(rel_err(f.as_slice(), c.as_slice()) < 1e-5);
    }
}
