mod common;

use common::*;
use condguard::densela::{self, CondNorm, Matrix};
use condguard::Error;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn to_na(a: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice())
}

fn orthogonality_residual(q: &Matrix) -> f64 {
    q.transpose()
        .matmul(q)
        .sub(&Matrix::identity(q.cols()))
        .max_abs()
}

#[test]
fn singular_values_match_eigenvalues_of_gram() {
    for seed in 0..20 {
        let a = gaussian(&mut rng(seed, 0), 5, 7);
        let s = densela::singular_values(&a).unwrap();
        let g = to_na(&a).transpose() * to_na(&a);
        let mut ev: Vec<f64> = SymmetricEigen::new(g)
            .eigenvalues
            .iter()
            .map(|x| x.max(0.0).sqrt())
            .collect();
        ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (i, si) in s.iter().enumerate() {
            assert!((si - ev[i]).abs() <= 1e-8 * ev[0], "seed {seed} index {i}");
        }
    }
}

#[test]
fn svd_small_examples() {
    let f = densela::svd(&Matrix::identity(3)).unwrap();
    assert_eq!(f.sigma, vec![1.0; 3]);
    assert_eq!(f.u, Matrix::identity(3));
    assert_eq!(f.vt, Matrix::identity(3));
    assert_eq!(
        densela::singular_values(&Matrix::from_diag(&[3.0, 1.0])).unwrap(),
        vec![3.0, 1.0]
    );
    let bad = Matrix::from_raw(1, 2, vec![f64::NAN, 1.0]).unwrap();
    assert!(matches!(densela::svd(&bad), Err(Error::InvalidInput(_))));
}

#[test]
fn svd_is_deterministic_and_signed() {
    let a = gaussian(&mut rng(3, 0), 6, 4);
    let (f, g) = (densela::svd(&a).unwrap(), densela::svd(&a).unwrap());
    assert_eq!(f.u, g.u);
    assert_eq!(f.vt, g.vt);
    for j in 0..f.u.cols() {
        let first = f.u.column(j).into_iter().find(|x| x.abs() > 1e-12).unwrap();
        assert!(first > 0.0);
    }
}

#[test]
fn pseudoinverse_examples_and_penrose_identities() {
    let p = densela::pseudoinverse(&Matrix::from_diag(&[2.0, 4.0]));
    assert!(p.sub(&Matrix::from_diag(&[0.5, 0.25])).max_abs() < 1e-15);
    assert_eq!(
        densela::pseudoinverse(&Matrix::zeros(3, 2)),
        Matrix::zeros(2, 3)
    );
    for seed in 0..20 {
        let a = gaussian(&mut rng(seed, 1), 4, 6);
        let x = densela::pseudoinverse(&a);
        let ax = a.matmul(&x);
        let xa = x.matmul(&a);
        assert!(ax.matmul(&a).sub(&a).max_abs() <= 1e-8);
        assert!(xa.matmul(&x).sub(&x).max_abs() <= 1e-8);
        assert!(ax.sub(&ax.transpose()).max_abs() <= 1e-8);
        assert!(xa.sub(&xa.transpose()).max_abs() <= 1e-8);
        // Independent oracle.
        let na = to_na(&a).pseudo_inverse(1e-12).unwrap();
        let diff = (to_na(&x) - na).abs().max();
        assert!(diff <= 1e-8, "seed {seed}: {diff:e}");
    }
}

#[test]
fn condition_number_examples() {
    let k = |a: &Matrix| densela::condition_number(a, CondNorm::Two).unwrap().kappa;
    assert_eq!(k(&Matrix::identity(4)), 1.0);
    assert!((k(&Matrix::from_diag(&[3.0, 1.0])) - 3.0).abs() < 1e-15);
    for seed in 0..20 {
        let a = gaussian(&mut rng(seed, 2), 5, 5);
        assert!((k(&a.scale(7.0)) - k(&a)).abs() <= 1e-9 * k(&a));
        assert!((k(&a.scale(-0.3)) - k(&a)).abs() <= 1e-9 * k(&a));
    }
    let v = densela::condition_number(&Matrix::from_diag(&[1.0, 0.0]), CondNorm::Two).unwrap();
    assert!(v.is_numerically_singular && v.kappa.is_infinite());
    assert!(
        densela::condition_number(&Matrix::zeros(2, 2), CondNorm::Two)
            .unwrap()
            .is_numerically_singular
    );
}

#[test]
fn spectral_norm_matches_power_iteration() {
    for seed in 0..20 {
        let a = gaussian(&mut rng(seed, 3), 6, 4);
        let na = to_na(&a);
        let g = na.transpose() * &na;
        let mut x = nalgebra::DVector::from_element(4, 1.0);
        let mut lam = 0.0;
        for _ in 0..5000 {
            let y = &g * &x;
            lam = y.norm();
            x = y / lam;
        }
        let s = densela::spectral_norm(&a);
        assert!((s - lam.sqrt()).abs() <= 1e-8 * s);
    }
}

#[test]
fn distance_to_singularity_examples() {
    assert!(
        (densela::distance_to_singularity(&Matrix::from_diag(&[3.0, 1.0])) - 1.0).abs() < 1e-15
    );
    let rank1 = Matrix::outer(&[1.0, 2.0, 3.0], &[1.0, -1.0, 0.5]);
    assert_eq!(densela::distance_to_singularity(&rank1), 0.0);
    for seed in 0..20 {
        let a = gaussian(&mut rng(seed, 4), 4, 4);
        let v = densela::condition_number(&a, CondNorm::Two).unwrap();
        assert_eq!(
            densela::distance_to_singularity(&a) == 0.0,
            v.is_numerically_singular
        );
    }
}

#[test]
fn solve_linear_examples() {
    let x =
        densela::solve_linear(&Matrix::identity(2), &Matrix::column_vector(&[1.0, 2.0])).unwrap();
    assert_eq!(x.as_slice(), &[1.0, 2.0]);
    let err = densela::solve_linear(
        &Matrix::from_diag(&[2.0, 0.0]),
        &Matrix::column_vector(&[1.0, 1.0]),
    );
    assert!(matches!(err, Err(Error::SingularSystem { .. })));
    for seed in 0..20 {
        let mut r = rng(seed, 5);
        let a = gaussian(&mut r, 6, 6).add(&Matrix::identity(6).scale(6.0));
        let b = Matrix::column_vector(&r.normal_vec(6));
        let x = densela::solve_linear(&a, &b).unwrap();
        let res = a.matmul(&x).sub(&b);
        assert!(res.frobenius_norm() <= 1e-8 * b.frobenius_norm().max(1.0));
    }
}

#[test]
fn matrix_serialization() {
    let a = Matrix::from_rows(&[&[1.5, -2.0], &[0.1, 3.0]]).unwrap();
    assert_eq!(Matrix::from_csv(&a.to_csv()).unwrap(), a);
    let json = serde_json::to_value(&a).unwrap();
    assert_eq!(json["rows"], 2);
    assert_eq!(json["cols"], 2);
    assert_eq!(serde_json::from_value::<Matrix>(json).unwrap(), a);
    assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    assert!(Matrix::new(1, 1, vec![f64::INFINITY]).is_err());
}

fn matrix_strategy(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max, any::<u64>()).prop_map(|(m, n, seed)| {
        let mut r = rng(seed, 0);
        let mut a = gaussian(&mut r, m, n);
        // Occasionally collapse the rank.
        if seed % 3 == 0 && m > 1 {
            let row = a.row(0).to_vec();
            for j in 0..n {
                a[(m - 1, j)] = 2.0 * row[j];
            }
        }
        a
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_and_is_orthonormal(a in matrix_strategy(24)) {
        let f = densela::svd(&a).unwrap();
        let scale = a.frobenius_norm().max(1.0);
        prop_assert!(f.reconstruct().sub(&a).frobenius_norm() <= 1e-10 * scale);
        prop_assert!(orthogonality_residual(&f.u) <= 1e-10);
        prop_assert!(orthogonality_residual(&f.vt.transpose()) <= 1e-10);
        prop_assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(f.sigma.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn solve_linear_is_finite_or_errors(a in matrix_strategy(10), seed in any::<u64>()) {
        let n = a.rows();
        let sq = Matrix::from_fn(n, n, |i, j| if j < a.cols() { a[(i, j)] } else { 0.0 });
        let b = Matrix::column_vector(&rng(seed, 1).normal_vec(n));
        match densela::solve_linear(&sq, &b) {
            Ok(x) => prop_assert!(x.is_finite()),
            Err(Error::SingularSystem { .. }) => {}
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }
}

#[test]
fn svd_large_square() {
    let a = gaussian(&mut rng(0, 9), 64, 64);
    let f = densela::svd(&a).unwrap();
    assert!(f.reconstruct().sub(&a).frobenius_norm() <= 1e-10 * a.frobenius_norm());
    assert!(orthogonality_residual(&f.u) <= 1e-10);
}
