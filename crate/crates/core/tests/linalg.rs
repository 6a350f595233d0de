//! SVD and projector checked against nalgebra's Golub-Kahan SVD.

mod common;

use common::{max_abs_diff, random_matrix as random, reference_projection, rng, to_na};
use opcm::linalg::{frob_inner, full_svd, project_alpha, rank_alpha, Matrix, ProjectionSpec};

fn orthonormality_error(q: &Matrix) -> f64 {
    let g = q.transpose().matmul(q).unwrap();
    max_abs_diff(&g, &Matrix::identity(q.cols()))
}

#[test]
fn svd_matches_reference_on_random_shapes() {
    let mut rng = rng(11);
    for &(m, n) in &[
        (5, 3),
        (3, 5),
        (1, 4),
        (4, 1),
        (6, 6),
        (32, 24),
        (24, 32),
        (17, 9),
    ] {
        for _ in 0..5 {
            let a = random(&mut rng, m, n);
            let ours = full_svd(&a).unwrap();
            let theirs = to_na(&a).svd(false, false);
            let mut reference: Vec<f64> = theirs.singular_values.iter().copied().collect();
            reference.sort_by(|x, y| y.partial_cmp(x).unwrap());
            assert_eq!(ours.s.len(), reference.len());
            for (x, y) in ours.s.iter().zip(&reference) {
                assert!(
                    (x - y).abs() <= 1e-12 * reference[0].max(1.0),
                    "{m}x{n}: {x} vs {y}"
                );
            }
            assert!(ours.s.windows(2).all(|w| w[0] >= w[1]));
            assert!(max_abs_diff(&ours.reconstruct(), &a) <= 1e-10, "{m}x{n}");
            assert!(orthonormality_error(&ours.u) <= 1e-12);
            assert!(orthonormality_error(&ours.v) <= 1e-12);
            assert_eq!(ours.u.shape(), (m, m));
            assert_eq!(ours.v.shape(), (n, n));
        }
    }
}

#[test]
fn svd_of_rank_deficient_matrix() {
    let mut rng = rng(12);
    let a = random(&mut rng, 7, 2)
        .matmul(&random(&mut rng, 2, 5))
        .unwrap();
    let ours = full_svd(&a).unwrap();
    assert!(ours.s[2..].iter().all(|&s| s <= 1e-12 * ours.s[0]));
    assert!(max_abs_diff(&ours.reconstruct(), &a) <= 1e-10);
    assert!(orthonormality_error(&ours.u) <= 1e-12);
    assert!(orthonormality_error(&ours.v) <= 1e-12);
}

#[test]
fn svd_is_deterministic() {
    let mut rng = rng(13);
    let a = random(&mut rng, 9, 6);
    assert_eq!(full_svd(&a).unwrap(), full_svd(&a).unwrap());
}

#[test]
fn projection_matches_subspace_oracle() {
    let mut rng = rng(14);
    for &(m, n) in &[(2, 2), (5, 3), (3, 5), (8, 8), (12, 7), (7, 12)] {
        for step in 0..10 {
            let alpha = 0.1 * (step as f64 + 1.0);
            let x = random(&mut rng, m, n);
            let merged = random(&mut rng, m, n);
            let ours = project_alpha(&x, &merged, &ProjectionSpec::new(alpha).unwrap()).unwrap();
            let oracle = reference_projection(&x, &merged, alpha);
            let scale = x.frobenius_norm().max(1.0);
            assert!(
                max_abs_diff(&ours, &oracle) <= 1e-10 * scale,
                "{m}x{n} alpha {alpha}"
            );
            let inner = frob_inner(&ours, &merged).unwrap();
            assert!(inner.abs() <= 1e-10 * scale * merged.frobenius_norm());
        }
    }
}

#[test]
fn hand_enumerated_examples() {
    let spec = ProjectionSpec::new(0.5).unwrap();
    let merged = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
    assert_eq!(rank_alpha(&full_svd(&merged).unwrap().s, &spec).rank, 1);

    let diag = Matrix::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]);
    let out = project_alpha(&diag, &merged, &spec).unwrap();
    assert!(out.max_abs() <= 1e-15);

    let off = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
    let out = project_alpha(&off, &merged, &spec).unwrap();
    assert!(max_abs_diff(&out, &off) <= 1e-15);
}
