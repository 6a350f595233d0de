//! Helpers shared by the integration tests.

#![allow(dead_code)]

use nalgebra::DMatrix;
use opcm::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
    Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0))
}

pub fn to_na(a: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

pub fn from_na(a: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Thin SVD with singular values in descending order. Factors the tall
/// orientation, where nalgebra's bidiagonalization is reliable, and checks
/// the reconstruction.
pub fn thin_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let wide = a.nrows() < a.ncols();
    let tall = if wide { a.transpose() } else { a.clone() };
    let svd = tall.clone().svd(true, true);
    let k = tall.ncols();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| {
        svd.singular_values[y]
            .partial_cmp(&svd.singular_values[x])
            .unwrap()
    });
    let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let (u_thin, vt_thin) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let u = DMatrix::from_fn(tall.nrows(), k, |r, c| u_thin[(r, order[c])]);
    let v = DMatrix::from_fn(k, k, |r, c| vt_thin[(order[c], r)]);
    let rebuilt =
        &u * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&s)) * v.transpose();
    assert!(
        (rebuilt - &tall).norm() <= 1e-12 * tall.norm().max(1.0),
        "reference SVD did not converge"
    );
    if wide {
        (v, s, u)
    } else {
        (u, s, v)
    }
}

/// Projector built from nalgebra factors with explicit subspace projectors:
/// `U_L U_Lᵀ X V_L V_Lᵀ − Σ_{i∈L} u_i (u_iᵀ X v_i) v_iᵀ` plus the blocks that
/// pair kept directions with the null-space completion of the longer side.
pub fn reference_projection(x: &Matrix, merged: &Matrix, alpha: f64) -> Matrix {
    let (m, n) = merged.shape();
    let k = m.min(n);
    let (u, s, v) = thin_svd(&to_na(merged));
    let total: f64 = s.iter().sum();
    let mut r = k;
    let mut acc = 0.0;
    for (i, &sv) in s.iter().enumerate() {
        acc += sv;
        if acc >= alpha * total {
            r = i + 1;
            break;
        }
    }
    let first = r - 1;
    let ul = u.columns(first, k - first).into_owned();
    let vl = v.columns(first, k - first).into_owned();
    let xa = to_na(x);
    let pu_l = &ul * ul.transpose();
    let pv_l = &vl * vl.transpose();
    let null_u = DMatrix::identity(m, m) - &u * u.transpose();
    let null_v = DMatrix::identity(n, n) - &v * v.transpose();

    let mut out = &pu_l * &xa * &pv_l + &null_u * &xa * &pv_l + &pu_l * &xa * &null_v;
    for c in 0..(k - first) {
        let ui = ul.column(c);
        let vi = vl.column(c);
        let coef = (ui.transpose() * &xa * vi)[(0, 0)];
        out -= coef * ui * vi.transpose();
    }
    from_na(&out)
}
