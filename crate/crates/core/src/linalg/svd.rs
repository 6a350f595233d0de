//! Full SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Sweeps visit column pairs in a fixed cyclic order and no randomness is
//! involved, so equal input bytes always give equal output bytes. Left
//! singular vectors for numerically-zero singular values, and the extra
//! columns of a tall `U`, are filled by a deterministic completion against
//! the standard basis.

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Singular values at or below this fraction of the largest one are set to
/// zero and their left vectors come from the basis completion.
const NUMERICAL_ZERO: f64 = 1e-13;

/// `W = U · diag(S) · Vᵀ` with square orthonormal `U` (m×m) and `V` (n×n).
///
/// Sign convention: for `i < min(m, n)` the largest-magnitude entry of
/// column `u_i` (lowest row on ties) is nonnegative, with `v_i` flipped
/// along with it. Completion columns follow the same rule on their own.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let (m, n) = (self.u.rows(), self.v.rows());
        let mut us = Matrix::zeros(m, n);
        for (k, &sigma) in self.s.iter().enumerate() {
            for i in 0..m {
                us.set(i, k, self.u.get(i, k) * sigma);
            }
        }
        us.matmul(&self.v.transpose())
            .expect("shapes agree by construction")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes the components of `x` along each (orthonormal) vector in `basis`.
/// Two passes of modified Gram-Schmidt.
fn orthogonalize(x: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = dot(x, b);
            for (xi, bi) in x.iter_mut().zip(b) {
                *xi -= c * bi;
            }
        }
    }
}

/// Extends `basis` (orthonormal vectors of length `dim`) until it holds
/// `target` vectors, each time picking the standard basis vector with the
/// largest residual (lowest index on ties).
fn complete_basis(basis: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    let mut residual: Vec<f64> = (0..dim)
        .map(|k| 1.0 - basis.iter().map(|b| b[k] * b[k]).sum::<f64>())
        .collect();
    while basis.len() < target {
        let mut best = 0;
        for k in 1..dim {
            if residual[k] > residual[best] {
                best = k;
            }
        }
        let mut e = vec![0.0; dim];
        e[best] = 1.0;
        orthogonalize(&mut e, basis);
        let len = norm(&e);
        for x in e.iter_mut() {
            *x /= len;
        }
        for (r, x) in residual.iter_mut().zip(&e) {
            *r -= x * x;
        }
        // The chosen direction is now spanned; never pick it twice.
        residual[best] = f64::NEG_INFINITY;
        basis.push(e);
    }
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> Matrix {
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

/// SVD of a matrix with `rows >= cols`, returning columns of U and V.
fn tall_svd(a: &Matrix) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * m as f64;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + 1f64.hypot(zeta));
                let c = 1.0 / 1f64.hypot(t);
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]).then(x.cmp(&y)));
    let smax = order.first().map_or(0.0, |&k| sigma[k]);

    let mut s = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut accepted = true;
    for &k in &order {
        let sk = sigma[k];
        v.push(vcols[k].clone());
        if accepted && sk > NUMERICAL_ZERO * smax && sk > 0.0 {
            let mut x: Vec<f64> = cols[k].iter().map(|c| c / sk).collect();
            orthogonalize(&mut x, &u);
            let len = norm(&x);
            if len >= 0.5 {
                x.iter_mut().for_each(|c| *c /= len);
                u.push(x);
                s.push(sk);
                continue;
            }
        }
        // Everything from here on is treated as numerically zero.
        accepted = false;
        s.push(0.0);
    }
    complete_basis(&mut u, m, m);
    (u, s, v)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Flips column `j` of `a` (and of `b`, when given) so the largest-magnitude
/// entry of `a`'s column is nonnegative.
fn fix_sign(a: &mut Matrix, b: Option<&mut Matrix>, j: usize) {
    let mut best = 0;
    for i in 1..a.rows() {
        if a.get(i, j).abs() > a.get(best, j).abs() {
            best = i;
        }
    }
    if a.get(best, j) < 0.0 {
        for i in 0..a.rows() {
            a.set(i, j, -a.get(i, j));
        }
        if let Some(b) = b {
            for i in 0..b.rows() {
                b.set(i, j, -b.get(i, j));
            }
        }
    }
}

/// Deterministic full SVD. See [`SvdFactors`] for the conventions.
pub fn full_svd(w: &Matrix) -> Result<SvdFactors> {
    if !w.is_finite() {
        return Err(Error::NonFinite);
    }
    let (m, n) = w.shape();
    let k = m.min(n);
    let (mut u, s, mut v) = if m >= n {
        let (u, s, v) = tall_svd(w);
        (columns_to_matrix(&u, m), s, columns_to_matrix(&v, n))
    } else {
        let (ut, s, vt) = tall_svd(&w.transpose());
        (columns_to_matrix(&vt, m), s, columns_to_matrix(&ut, n))
    };
    for j in 0..k {
        fix_sign(&mut u, Some(&mut v), j);
    }
    for j in k..m {
        fix_sign(&mut u, None, j);
    }
    for j in k..n {
        fix_sign(&mut v, None, j);
    }
    Ok(SvdFactors { u, s, v })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_dev_from_identity(q: &Matrix) -> f64 {
        let qtq = q.transpose().matmul(q).unwrap();
        let n = qtq.rows();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((qtq.get(i, j) - target).abs());
            }
        }
        worst
    }

    #[test]
    fn identity() {
        let f = full_svd(&Matrix::identity(2)).unwrap();
        assert_eq!(f.s, vec![1.0, 1.0]);
        assert_eq!(f.u.matmul(&f.v.transpose()).unwrap(), Matrix::identity(2));
    }

    #[test]
    fn diagonal_tall() {
        let w = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]]);
        let f = full_svd(&w).unwrap();
        assert_eq!(f.s, vec![3.0, 0.0]);
        assert_eq!(f.u.shape(), (3, 3));
        assert_eq!(f.v.shape(), (2, 2));
        assert_eq!(f.u.column(0), vec![1.0, 0.0, 0.0]);
        assert_eq!(f.v.column(0), vec![1.0, 0.0]);
        assert!(max_dev_from_identity(&f.u) < 1e-15);
    }

    #[test]
    fn zero_matrix_gets_full_bases() {
        let f = full_svd(&Matrix::zeros(3, 4)).unwrap();
        assert_eq!(f.s, vec![0.0; 3]);
        assert!(max_dev_from_identity(&f.u) < 1e-15);
        assert!(max_dev_from_identity(&f.v) < 1e-15);
    }

    #[test]
    fn rank_one_wide_and_tall() {
        let x = [1.0, -2.0, 0.5];
        let y = [0.3, 0.1, -0.7, 2.0, 1.0];
        for w in [
            Matrix::from_fn(3, 5, |i, j| x[i] * y[j]),
            Matrix::from_fn(5, 3, |i, j| y[i] * x[j]),
        ] {
            let f = full_svd(&w).unwrap();
            assert!(max_dev_from_identity(&f.u) < 1e-12);
            assert!(max_dev_from_identity(&f.v) < 1e-12);
            let err = f.reconstruct().sub(&w).unwrap().frobenius_norm();
            assert!(err < 1e-12 * w.frobenius_norm(), "err {err}");
            assert!(f.s[1] == 0.0 && f.s[2] == 0.0);
        }
    }

    #[test]
    fn sign_convention_holds() {
        let w = Matrix::from_rows(&[&[-4.0, 1.0], &[2.0, -3.0], &[0.5, 0.5]]);
        let f = full_svd(&w).unwrap();
        for j in 0..3 {
            let col = f.u.column(j);
            let big = col
                .iter()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m });
            assert!(big >= 0.0);
        }
        assert!(f.s.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn rejects_non_finite() {
        let w = Matrix::from_rows(&[&[1.0, f64::INFINITY]]);
        assert!(matches!(full_svd(&w), Err(Error::NonFinite)));
    }
}
