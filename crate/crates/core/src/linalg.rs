//! Dense decompositions on small matrices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_dmatrix(a: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.data())
}

/// Singular values of a matrix, in descending order.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    if a.shape().len() != 2 || a.len() == 0 {
        return Err(Error::Shape(format!("singular values of {:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(Error::InvalidArgument("singular values of a non-finite matrix".into()));
    }
    let mut s: Vec<f64> = to_dmatrix(a).singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream};

    /// Cyclic Jacobi eigenvalues of a symmetric matrix.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _sweep in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn matches_eigensolver_oracle() {
        let mut rng = stream(1, "svd");
        for (m, d) in [(4, 7), (6, 6), (16, 63), (9, 3)] {
            let a = Tensor::matrix(m, d, normal_vec(&mut rng, m * d)).unwrap();
            let s = singular_values(&a).unwrap();
            // eigenvalues of the smaller Gram matrix
            let gram = if m <= d { a.matmul(&a.transpose()).unwrap() } else { a.transpose().matmul(&a).unwrap() };
            let k = gram.rows();
            let rows: Vec<Vec<f64>> = (0..k).map(|i| gram.row(i).to_vec()).collect();
            let ev = jacobi_eigenvalues(rows);
            assert_eq!(s.len(), k);
            for (si, ei) in s.iter().zip(&ev) {
                let want = ei.max(0.0).sqrt();
                assert!((si - want).abs() <= 1e-8 * want.max(1e-12), "{m}x{d}: {si} vs {want}");
            }
        }
    }

    #[test]
    fn diagonal_and_orthogonal() {
        let d = Tensor::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, -1.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let s = singular_values(&d).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 2.0).abs() < 1e-14 && (s[2] - 1.0).abs() < 1e-14);
        let q = Tensor::from_rows(&[vec![0.6, 0.8], vec![-0.8, 0.6]]).unwrap();
        for v in singular_values(&q).unwrap() {
            assert!((v - 1.0).abs() < 1e-14);
        }
        assert!(singular_values(&Tensor::zeros(&[0, 3])).is_err());
    }
}
