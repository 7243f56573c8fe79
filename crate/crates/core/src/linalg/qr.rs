//! Thin Householder QR and the LQ factorization built on it.
//!
//! Signs are normalized so the triangular factor has a non-negative
//! diagonal, which makes both factorizations unique for full-rank input.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Thin QR factorization `M = Q·R` of a tall matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct QrFactors {
    /// rows × cols with orthonormal columns.
    pub q: Matrix,
    /// cols × cols upper triangular, non-negative diagonal.
    pub r: Matrix,
}

/// Thin LQ factorization `M = L·Q` of a wide matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LqFactors {
    /// rows × rows lower triangular, non-negative diagonal.
    pub l: Matrix,
    /// rows × cols with orthonormal rows.
    pub q: Matrix,
}

/// Diagonal entries of R at or below `‖M‖_F · max(rows, cols) · 2⁻⁵²` are
/// treated as rank deficiency.
fn rank_tolerance(m: &Matrix) -> f64 {
    m.frobenius_norm() * m.rows().max(m.cols()) as f64 * f64::EPSILON
}

pub fn qr_decompose(m: &Matrix) -> Result<QrFactors> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::Validation(format!(
            "thin QR needs rows >= cols, got {rows}x{cols}"
        )));
    }
    let tol = rank_tolerance(m);

    // Work column-major: column k of the working copy is work[k].
    let mut work: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j).into_vec()).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);

    for k in 0..cols {
        let x = &work[k][k..];
        let norm = dot(x, x).sqrt();
        if norm <= tol {
            return Err(Error::RankDeficient {
                index: k,
                value: norm,
                tolerance: tol,
            });
        }
        // alpha = -sign(x0)·‖x‖ avoids cancellation in v0 = x0 - alpha.
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);

        for col in work.iter_mut().skip(k) {
            let seg = &mut col[k..];
            let f = 2.0 * dot(&v, seg) / vnorm2;
            for (s, vi) in seg.iter_mut().zip(&v) {
                *s -= f * vi;
            }
        }
        // Exact values below the pivot after reflection.
        work[k][k] = alpha;
        for s in work[k][k + 1..].iter_mut() {
            *s = 0.0;
        }
        reflectors.push(v);
    }

    let mut r = Matrix::zeros(cols, cols);
    for (j, col) in work.iter().enumerate() {
        for i in 0..=j {
            r.set(i, j, col[i]);
        }
    }

    // Q = H_0 H_1 … H_{c-1} applied to the leading identity slab.
    let mut q_cols: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; rows];
            e[j] = 1.0;
            e
        })
        .collect();
    for (k, v) in reflectors.iter().enumerate().rev() {
        let vnorm2 = dot(v, v);
        for col in q_cols.iter_mut() {
            let seg = &mut col[k..];
            let f = 2.0 * dot(v, seg) / vnorm2;
            if f == 0.0 {
                continue;
            }
            for (s, vi) in seg.iter_mut().zip(v) {
                *s -= f * vi;
            }
        }
    }

    // Force diag(R) >= 0 by flipping matching rows of R and columns of Q.
    for k in 0..cols {
        if r.get(k, k) < 0.0 {
            for j in k..cols {
                r.set(k, j, -r.get(k, j));
            }
            for s in q_cols[k].iter_mut() {
                *s = -*s;
            }
        }
    }

    let mut q = Matrix::zeros(rows, cols);
    for (j, col) in q_cols.iter().enumerate() {
        q.set_column(j, col);
    }
    Ok(QrFactors { q, r })
}

/// LQ as the transpose of the QR of `Mᵀ`.
pub fn lq_decompose(m: &Matrix) -> Result<LqFactors> {
    if m.cols() < m.rows() {
        return Err(Error::Validation(format!(
            "thin LQ needs cols >= rows, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let QrFactors { q, r } = qr_decompose(&m.transpose())?;
    Ok(LqFactors {
        l: r.transpose(),
        q: q.transpose(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn gram_defect(q: &Matrix) -> f64 {
        let g = q.transpose().matmul(q).unwrap();
        g.sub(&Matrix::identity(g.rows())).unwrap().frobenius_norm()
    }

    #[test]
    fn qr_of_identity_is_identity() {
        let f = qr_decompose(&Matrix::identity(3)).unwrap();
        assert_eq!(f.q, Matrix::identity(3));
        assert_eq!(f.r, Matrix::identity(3));
    }

    #[test]
    fn qr_of_single_column() {
        let f = qr_decompose(&Matrix::from_rows(&[[3.0], [4.0]]).unwrap()).unwrap();
        assert!((f.q.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((f.q.get(1, 0) - 0.8).abs() < 1e-15);
        assert!((f.r.get(0, 0) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn qr_random_tall() {
        let m = gaussian(6, 2, 11);
        let f = qr_decompose(&m).unwrap();
        let recon = f.q.matmul(&f.r).unwrap();
        assert!(recon.sub(&m).unwrap().frobenius_norm() <= 1e-12 * m.frobenius_norm());
        assert!(gram_defect(&f.q) <= 1e-12);
        for i in 0..2 {
            assert!(f.r.get(i, i) >= 0.0);
        }
        assert_eq!(f.r.get(1, 0), 0.0);
    }

    #[test]
    fn qr_negative_pivot_is_normalized() {
        let m = Matrix::from_rows(&[[-2.0, 1.0], [0.0, -3.0], [0.0, 0.0]]).unwrap();
        let f = qr_decompose(&m).unwrap();
        assert!((f.r.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((f.r.get(1, 1) - 3.0).abs() < 1e-15);
        assert!(f.q.matmul(&f.r).unwrap().sub(&m).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn qr_rejects_rank_deficient() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
        assert!(matches!(
            qr_decompose(&m),
            Err(Error::RankDeficient { index: 1, .. })
        ));
        assert!(matches!(
            qr_decompose(&Matrix::zeros(3, 2)),
            Err(Error::RankDeficient { index: 0, .. })
        ));
    }

    #[test]
    fn qr_rejects_wide_input() {
        assert!(matches!(
            qr_decompose(&Matrix::zeros(2, 3)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn lq_of_identity_is_identity() {
        let f = lq_decompose(&Matrix::identity(2)).unwrap();
        assert_eq!(f.l, Matrix::identity(2));
        assert_eq!(f.q, Matrix::identity(2));
    }

    #[test]
    fn lq_of_single_row() {
        let f = lq_decompose(&Matrix::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        assert!((f.l.get(0, 0) - 5.0).abs() < 1e-15);
        assert!((f.q.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((f.q.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn lq_random_wide() {
        let m = gaussian(2, 7, 5);
        let f = lq_decompose(&m).unwrap();
        let recon = f.l.matmul(&f.q).unwrap();
        assert!(recon.sub(&m).unwrap().frobenius_norm() <= 1e-12 * m.frobenius_norm());
        assert!(gram_defect(&f.q.transpose()) <= 1e-12);
        assert_eq!(f.l.get(0, 1), 0.0);
        assert!(f.l.get(0, 0) >= 0.0 && f.l.get(1, 1) >= 0.0);
    }
}
