//! Singular values by one-sided (Hestenes) Jacobi rotations, and numerical rank.

use super::matrix::{dot, Matrix, Vector};

const MAX_SWEEPS: usize = 80;

/// Singular values of `m` in non-increasing order (`min(rows, cols)` of them).
pub fn singular_values(m: &Matrix) -> Vector {
    // Orthogonalize the columns of the taller orientation.
    let work = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let n = work.cols();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| work.column(j).into_vec()).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                for (a, b) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Vector::from_vec_unchecked(sv)
}

/// Number of singular values above `σ_max · max(rows, cols) · 2⁻⁵²`.
pub fn numerical_rank(m: &Matrix) -> usize {
    let sv = singular_values(m);
    let sigma_max = sv.as_slice().first().copied().unwrap_or(0.0);
    let tol = sigma_max * m.rows().max(m.cols()) as f64 * f64::EPSILON;
    sv.as_slice().iter().filter(|&&s| s > tol).count()
}
