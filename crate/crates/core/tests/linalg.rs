use proptest::prelude::*;
use toplora::linalg::{lq_decompose, numerical_rank, qr_decompose, singular_values};
use toplora::Matrix;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1.0f64..1.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
    })
}

fn orthonormality_error(q: &Matrix, columns: bool) -> f64 {
    let g = if columns { q.transpose().matmul(q) } else { q.matmul(&q.transpose()) }.unwrap();
    let k = g.rows();
    g.sub(&Matrix::identity(k)).unwrap().max_abs()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(s: &Matrix) -> Vec<f64> {
    let n = s.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| s.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
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
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - sn * akq;
                    a[k][q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - sn * aqk;
                    a[q][k] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn qr_is_orthonormal_and_reconstructs(m in matrix(3..=9, 1..=3)) {
        let f = qr_decompose(&m).unwrap();
        prop_assert!(orthonormality_error(&f.q, true) <= 1e-12);
        for i in 0..f.r.rows() {
            prop_assert!(f.r.get(i, i) > 0.0);
            for j in 0..i {
                prop_assert_eq!(f.r.get(i, j), 0.0);
            }
        }
        let back = f.q.matmul(&f.r).unwrap();
        prop_assert!(back.relative_error(&m, 1e-300).unwrap() <= 1e-12);
    }

    #[test]
    fn lq_is_orthonormal_and_reconstructs(m in matrix(1..=3, 3..=9)) {
        let f = lq_decompose(&m).unwrap();
        prop_assert!(orthonormality_error(&f.q, false) <= 1e-12);
        for i in 0..f.l.rows() {
            prop_assert!(f.l.get(i, i) > 0.0);
            for j in i + 1..f.l.cols() {
                prop_assert_eq!(f.l.get(i, j), 0.0);
            }
        }
        let back = f.l.matmul(&f.q).unwrap();
        prop_assert!(back.relative_error(&m, 1e-300).unwrap() <= 1e-12);
    }

    #[test]
    fn singular_values_match_gram_eigenvalues(m in matrix(1..=8, 1..=8)) {
        let sv = singular_values(&m);
        let k = m.rows().min(m.cols());
        prop_assert_eq!(sv.len(), k);
        for w in sv.as_slice().windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        // Eigenvalues of the smaller Gram matrix carry the nonzero spectrum.
        let gram = if m.rows() >= m.cols() { m.transpose().matmul(&m) } else { m.matmul(&m.transpose()) }.unwrap();
        let ev = symmetric_eigenvalues(&gram);
        for (s, e) in sv.as_slice().iter().zip(&ev) {
            prop_assert!((s - e.max(0.0).sqrt()).abs() <= 1e-10, "{} vs {}", s, e);
        }
    }

    #[test]
    fn product_rank_is_bounded_by_inner_dimension(
        r in 1usize..=4,
        seed in prop::collection::vec(-1.0f64..1.0, 8 * 4 + 4 * 8),
    ) {
        let b = Matrix::from_fn(8, r, |i, j| seed[i * 4 + j]);
        let a = Matrix::from_fn(r, 8, |i, j| seed[32 + i * 8 + j]);
        prop_assert!(numerical_rank(&b.matmul(&a).unwrap()) <= r);
    }
}

#[test]
fn qr_signs_make_factorization_unique() {
    let m = Matrix::from_rows(&[[-2.0, 1.0], [0.0, -3.0], [1.0, 1.0]]).unwrap();
    let f1 = qr_decompose(&m).unwrap();
    let f2 = qr_decompose(&m.scale(1.0)).unwrap();
    assert_eq!(f1, f2);
    assert!(f1.r.get(0, 0) > 0.0 && f1.r.get(1, 1) > 0.0);
}
