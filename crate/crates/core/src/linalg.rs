//! Dense linear algebra shared by the solvers.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. The Moore-Penrose pseudoinverse is
//! computed from an SVD with a relative rank cutoff, so that degenerate blocks
//! such as the scalar `0` map to `0` exactly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative cutoff for the pseudoinverse.
pub const PINV_REL_TOL: f64 = 1e-12;

/// Inner matrices with a larger condition number are treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

/// A real symmetric matrix.
///
/// The constructor symmetrizes its argument, so every value of this type is
/// exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(Matrix);

impl SymMatrix {
    /// Wraps `m` after checking it is square, finite and symmetric to
    /// `tol` (relative to its Frobenius norm); stores `(m + mᵀ)/2`.
    pub fn new(m: Matrix, tol: f64) -> Result<Self> {
        if !m.is_square() {
            return Err(invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        check_finite(&m)?;
        if !is_symmetric(&m, tol) {
            return Err(invalid("matrix is not symmetric"));
        }
        Ok(SymMatrix(symmetrize(&m)))
    }

    /// Symmetrizes without checking.
    pub fn from_symmetrized(m: &Matrix) -> Self {
        SymMatrix(symmetrize(m))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(Matrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

pub fn check_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(invalid("matrix has non-finite entries"))
    }
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.norm()
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// `‖m − mᵀ‖_F ≤ tol · max(1, ‖m‖_F)`.
pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).norm() <= tol * m.norm().max(1.0)
}

/// Singular triplets `(σ, u, v)` with `σ > 0`, largest first.
///
/// Computed from the symmetric eigendecomposition of `[[0, M], [Mᵀ, 0]]`,
/// whose positive eigenvalues are the singular values of `M` with
/// eigenvectors `(u; v)/√2`. The Golub-Kahan SVD shipped with nalgebra 0.35
/// returns factors that do not recompose `M` for some 3×3 inputs; the
/// symmetric eigensolver does not have that problem.
fn singular_triplets(m: &Matrix) -> Vec<(f64, Vector, Vector)> {
    let (rows, cols) = m.shape();
    let mut aug = Matrix::zeros(rows + cols, rows + cols);
    aug.view_mut((0, rows), (rows, cols)).copy_from(m);
    aug.view_mut((rows, 0), (cols, rows)).copy_from(&m.transpose());
    let eig = SymmetricEigen::new(aug);
    let mut out: Vec<(f64, Vector, Vector)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 0.0)
        .map(|(k, &l)| {
            let w = eig.eigenvectors.column(k);
            let u = w.rows(0, rows).into_owned() * std::f64::consts::SQRT_2;
            let v = w.rows(rows, cols).into_owned() * std::f64::consts::SQRT_2;
            (l, u, v)
        })
        .collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out.truncate(rows.min(cols));
    out
}

/// Moore-Penrose pseudoinverse via singular triplets.
///
/// Singular values at or below `rel_tol · σ_max` are dropped. A zero matrix
/// (σ_max = 0) has the zero matrix of transposed shape as its pseudoinverse.
pub fn pinv(m: &Matrix, rel_tol: f64) -> Result<Matrix> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(invalid(format!("rel_tol must lie in (0, 1), got {rel_tol}")));
    }
    check_finite(m)?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(invalid("empty matrix"));
    }
    let triplets = singular_triplets(m);
    let cutoff = rel_tol * triplets.first().map_or(0.0, |t| t.0);
    let mut out = Matrix::zeros(cols, rows);
    for (sigma, u, v) in triplets.iter().filter(|t| t.0 > cutoff) {
        out += v * u.transpose() / *sigma;
    }
    Ok(out)
}

/// Numerical test of `R(n) ⊆ R(m)`: `‖(I − M M†) N‖_F ≤ tol · max(1, ‖N‖_F)`.
pub fn range_included(n: &Matrix, m: &Matrix, tol: f64) -> Result<bool> {
    if n.nrows() != m.nrows() {
        return Err(invalid(format!(
            "range test needs equal row counts, got {} and {}",
            n.nrows(),
            m.nrows()
        )));
    }
    if !(tol > 0.0) {
        return Err(invalid("range tolerance must be positive"));
    }
    check_finite(m)?;
    // Project with the retained left singular vectors; forming M M† instead
    // loses accuracy when a singular value sits just above the cutoff.
    let triplets = singular_triplets(m);
    let cutoff = PINV_REL_TOL * triplets.first().map_or(0.0, |t| t.0);
    let mut residual = n.clone();
    for (_, u, _) in triplets.iter().filter(|t| t.0 > cutoff) {
        let coeffs = u.transpose() * n;
        residual -= u * coeffs;
    }
    Ok(residual.norm() <= tol * n.norm().max(1.0))
}

/// Smallest eigenvalue of the symmetric part of a square matrix.
pub fn min_eigenvalue(m: &Matrix) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// 2-norm condition number; `+∞` for singular matrices.
pub fn condition_number(m: &Matrix) -> f64 {
    let triplets = singular_triplets(m);
    let max = triplets.first().map_or(0.0, |t| t.0);
    let min = if triplets.len() < m.nrows().min(m.ncols()) {
        0.0
    } else {
        triplets.last().map_or(0.0, |t| t.0)
    };
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// True inverse of a square matrix whose condition number is at most
/// [`MAX_CONDITION`]; `s` tags the error with the time it occurred at.
pub fn guarded_inverse(m: &Matrix, s: f64) -> Result<Matrix> {
    if m.nrows() == 1 {
        let x = m[(0, 0)];
        if x == 0.0 || !x.is_finite() {
            return Err(Error::DegeneratePerturbation {
                s,
                condition: f64::INFINITY,
            });
        }
        return Ok(Matrix::from_element(1, 1, 1.0 / x));
    }
    let condition = condition_number(m);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::DegeneratePerturbation { s, condition });
    }
    m.clone()
        .try_inverse()
        .ok_or(Error::DegeneratePerturbation { s, condition })
}

/// Parses a matrix written as semicolon-separated rows of comma-separated
/// reals, e.g. `1, 0; 0, 1`.
pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| invalid(format!("bad number '{}'", x.trim())))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(format!("ragged matrix '{text}'")));
    }
    let m = Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    check_finite(&m)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mp_residuals(m: &Matrix, p: &Matrix) -> [f64; 4] {
        [
            (m * p * m - m).norm(),
            (p * m * p - p).norm(),
            ((m * p).transpose() - m * p).norm(),
            ((p * m).transpose() - p * m).norm(),
        ]
    }

    #[test]
    fn rank_two_symmetric_matrix_is_handled() {
        // Golub-Kahan SVD in nalgebra 0.35 fails to recompose this matrix.
        let d = [
            3.0373766013676007, 0.5528269839013371, -2.6804867580402543,
            0.5528269839013373, 4.929063321308799, 0.07852633398481146,
            -2.6804867580402547, 0.07852633398481157, 2.4319718986497945,
        ];
        let m = Matrix::from_column_slice(3, 3, &d);
        let p = pinv(&m, PINV_REL_TOL).unwrap();
        let r = mp_residuals(&m, &p);
        assert!(r.iter().all(|&x| x < 1e-12), "{r:?}");
        assert!(range_included(&m, &m, 1e-12).unwrap());
        assert!(condition_number(&m) > 1e14);
    }

    #[test]
    fn pinv_of_scalar_zero_is_zero() {
        let z = Matrix::zeros(1, 1);
        assert_eq!(pinv(&z, PINV_REL_TOL).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn pinv_of_identity() {
        let i = Matrix::identity(3, 3);
        for tol in [1e-12, 1e-6, 0.5] {
            assert!((pinv(&i, tol).unwrap() - &i).norm() < 1e-14);
        }
    }

    #[test]
    fn pinv_of_singular_diagonal() {
        let d = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = pinv(&d, PINV_REL_TOL).unwrap();
        assert!((p - Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn pinv_rejects_nonfinite_and_bad_tol() {
        let m = Matrix::from_element(1, 1, f64::NAN);
        assert!(matches!(pinv(&m, 1e-12), Err(Error::InvalidInput(_))));
        assert!(pinv(&Matrix::identity(2, 2), 0.0).is_err());
        assert!(pinv(&Matrix::identity(2, 2), 1.0).is_err());
    }

    #[test]
    fn pinv_rectangular() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        let p = pinv(&m, PINV_REL_TOL).unwrap();
        assert_eq!(p.shape(), (3, 2));
        for r in mp_residuals(&m, &p) {
            assert!(r < 1e-10, "{r}");
        }
    }

    #[test]
    fn range_examples() {
        let one = Matrix::from_element(1, 1, 1.0);
        let zero = Matrix::zeros(1, 1);
        assert!(!range_included(&one, &zero, 1e-9).unwrap());
        assert!(range_included(&zero, &one, 1e-9).unwrap());
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(range_included(&m, &m, 1e-9).unwrap());
        let zero2 = Matrix::zeros(2, 3);
        assert!(range_included(&zero2, &m, 1e-9).unwrap());
    }

    #[test]
    fn range_shape_mismatch() {
        let a = Matrix::zeros(2, 1);
        let b = Matrix::zeros(3, 3);
        assert!(range_included(&a, &b, 1e-9).is_err());
    }

    #[test]
    fn guarded_inverse_flags_singular() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            guarded_inverse(&m, 0.3),
            Err(Error::DegeneratePerturbation { .. })
        ));
        assert!(guarded_inverse(&Matrix::zeros(1, 1), 0.0).is_err());
        let inv = guarded_inverse(&Matrix::from_element(1, 1, 4.0), 0.0).unwrap();
        assert_eq!(inv[(0, 0)], 0.25);
    }

    #[test]
    fn parse_matrix_rows() {
        let m = parse_matrix("1, 2; 3, 4").unwrap();
        assert_eq!(m, Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(parse_matrix("1, 2; 3").is_err());
        assert!(parse_matrix("x").is_err());
    }

    #[test]
    fn sym_matrix_rejects_asymmetric() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(SymMatrix::new(m, 1e-12).is_err());
    }

    fn small_matrix() -> impl Strategy<Value = Matrix> {
        (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-3.0f64..3.0, r * c)
                .prop_map(move |v| Matrix::from_row_slice(r, c, &v))
        })
    }

    fn rank_deficient() -> impl Strategy<Value = Matrix> {
        (1usize..4, 1usize..4, 1usize..3).prop_flat_map(|(r, c, k)| {
            (
                proptest::collection::vec(-2.0f64..2.0, r * k),
                proptest::collection::vec(-2.0f64..2.0, k * c),
            )
                .prop_map(move |(a, b)| {
                    Matrix::from_row_slice(r, k, &a) * Matrix::from_row_slice(k, c, &b)
                })
        })
    }

    fn psd_pair() -> impl Strategy<Value = (Matrix, Matrix)> {
        // N = F G, M = F Fᵀ + F H Hᵀ Fᵀ: R(N) ⊆ R(F) = R(M).
        (2usize..4, 1usize..3).prop_flat_map(|(n, k)| {
            (
                proptest::collection::vec(-2.0f64..2.0, n * k),
                proptest::collection::vec(-2.0f64..2.0, k * 2),
                proptest::collection::vec(-1.0f64..1.0, k * k),
            )
                .prop_map(move |(f, g, h)| {
                    let f = Matrix::from_row_slice(n, k, &f);
                    let g = Matrix::from_row_slice(k, 2, &g);
                    let h = Matrix::from_row_slice(k, k, &h);
                    let m = &f * f.transpose() + &f * &h * h.transpose() * f.transpose();
                    (&f * g, m)
                })
        })
    }

    proptest! {
        #[test]
        fn moore_penrose_identities(m in prop_oneof![small_matrix(), rank_deficient()]) {
            let p = pinv(&m, PINV_REL_TOL).unwrap();
            let scale = m.norm().max(1.0);
            let r = mp_residuals(&m, &p);
            prop_assert!(r[0] <= 1e-9 * scale, "M M† M − M: {}", r[0]);
            // The other three identities are homogeneous in M†, scale accordingly.
            let pscale = scale * p.norm().max(1.0);
            for r in &r[1..] {
                prop_assert!(*r <= 1e-9 * pscale * p.norm().max(1.0), "residual {}", r);
            }
        }

        #[test]
        fn pinv_is_involutive_on_full_rank(v in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let m = Matrix::from_row_slice(2, 2, &v) + Matrix::identity(2, 2) * 7.0;
            let back = pinv(&pinv(&m, PINV_REL_TOL).unwrap(), PINV_REL_TOL).unwrap();
            prop_assert!((back - &m).norm() <= 1e-9 * m.norm().max(1.0));
        }

        #[test]
        fn range_inclusion_holds_by_construction((n, m) in psd_pair()) {
            prop_assert!(range_included(&n, &m, 1e-7).unwrap());
            // Transitivity: R(N) ⊆ R(M) ⊆ R(M + N Nᵀ).
            let bigger = &m + &n * n.transpose();
            prop_assert!(range_included(&m, &bigger, 1e-7).unwrap());
            prop_assert!(range_included(&n, &bigger, 1e-7).unwrap());
        }
    }
}
