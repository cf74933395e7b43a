//! Small dense-matrix helpers: eigenvalue-based Hurwitz test and component-wise
//! absolute values.

use nalgebra::{Matrix3, SMatrix};

use crate::num::Real;

/// Largest real part among the eigenvalues of `m`.
pub fn max_real_eigenvalue<T: Real>(m: &Matrix3<T>) -> T {
    m.complex_eigenvalues().iter().map(|z| z.re).fold(
        T::min_value().unwrap_or(-T::one() / T::default_epsilon()),
        |a, b| a.max(b),
    )
}

pub fn is_hurwitz<T: Real>(m: &Matrix3<T>) -> bool {
    max_real_eigenvalue(m) < T::zero()
}

/// Routh-Hurwitz test on the characteristic polynomial
/// `s^3 + a2 s^2 + a1 s + a0` of a 3x3 matrix.
///
/// Independent of the eigen-solver; used to cross-check it.
pub fn routh_hurwitz_3<T: Real>(m: &Matrix3<T>) -> bool {
    let a2 = -m.trace();
    let a1 = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)] + m[(0, 0)] * m[(2, 2)]
        - m[(0, 2)] * m[(2, 0)]
        + m[(1, 1)] * m[(2, 2)]
        - m[(1, 2)] * m[(2, 1)];
    let a0 = -m.determinant();
    a2 > T::zero() && a0 > T::zero() && a2 * a1 > a0
}

/// Component-wise absolute value.
pub fn abs<T: Real, const R: usize, const C: usize>(m: &SMatrix<T, R, C>) -> SMatrix<T, R, C> {
    m.map(|v| v.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_matrices() {
        assert!(is_hurwitz(&Matrix3::<f64>::from_diagonal_element(-1.0)));
        assert!(!is_hurwitz(&Matrix3::<f64>::from_diagonal(
            &nalgebra::Vector3::new(-1.0, -2.0, 0.5)
        )));
        assert_eq!(
            max_real_eigenvalue(&Matrix3::<f64>::from_diagonal(&nalgebra::Vector3::new(
                -3.0, -2.0, -5.0
            ))),
            -2.0
        );
    }

    #[test]
    fn oscillatory_pair() {
        #[rustfmt::skip]
        let m = Matrix3::<f64>::new(
            -0.1, 10.0, 0.0,
            -10.0, -0.1, 0.0,
            0.0, 0.0, -1.0,
        );
        assert!((max_real_eigenvalue(&m) + 0.1).abs() < 1e-10);
        assert!(routh_hurwitz_3(&m));
    }

    proptest! {
        // Eigenvalue route and Routh-Hurwitz route agree away from the boundary.
        #[test]
        fn eigen_and_routh_agree(v in proptest::collection::vec(-5.0f64..5.0, 9)) {
            let m = Matrix3::from_row_slice(&v);
            let re = max_real_eigenvalue(&m);
            prop_assume!(re.abs() > 1e-6);
            prop_assert_eq!(re < 0.0, routh_hurwitz_3(&m));
        }
    }
}
