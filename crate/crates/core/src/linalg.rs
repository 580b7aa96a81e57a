use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Above this a square system is treated as singular.
pub const CONDITION_LIMIT: f64 = 1e8;

pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves a square system, refusing ill-conditioned ones.
pub fn solve_checked(a: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<(DVector<f64>, f64)> {
    let condition = condition_number(a);
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::Singular { what, condition });
    }
    let x = a.clone().lu().solve(b).ok_or(Error::Singular { what, condition })?;
    Ok((x, condition))
}

pub fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let tol = f64::EPSILON * a.nrows().max(a.ncols()) as f64 * svd.singular_values.max();
    svd.pseudo_inverse(tol).expect("both factors requested")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_matrix_refused() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            solve_checked(&a, &DVector::from_vec(vec![1.0, 1.0]), "test"),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn pseudo_inverse_of_rank_one() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = pseudo_inverse(&a);
        assert!((&a * &p * &a - &a).amax() < 1e-14);
        assert!((p[(0, 0)] - 0.25).abs() < 1e-15);
    }
}
