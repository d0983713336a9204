//! Dense linear algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Number of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let s = singular_values(m);
    rank_of(&s, rel_tol)
}

pub fn rank_of(sorted_desc: &[f64], rel_tol: f64) -> usize {
    match sorted_desc.first() {
        Some(&smax) if smax > 0.0 => sorted_desc.iter().filter(|&&x| x > rel_tol * smax).count(),
        _ => 0,
    }
}

/// Scales every column to unit Euclidean norm. Returns the scaled matrix and
/// the column norms (zero columns keep norm 1).
pub fn equilibrate_columns(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mut out = m.clone();
    let mut norms = DVector::from_element(m.ncols(), 1.0);
    for j in 0..m.ncols() {
        let n = m.column(j).norm();
        if n > 0.0 {
            out.column_mut(j).scale_mut(1.0 / n);
            norms[j] = n;
        }
    }
    (out, norms)
}

/// Rank after column equilibration; insensitive to the physical units of
/// individual columns.
pub fn scaled_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    numerical_rank(&equilibrate_columns(m).0, rel_tol)
}

/// Least-squares solution `x = A^+ b` with singular values below
/// `rel_tol * sigma_max` of the column-equilibrated matrix discarded.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> Result<(DVector<f64>, usize)> {
    if a.nrows() != b.len() {
        return Err(Error::Dimension(format!(
            "pinv_solve: {} rows vs rhs of length {}",
            a.nrows(),
            b.len()
        )));
    }
    let (scaled, norms) = equilibrate_columns(a);
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = rel_tol * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let y = svd
        .solve(b, eps)
        .map_err(|e| Error::Singular(format!("pseudo-inverse: {e}")))?;
    Ok((y.component_div(&norms), rank))
}

/// Full-rank least squares `min ‖A x - b‖` by Householder QR of the
/// column-equilibrated matrix.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != b.len() || a.nrows() < a.ncols() {
        return Err(Error::Dimension(format!(
            "lstsq: {}x{} with rhs of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let (scaled, norms) = equilibrate_columns(a);
    let qr = scaled.qr();
    let qtb = qr.q().tr_mul(b);
    let y = qr
        .r()
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::Singular("rank-deficient least-squares system".into()))?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("rank-deficient least-squares system".into()));
    }
    Ok(y.component_div(&norms))
}

/// Orthonormal basis of the null space of `m`, from the full right singular
/// basis of `m` padded with zero rows to a square matrix.
pub fn null_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut sq = DMatrix::zeros(r.max(c), c);
    sq.view_mut((0, 0), (r, c)).copy_from(m);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= rel_tol * smax)
        .collect();
    let mut out = DMatrix::zeros(c, keep.len());
    for (k, &i) in keep.iter().enumerate() {
        out.column_mut(k).copy_from(&vt.row(i).transpose());
    }
    out
}

/// Solves `A X = B` for symmetric positive definite `A` after symmetric
/// Jacobi scaling. Falls back to LU when Cholesky fails.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Dimension(format!(
            "spd_solve: {}x{} with rhs {} rows",
            n,
            a.ncols(),
            b.nrows()
        )));
    }
    let d = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let x = a[(i, i)].abs();
            if x > 0.0 {
                1.0 / x.sqrt()
            } else {
                1.0
            }
        }),
    );
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * d[i] * d[j]);
    let rhs = DMatrix::from_fn(n, b.ncols(), |i, j| b[(i, j)] * d[i]);
    let y = match scaled.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => scaled
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("symmetric system is singular".into()))?,
    };
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite solution of symmetric system".into()));
    }
    Ok(DMatrix::from_fn(n, b.ncols(), |i, j| y[(i, j)] * d[i]))
}

/// Inverse of a symmetric positive definite matrix (see [`spd_solve`]).
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = spd_solve(a, &DMatrix::identity(a.nrows(), a.nrows()))?;
    Ok(symmetrize(&inv))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// 2-norm condition number from singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let s = singular_values(a);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

pub fn relative_error(estimate: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    let n = truth.norm();
    let diff = (estimate - truth).norm();
    if n > 0.0 {
        diff / n
    } else {
        diff
    }
}

pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = b.norm();
    let diff = (a - b).norm();
    if n > 0.0 {
        diff / n
    } else {
        diff
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rank_of_duplicate_rows() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0]);
        assert_eq!(numerical_rank(&m, 1e-10), 2);
    }

    #[test]
    fn scaled_rank_ignores_units() {
        let m = DMatrix::from_row_slice(3, 2, &[1e6, 1e-6, 2e6, 3e-6, 3e6, 1e-6]);
        assert_eq!(scaled_rank(&m, 1e-8), 2);
    }

    #[test]
    fn null_space_of_wide_matrix() {
        let m = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let o = null_space(&m, 1e-10);
        assert_eq!(o.ncols(), 2);
        assert!((&m * &o).norm() < 1e-12);
        assert_relative_eq!(o.transpose() * &o, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn pinv_matches_normal_equations() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 400.0, 1.0, 410.0, 1.0, 390.0, 1.0, 405.0]);
        let b = DVector::from_row_slice(&[1.0, 2.0, 0.5, 1.7]);
        let (x, rank) = pinv_solve(&a, &b, 1e-10).unwrap();
        assert_eq!(rank, 2);
        let ata = a.transpose() * &a;
        let direct = ata.lu().solve(&(a.transpose() * &b)).unwrap();
        assert_relative_eq!(x, direct, max_relative = 1e-9);
    }

    #[test]
    fn spd_solve_badly_scaled() {
        let a = DMatrix::from_row_slice(2, 2, &[1e12, 1e3, 1e3, 1e-2]);
        let x = DMatrix::from_row_slice(2, 1, &[1e-6, 5.0]);
        let b = &a * &x;
        let got = spd_solve(&a, &b).unwrap();
        assert_relative_eq!(got, x, max_relative = 1e-9);
    }
}
