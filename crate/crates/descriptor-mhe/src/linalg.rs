//! Small dense linear-algebra helpers shared by the filter and the solvers.
//!
//! Everything here wraps nalgebra; the point is to fix the conventions once:
//! Cholesky-based SPD solves with a single retry after a tiny diagonal
//! shift, SVD-based rank decisions with a relative tolerance, and the
//! weighted squared norm `||z||^2_W = z' W^{-1} z` used by every objective
//! term in the crate.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Relative singular-value cutoff for rank decisions.
pub const RANK_REL_TOL: f64 = 1e-12;

/// Force exact symmetry, `(M + M') / 2`. Repeated covariance updates drift
/// off the symmetric manifold by rounding; every update re-projects.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let mt = m.transpose();
    *m += mt;
    *m *= 0.5;
}

/// Cholesky factorization of an SPD matrix.
///
/// On failure, retries once with a diagonal shift of `1e-12 * trace / n`
/// (rounding-level regularization for matrices that are SPD in exact
/// arithmetic); a second failure is an error.
pub fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    debug_assert_eq!(m.nrows(), m.ncols());
    if let Some(chol) = nalgebra::Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let n = m.nrows().max(1) as f64;
    let jitter = (m.trace() / n).abs().max(1.0) * 1e-12;
    let mut shifted = m.clone();
    for i in 0..m.nrows() {
        shifted[(i, i)] += jitter;
    }
    nalgebra::Cholesky::new(shifted)
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{what} ({}x{})", m.nrows(), m.ncols())))
}

/// Solve `M X = B` for SPD `M`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(spd_cholesky(m, what)?.solve(b))
}

/// Inverse of an SPD matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = spd_cholesky(m, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// `z' W^{-1} z` for SPD weight `W`.
pub fn weighted_sq_norm(z: &DVector<f64>, w: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = spd_cholesky(w, what)?;
    let sol = chol.solve(z);
    Ok(z.dot(&sol))
}

/// Numerical rank: singular values at or below `max(nrows, ncols) * sigma_max
/// * 1e-12` count as zero.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return 0;
    }
    let tol = m.nrows().max(m.ncols()) as f64 * smax * RANK_REL_TOL;
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// Moore-Penrose pseudoinverse with the same singular-value cutoff as
/// [`numerical_rank`].
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = m.nrows().max(m.ncols()) as f64 * smax * RANK_REL_TOL;
    svd.pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

/// Orthonormal basis of the null space of `M` (columns), possibly empty.
pub fn null_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let ncols = m.ncols();
    if ncols == 0 {
        return DMatrix::zeros(0, 0);
    }
    // Pad with zero rows so the (thin) SVD carries a complete V; the padding
    // adds exact-zero singular values, never changing the null space.
    let padded = if m.nrows() < ncols {
        let mut p = DMatrix::zeros(ncols, ncols);
        p.view_mut((0, 0), (m.nrows(), ncols)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("svd requested v_t");
    let smax = svd.singular_values.max();
    let tol = m.nrows().max(ncols) as f64 * smax * RANK_REL_TOL;
    // Singular values sorted descending: V rows past the rank span the null
    // space and are already orthonormal.
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let mut out = DMatrix::zeros(ncols, ncols - rank);
    for (j, i) in (rank..ncols).enumerate() {
        out.set_column(j, &vt.row(i).transpose());
    }
    out
}

/// Largest singular value (induced 2-norm).
pub fn induced_2_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Spectral radius (largest eigenvalue magnitude).
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn symmetrize_projects() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 3.0]);
        symmetrize(&mut m);
        assert_eq!(m[(0, 1)], 3.0);
        assert_eq!(m[(1, 0)], 3.0);
    }

    #[test]
    fn spd_solve_matches_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let x = spd_solve(&m, &b, "m").unwrap();
        let r = &m * &x - &b;
        assert!(r.norm() < 1e-14);
    }

    #[test]
    fn spd_cholesky_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(spd_cholesky(&m, "indefinite").is_err());
    }

    #[test]
    fn spd_cholesky_jitter_recovers_semidefinite() {
        // Rank-1 PSD matrix: plain Cholesky fails, jittered succeeds.
        let v = DVector::from_column_slice(&[1.0, 2.0]);
        let m = &v * v.transpose();
        assert!(spd_cholesky(&m, "psd").is_ok());
    }

    #[test]
    fn weighted_norm_is_inverse_weighted() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let z = DVector::from_column_slice(&[2.0, 2.0]);
        // z' W^{-1} z = 4/2 + 4/4 = 3.
        assert_relative_eq!(weighted_sq_norm(&z, &w, "w").unwrap(), 3.0, max_relative = 1e-14);
    }

    #[test]
    fn rank_of_outer_product() {
        let v = DVector::from_column_slice(&[1.0, -1.0, 2.0]);
        let m = &v * v.transpose();
        assert_eq!(numerical_rank(&m), 1);
        assert_eq!(numerical_rank(&DMatrix::<f64>::identity(3, 3)), 3);
        assert_eq!(numerical_rank(&DMatrix::<f64>::zeros(3, 2)), 0);
    }

    #[test]
    fn pinv_least_squares() {
        // Overdetermined consistent system.
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let x = pinv(&a) * &b;
        assert_relative_eq!(x[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(x[1], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn null_basis_wide_matrix() {
        // 1x3 row: null space has dimension 2, orthogonal to the row.
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let nb = null_basis(&m);
        assert_eq!(nb.ncols(), 2);
        let prod = &m * &nb;
        assert!(prod.norm() < 1e-12);
        let gram = nb.transpose() * &nb;
        assert!((gram - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn null_basis_full_rank_is_empty() {
        let m = DMatrix::<f64>::identity(3, 3);
        assert_eq!(null_basis(&m).ncols(), 0);
    }

    #[test]
    fn norms() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -5.0]);
        assert_relative_eq!(induced_2_norm(&m), 5.0, max_relative = 1e-14);
        assert_relative_eq!(spectral_radius(&m), 5.0, max_relative = 1e-14);
        // Non-normal matrix: spectral radius 0, induced norm 1.
        let n = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_relative_eq!(spectral_radius(&n), 0.0, epsilon = 1e-12);
        assert_relative_eq!(induced_2_norm(&n), 1.0, max_relative = 1e-14);
    }
}
