//! Dense linear-algebra helpers shared by the recursions, the certificate
//! machinery and the grid solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest Cholesky pivot accepted for `m` to count as positive definite.
pub fn pd_tolerance(m: &Mat) -> f64 {
    let n = m.nrows().max(1) as f64;
    1e-12 * (m.trace() / n).max(1.0)
}

/// Cholesky pivots of the symmetrized matrix, stopping at the first pivot
/// below tolerance. Returns `None` for non-square input.
fn cholesky_pivots(m: &Mat) -> Option<(bool, f64)> {
    if !m.is_square() {
        return None;
    }
    let a = symmetrize(m);
    let n = a.nrows();
    let tol = pd_tolerance(&a);
    let mut l = Mat::zeros(n, n);
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        min_pivot = min_pivot.min(d);
        if !(d >= tol) {
            return Some((false, d));
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Some((true, min_pivot))
}

/// Positive-definiteness test: Cholesky of `(M + Mᵀ)/2` with every pivot at
/// least `1e-12 · max(1, tr(M)/n)`.
pub fn is_positive_definite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite()) && matches!(cholesky_pivots(m), Some((true, _)))
}

/// Cholesky factor of the symmetrized matrix, gated by [`is_positive_definite`].
pub fn cholesky(m: &Mat) -> Option<Cholesky<f64, Dyn>> {
    if !is_positive_definite(m) {
        return None;
    }
    Cholesky::new(symmetrize(m))
}

/// Solves `M X = rhs` for symmetric positive definite `M`.
pub fn spd_solve(m: &Mat, rhs: &Mat) -> Option<Mat> {
    cholesky(m).map(|c| c.solve(rhs))
}

/// Symmetrized inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &Mat) -> Option<Mat> {
    let n = m.nrows();
    spd_solve(m, &Mat::identity(n, n)).map(|x| symmetrize(&x))
}

/// Smallest eigenvalue of the symmetrized matrix.
pub fn min_eigenvalue(m: &Mat) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of the symmetrized matrix.
pub fn max_eigenvalue(m: &Mat) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Singular-value invertibility test: `σ_min > 1e-12 · σ_max`.
pub fn is_invertible(m: &Mat) -> bool {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > 1e-12 * max
}

/// `xᵀ M x`.
pub fn quad_form(m: &Mat, x: &Vector) -> f64 {
    x.dot(&(m * x))
}

/// A symmetric square root-like factor `F` with `F Fᵀ = M` for positive
/// semidefinite `M`; negative eigenvalues from round-off are clipped to zero.
pub fn psd_factor(m: &Mat) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(m));
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&sqrt_vals)
}

pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".into());
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err("non-finite matrix entry".into());
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Serde adapters writing matrices as row-major nested arrays.
pub mod serde_rows {
    use super::{mat_from_rows, mat_to_rows, Mat};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        mat_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        mat_from_rows(&rows).map_err(D::Error::custom)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(mat_to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Mat>, D::Error> {
            let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            all.iter()
                .map(|rows| mat_from_rows(rows).map_err(D::Error::custom))
                .collect()
        }
    }

    pub mod opt_vec {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[Option<Mat>], s: S) -> Result<S::Ok, S::Error> {
            ms.iter()
                .map(|m| m.as_ref().map(mat_to_rows))
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<Mat>>, D::Error> {
            let all = Vec::<Option<Vec<Vec<f64>>>>::deserialize(d)?;
            all.iter()
                .map(|rows| match rows {
                    Some(r) => mat_from_rows(r).map(Some).map_err(D::Error::custom),
                    None => Ok(None),
                })
                .collect()
        }
    }
}
