//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vect = DVector<f64>;

/// Cholesky factorization or `NotPositiveDefinite`.
pub fn cholesky(m: &Mat, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!(
            "{what}: non-finite entries"
        )));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn log_det_chol(ch: &Cholesky<f64, Dyn>) -> f64 {
    let l = ch.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Average `m` with its transpose.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// True when `m` is symmetric and positive semidefinite up to a relative tolerance.
pub fn is_psd(m: &Mat, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-300);
    if (m - m.transpose()).amax() > tol * scale {
        return false;
    }
    min_eigenvalue(m) >= -tol * scale
}

/// Symmetric inverse square root `A^{-1/2}` of a positive definite matrix.
pub fn inv_sqrt_spd(m: &Mat) -> Result<Mat> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig
        .eigenvalues
        .iter()
        .any(|&e| !(e > 0.0) || !e.is_finite())
    {
        return Err(Error::NotPositiveDefinite("information matrix".into()));
    }
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Factor `F` with `F Fᵀ = m` for a symmetric PSD matrix (negative
/// eigenvalues from rounding are clipped).
pub fn psd_factor(m: &Mat) -> Mat {
    if let Some(ch) = Cholesky::new(symmetrize(m)) {
        return ch.l();
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|e| e.max(0.0).sqrt()));
    eig.eigenvectors * d
}

/// Number of free entries of a p×p lower-triangular factor.
pub fn tri_len(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Log-Cholesky coordinates of a positive definite matrix: rows of the lower
/// factor with the diagonal on the log scale.
pub fn log_chol_pack(m: &Mat) -> Result<Vec<f64>> {
    let ch = cholesky(m, "log-Cholesky packing")?;
    Ok(pack_factor(&ch.l()))
}

/// Like [`log_chol_pack`] but lifts the eigenvalues of a semidefinite matrix
/// to at least `floor` first.
pub fn log_chol_pack_floor(m: &Mat, floor: f64) -> Vec<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|e| e.max(floor)));
    let lifted = symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose()));
    match log_chol_pack(&lifted) {
        Ok(v) => v,
        Err(_) => {
            let p = m.nrows();
            pack_factor(&Mat::from_diagonal_element(p, p, floor.sqrt()))
        }
    }
}

pub fn pack_factor(l: &Mat) -> Vec<f64> {
    let p = l.nrows();
    let mut v = Vec::with_capacity(tri_len(p));
    for i in 0..p {
        for j in 0..=i {
            v.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
        }
    }
    v
}

/// Lower factor from log-Cholesky coordinates.
pub fn unpack_factor(v: &[f64], p: usize) -> Mat {
    let mut l = Mat::zeros(p, p);
    let mut c = 0;
    for i in 0..p {
        for j in 0..=i {
            l[(i, j)] = if i == j { v[c].exp() } else { v[c] };
            c += 1;
        }
    }
    l
}

/// Chain rule from `dF/dΣ` (entries treated as independent) to log-Cholesky coordinates.
pub fn log_chol_chain(l: &Mat, g: &Mat, out: &mut [f64]) {
    let p = l.nrows();
    let dl = (g + g.transpose()) * l;
    let mut c = 0;
    for i in 0..p {
        for j in 0..=i {
            out[c] = if i == j {
                dl[(i, i)] * l[(i, i)]
            } else {
                dl[(i, j)]
            };
            c += 1;
        }
    }
}
