//! Fréchet distance between Gaussian fits and unbiased polynomial-kernel MMD²
//! over feature rows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{CoreError, Result};
use duge_tensor::Tensor;

/// Eigenvalues below this are treated as zero when taking square roots.
pub const EIGEN_FLOOR: f64 = 1e-10;

fn as_rows(feats: &Tensor, what: &str) -> Result<DMatrix<f64>> {
    match feats.shape() {
        [n, d] => Ok(DMatrix::from_row_slice(*n, *d, feats.data())),
        s => Err(CoreError::Config(format!(
            "{what} features must be [rows, dim], got {s:?}"
        ))),
    }
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

/// Symmetric PSD square root with eigenvalues clamped at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig
        .eigenvalues
        .map(|l| if l > EIGEN_FLOOR { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ_A − μ_B‖² + tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})`. Each set needs more rows
/// than feature dimensions.
pub fn fid(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (xa, xb) = (as_rows(a, "fid")?, as_rows(b, "fid")?);
    if xa.ncols() != xb.ncols() {
        return Err(CoreError::Config(format!(
            "fid feature dims differ: {} vs {}",
            xa.ncols(),
            xb.ncols()
        )));
    }
    let min = xa.ncols() + 1;
    if xa.nrows() < min || xb.nrows() < min {
        return Err(CoreError::Precondition(format!(
            "fid needs at least {min} rows per set, got {} and {}",
            xa.nrows(),
            xb.nrows()
        )));
    }
    let (ma, ca) = mean_and_cov(&xa);
    let (mb, cb) = mean_and_cov(&xb);
    // tr((Σ_A Σ_B)^{1/2}) = tr((S Σ_B S)^{1/2}) with S = Σ_A^{1/2}, which is symmetric.
    let s = psd_sqrt(&ca);
    let inner = &s * &cb * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| if l > EIGEN_FLOOR { l.sqrt() } else { 0.0 })
        .sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² with `k(x, y) = (xᵀy/d + 1)³`.
///
/// Within-set sums skip the diagonal. When both sets have the same size the
/// cross term also skips `i == j` pairs (the paired U-statistic), so a set
/// compared with itself scores exactly zero.
pub fn kid(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (da, db) = match (a.shape(), b.shape()) {
        ([m, d1], [n, d2]) if d1 == d2 => ((*m, *d1), (*n, *d2)),
        (sa, sb) => {
            return Err(CoreError::Config(format!(
                "kid needs [rows, dim] sets of equal dim, got {sa:?} and {sb:?}"
            )))
        }
    };
    let (m, n, d) = (da.0, db.0, da.1);
    if m < 2 || n < 2 {
        return Err(CoreError::Precondition(format!(
            "kid needs at least 2 rows per set, got {m} and {n}"
        )));
    }
    let row_a = |i: usize| &a.data()[i * d..(i + 1) * d];
    let row_b = |i: usize| &b.data()[i * d..(i + 1) * d];
    let mut kxx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kxx += poly_kernel(row_a(i), row_a(j));
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kyy += poly_kernel(row_b(i), row_b(j));
            }
        }
    }
    let paired = m == n;
    let mut kxy = 0.0;
    for i in 0..m {
        for j in 0..n {
            if !(paired && i == j) {
                kxy += poly_kernel(row_a(i), row_b(j));
            }
        }
    }
    let cross_pairs = if paired { m * (m - 1) } else { m * n };
    Ok(kxx / (m * (m - 1)) as f64 + kyy / (n * (n - 1)) as f64
        - 2.0 * kxy / cross_pairs as f64)
}
