//! Gaussian feature statistics and the Fréchet distance between them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance below zero for eigenvalues treated as rounding noise.
pub const EIGEN_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// Mean and unbiased covariance of the rows of an (n, d) matrix.
    pub fn from_features(features: &DMatrix<f64>) -> Result<Self> {
        let (n, d) = features.shape();
        if n < 2 {
            return Err(Error::Data(format!("feature statistics need at least 2 rows, got {n}")));
        }
        let mean = DVector::from_iterator(d, (0..d).map(|j| features.column(j).mean()));
        let mut centered = features.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let covariance = (centered.transpose() * &centered) / (n as f64 - 1.0);
        Ok(Self { mean, covariance, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric PSD matrix with rounding negatives clamped;
/// clearly negative values are an error.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(symmetrize(m));
    let scale = e.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in e.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -EIGEN_TOLERANCE * scale {
                return Err(Error::Numeric(format!(
                    "{what} has eigenvalue {v:e}, beyond the PSD tolerance"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(e)
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m, "matrix")?;
    let s = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(symmetrize(&(&e.eigenvectors * s * e.eigenvectors.transpose())))
}

/// Tr((Σa Σb)^{1/2}), computed as the trace of the square root of the
/// symmetric matrix Σa^{1/2} Σb Σa^{1/2}, which has the same eigenvalues.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let sa = sqrtm_psd(a)?;
    let m = &sa * b * &sa;
    let e = psd_eigen(&m, "covariance product")?;
    Ok(e.eigenvalues.iter().map(|v| v.sqrt()).sum())
}

/// ‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2}), clamped at 0.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("feature dimension", a.dim(), b.dim()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let tr = a.covariance.trace() + b.covariance.trace() - 2.0 * trace_sqrt_product(&a.covariance, &b.covariance)?;
    let value = diff + tr;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("FID evaluated to {value}")));
    }
    Ok(value.max(0.0))
}

/// FID between two feature matrices.
pub fn fid_from_features(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    fid(&FeatureStats::from_features(a)?, &FeatureStats::from_features(b)?)
}
