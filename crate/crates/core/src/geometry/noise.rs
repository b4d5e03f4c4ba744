//! Measurement noise models and the optional Huber robust loss.
//!
//! Residuals are whitened (multiplied by the inverse square root of the
//! covariance) before entering the normal equations, so the robust threshold
//! is expressed in whitened units: a threshold of `k` fires once a residual
//! exceeds `k` standard deviations.

use nalgebra::{DMatrix, DVector};

/// Covariance shape of a measurement.
#[derive(Debug, Clone)]
pub enum NoiseKind {
    /// Same variance on every residual component.
    Isotropic(f64),
    /// Per-component variances.
    Diagonal(DVector<f64>),
    /// Full covariance matrix (must be positive definite).
    Full(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub struct NoiseModel {
    kind: NoiseKind,
    huber_delta: Option<f64>,
}

impl NoiseModel {
    pub fn isotropic(variance: f64) -> Self {
        assert!(variance > 0.0, "variance must be positive");
        Self {
            kind: NoiseKind::Isotropic(variance),
            huber_delta: None,
        }
    }

    pub fn diagonal(variances: DVector<f64>) -> Self {
        assert!(
            variances.iter().all(|v| *v > 0.0),
            "variances must be positive"
        );
        Self {
            kind: NoiseKind::Diagonal(variances),
            huber_delta: None,
        }
    }

    pub fn full(covariance: DMatrix<f64>) -> Self {
        assert!(covariance.is_square());
        Self {
            kind: NoiseKind::Full(covariance),
            huber_delta: None,
        }
    }

    /// Enables a Huber loss with the given threshold on the whitened norm.
    pub fn with_huber(mut self, delta: f64) -> Self {
        assert!(delta > 0.0, "huber threshold must be positive");
        self.huber_delta = Some(delta);
        self
    }

    pub fn huber_delta(&self) -> Option<f64> {
        self.huber_delta
    }

    /// Isotropic standard deviation, if the model is isotropic.
    pub fn isotropic_sigma(&self) -> Option<f64> {
        match &self.kind {
            NoiseKind::Isotropic(v) => Some(v.sqrt()),
            _ => None,
        }
    }

    /// Whitens a residual in place. For the full kind this applies the
    /// inverse Cholesky factor of the covariance.
    pub fn whiten(&self, r: &mut DVector<f64>) {
        match &self.kind {
            NoiseKind::Isotropic(v) => {
                let s = 1.0 / v.sqrt();
                *r *= s;
            }
            NoiseKind::Diagonal(vars) => {
                for (ri, var) in r.iter_mut().zip(vars.iter()) {
                    *ri /= var.sqrt();
                }
            }
            NoiseKind::Full(cov) => {
                let chol = cov
                    .clone()
                    .cholesky()
                    .expect("noise covariance must be positive definite");
                let l = chol.l();
                let solved = l
                    .solve_lower_triangular(r)
                    .expect("triangular solve failed");
                *r = solved;
            }
        }
    }

    /// Whitens each row block of a Jacobian the same way as [`whiten`].
    pub fn whiten_jacobian(&self, j: &mut DMatrix<f64>) {
        match &self.kind {
            NoiseKind::Isotropic(v) => {
                let s = 1.0 / v.sqrt();
                *j *= s;
            }
            NoiseKind::Diagonal(vars) => {
                for (row, var) in vars.iter().enumerate() {
                    let s = 1.0 / var.sqrt();
                    for c in 0..j.ncols() {
                        j[(row, c)] *= s;
                    }
                }
            }
            NoiseKind::Full(cov) => {
                let chol = cov
                    .clone()
                    .cholesky()
                    .expect("noise covariance must be positive definite");
                let l = chol.l();
                let solved = l
                    .solve_lower_triangular(j)
                    .expect("triangular solve failed");
                *j = solved;
            }
        }
    }
}

/// Huber robust cost of a whitened squared norm.
pub fn huber_cost(squared_norm: f64, delta: Option<f64>) -> f64 {
    match delta {
        None => squared_norm,
        Some(d) => {
            let norm = squared_norm.sqrt();
            if norm <= d {
                squared_norm
            } else {
                d * (2.0 * norm - d)
            }
        }
    }
}

/// IRLS scaling applied to residual and Jacobian rows: sqrt of the Huber
/// weight at the current whitened norm.
pub fn huber_sqrt_weight(norm: f64, delta: Option<f64>) -> f64 {
    match delta {
        None => 1.0,
        Some(d) => {
            if norm <= d {
                1.0
            } else {
                (d / norm).sqrt()
            }
        }
    }
}
