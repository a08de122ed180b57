//! Data points and the GLM-family loss. A model is fully determined by its
//! transfer function h and derivative h': the point-loss is
//! l(y, u) = -y*u + f(u) with f' = h, so the gradient in theta is
//! -(y - h(x^T theta)) * x. Quadratic means h(u) = u, logistic h(u) = sigmoid(u).

use std::fmt;
use std::sync::Arc;

use crate::error::{Result, SgdiagError};
use crate::numeric::axpy;

/// Saturation bound for the logistic linear predictor; beyond it the sigmoid
/// is 1 (or 0) to machine precision, and exp() would overflow long before
/// the predictor stops being informative.
pub const LOGISTIC_CLAMP: f64 = 36.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub x: Vec<f64>,
    pub y: f64,
}

impl DataPoint {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        DataPoint { x, y }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

type Transfer = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum LossModel {
    Quadratic,
    Logistic,
    /// User-supplied transfer pair (h, h'). Only h and h' are ever needed;
    /// the antiderivative f is never materialized.
    CustomGlm { h: Transfer, hprime: Transfer },
}

impl fmt::Debug for LossModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossModel::Quadratic => write!(f, "Quadratic"),
            LossModel::Logistic => write!(f, "Logistic"),
            LossModel::CustomGlm { .. } => write!(f, "CustomGlm"),
        }
    }
}

fn sigmoid(u: f64) -> f64 {
    let u = u.clamp(-LOGISTIC_CLAMP, LOGISTIC_CLAMP);
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl LossModel {
    pub fn custom(
        h: impl Fn(f64) -> f64 + Send + Sync + 'static,
        hprime: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        LossModel::CustomGlm {
            h: Arc::new(h),
            hprime: Arc::new(hprime),
        }
    }

    /// The transfer function h evaluated at the linear predictor.
    pub fn transfer(&self, u: f64) -> f64 {
        match self {
            LossModel::Quadratic => u,
            LossModel::Logistic => sigmoid(u),
            LossModel::CustomGlm { h, .. } => h(u),
        }
    }

    pub fn transfer_prime(&self, u: f64) -> f64 {
        match self {
            LossModel::Quadratic => 1.0,
            LossModel::Logistic => {
                let s = sigmoid(u);
                s * (1.0 - s)
            }
            LossModel::CustomGlm { hprime, .. } => hprime(u),
        }
    }

    /// Point loss l(y, u) = -y*u + f(u). `None` for custom models, whose f is
    /// not materialized.
    pub fn loss(&self, y: f64, u: f64) -> Option<f64> {
        match self {
            LossModel::Quadratic => Some(0.5 * u * u - y * u),
            // softplus(u) - y*u in overflow-safe form
            LossModel::Logistic => Some((-u.abs()).exp().ln_1p() + u.max(0.0) - y * u),
            LossModel::CustomGlm { .. } => None,
        }
    }

    /// Checked linear predictor x^T theta.
    pub fn linear_predictor(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        if x.len() != theta.len() {
            return Err(SgdiagError::DimensionMismatch {
                expected: x.len(),
                got: theta.len(),
            });
        }
        let mut u = 0.0;
        for (i, (xi, ti)) in x.iter().zip(theta).enumerate() {
            let term = xi * ti;
            if !term.is_finite() {
                return Err(SgdiagError::NonFinite { index: i });
            }
            u += term;
        }
        if !u.is_finite() {
            return Err(SgdiagError::NonFinite { index: 0 });
        }
        Ok(u)
    }

    /// Gradient of the point loss at theta: -(y - h(x^T theta)) * x.
    pub fn gradient(&self, point: &DataPoint, theta: &[f64]) -> Result<Vec<f64>> {
        let u = self.linear_predictor(&point.x, theta)?;
        let r = point.y - self.transfer(u);
        let mut g = vec![0.0; point.x.len()];
        axpy(-r, &point.x, &mut g);
        Ok(g)
    }

    /// Residual scale y - h(x^T theta); the gradient is this times -x.
    pub fn residual(&self, point: &DataPoint, theta: &[f64]) -> Result<f64> {
        let u = self.linear_predictor(&point.x, theta)?;
        Ok(point.y - self.transfer(u))
    }

    /// Model prediction h(x^T theta). Logistic classification thresholds the
    /// returned probability at 0.5.
    pub fn predict(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        Ok(self.transfer(self.linear_predictor(x, theta)?))
    }
}

/// Ground truth of a simulated dataset; `sigma` is the residual standard
/// deviation for the normal model and 0 for logistic data.
#[derive(Debug, Clone)]
pub struct TrueParams {
    pub theta_star: Vec<f64>,
    pub sigma: f64,
}
