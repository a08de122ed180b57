//! Convergence detection from the running sum of inner products of
//! successive stochastic gradients.
//!
//! Far from the target the inner product of consecutive gradients is positive
//! on average (both point roughly along the drift toward the optimum); once
//! the chain reaches its stationary region the products turn negative on
//! average, so the running sum bends downward. The detector fires the first
//! time the sum is negative after a burn-in number of steps.

use serde::Serialize;

use crate::error::{Result, SgdiagError};
use crate::numeric::dot;

/// Running state of the inner-product statistic.
///
/// Invariants: `s` is the sum of all products accumulated since the last
/// reset; `n_since_reset` counts observations since the last reset; once
/// activated the activation iteration is latched until `reset`.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticState {
    pub s: f64,
    pub n_since_reset: u64,
    pub burnin: u64,
    #[serde(skip)]
    prev_grad: Option<Vec<f64>>,
    activated_at: Option<u64>,
    /// Absolute iteration count at the last reset, so activation reports the
    /// chain's own iteration number even across resets.
    origin: u64,
}

impl DiagnosticState {
    pub fn new(burnin: u64) -> Self {
        DiagnosticState {
            s: 0.0,
            n_since_reset: 0,
            burnin,
            prev_grad: None,
            activated_at: None,
            origin: 0,
        }
    }

    /// Feed one gradient (or gradient surrogate). The first observation after
    /// construction or reset only primes the pair; every later one adds the
    /// inner product with its predecessor to the running sum.
    pub fn observe(&mut self, grad: &[f64]) -> Result<()> {
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(SgdiagError::NonFinite { index: 0 });
        }
        self.n_since_reset += 1;
        if let Some(prev) = &self.prev_grad {
            if prev.len() != grad.len() {
                return Err(SgdiagError::DimensionMismatch {
                    expected: prev.len(),
                    got: grad.len(),
                });
            }
            self.s += dot(prev, grad);
        }
        match &mut self.prev_grad {
            Some(buf) => buf.copy_from_slice(grad),
            None => self.prev_grad = Some(grad.to_vec()),
        }
        self.check_latch();
        Ok(())
    }

    /// Add one explicit pair product without touching the stored
    /// predecessor, for callers that manage the pairing themselves.
    pub fn update(&mut self, grad_prev: &[f64], grad_curr: &[f64]) -> Result<()> {
        if grad_prev.len() != grad_curr.len() {
            return Err(SgdiagError::DimensionMismatch {
                expected: grad_prev.len(),
                got: grad_curr.len(),
            });
        }
        self.n_since_reset += 1;
        self.s += dot(grad_prev, grad_curr);
        self.check_latch();
        Ok(())
    }

    /// Accumulate from three consecutive iterates instead of gradients:
    /// (theta_n - theta_{n-1})^T (theta_{n-1} - theta_{n-2}) / gamma^2.
    /// This is the form that applies verbatim to implicit chains, where the
    /// realized step stands in for the gradient.
    pub fn update_from_differences(
        &mut self,
        theta_n: &[f64],
        theta_nm1: &[f64],
        theta_nm2: &[f64],
        gamma: f64,
    ) -> Result<()> {
        if !(gamma > 0.0) {
            return Err(SgdiagError::InvalidConfig(format!(
                "difference update needs a positive gamma, got {gamma}"
            )));
        }
        if theta_n.len() != theta_nm1.len() || theta_nm1.len() != theta_nm2.len() {
            return Err(SgdiagError::DimensionMismatch {
                expected: theta_n.len(),
                got: theta_nm1.len().max(theta_nm2.len()),
            });
        }
        let mut prod = 0.0;
        for i in 0..theta_n.len() {
            prod += (theta_n[i] - theta_nm1[i]) * (theta_nm1[i] - theta_nm2[i]);
        }
        self.n_since_reset += 1;
        self.s += prod / (gamma * gamma);
        self.check_latch();
        Ok(())
    }

    fn check_latch(&mut self) {
        if self.activated_at.is_none() && self.n_since_reset > self.burnin && self.s < 0.0 {
            self.activated_at = Some(self.origin + self.n_since_reset);
        }
    }

    /// The absolute iteration at which the detector first fired since the
    /// last reset, if it has.
    pub fn check_activation(&self) -> Option<u64> {
        self.activated_at
    }

    /// Clear the sum, the pair state, and the latch; subsequent activations
    /// still report absolute iteration numbers.
    pub fn reset(&mut self, new_burnin: u64) {
        self.origin += self.n_since_reset;
        self.s = 0.0;
        self.n_since_reset = 0;
        self.burnin = new_burnin;
        self.prev_grad = None;
        self.activated_at = None;
    }
}

/// Adapter that runs the detector inside a chain and stops the chain at
/// activation.
#[derive(Debug, Clone)]
pub struct DiagnosticMonitor {
    pub diag: DiagnosticState,
}

impl DiagnosticMonitor {
    pub fn new(burnin: u64) -> Self {
        DiagnosticMonitor {
            diag: DiagnosticState::new(burnin),
        }
    }
}

impl crate::engine::ChainMonitor for DiagnosticMonitor {
    fn observe(
        &mut self,
        _state: &crate::engine::SgdState,
        grad: &[f64],
    ) -> crate::engine::MonitorSignal {
        self.diag
            .observe(grad)
            .expect("chain gradients are finite and of fixed dimension");
        if self.diag.check_activation().is_some() {
            crate::engine::MonitorSignal::Stop
        } else {
            crate::engine::MonitorSignal::Continue
        }
    }

    fn statistic(&self) -> Option<f64> {
        Some(self.diag.s)
    }
}
