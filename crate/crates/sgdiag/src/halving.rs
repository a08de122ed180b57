//! Constant-rate SGD with automatic learning-rate halving.
//!
//! The chain runs at a constant rate until the inner-product statistic (in
//! its iterate-difference form, which applies to explicit and implicit
//! updates alike) signals that the iterates have reached their stationary
//! region; the rate is then halved, the statistic reset, and the process
//! repeats. Each halving starts a new "epoch" whose error plateau sits below
//! the previous one.

use serde::Serialize;

use crate::engine::{step_explicit, step_implicit, DataStream, RunTrace, SgdState, TraceRecord, UpdateKind};
use crate::error::{Result, SgdiagError};
use crate::model::LossModel;
use crate::numeric::{dot, norm_sq, squared_distance};

#[derive(Debug, Clone, Serialize)]
pub struct HalvingConfig {
    /// Starting learning rate.
    pub gamma0: f64,
    /// Minimum number of steps after a reset before the detector may fire.
    pub burnin: u64,
    /// The run ends once the rate has fallen below `gamma_floor` *and* at
    /// least `maxit` steps have been taken.
    pub maxit: u64,
    pub gamma_floor: f64,
    pub update: UpdateKind,
    /// Multiplier applied to the rate at each detection (1/2 by default use).
    pub halving_factor: f64,
    pub divergence_threshold: f64,
    /// Optional hard step budget; the run stops there without being counted
    /// as capped.
    pub max_steps: Option<u64>,
    pub trace_stride: u64,
}

impl HalvingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 > 0.0) || !self.gamma0.is_finite() {
            return Err(SgdiagError::InvalidConfig(format!(
                "gamma0 must be positive and finite, got {}",
                self.gamma0
            )));
        }
        if !(self.halving_factor > 0.0 && self.halving_factor < 1.0) {
            return Err(SgdiagError::InvalidConfig(format!(
                "halving_factor must lie strictly between 0 and 1, got {}",
                self.halving_factor
            )));
        }
        if !(self.gamma_floor > 0.0) || self.gamma_floor >= self.gamma0 {
            return Err(SgdiagError::InvalidConfig(format!(
                "gamma_floor must satisfy 0 < floor < gamma0, got floor {} with gamma0 {}",
                self.gamma_floor, self.gamma0
            )));
        }
        if self.maxit == 0 {
            return Err(SgdiagError::InvalidConfig("maxit must be at least 1".into()));
        }
        if self.burnin == 0 {
            return Err(SgdiagError::InvalidConfig("burnin must be at least 1".into()));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(SgdiagError::InvalidConfig(
                "divergence_threshold must be positive".into(),
            ));
        }
        if self.trace_stride == 0 {
            return Err(SgdiagError::InvalidConfig(
                "trace_stride must be at least 1".into(),
            ));
        }
        if self.max_steps == Some(0) {
            return Err(SgdiagError::InvalidConfig(
                "max_steps, when given, must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One rate halving: where it happened and the rate that was halved.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Detection {
    pub iteration: u64,
    pub gamma_before: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HalvingTrace {
    pub trace: RunTrace,
    pub detections: Vec<Detection>,
    /// True when the run hit the absolute cap of `20 * maxit` steps before
    /// its termination condition.
    pub cap_hit: bool,
    pub diverged: bool,
    pub final_gamma: f64,
}

/// Runs the halving scheme with the update named in the config. Returns the
/// final iterate and the full trace. `truth` fills `error_sq` in the trace;
/// `eval` is called at every traced iteration and its value stored as
/// `test_error`.
pub fn run_sgd_half(
    model: &LossModel,
    stream: &mut dyn DataStream,
    config: &HalvingConfig,
    theta0: &[f64],
    truth: Option<&[f64]>,
    mut eval: Option<&mut dyn FnMut(u64, &[f64]) -> Option<f64>>,
) -> Result<(Vec<f64>, HalvingTrace)> {
    config.validate()?;
    if theta0.len() != stream.dim() {
        return Err(SgdiagError::DimensionMismatch {
            expected: stream.dim(),
            got: theta0.len(),
        });
    }
    if let Some(t) = truth {
        if t.len() != theta0.len() {
            return Err(SgdiagError::DimensionMismatch {
                expected: theta0.len(),
                got: t.len(),
            });
        }
    }

    let cap = config.maxit.saturating_mul(20);
    let threshold_sq = config.divergence_threshold * config.divergence_threshold;
    let mut state = SgdState::new(theta0.to_vec());
    let mut gamma = config.gamma0;
    let mut s = 0.0;
    let mut tau = 0u64;
    let mut prev_theta = theta0.to_vec();
    let mut diff_cur = vec![0.0; theta0.len()];
    let mut diff_prev: Option<Vec<f64>> = None;
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut detections: Vec<Detection> = Vec::new();
    let mut cap_hit = false;
    let mut diverged = false;
    let mut n = 0u64;

    let push_record = |records: &mut Vec<TraceRecord>,
                       state: &SgdState,
                       n: u64,
                       gamma: f64,
                       s: Option<f64>,
                       eval: &mut Option<&mut dyn FnMut(u64, &[f64]) -> Option<f64>>| {
        records.push(TraceRecord {
            n,
            gamma,
            s,
            error_sq: truth
                .map(|t| squared_distance(&state.theta, t))
                .filter(|e| e.is_finite()),
            test_error: eval.as_mut().and_then(|f| f(n, &state.theta)),
        });
    };

    loop {
        n += 1;
        prev_theta.copy_from_slice(&state.theta);
        let step_result = {
            let point = stream.next_point();
            match config.update {
                UpdateKind::Explicit => step_explicit(model, point, &mut state, gamma),
                UpdateKind::Implicit => step_implicit(model, point, &mut state, gamma),
            }
        };
        match step_result {
            Ok(()) => {}
            Err(SgdiagError::NonFinite { .. }) => {
                state.n = n;
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        let nsq = norm_sq(&state.theta);
        if !nsq.is_finite() || nsq > threshold_sq {
            diverged = true;
            break;
        }
        for (d, (new, old)) in diff_cur
            .iter_mut()
            .zip(state.theta.iter().zip(prev_theta.iter()))
        {
            *d = new - old;
        }
        if let Some(dp) = &diff_prev {
            s += dot(&diff_cur, dp) / (gamma * gamma);
        }
        if n % config.trace_stride == 0 {
            push_record(&mut records, &state, n, gamma, Some(s), &mut eval);
        }
        if n > tau + config.burnin && s < 0.0 {
            detections.push(Detection {
                iteration: n,
                gamma_before: gamma,
            });
            gamma *= config.halving_factor;
            s = 0.0;
            diff_prev = None;
            tau = n;
        } else {
            match &mut diff_prev {
                Some(buf) => buf.copy_from_slice(&diff_cur),
                None => diff_prev = Some(diff_cur.clone()),
            }
        }
        if gamma < config.gamma_floor && n > config.maxit {
            break;
        }
        if let Some(limit) = config.max_steps {
            if n >= limit {
                break;
            }
        }
        if n >= cap {
            cap_hit = true;
            break;
        }
    }
    state.n = n;
    if records.last().map(|r| r.n) != Some(n) {
        push_record(&mut records, &state, n, gamma, Some(s), &mut eval);
    }

    let final_theta = state.theta.clone();
    let trace = RunTrace {
        records,
        stride: config.trace_stride,
        diverged,
        final_theta: state.theta,
        iterations: n,
        stopped_at: None,
    };
    Ok((
        final_theta,
        HalvingTrace {
            trace,
            detections,
            cap_hit,
            diverged,
            final_gamma: gamma,
        },
    ))
}

/// The implicit-update variant: identical scheme with the per-step stability
/// of the implicit update, so large starting rates are safe.
pub fn run_isgd_half(
    model: &LossModel,
    stream: &mut dyn DataStream,
    config: &HalvingConfig,
    theta0: &[f64],
    truth: Option<&[f64]>,
) -> Result<(Vec<f64>, HalvingTrace)> {
    let mut cfg = config.clone();
    cfg.update = UpdateKind::Implicit;
    run_sgd_half(model, stream, &cfg, theta0, truth, None)
}
