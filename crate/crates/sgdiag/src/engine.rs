//! Single-observation stochastic gradient updates (explicit and implicit),
//! data streams, and the chain driver that runs them with optional monitoring.
//!
//! The implicit update solves a one-dimensional fixed-point problem per step,
//! which keeps it stable at learning rates where the explicit update already
//! oscillates or diverges.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, SgdiagError};
use crate::generate::PointGenerator;
use crate::model::{DataPoint, LossModel};
use crate::numeric::{norm_sq, squared_distance};

/// Which form of the per-observation update to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UpdateKind {
    Explicit,
    Implicit,
}

/// Learning-rate schedule for `run_chain`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Schedule {
    /// gamma_n = gamma0 for all n.
    Constant,
    /// gamma_n = c / n (the classical one-over-n decay).
    Classical { c: f64 },
    /// The caller mutates `SgdState::gamma` between steps (used by the
    /// halving driver); `run_chain` leaves whatever is in the state.
    ExternallyControlled,
}

#[derive(Debug, Clone, Serialize)]
pub struct SgdConfig {
    pub gamma0: f64,
    pub schedule: Schedule,
    pub update: UpdateKind,
    pub seed: u64,
    pub max_iterations: u64,
    /// A chain whose iterate norm exceeds this (or goes non-finite) is
    /// flagged diverged and halted; divergence is an outcome, not an error.
    pub divergence_threshold: f64,
    /// Record a trace row every `trace_stride` iterations.
    pub trace_stride: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            gamma0: 0.1,
            schedule: Schedule::Constant,
            update: UpdateKind::Implicit,
            seed: 0,
            max_iterations: 10_000,
            divergence_threshold: 1e12,
            trace_stride: 10,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 > 0.0) || !self.gamma0.is_finite() {
            return Err(SgdiagError::InvalidConfig(format!(
                "gamma0 must be positive and finite, got {}",
                self.gamma0
            )));
        }
        if let Schedule::Classical { c } = self.schedule {
            if !(c > 0.0) || !c.is_finite() {
                return Err(SgdiagError::InvalidConfig(format!(
                    "classical schedule constant must be positive, got {c}"
                )));
            }
        }
        if self.max_iterations == 0 {
            return Err(SgdiagError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
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
        Ok(())
    }
}

/// Mutable state of one chain: current iterate, step count, the learning rate
/// used by the most recent step, and the most recent gradient surrogate.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub theta: Vec<f64>,
    pub n: u64,
    pub gamma: f64,
    /// Gradient for the explicit update; for the implicit update, the
    /// realized step divided by `-gamma` (the same object the convergence
    /// statistic consumes in both cases).
    pub last_grad: Option<Vec<f64>>,
}

impl SgdState {
    pub fn new(theta: Vec<f64>) -> Self {
        SgdState {
            theta,
            n: 0,
            gamma: 0.0,
            last_grad: None,
        }
    }
}

/// One recorded trace row.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub n: u64,
    pub gamma: f64,
    /// Monitor statistic at this iteration, when a monitor is attached.
    pub s: Option<f64>,
    /// Squared distance to the true parameter, when the truth is known.
    pub error_sq: Option<f64>,
    /// Held-out error, when an evaluator supplies one.
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub stride: u64,
    pub diverged: bool,
    pub final_theta: Vec<f64>,
    pub iterations: u64,
    /// Set when a monitor requested the stop, to the iteration it fired at.
    pub stopped_at: Option<u64>,
}

/// A source of observations for a chain. Implementations own their RNG so a
/// chain's data sequence is fully determined by the stream's seed.
pub trait DataStream {
    fn dim(&self) -> usize;
    fn next_point(&mut self) -> &DataPoint;
}

/// Samples uniformly with replacement from a fixed finite dataset: the
/// streaming view of multi-pass SGD over a stored sample.
pub struct ResampledStream {
    data: Vec<DataPoint>,
    rng: ChaCha8Rng,
}

impl ResampledStream {
    pub fn new(data: Vec<DataPoint>, seed: u64) -> Result<Self> {
        let first_dim = match data.first() {
            None => {
                return Err(SgdiagError::Empty(
                    "resampled stream needs a non-empty dataset".into(),
                ))
            }
            Some(p) => p.dim(),
        };
        for (i, p) in data.iter().enumerate() {
            if p.dim() != first_dim {
                return Err(SgdiagError::DimensionMismatch {
                    expected: first_dim,
                    got: p.dim(),
                });
            }
            let _ = i;
        }
        Ok(ResampledStream {
            data,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl DataStream for ResampledStream {
    fn dim(&self) -> usize {
        self.data[0].dim()
    }

    fn next_point(&mut self) -> &DataPoint {
        let i = self.rng.random_range(0..self.data.len());
        &self.data[i]
    }
}

/// Draws a fresh observation from a generator on every step (the infinite-
/// data regime).
pub struct GeneratorStream<G: PointGenerator> {
    generator: G,
    rng: ChaCha8Rng,
    current: DataPoint,
}

impl<G: PointGenerator> GeneratorStream<G> {
    pub fn new(generator: G, seed: u64) -> Self {
        let dim = generator.dim();
        GeneratorStream {
            generator,
            rng: ChaCha8Rng::seed_from_u64(seed),
            current: DataPoint::new(vec![0.0; dim], 0.0),
        }
    }
}

impl<G: PointGenerator> DataStream for GeneratorStream<G> {
    fn dim(&self) -> usize {
        self.generator.dim()
    }

    fn next_point(&mut self) -> &DataPoint {
        self.current = self.generator.draw(&mut self.rng);
        &self.current
    }
}

fn grad_buffer<'a>(state: &'a mut Vec<f64>, dim: usize) -> &'a mut Vec<f64> {
    if state.len() != dim {
        state.clear();
        state.resize(dim, 0.0);
    }
    state
}

/// One explicit update: theta <- theta + gamma * (y - h(x^T theta)) x.
///
/// Stores the gradient in `state.last_grad` and advances `state.n`. A step
/// that makes the iterate non-finite does not error here; divergence is
/// detected by the chain driver (or by the caller) from the resulting state.
pub fn step_explicit(
    model: &LossModel,
    point: &DataPoint,
    state: &mut SgdState,
    gamma: f64,
) -> Result<()> {
    let r = model.residual(point, &state.theta)?;
    let grad = state.last_grad.get_or_insert_with(Vec::new);
    let g = grad_buffer(grad, point.dim());
    for (gi, xi) in g.iter_mut().zip(point.x.iter()) {
        *gi = -r * xi;
    }
    for (ti, gi) in state.theta.iter_mut().zip(g.iter()) {
        *ti -= gamma * gi;
    }
    state.n += 1;
    state.gamma = gamma;
    Ok(())
}

/// One implicit update: theta <- theta + gamma * lambda * x where lambda
/// solves lambda = y - h(x^T theta + gamma * lambda * ||x||^2).
///
/// `state.last_grad` receives `-lambda * x`, the realized step divided by
/// `-gamma`, which plays the role the explicit gradient plays downstream.
pub fn step_implicit(
    model: &LossModel,
    point: &DataPoint,
    state: &mut SgdState,
    gamma: f64,
) -> Result<()> {
    let u = model.linear_predictor(&point.x, &state.theta)?;
    let lambda = solve_implicit_scale(model, point, u, gamma)?;
    let grad = state.last_grad.get_or_insert_with(Vec::new);
    let g = grad_buffer(grad, point.dim());
    for (gi, xi) in g.iter_mut().zip(point.x.iter()) {
        *gi = -lambda * xi;
    }
    for (ti, xi) in state.theta.iter_mut().zip(point.x.iter()) {
        *ti += gamma * lambda * xi;
    }
    state.n += 1;
    state.gamma = gamma;
    Ok(())
}

/// Solves lambda = y - h(u + gamma * ||x||^2 * lambda) for the implicit step.
///
/// The root lies between 0 and the explicit residual y - h(u) because the
/// transfer function is non-decreasing. Quadratic loss has the closed form
/// lambda = (y - u) / (1 + gamma ||x||^2); otherwise a safeguarded Newton
/// iteration (bisection fallback, absolute tolerance 1e-12, at most 200
/// steps) finds the root.
fn solve_implicit_scale(
    model: &LossModel,
    point: &DataPoint,
    u: f64,
    gamma: f64,
) -> Result<f64> {
    let g2 = gamma * norm_sq(&point.x);
    if !g2.is_finite() {
        return Err(SgdiagError::NonFinite { index: 0 });
    }
    if let LossModel::Quadratic = model {
        return Ok((point.y - u) / (1.0 + g2));
    }
    let r0 = point.y - model.transfer(u);
    if !r0.is_finite() {
        return Err(SgdiagError::NonFinite { index: 0 });
    }
    if r0 == 0.0 || g2 == 0.0 {
        return Ok(r0);
    }
    let (mut lo, mut hi) = if r0 > 0.0 { (0.0, r0) } else { (r0, 0.0) };
    // phi(lambda) = lambda - y + h(u + g2 * lambda) is strictly increasing
    // with slope >= 1, so |phi| bounds the distance to the root directly.
    let mut lambda = r0 / (1.0 + g2 * model.transfer_prime(u).max(0.0));
    for _ in 0..200 {
        let phi = lambda - point.y + model.transfer(u + g2 * lambda);
        if !phi.is_finite() {
            return Err(SgdiagError::NonFinite { index: 0 });
        }
        if phi.abs() <= 1e-13 * (1.0 + lambda.abs()).min(1e3) {
            return Ok(lambda);
        }
        if phi > 0.0 {
            hi = lambda;
        } else {
            lo = lambda;
        }
        if hi - lo <= 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
            return Ok(0.5 * (lo + hi));
        }
        let slope = 1.0 + g2 * model.transfer_prime(u + g2 * lambda);
        let newton = lambda - phi / slope;
        lambda = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(0.5 * (lo + hi))
}

/// What a monitor tells the chain driver after seeing a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitorSignal {
    Continue,
    Stop,
}

/// Per-step observer for `run_chain`. `observe` sees the post-step state and
/// the gradient surrogate of that step; `statistic` supplies the value traced
/// in the `s` column.
pub trait ChainMonitor {
    fn observe(&mut self, state: &SgdState, grad: &[f64]) -> MonitorSignal;
    fn statistic(&self) -> Option<f64> {
        None
    }
}

/// Drives one chain from `theta0` until `max_iterations`, divergence, or a
/// monitor stop. The trace records every `trace_stride`-th iteration plus the
/// final one; `error_sq` is filled when the true parameter is given.
pub fn run_chain(
    model: &LossModel,
    stream: &mut dyn DataStream,
    config: &SgdConfig,
    theta0: Vec<f64>,
    truth: Option<&[f64]>,
    mut monitor: Option<&mut dyn ChainMonitor>,
) -> Result<RunTrace> {
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
    let mut state = SgdState::new(theta0);
    state.gamma = config.gamma0;
    let mut records = Vec::new();
    let mut diverged = false;
    let mut stopped_at = None;
    let threshold_sq = config.divergence_threshold * config.divergence_threshold;

    let record =
        |records: &mut Vec<TraceRecord>, state: &SgdState, s: Option<f64>, truth: Option<&[f64]>| {
            records.push(TraceRecord {
                n: state.n,
                gamma: state.gamma,
                s,
                error_sq: truth.map(|t| squared_distance(&state.theta, t)),
                test_error: None,
            });
        };

    for n in 1..=config.max_iterations {
        let gamma = match config.schedule {
            Schedule::Constant => config.gamma0,
            Schedule::Classical { c } => c / n as f64,
            Schedule::ExternallyControlled => state.gamma,
        };
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
                // The iterate left the representable range: that is the
                // divergent outcome, not a usage error.
                state.n = n;
                diverged = true;
                record(&mut records, &state, None, None);
                break;
            }
            Err(e) => return Err(e),
        }
        let nsq = norm_sq(&state.theta);
        if !nsq.is_finite() || nsq > threshold_sq {
            diverged = true;
            record(&mut records, &state, None, truth.filter(|_| nsq.is_finite()));
            break;
        }
        let signal = match monitor.as_deref_mut() {
            Some(m) => {
                let grad = state
                    .last_grad
                    .as_deref()
                    .expect("gradient is set by every step");
                m.observe(&state, grad)
            }
            None => MonitorSignal::Continue,
        };
        let stat = monitor.as_deref().and_then(|m| m.statistic());
        if signal == MonitorSignal::Stop {
            stopped_at = Some(n);
            record(&mut records, &state, stat, truth);
            break;
        }
        if n % config.trace_stride == 0 || n == config.max_iterations {
            record(&mut records, &state, stat, truth);
        }
    }

    Ok(RunTrace {
        records,
        stride: config.trace_stride,
        diverged,
        iterations: state.n,
        stopped_at,
        final_theta: state.theta,
    })
}

/// Incremental mean of a vector sequence (used for iterate averaging).
#[derive(Debug, Clone)]
pub struct RunningMean {
    mean: Vec<f64>,
    count: u64,
}

impl RunningMean {
    pub fn new(dim: usize) -> Self {
        RunningMean {
            mean: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn update(&mut self, value: &[f64]) {
        assert_eq!(value.len(), self.mean.len(), "running mean dimension");
        self.count += 1;
        let w = 1.0 / self.count as f64;
        for (m, v) in self.mean.iter_mut().zip(value.iter()) {
            *m += (v - *m) * w;
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{GaussianLinearGen, ScalarMeanGen};

    fn quad_point() -> DataPoint {
        DataPoint::new(vec![1.0, 2.0], 3.0)
    }

    #[test]
    fn explicit_step_matches_hand_computation() {
        let model = LossModel::Quadratic;
        let mut state = SgdState::new(vec![0.5, 0.5]);
        step_explicit(&model, &quad_point(), &mut state, 0.1).unwrap();
        // u = 1.5, residual = 1.5, theta += 0.1 * 1.5 * x.
        assert!((state.theta[0] - 0.65).abs() < 1e-15);
        assert!((state.theta[1] - 0.8).abs() < 1e-15);
        assert_eq!(state.n, 1);
        let g = state.last_grad.as_ref().unwrap();
        assert!((g[0] + 1.5).abs() < 1e-15);
    }

    #[test]
    fn implicit_quadratic_uses_closed_form() {
        let model = LossModel::Quadratic;
        let mut state = SgdState::new(vec![0.5, 0.5]);
        step_implicit(&model, &quad_point(), &mut state, 0.1).unwrap();
        // lambda = (3 - 1.5) / (1 + 0.1 * 5) = 1.0
        assert!((state.theta[0] - 0.6).abs() < 1e-15);
        assert!((state.theta[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn implicit_grad_surrogate_is_step_over_minus_gamma() {
        let model = LossModel::Logistic;
        let pt = DataPoint::new(vec![0.7, -1.3], 1.0);
        let mut state = SgdState::new(vec![0.2, 0.4]);
        let before = state.theta.clone();
        step_implicit(&model, &pt, &mut state, 0.8).unwrap();
        let g = state.last_grad.clone().unwrap();
        for i in 0..2 {
            let step = state.theta[i] - before[i];
            assert!((g[i] - (-step / 0.8)).abs() < 1e-12);
        }
    }

    #[test]
    fn resampled_stream_rejects_empty_and_mixed_dims() {
        assert!(ResampledStream::new(vec![], 0).is_err());
        let mixed = vec![
            DataPoint::new(vec![1.0], 0.0),
            DataPoint::new(vec![1.0, 2.0], 0.0),
        ];
        assert!(ResampledStream::new(mixed, 0).is_err());
    }

    #[test]
    fn resampled_stream_is_reproducible() {
        let data: Vec<DataPoint> = (0..10)
            .map(|i| DataPoint::new(vec![i as f64], i as f64))
            .collect();
        let mut a = ResampledStream::new(data.clone(), 9).unwrap();
        let mut b = ResampledStream::new(data, 9).unwrap();
        for _ in 0..50 {
            assert_eq!(a.next_point(), b.next_point());
        }
    }

    #[test]
    fn run_chain_flags_divergence_without_erroring() {
        // Explicit updates on the scalar mean model at gamma = 2.5 blow up.
        let model = LossModel::Quadratic;
        let mut stream = GeneratorStream::new(ScalarMeanGen::new(0.0, 1.0), 11);
        let config = SgdConfig {
            gamma0: 2.5,
            update: UpdateKind::Explicit,
            max_iterations: 5_000,
            divergence_threshold: 1e6,
            ..SgdConfig::default()
        };
        let trace = run_chain(&model, &mut stream, &config, vec![1.0], None, None).unwrap();
        assert!(trace.diverged);
        assert!(trace.iterations < 5_000);
    }

    #[test]
    fn run_chain_records_error_and_respects_stride() {
        let theta_star = vec![1.0, -2.0];
        let model = LossModel::Quadratic;
        let mut stream =
            GeneratorStream::new(GaussianLinearGen::new(theta_star.clone(), 0.1), 12);
        let config = SgdConfig {
            gamma0: 0.05,
            max_iterations: 100,
            trace_stride: 10,
            ..SgdConfig::default()
        };
        let trace = run_chain(
            &model,
            &mut stream,
            &config,
            vec![0.0, 0.0],
            Some(&theta_star),
            None,
        )
        .unwrap();
        assert_eq!(trace.records.len(), 10);
        assert_eq!(trace.records.last().unwrap().n, 100);
        assert!(!trace.diverged);
        let e_first = trace.records[0].error_sq.unwrap();
        let e_last = trace.records.last().unwrap().error_sq.unwrap();
        assert!(e_last < e_first, "chain should approach the truth");
    }

    #[test]
    fn classical_schedule_decays_as_c_over_n() {
        struct GammaSpy(Vec<f64>);
        impl ChainMonitor for GammaSpy {
            fn observe(&mut self, state: &SgdState, _grad: &[f64]) -> MonitorSignal {
                self.0.push(state.gamma);
                MonitorSignal::Continue
            }
        }
        let model = LossModel::Quadratic;
        let mut stream = GeneratorStream::new(ScalarMeanGen::new(0.0, 1.0), 13);
        let config = SgdConfig {
            gamma0: 1.0,
            schedule: Schedule::Classical { c: 2.0 },
            max_iterations: 4,
            ..SgdConfig::default()
        };
        let mut spy = GammaSpy(Vec::new());
        run_chain(&model, &mut stream, &config, vec![0.0], None, Some(&mut spy)).unwrap();
        assert_eq!(spy.0, vec![2.0, 1.0, 2.0 / 3.0, 0.5]);
    }

    #[test]
    fn running_mean_counts_and_averages() {
        let mut rm = RunningMean::new(1);
        for v in [1.0, 2.0, 3.0, 4.0] {
            rm.update(&[v]);
        }
        assert_eq!(rm.count(), 4);
        assert!((rm.mean()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut c = SgdConfig::default();
        c.gamma0 = 0.0;
        assert!(c.validate().is_err());
        let mut c = SgdConfig::default();
        c.max_iterations = 0;
        assert!(c.validate().is_err());
        let mut c = SgdConfig::default();
        c.trace_stride = 0;
        assert!(c.validate().is_err());
        let mut c = SgdConfig::default();
        c.schedule = Schedule::Classical { c: -1.0 };
        assert!(c.validate().is_err());
    }
}
