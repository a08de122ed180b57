//! Budget-matched comparison of stochastic optimizers on a fixed training
//! set: the rate-halving implicit method against variance-reduced SGD and
//! the classical decaying-rate baselines. All methods start from zero, see
//! the same number of effective passes, and are evaluated on a shared
//! schedule; grid-tuned baselines pick their constant by final training
//! loss.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{
    step_implicit, DataStream, ResampledStream, RunningMean, UpdateKind, SgdState,
};
use crate::error::{Result, SgdiagError};
use crate::halving::{run_sgd_half, HalvingConfig};
use crate::harness::data::{holdout_error, training_loss};
use crate::model::{DataPoint, LossModel};
use crate::numeric::{dot, norm_sq, squared_distance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    /// Implicit SGD with automatic rate halving; runs at its documented
    /// defaults, no per-dataset tuning.
    IsgdHalf,
    /// Variance-reduced SGD with full-gradient snapshots; step size
    /// grid-tuned. One epoch costs two effective passes.
    Svrg,
    /// Implicit SGD with the classical c/n rate; c grid-tuned.
    ClassicalIsgd,
    /// Implicit SGD with a c/sqrt(n) rate and iterate averaging; c
    /// grid-tuned, the averaged iterate is the estimate.
    AveragedIsgd,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::IsgdHalf => "isgd_half",
            Method::Svrg => "svrg",
            Method::ClassicalIsgd => "classical_isgd",
            Method::AveragedIsgd => "averaged_isgd",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareConfig {
    /// Effective passes over the training set granted to every method.
    pub budget_passes: usize,
    pub seed: u64,
    /// Step-size grid for the tuned baselines.
    pub tuning_grid: Vec<f64>,
    /// Fixed defaults of the halving method.
    pub halving_gamma0: f64,
    /// Detector burn-in; `None` means half the training-set size.
    pub halving_burnin: Option<u64>,
    pub halving_factor: f64,
    /// Error evaluations per pass on the shared schedule.
    pub evals_per_pass: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            budget_passes: 10,
            seed: 0,
            tuning_grid: default_tuning_grid(),
            halving_gamma0: 0.256,
            halving_burnin: None,
            halving_factor: 0.5,
            evals_per_pass: 2,
        }
    }
}

/// Powers-of-two grid 0.001 * 2^k for k = 0..=10 (0.001 up to 1.024).
pub fn default_tuning_grid() -> Vec<f64> {
    (0..=10).map(|k| 1e-3 * f64::powi(2.0, k)).collect()
}

/// What "error" means for the curves: distance to a known parameter, or
/// prediction error on a held-out set.
pub enum EvalMetric<'a> {
    ParamError(&'a [f64]),
    Holdout(&'a [DataPoint]),
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurvePoint {
    pub passes: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodCurve {
    pub method: Method,
    /// The grid-tuned constant, for methods that have one.
    pub tuned: Option<f64>,
    pub points: Vec<CurvePoint>,
    pub final_theta: Vec<f64>,
    pub diverged: bool,
}

const DIVERGENCE_THRESHOLD: f64 = 1e12;

fn sub_seed(base: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(tag);
    rng.next_u64()
}

struct Shared<'a> {
    model: &'a LossModel,
    train: &'a [DataPoint],
    metric: &'a EvalMetric<'a>,
    cfg: &'a CompareConfig,
    dim: usize,
    /// Pass positions at which every method evaluates its error.
    marks: Vec<f64>,
}

impl<'a> Shared<'a> {
    fn eval(&self, theta: &[f64]) -> f64 {
        match self.metric {
            EvalMetric::ParamError(ts) => squared_distance(theta, ts),
            EvalMetric::Holdout(test) => {
                holdout_error(self.model, theta, test).expect("holdout set validated up front")
            }
        }
    }
}

/// Run the requested methods under a shared pass budget and evaluation
/// schedule. Divergence of a run is recorded on its curve, not an error.
pub fn compare_methods(
    model: &LossModel,
    train: &[DataPoint],
    metric: &EvalMetric,
    methods: &[Method],
    cfg: &CompareConfig,
) -> Result<Vec<MethodCurve>> {
    if cfg.budget_passes == 0 {
        return Err(SgdiagError::InvalidConfig(
            "budget_passes must be at least 1".into(),
        ));
    }
    if cfg.evals_per_pass == 0 {
        return Err(SgdiagError::InvalidConfig(
            "evals_per_pass must be at least 1".into(),
        ));
    }
    if cfg.tuning_grid.is_empty() || cfg.tuning_grid.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(SgdiagError::InvalidConfig(
            "tuning_grid must be non-empty with positive finite entries".into(),
        ));
    }
    let dim = match train.first() {
        None => return Err(SgdiagError::Empty("empty training set".into())),
        Some(p) => p.dim(),
    };
    for p in train {
        if p.dim() != dim {
            return Err(SgdiagError::DimensionMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
    }
    match metric {
        EvalMetric::ParamError(ts) => {
            if ts.len() != dim {
                return Err(SgdiagError::DimensionMismatch {
                    expected: dim,
                    got: ts.len(),
                });
            }
        }
        EvalMetric::Holdout(test) => {
            if test.is_empty() {
                return Err(SgdiagError::Empty("empty holdout set".into()));
            }
            if test.iter().any(|p| p.dim() != dim) {
                return Err(SgdiagError::DimensionMismatch {
                    expected: dim,
                    got: test.iter().map(|p| p.dim()).find(|&d| d != dim).unwrap_or(dim),
                });
            }
        }
    }

    let epp = cfg.evals_per_pass;
    let marks: Vec<f64> = (0..=cfg.budget_passes * epp)
        .map(|j| j as f64 / epp as f64)
        .collect();
    let shared = Shared {
        model,
        train,
        metric,
        cfg,
        dim,
        marks,
    };

    methods
        .iter()
        .map(|&m| match m {
            Method::IsgdHalf => run_halving_entry(&shared),
            Method::Svrg => run_svrg_entry(&shared),
            Method::ClassicalIsgd => run_decay_entry(&shared, m, 1.0, false),
            Method::AveragedIsgd => run_decay_entry(&shared, m, 0.5, true),
        })
        .collect()
}

// --- rate-halving implicit SGD (fixed defaults) ----------------------------

fn run_halving_entry(sh: &Shared) -> Result<MethodCurve> {
    let n = sh.train.len();
    let total = (sh.cfg.budget_passes * n) as u64;
    let stride = ((n / sh.cfg.evals_per_pass) as u64).max(1);
    let hcfg = HalvingConfig {
        gamma0: sh.cfg.halving_gamma0,
        burnin: sh.cfg.halving_burnin.unwrap_or(((n + 1) / 2) as u64),
        maxit: total,
        gamma_floor: 1e-10,
        update: UpdateKind::Implicit,
        halving_factor: sh.cfg.halving_factor,
        divergence_threshold: DIVERGENCE_THRESHOLD,
        max_steps: Some(total),
        trace_stride: stride,
    };
    let mut stream = ResampledStream::new(sh.train.to_vec(), sub_seed(sh.cfg.seed, 1))?;
    let theta0 = vec![0.0; sh.dim];
    let mut points = vec![CurvePoint {
        passes: 0.0,
        error: sh.eval(&theta0),
    }];
    let mut eval_hook = |_: u64, theta: &[f64]| -> Option<f64> { Some(sh.eval(theta)) };
    let (final_theta, ht) = run_sgd_half(
        sh.model,
        &mut stream,
        &hcfg,
        &theta0,
        None,
        Some(&mut eval_hook),
    )?;
    points.extend(ht.trace.records.iter().filter_map(|r| {
        r.test_error.map(|e| CurvePoint {
            passes: r.n as f64 / n as f64,
            error: e,
        })
    }));
    Ok(MethodCurve {
        method: Method::IsgdHalf,
        tuned: None,
        points,
        final_theta,
        diverged: ht.diverged,
    })
}

// --- SVRG ------------------------------------------------------------------

struct SvrgRun {
    theta: Vec<f64>,
    points: Vec<CurvePoint>,
    diverged: bool,
}

/// One SVRG run. An epoch is one full-gradient snapshot pass plus n
/// variance-reduced inner steps: two effective passes, so `budget / 2`
/// epochs fit the budget. `marks` may be empty (tuning runs skip curves).
fn run_svrg(
    sh: &Shared,
    eta: f64,
    rng: &mut ChaCha8Rng,
    with_curve: bool,
) -> SvrgRun {
    let n = sh.train.len();
    let nf = n as f64;
    let epochs = sh.cfg.budget_passes / 2;
    let mut theta = vec![0.0; sh.dim];
    let mut points = Vec::new();
    let mut next_mark = 0usize;
    let marks: &[f64] = if with_curve { &sh.marks } else { &[] };
    let advance = |passes: f64, theta: &[f64], points: &mut Vec<CurvePoint>, next_mark: &mut usize| {
        while *next_mark < marks.len() && marks[*next_mark] <= passes + 1e-12 {
            points.push(CurvePoint {
                passes: marks[*next_mark],
                error: sh.eval(theta),
            });
            *next_mark += 1;
        }
    };
    advance(0.0, &theta, &mut points, &mut next_mark);

    let mut snapshot_res = vec![0.0; n];
    let mut mu = vec![0.0; sh.dim];
    let mut diverged = false;
    'outer: for ep in 0..epochs {
        // snapshot pass: cache residuals and the full gradient at theta
        mu.iter_mut().for_each(|v| *v = 0.0);
        for (i, pt) in sh.train.iter().enumerate() {
            let u = dot(&pt.x, &theta);
            let r = pt.y - sh.model.transfer(u);
            if !r.is_finite() {
                diverged = true;
                break 'outer;
            }
            snapshot_res[i] = r;
            for (m, &xi) in mu.iter_mut().zip(pt.x.iter()) {
                *m -= r * xi / nf;
            }
        }
        let passes_after_snapshot = (2 * ep + 1) as f64;
        advance(passes_after_snapshot, &theta, &mut points, &mut next_mark);

        for t in 0..n {
            let i = (rng.next_u64() % n as u64) as usize;
            let pt = &sh.train[i];
            let u = dot(&pt.x, &theta);
            let r_cur = pt.y - sh.model.transfer(u);
            // g = (snapshot residual - current residual) * x + mu
            let scale = snapshot_res[i] - r_cur;
            for ((th, &xi), &m) in theta.iter_mut().zip(pt.x.iter()).zip(mu.iter()) {
                *th -= eta * (scale * xi + m);
            }
            if t % 256 == 255 || t + 1 == n {
                let nsq = norm_sq(&theta);
                if !nsq.is_finite() || nsq > DIVERGENCE_THRESHOLD * DIVERGENCE_THRESHOLD {
                    diverged = true;
                    break 'outer;
                }
            }
            advance(
                passes_after_snapshot + (t + 1) as f64 / nf,
                &theta,
                &mut points,
                &mut next_mark,
            );
        }
    }
    SvrgRun {
        theta,
        points,
        diverged,
    }
}

fn run_svrg_entry(sh: &Shared) -> Result<MethodCurve> {
    let eta = tune_by_training_loss(sh, |sh, eta, rng| {
        let run = run_svrg(sh, eta, rng, false);
        (run.theta, run.diverged)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(sh.cfg.seed, 2));
    let run = run_svrg(sh, eta, &mut rng, true);
    Ok(MethodCurve {
        method: Method::Svrg,
        tuned: Some(eta),
        points: run.points,
        final_theta: run.theta,
        diverged: run.diverged,
    })
}

// --- decaying-rate implicit SGD (classical and averaged) -------------------

struct DecayRun {
    estimate: Vec<f64>,
    points: Vec<CurvePoint>,
    diverged: bool,
}

/// Implicit SGD with rate c * n^{-power}; with `average` the running mean of
/// the iterates is the reported estimate.
fn run_decay(
    sh: &Shared,
    c: f64,
    power: f64,
    average: bool,
    stream_seed: u64,
    with_curve: bool,
) -> Result<DecayRun> {
    let n = sh.train.len();
    let nf = n as f64;
    let total = (sh.cfg.budget_passes * n) as u64;
    let mut stream = ResampledStream::new(sh.train.to_vec(), stream_seed)?;
    let mut state = SgdState::new(vec![0.0; sh.dim]);
    let mut mean = RunningMean::new(sh.dim);
    let mut points = Vec::new();
    let mut next_mark = 0usize;
    let marks: &[f64] = if with_curve { &sh.marks } else { &[] };
    let mut diverged = false;

    let estimate_of = |state: &SgdState, mean: &RunningMean| -> Vec<f64> {
        if average && mean.count() > 0 {
            mean.mean().to_vec()
        } else {
            state.theta.clone()
        }
    };
    if !marks.is_empty() {
        points.push(CurvePoint {
            passes: 0.0,
            error: sh.eval(&estimate_of(&state, &mean)),
        });
        next_mark = 1;
    }

    for step in 1..=total {
        let gamma = c * (step as f64).powf(-power);
        let step_result = {
            let point = stream.next_point();
            step_implicit(sh.model, point, &mut state, gamma)
        };
        match step_result {
            Ok(()) => {}
            Err(SgdiagError::NonFinite { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        let nsq = norm_sq(&state.theta);
        if !nsq.is_finite() || nsq > DIVERGENCE_THRESHOLD * DIVERGENCE_THRESHOLD {
            diverged = true;
            break;
        }
        if average {
            mean.update(&state.theta);
        }
        let passes = step as f64 / nf;
        while next_mark < marks.len() && marks[next_mark] <= passes + 1e-12 {
            points.push(CurvePoint {
                passes: marks[next_mark],
                error: sh.eval(&estimate_of(&state, &mean)),
            });
            next_mark += 1;
        }
    }
    Ok(DecayRun {
        estimate: estimate_of(&state, &mean),
        points,
        diverged,
    })
}

fn run_decay_entry(sh: &Shared, method: Method, power: f64, average: bool) -> Result<MethodCurve> {
    let (tag_tune, tag_eval) = if average { (5u64, 6u64) } else { (3u64, 4u64) };
    let grid = &sh.cfg.tuning_grid;
    let losses: Vec<f64> = grid
        .par_iter()
        .enumerate()
        .map(|(gi, &c)| -> Result<f64> {
            let run = run_decay(
                sh,
                c,
                power,
                average,
                sub_seed(sh.cfg.seed, 1000 + tag_tune * 100 + gi as u64),
                false,
            )?;
            if run.diverged {
                return Ok(f64::INFINITY);
            }
            Ok(training_loss(sh.model, &run.estimate, sh.train)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let c = pick_best(grid, &losses)?;
    let run = run_decay(sh, c, power, average, sub_seed(sh.cfg.seed, tag_eval), true)?;
    Ok(MethodCurve {
        method,
        tuned: Some(c),
        points: run.points,
        final_theta: run.estimate,
        diverged: run.diverged,
    })
}

// --- tuning ----------------------------------------------------------------

/// Run the method once per grid value with a tuning RNG, score by final
/// training loss, and return the best value (first on ties; diverged runs
/// score infinity).
fn tune_by_training_loss(
    sh: &Shared,
    run_once: impl Fn(&Shared, f64, &mut ChaCha8Rng) -> (Vec<f64>, bool) + Sync,
) -> Result<f64> {
    let grid = &sh.cfg.tuning_grid;
    let losses: Vec<f64> = grid
        .par_iter()
        .enumerate()
        .map(|(gi, &eta)| -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(sh.cfg.seed, 1000 + gi as u64));
            let (theta, diverged) = run_once(sh, eta, &mut rng);
            if diverged || theta.iter().any(|v| !v.is_finite()) {
                return Ok(f64::INFINITY);
            }
            Ok(training_loss(sh.model, &theta, sh.train)?)
        })
        .collect::<Result<Vec<_>>>()?;
    pick_best(grid, &losses)
}

fn pick_best(grid: &[f64], losses: &[f64]) -> Result<f64> {
    let mut best = None;
    for (i, &l) in losses.iter().enumerate() {
        let better = match best {
            None => l.is_finite(),
            Some((_, bl)) => l.is_finite() && l < bl,
        };
        if better {
            best = Some((i, l));
        }
    }
    match best {
        Some((i, _)) => Ok(grid[i]),
        None => Err(SgdiagError::InvalidConfig(
            "every tuning-grid value diverged or scored a non-finite loss".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::sim::{simulate_dataset, SimModelKind, SimSpec};

    fn small_quadratic() -> (Vec<DataPoint>, Vec<f64>) {
        let spec = SimSpec {
            p: 3,
            n: 400,
            model: SimModelKind::Normal,
            sigma: Some(0.5),
            snr: None,
            theta_star: None,
            sigma0: 1.0,
            seed: 31,
        };
        let (data, truth) = simulate_dataset(&spec).unwrap();
        (data, truth.theta_star)
    }

    fn quick_config(seed: u64) -> CompareConfig {
        CompareConfig {
            budget_passes: 4,
            seed,
            tuning_grid: vec![0.004, 0.032, 0.256],
            ..CompareConfig::default()
        }
    }

    #[test]
    fn all_methods_beat_the_zero_start_on_an_easy_problem() {
        let (data, truth) = small_quadratic();
        let cfg = quick_config(1);
        let methods = [
            Method::IsgdHalf,
            Method::Svrg,
            Method::ClassicalIsgd,
            Method::AveragedIsgd,
        ];
        let curves = compare_methods(
            &LossModel::Quadratic,
            &data,
            &EvalMetric::ParamError(&truth),
            &methods,
            &cfg,
        )
        .unwrap();
        assert_eq!(curves.len(), 4);
        for (m, curve) in methods.iter().zip(&curves) {
            assert_eq!(curve.method, *m);
            assert!(!curve.diverged, "{:?} diverged", m);
            let start = curve.points.first().unwrap();
            assert_eq!(start.passes, 0.0);
            let final_err = squared_distance(&curve.final_theta, &truth);
            assert!(
                final_err < 0.5 * start.error,
                "{:?}: final {} vs start {}",
                m,
                final_err,
                start.error
            );
            // curves never report beyond the budget
            for p in &curve.points {
                assert!(p.passes <= cfg.budget_passes as f64 + 1e-9);
            }
        }
        // tuned methods report their constant, the halving method does not
        assert!(curves[0].tuned.is_none());
        for curve in &curves[1..] {
            assert!(curve.tuned.is_some());
        }
    }

    #[test]
    fn comparison_is_deterministic_in_the_seed() {
        let (data, truth) = small_quadratic();
        let cfg = quick_config(9);
        let run = || {
            compare_methods(
                &LossModel::Quadratic,
                &data,
                &EvalMetric::ParamError(&truth),
                &[Method::Svrg, Method::IsgdHalf],
                &cfg,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        for (ca, cb) in a.iter().zip(&b) {
            assert_eq!(ca.final_theta, cb.final_theta);
            assert_eq!(ca.tuned, cb.tuned);
            let ea: Vec<f64> = ca.points.iter().map(|p| p.error).collect();
            let eb: Vec<f64> = cb.points.iter().map(|p| p.error).collect();
            assert_eq!(ea, eb);
        }
    }

    #[test]
    fn holdout_metric_drives_the_curves() {
        let (data, _) = small_quadratic();
        let (train, test) = data.split_at(300);
        let cfg = quick_config(2);
        let curves = compare_methods(
            &LossModel::Quadratic,
            train,
            &EvalMetric::Holdout(test),
            &[Method::ClassicalIsgd],
            &cfg,
        )
        .unwrap();
        let pts = &curves[0].points;
        assert!(pts.last().unwrap().error < pts.first().unwrap().error);
    }

    #[test]
    fn zero_budget_and_empty_training_set_are_rejected() {
        let (data, truth) = small_quadratic();
        let mut cfg = quick_config(3);
        cfg.budget_passes = 0;
        assert!(compare_methods(
            &LossModel::Quadratic,
            &data,
            &EvalMetric::ParamError(&truth),
            &[Method::IsgdHalf],
            &cfg,
        )
        .is_err());
        let cfg = quick_config(3);
        assert!(compare_methods(
            &LossModel::Quadratic,
            &[],
            &EvalMetric::ParamError(&truth),
            &[Method::IsgdHalf],
            &cfg,
        )
        .is_err());
    }

    #[test]
    fn svrg_epoch_accounting_stays_within_budget() {
        let (data, truth) = small_quadratic();
        let cfg = quick_config(4);
        let curves = compare_methods(
            &LossModel::Quadratic,
            &data,
            &EvalMetric::ParamError(&truth),
            &[Method::Svrg],
            &cfg,
        )
        .unwrap();
        // budget 4 passes = 2 epochs; the curve must cover all 4 passes
        let last = curves[0].points.last().unwrap();
        assert!((last.passes - 4.0).abs() < 1e-9);
    }
}
