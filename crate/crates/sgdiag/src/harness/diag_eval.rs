//! Does the detector fire meaningfully? For each learning rate this runs
//! many independent chains to activation at iteration tau, then regresses
//! the squared error at tau/2 (memory of the start should remain) and at
//! 2*tau (it should be gone) on the starting error, with tau as a control.

use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostic::DiagnosticState;
use crate::engine::{step_explicit, step_implicit, DataStream, ResampledStream, SgdState, UpdateKind};
use crate::error::{Result, SgdiagError};
use crate::harness::ols::{ols_fit, OlsFit};
use crate::harness::sim::{draw_theta0, simulate_dataset, SimSpec};
use crate::numeric::{norm_sq, squared_distance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalProtocol {
    /// Independent chains per learning rate.
    pub runs: usize,
    /// Detector burn-in as a fraction of the dataset size.
    pub burnin_frac: f64,
    /// Nominal horizon in passes over the dataset; chains activating late
    /// run past it (flagged `extended`) so the 2*tau reading always exists.
    pub horizon_passes: usize,
    pub update: UpdateKind,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DiagnosticEvalRecord {
    pub gamma: f64,
    pub run: usize,
    /// Activation iteration of this chain.
    pub tau: u64,
    /// Squared distance to the truth at the start, at tau/2 (integer
    /// division), and at 2*tau.
    pub e0: f64,
    pub e_half_tau: f64,
    pub e_two_tau: f64,
    pub extended: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GammaEvaluation {
    pub gamma: f64,
    pub records: Vec<DiagnosticEvalRecord>,
    /// Chains that never activated (or left the representable range).
    pub n_failed: usize,
    /// E_{tau/2} ~ 1 + E_0 + tau.
    pub fit_mid: OlsFit,
    /// E_{2 tau} ~ 1 + E_0 + tau.
    pub fit_end: OlsFit,
}

enum RunOutcome {
    Activated(DiagnosticEvalRecord),
    Failed,
}

fn run_one(
    gamma: f64,
    run: usize,
    spec: &SimSpec,
    proto: &EvalProtocol,
    burnin: u64,
    horizon: u64,
) -> Result<RunOutcome> {
    let mut dspec = spec.clone();
    dspec.seed = spec.seed + run as u64;
    let (data, truth) = simulate_dataset(&dspec)?;
    let model = dspec.loss_model();
    let mut rng = ChaCha8Rng::seed_from_u64(dspec.seed);
    rng.set_stream(1);
    let theta0 = draw_theta0(&dspec, &truth.theta_star, &mut rng);
    let mut stream = ResampledStream::new(data, proto.seed + 500_000 + run as u64)?;

    let mut state = SgdState::new(theta0);
    let mut diag = DiagnosticState::new(burnin);
    let mut e_hist: Vec<f64> = Vec::with_capacity(horizon as usize + 1);
    e_hist.push(squared_distance(&state.theta, &truth.theta_star));
    let mut tau: Option<u64> = None;
    let mut n = 0u64;
    loop {
        match tau {
            Some(t) => {
                if n >= 2 * t {
                    break;
                }
            }
            None => {
                if n >= horizon {
                    return Ok(RunOutcome::Failed);
                }
            }
        }
        n += 1;
        let step_result = {
            let point = stream.next_point();
            match proto.update {
                UpdateKind::Explicit => step_explicit(&model, point, &mut state, gamma),
                UpdateKind::Implicit => step_implicit(&model, point, &mut state, gamma),
            }
        };
        match step_result {
            Ok(()) => {}
            Err(SgdiagError::NonFinite { .. }) => return Ok(RunOutcome::Failed),
            Err(e) => return Err(e),
        }
        if !norm_sq(&state.theta).is_finite() {
            return Ok(RunOutcome::Failed);
        }
        e_hist.push(squared_distance(&state.theta, &truth.theta_star));
        if tau.is_none() {
            let grad = state.last_grad.as_deref().expect("step sets the gradient");
            diag.observe(grad)?;
            tau = diag.check_activation();
        }
    }
    let t = tau.expect("loop exits with activation or returns Failed");
    Ok(RunOutcome::Activated(DiagnosticEvalRecord {
        gamma,
        run,
        tau: t,
        e0: e_hist[0],
        e_half_tau: e_hist[(t / 2) as usize],
        e_two_tau: e_hist[(2 * t) as usize],
        extended: 2 * t > horizon,
    }))
}

/// Evaluate the detector on every learning rate of the grid. Datasets and
/// starting points are shared across rates (run r uses the same data for
/// every gamma), so rate effects are paired. A rate where more than 20% of
/// chains fail to activate aborts the evaluation with a report in the error.
pub fn evaluate_diagnostic(
    gammas: &[f64],
    spec: &SimSpec,
    proto: &EvalProtocol,
) -> Result<Vec<GammaEvaluation>> {
    if gammas.is_empty() {
        return Err(SgdiagError::Empty("no learning rates to evaluate".into()));
    }
    for &g in gammas {
        if !(g > 0.0) || !g.is_finite() {
            return Err(SgdiagError::InvalidConfig(format!(
                "learning rates must be positive and finite, got {g}"
            )));
        }
    }
    if proto.runs < 10 {
        return Err(SgdiagError::InvalidConfig(format!(
            "need at least 10 runs per rate for the regressions, got {}",
            proto.runs
        )));
    }
    if !(proto.burnin_frac > 0.0 && proto.burnin_frac < 1.0) {
        return Err(SgdiagError::InvalidConfig(format!(
            "burnin_frac must lie in (0, 1), got {}",
            proto.burnin_frac
        )));
    }
    if proto.horizon_passes == 0 {
        return Err(SgdiagError::InvalidConfig(
            "horizon_passes must be at least 1".into(),
        ));
    }
    spec.validate()?;
    let burnin = (proto.burnin_frac * spec.n as f64).ceil() as u64;
    let horizon = (proto.horizon_passes * spec.n) as u64;

    let mut out = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let outcomes: Vec<RunOutcome> = (0..proto.runs)
            .into_par_iter()
            .map(|run| run_one(gamma, run, spec, proto, burnin, horizon))
            .collect::<Result<Vec<_>>>()?;
        let mut records = Vec::new();
        let mut n_failed = 0usize;
        for o in outcomes {
            match o {
                RunOutcome::Activated(r) => records.push(r),
                RunOutcome::Failed => n_failed += 1,
            }
        }
        if 5 * n_failed > proto.runs {
            return Err(SgdiagError::InvalidConfig(format!(
                "gamma {gamma}: {n_failed} of {} chains failed to activate within {} passes \
                 (more than 20%); raise the horizon or drop this rate",
                proto.runs, proto.horizon_passes
            )));
        }
        let design: Vec<Vec<f64>> = records
            .iter()
            .map(|r| vec![1.0, r.e0, r.tau as f64])
            .collect();
        let y_mid: Vec<f64> = records.iter().map(|r| r.e_half_tau).collect();
        let y_end: Vec<f64> = records.iter().map(|r| r.e_two_tau).collect();
        let fit_mid = ols_fit(&design, &y_mid)?;
        let fit_end = ols_fit(&design, &y_end)?;
        out.push(GammaEvaluation {
            gamma,
            records,
            n_failed,
            fit_mid,
            fit_end,
        });
    }
    Ok(out)
}
