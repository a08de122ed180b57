//! Python bindings for the convergence-diagnostic SGD library.
//!
//! Build with `cargo build -p sgdiag-py`, copy the resulting
//! `libsgdiag_py.so` somewhere on `sys.path` as `sgdiag_py.so`, and
//! `import sgdiag_py`. `python/smoke_test.py` at the repository root does
//! exactly that and exercises everything exposed here.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sgdiag::diagnostic::DiagnosticState;
use sgdiag::engine::{step_explicit, step_implicit, ResampledStream, SgdState, UpdateKind};
use sgdiag::halving::{run_sgd_half, HalvingConfig};
use sgdiag::harness::sim::{simulate_dataset, SimModelKind, SimSpec};
use sgdiag::model::{DataPoint, LossModel};

fn to_py(e: sgdiag::error::SgdiagError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Loss family: quadratic (linear regression) or logistic.
#[pyclass(module = "sgdiag_py", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: LossModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn quadratic() -> Self {
        Model {
            inner: LossModel::Quadratic,
        }
    }

    #[staticmethod]
    fn logistic() -> Self {
        Model {
            inner: LossModel::Logistic,
        }
    }

    /// Mean response h(u) at linear predictor u.
    fn transfer(&self, u: f64) -> f64 {
        self.inner.transfer(u)
    }

    /// Pointwise loss, where the family defines one.
    fn loss(&self, y: f64, u: f64) -> Option<f64> {
        self.inner.loss(y, u)
    }

    /// Gradient of the pointwise loss at theta.
    fn gradient(&self, x: Vec<f64>, y: f64, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner
            .gradient(&DataPoint::new(x, y), &theta)
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        match self.inner {
            LossModel::Quadratic => "Model.quadratic()".into(),
            LossModel::Logistic => "Model.logistic()".into(),
            LossModel::CustomGlm { .. } => "Model(custom)".into(),
        }
    }
}

/// A constant-rate SGD chain: holds the iterate, is fed one observation per
/// step, and hands back the gradient surrogate that the convergence detector
/// consumes (for implicit steps, the realized step divided by -gamma).
#[pyclass(module = "sgdiag_py")]
struct Chain {
    model: LossModel,
    state: SgdState,
    gamma: f64,
    implicit: bool,
}

#[pymethods]
impl Chain {
    #[new]
    #[pyo3(signature = (model, theta0, gamma, implicit = true))]
    fn new(model: &Model, theta0: Vec<f64>, gamma: f64, implicit: bool) -> PyResult<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(PyValueError::new_err(format!(
                "gamma must be positive and finite, got {gamma}"
            )));
        }
        Ok(Chain {
            model: model.inner.clone(),
            state: SgdState::new(theta0),
            gamma,
            implicit,
        })
    }

    /// Advance one step on (x, y); returns this step's gradient surrogate.
    fn step(&mut self, x: Vec<f64>, y: f64) -> PyResult<Vec<f64>> {
        let point = DataPoint::new(x, y);
        if self.implicit {
            step_implicit(&self.model, &point, &mut self.state, self.gamma).map_err(to_py)?;
        } else {
            step_explicit(&self.model, &point, &mut self.state, self.gamma).map_err(to_py)?;
        }
        Ok(self.state.last_grad.clone().unwrap_or_default())
    }

    /// Current iterate.
    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.state.theta.clone()
    }

    /// Steps taken so far.
    #[getter]
    fn n(&self) -> u64 {
        self.state.n
    }
}

/// Running inner-product convergence detector: feed it successive gradient
/// surrogates; it activates once the running statistic turns negative after
/// the burn-in.
#[pyclass(module = "sgdiag_py")]
struct Diagnostic {
    inner: DiagnosticState,
}

#[pymethods]
impl Diagnostic {
    #[new]
    fn new(burnin: u64) -> Self {
        Diagnostic {
            inner: DiagnosticState::new(burnin),
        }
    }

    /// Feed one gradient surrogate.
    fn observe(&mut self, grad: Vec<f64>) -> PyResult<()> {
        self.inner.observe(&grad).map_err(to_py)
    }

    /// Current value of the running statistic.
    #[getter]
    fn statistic(&self) -> f64 {
        self.inner.s
    }

    /// Absolute iteration of the first activation since the last reset.
    fn activation(&self) -> Option<u64> {
        self.inner.check_activation()
    }

    /// Clear the statistic and the latch, with a new burn-in.
    fn reset(&mut self, burnin: u64) {
        self.inner.reset(burnin)
    }
}

/// Simulate a dataset with known ground truth. Features are standard normal;
/// labels follow the chosen family. Returns (xs, ys, theta_star).
#[pyfunction]
#[pyo3(signature = (p, n, model = "normal", sigma = None, snr = None, seed = 0))]
fn simulate(
    p: usize,
    n: usize,
    model: &str,
    sigma: Option<f64>,
    snr: Option<f64>,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let kind = match model {
        "normal" => SimModelKind::Normal,
        "logistic" => SimModelKind::Logistic,
        other => {
            return Err(PyValueError::new_err(format!(
                "model must be 'normal' or 'logistic', got {other:?}"
            )))
        }
    };
    let sigma = if kind == SimModelKind::Normal && sigma.is_none() && snr.is_none() {
        Some(3.0)
    } else {
        sigma
    };
    let spec = SimSpec {
        p,
        n,
        model: kind,
        sigma,
        snr,
        theta_star: None,
        sigma0: 0.0,
        seed,
    };
    let (points, truth) = simulate_dataset(&spec).map_err(to_py)?;
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for pnt in points {
        xs.push(pnt.x);
        ys.push(pnt.y);
    }
    Ok((xs, ys, truth.theta_star))
}

/// Run constant-rate SGD with automatic rate halving over a dataset sampled
/// with replacement, starting from zero. Returns (theta, detections,
/// final_gamma, diverged), where detections lists (iteration, rate before
/// that halving).
#[pyfunction]
#[pyo3(signature = (model, xs, ys, gamma0, burnin, maxit, seed = 0, implicit = true,
                    gamma_floor = 1e-8, halving_factor = 0.5, max_steps = None))]
#[allow(clippy::too_many_arguments)]
fn run_halving(
    model: &Model,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    gamma0: f64,
    burnin: u64,
    maxit: u64,
    seed: u64,
    implicit: bool,
    gamma_floor: f64,
    halving_factor: f64,
    max_steps: Option<u64>,
) -> PyResult<(Vec<f64>, Vec<(u64, f64)>, f64, bool)> {
    if xs.len() != ys.len() {
        return Err(PyValueError::new_err(format!(
            "got {} feature rows but {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let dim = xs.first().map_or(0, Vec::len);
    let data: Vec<DataPoint> = xs
        .into_iter()
        .zip(ys)
        .map(|(x, y)| DataPoint::new(x, y))
        .collect();
    let config = HalvingConfig {
        gamma0,
        burnin,
        maxit,
        gamma_floor,
        update: if implicit {
            UpdateKind::Implicit
        } else {
            UpdateKind::Explicit
        },
        halving_factor,
        divergence_threshold: 1e12,
        max_steps,
        trace_stride: 1_000_000,
    };
    let mut stream = ResampledStream::new(data, seed).map_err(to_py)?;
    let (theta, ht) = run_sgd_half(
        &model.inner,
        &mut stream,
        &config,
        &vec![0.0; dim],
        None,
        None,
    )
    .map_err(to_py)?;
    let detections = ht
        .detections
        .iter()
        .map(|d| (d.iteration, d.gamma_before))
        .collect();
    Ok((theta, detections, ht.final_gamma, ht.diverged))
}

#[pymodule]
fn sgdiag_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Chain>()?;
    m.add_class::<Diagnostic>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_halving, m)?)?;
    Ok(())
}
