//! Where does the convergence statistic turn negative? This module estimates
//! the expected inner product of two successive stochastic gradients as a
//! function of the starting point (`drift_at`), maps it over a 2-D grid of
//! starting points (`map_drift_region` — negative cells are where the
//! detector fires), and, for comparison, locates the region where the
//! iterates of a long chain actually live (`empirical_convergence_region`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{step_explicit, step_implicit, SgdState, UpdateKind};
use crate::error::{Result, SgdiagError};
pub use crate::generate::{GaussianLinearGen, LogisticGen, PointGenerator, ScalarMeanGen};
use crate::model::LossModel;
use crate::numeric::dot;

/// Monte Carlo estimate of the two-step gradient inner product at a point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DriftEstimate {
    pub mean_delta: f64,
    pub std_err: f64,
    pub reps: u64,
}

/// Class of a grid cell from its drift estimate at two standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CellClass {
    /// mean + 2 se < 0: the detector is drawn toward firing here.
    Negative,
    /// mean - 2 se > 0: the statistic still grows here.
    Positive,
    /// The confidence interval straddles zero.
    Indeterminate,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GridSpec {
    /// Coordinate indices varied by the grid; all other coordinates stay at
    /// the supplied center point.
    pub axis1: usize,
    pub axis2: usize,
    pub min1: f64,
    pub max1: f64,
    pub min2: f64,
    pub max2: f64,
    /// Number of grid nodes per axis (the grid has `res * res` cells).
    pub res: usize,
}

impl GridSpec {
    fn validate(&self, dim: usize) -> Result<()> {
        if self.axis1 == self.axis2 {
            return Err(SgdiagError::InvalidConfig(format!(
                "grid axes must differ, both are {}",
                self.axis1
            )));
        }
        if self.axis1 >= dim || self.axis2 >= dim {
            return Err(SgdiagError::InvalidConfig(format!(
                "grid axes ({}, {}) out of range for dimension {}",
                self.axis1, self.axis2, dim
            )));
        }
        if !(self.max1 > self.min1) || !(self.max2 > self.min2) {
            return Err(SgdiagError::InvalidConfig(
                "grid must have positive extent on both axes".into(),
            ));
        }
        if self.res < 2 {
            return Err(SgdiagError::InvalidConfig(format!(
                "grid resolution must be at least 2, got {}",
                self.res
            )));
        }
        Ok(())
    }

    fn coord1(&self, i: usize) -> f64 {
        self.min1 + (self.max1 - self.min1) * i as f64 / (self.res - 1) as f64
    }

    fn coord2(&self, i: usize) -> f64 {
        self.min2 + (self.max2 - self.min2) * i as f64 / (self.res - 1) as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionCell {
    pub c1: f64,
    pub c2: f64,
    pub estimate: DriftEstimate,
    pub class: CellClass,
    /// Filled by `overlay_occupancy`: how many recorded iterates fall
    /// nearest to this cell.
    pub occupancy: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionMap {
    pub grid: GridSpec,
    /// Row-major: cell `i2 * res + i1` sits at `(coord1(i1), coord2(i2))`.
    pub cells: Vec<RegionCell>,
    pub center: Vec<f64>,
}

impl RegionMap {
    /// Bin projected iterates into their nearest cells. Points outside the
    /// grid are clipped to the edge so the occupancy counts always sum to
    /// the number of points given.
    pub fn overlay_occupancy(&mut self, points: &[(f64, f64)]) {
        let res = self.grid.res;
        let step1 = (self.grid.max1 - self.grid.min1) / (res - 1) as f64;
        let step2 = (self.grid.max2 - self.grid.min2) / (res - 1) as f64;
        for &(a, b) in points {
            let i1 = (((a - self.grid.min1) / step1).round().max(0.0) as usize).min(res - 1);
            let i2 = (((b - self.grid.min2) / step2).round().max(0.0) as usize).min(res - 1);
            self.cells[i2 * res + i1].occupancy += 1;
        }
    }
}

fn check_drift_args(theta_len: usize, gen_dim: usize, gamma: f64, reps: u64) -> Result<()> {
    if theta_len != gen_dim {
        return Err(SgdiagError::DimensionMismatch {
            expected: gen_dim,
            got: theta_len,
        });
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(SgdiagError::InvalidConfig(format!(
            "gamma must be positive and finite, got {gamma}"
        )));
    }
    if reps < 100 {
        return Err(SgdiagError::InvalidConfig(format!(
            "drift estimation needs at least 100 repetitions, got {reps}"
        )));
    }
    Ok(())
}

/// Core estimator: repeatedly take two fresh-data steps from `theta` and
/// average the inner product of the two gradient surrogates (for the
/// implicit update the realized step divided by `-gamma`).
fn drift_core(
    model: &LossModel,
    generator: &dyn PointGenerator,
    theta: &[f64],
    gamma: f64,
    update: UpdateKind,
    reps: u64,
    rng: &mut ChaCha8Rng,
) -> Result<DriftEstimate> {
    let mut state = SgdState::new(theta.to_vec());
    let mut g1 = vec![0.0; theta.len()];
    let mut count = 0u64;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let step = |state: &mut SgdState, point: &crate::model::DataPoint| -> Result<()> {
        match update {
            UpdateKind::Explicit => step_explicit(model, point, state, gamma),
            UpdateKind::Implicit => step_implicit(model, point, state, gamma),
        }
    };
    for _ in 0..reps {
        state.theta.copy_from_slice(theta);
        let p1 = generator.draw(rng);
        step(&mut state, &p1)?;
        g1.copy_from_slice(state.last_grad.as_deref().expect("step sets the gradient"));
        let p2 = generator.draw(rng);
        step(&mut state, &p2)?;
        let g2 = state.last_grad.as_deref().expect("step sets the gradient");
        let v = dot(&g1, g2);
        if !v.is_finite() {
            return Err(SgdiagError::NonFinite { index: 0 });
        }
        count += 1;
        let d = v - mean;
        mean += d / count as f64;
        m2 += d * (v - mean);
    }
    let std_err = if count > 1 {
        (m2 / (count as f64 * (count - 1) as f64)).max(0.0).sqrt()
    } else {
        0.0
    };
    Ok(DriftEstimate {
        mean_delta: mean,
        std_err,
        reps: count,
    })
}

/// Seeded front-end to the drift estimator; identical seeds give identical
/// estimates.
pub fn drift_at(
    model: &LossModel,
    generator: &dyn PointGenerator,
    theta: &[f64],
    gamma: f64,
    update: UpdateKind,
    reps: u64,
    seed: u64,
) -> Result<DriftEstimate> {
    check_drift_args(theta.len(), generator.dim(), gamma, reps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    drift_core(model, generator, theta, gamma, update, reps, &mut rng)
}

/// Evaluate the drift on every node of a 2-D grid around `center` and
/// classify each cell at two standard errors. Cells are estimated in
/// parallel, each on its own RNG stream of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn map_drift_region(
    model: &LossModel,
    generator: &dyn PointGenerator,
    center: &[f64],
    grid: &GridSpec,
    gamma: f64,
    update: UpdateKind,
    reps: u64,
    seed: u64,
) -> Result<RegionMap> {
    check_drift_args(center.len(), generator.dim(), gamma, reps)?;
    grid.validate(center.len())?;
    let res = grid.res;
    let cells: Vec<RegionCell> = (0..res * res)
        .into_par_iter()
        .map(|idx| {
            let i1 = idx % res;
            let i2 = idx / res;
            let c1 = grid.coord1(i1);
            let c2 = grid.coord2(i2);
            let mut theta = center.to_vec();
            theta[grid.axis1] = c1;
            theta[grid.axis2] = c2;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64 + 1);
            let estimate = drift_core(model, generator, &theta, gamma, update, reps, &mut rng)?;
            let class = if estimate.mean_delta + 2.0 * estimate.std_err < 0.0 {
                CellClass::Negative
            } else if estimate.mean_delta - 2.0 * estimate.std_err > 0.0 {
                CellClass::Positive
            } else {
                CellClass::Indeterminate
            };
            Ok(RegionCell {
                c1,
                c2,
                estimate,
                class,
                occupancy: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionMap {
        grid: *grid,
        cells,
        center: center.to_vec(),
    })
}

/// Where the iterates actually settle: the smallest (greedily trimmed)
/// axis-aligned box holding the requested fraction of pooled post-burn-in
/// iterates, plus their convex hull.
#[derive(Debug, Clone, Serialize)]
pub struct RegionSummary {
    pub box_lo: [f64; 2],
    pub box_hi: [f64; 2],
    /// Half the diagonal of the box: one number for "how far stationary
    /// iterates wander from the middle".
    pub radius: f64,
    pub hull: Vec<(f64, f64)>,
    pub coverage: f64,
    pub n_pooled: usize,
    pub n_retained: usize,
}

/// Pooled post-burn-in iterates of many independent chains, projected onto
/// two coordinates: the raw sample behind `empirical_convergence_region`.
/// Chain k runs on RNG stream k+1 of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn pooled_iterate_projections(
    model: &LossModel,
    generator: &dyn PointGenerator,
    theta0: &[f64],
    gamma: f64,
    update: UpdateKind,
    chains: u64,
    steps: u64,
    burn_frac: f64,
    seed: u64,
    axes: (usize, usize),
) -> Result<Vec<(f64, f64)>> {
    if theta0.len() != generator.dim() {
        return Err(SgdiagError::DimensionMismatch {
            expected: generator.dim(),
            got: theta0.len(),
        });
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(SgdiagError::InvalidConfig(format!(
            "gamma must be positive and finite, got {gamma}"
        )));
    }
    if chains == 0 || steps == 0 {
        return Err(SgdiagError::InvalidConfig(
            "need at least one chain and one step".into(),
        ));
    }
    if !(0.0..1.0).contains(&burn_frac) {
        return Err(SgdiagError::InvalidConfig(format!(
            "burn_frac must lie in [0, 1), got {burn_frac}"
        )));
    }
    if axes.0 == axes.1 || axes.0 >= theta0.len() || axes.1 >= theta0.len() {
        return Err(SgdiagError::InvalidConfig(format!(
            "projection axes {:?} invalid for dimension {}",
            axes,
            theta0.len()
        )));
    }
    let burn = (burn_frac * steps as f64).floor() as u64;
    if burn >= steps {
        return Err(SgdiagError::InvalidConfig(
            "burn-in swallows every step".into(),
        ));
    }

    Ok((0..chains)
        .into_par_iter()
        .map(|chain| -> Result<Vec<(f64, f64)>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chain + 1);
            let mut state = SgdState::new(theta0.to_vec());
            let mut out = Vec::with_capacity((steps - burn) as usize);
            for n in 1..=steps {
                let point = generator.draw(&mut rng);
                match update {
                    UpdateKind::Explicit => step_explicit(model, &point, &mut state, gamma)?,
                    UpdateKind::Implicit => step_implicit(model, &point, &mut state, gamma)?,
                }
                if n > burn {
                    out.push((state.theta[axes.0], state.theta[axes.1]));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

/// Run many independent chains, pool their post-burn-in iterates projected
/// onto two coordinates, and summarize where they live.
#[allow(clippy::too_many_arguments)]
pub fn empirical_convergence_region(
    model: &LossModel,
    generator: &dyn PointGenerator,
    theta0: &[f64],
    gamma: f64,
    update: UpdateKind,
    chains: u64,
    steps: u64,
    burn_frac: f64,
    coverage: f64,
    seed: u64,
    axes: (usize, usize),
) -> Result<RegionSummary> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(SgdiagError::InvalidConfig(format!(
            "coverage must lie in (0, 1], got {coverage}"
        )));
    }
    let pooled = pooled_iterate_projections(
        model, generator, theta0, gamma, update, chains, steps, burn_frac, seed, axes,
    )?;
    let n_pooled = pooled.len();
    let alive = trim_to_coverage(&pooled, coverage);
    let retained: Vec<(f64, f64)> = pooled
        .iter()
        .zip(alive.iter())
        .filter(|(_, &a)| a)
        .map(|(&p, _)| p)
        .collect();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for &(a, b) in &retained {
        lo[0] = lo[0].min(a);
        hi[0] = hi[0].max(a);
        lo[1] = lo[1].min(b);
        hi[1] = hi[1].max(b);
    }
    let radius = 0.5 * ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt();
    Ok(RegionSummary {
        box_lo: lo,
        box_hi: hi,
        radius,
        hull: convex_hull(&retained),
        coverage,
        n_pooled,
        n_retained: retained.len(),
    })
}

/// Greedily drop extreme points, one at a time, always the one whose removal
/// shrinks the bounding-box area most, until the requested fraction remains.
fn trim_to_coverage(points: &[(f64, f64)], coverage: f64) -> Vec<bool> {
    let m = points.len();
    let mut alive = vec![true; m];
    // nudge before flooring: (1 - 0.9) * 100 lands just below 10 in floats
    let drops = ((((1.0 - coverage) * m as f64) + 1e-9).floor() as usize).min(m.saturating_sub(2));
    if drops == 0 {
        return alive;
    }
    let mut by_x: Vec<u32> = (0..m as u32).collect();
    by_x.sort_by(|&a, &b| {
        points[a as usize]
            .0
            .partial_cmp(&points[b as usize].0)
            .expect("finite coordinates")
    });
    let mut by_y: Vec<u32> = (0..m as u32).collect();
    by_y.sort_by(|&a, &b| {
        points[a as usize]
            .1
            .partial_cmp(&points[b as usize].1)
            .expect("finite coordinates")
    });

    // Pointers converge inwards; dead entries are skipped lazily.
    let (mut xl, mut xr, mut yl, mut yr) = (0usize, m - 1, 0usize, m - 1);
    for _ in 0..drops {
        while !alive[by_x[xl] as usize] {
            xl += 1;
        }
        while !alive[by_x[xr] as usize] {
            xr -= 1;
        }
        while !alive[by_y[yl] as usize] {
            yl += 1;
        }
        while !alive[by_y[yr] as usize] {
            yr -= 1;
        }
        let second = |order: &[u32], from: usize, forward: bool, x_axis: bool| -> f64 {
            let mut i = from;
            loop {
                i = if forward { i + 1 } else { i - 1 };
                if alive[order[i] as usize] {
                    let p = points[order[i] as usize];
                    return if x_axis { p.0 } else { p.1 };
                }
            }
        };
        let xmin = points[by_x[xl] as usize].0;
        let xmax = points[by_x[xr] as usize].0;
        let ymin = points[by_y[yl] as usize].1;
        let ymax = points[by_y[yr] as usize].1;
        let w = xmax - xmin;
        let h = ymax - ymin;
        // area after removing each current extreme (other axis unchanged)
        let candidates = [
            (by_x[xl] as usize, (xmax - second(&by_x, xl, true, true)) * h),
            (by_x[xr] as usize, (second(&by_x, xr, false, true) - xmin) * h),
            (by_y[yl] as usize, w * (ymax - second(&by_y, yl, true, false))),
            (by_y[yr] as usize, w * (second(&by_y, yr, false, false) - ymin)),
        ];
        let victim = candidates
            .iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite areas"))
            .expect("four candidates")
            .0;
        alive[victim] = false;
    }
    alive
}

/// Andrew monotone-chain convex hull, counter-clockwise, without collinear
/// points.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p: Vec<(f64, f64)> = points.to_vec();
    p.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    p.dedup();
    if p.len() <= 2 {
        return p;
    }
    fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &pt in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], pt) <= 0.0 {
            lower.pop();
        }
        lower.push(pt);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &pt in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], pt) <= 0.0 {
            upper.pop();
        }
        upper.push(pt);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}
