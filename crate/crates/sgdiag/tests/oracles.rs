//! Oracle tests: every numerical pathway is checked against an independent
//! computation — a closed form, a brute-force re-derivation, or a frozen
//! high-precision constant. These encode the expected values first; the
//! library must reproduce them, never the other way around.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sgdiag::engine::{step_explicit, step_implicit, RunningMean, SgdState, UpdateKind};
use sgdiag::harness::ols::{ols_fit, two_sided_t_p_value};
use sgdiag::model::{DataPoint, LossModel};
use sgdiag::numeric::{dot, norm_sq};
use sgdiag::region::{drift_at, GaussianLinearGen};

fn normal_vec(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    (0..p).map(|_| rng.sample(StandardNormal)).collect()
}

fn fresh_state(theta: Vec<f64>) -> SgdState {
    SgdState::new(theta)
}

/// Partial-pivot Gaussian elimination, written here so the library's
/// scalar-lambda implicit step is checked against a fully independent solve.
fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &bi)| {
            let mut r = row.clone();
            r.push(bi);
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
            .unwrap();
        m.swap(col, piv);
        assert!(m[col][col].abs() > 1e-300, "singular oracle system");
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = m[row][n];
        for k in row + 1..n {
            s -= m[row][k] * x[k];
        }
        x[row] = s / m[row][row];
    }
    x
}

// ---------------------------------------------------------------------------
// Frozen high-precision constants
// ---------------------------------------------------------------------------

#[test]
fn implicit_logistic_scalar_step_matches_frozen_root() {
    // theta=0, x=1, y=1, gamma=1: the implicit update solves
    // lambda + h(lambda) = 1, whose root is this frozen 17-digit value.
    const LAMBDA_STAR: f64 = 0.401_058_137_541_547_04;
    let model = LossModel::Logistic;
    let mut state = fresh_state(vec![0.0]);
    let point = DataPoint::new(vec![1.0], 1.0);
    step_implicit(&model, &point, &mut state, 1.0).unwrap();
    assert!(
        (state.theta[0] - LAMBDA_STAR).abs() < 1e-11,
        "implicit logistic root: got {}, want {}",
        state.theta[0],
        LAMBDA_STAR
    );
}

#[test]
fn default_ground_truth_first_component_is_frozen() {
    // 10 * exp(-0.75 * 1), evaluated at full precision.
    let theta = sgdiag::harness::sim::default_theta_star(20);
    assert!((theta[0] - 4.723_665_527_410_147_1).abs() < 1e-12);
    assert_eq!(theta.len(), 20);
    // decaying and positive throughout
    for w in theta.windows(2) {
        assert!(w[1] < w[0] && w[1] > 0.0);
    }
}

#[test]
fn logistic_transfer_saturates_at_clamp_bound() {
    let model = LossModel::Logistic;
    // 1 - h(36) frozen from a 30-digit evaluation; by symmetry it equals
    // h(-36), the side that evaluates without cancellation.
    let tail = model.transfer(-36.0);
    let expect = 2.319_522_830_243_568_6e-16;
    assert!(
        (tail - expect).abs() < 1e-22,
        "1-h(36): got {tail:e}, want {expect:e}"
    );
    // the subtractive route collapses to ulp granularity but stays tiny
    assert!(1.0 - model.transfer(36.0) <= 4.0 * f64::EPSILON);
    // inputs beyond the clamp evaluate exactly at the bound
    assert_eq!(model.transfer(1.0e3), model.transfer(36.0));
    assert_eq!(model.transfer(-1.0e3), model.transfer(-36.0));
    assert_eq!(model.transfer(f64::INFINITY), model.transfer(36.0));
}

// ---------------------------------------------------------------------------
// Implicit step vs. independent linear-algebra oracle
// ---------------------------------------------------------------------------

#[test]
fn implicit_quadratic_step_matches_matrix_solve() {
    // theta_n solves (I + gamma x x^T) theta_n = theta + gamma y x.
    let model = LossModel::Quadratic;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..1000 {
        let p = rng.random_range(1..=5);
        let x = normal_vec(&mut rng, p);
        let y: f64 = rng.sample(StandardNormal);
        let theta = normal_vec(&mut rng, p);
        let gamma = 10f64.powf(rng.random_range(-3.0..1.0));

        let mut state = fresh_state(theta.clone());
        step_implicit(&model, &DataPoint::new(x.clone(), y), &mut state, gamma).unwrap();

        let mut a = vec![vec![0.0; p]; p];
        let mut b = vec![0.0; p];
        for i in 0..p {
            for j in 0..p {
                a[i][j] = gamma * x[i] * x[j] + if i == j { 1.0 } else { 0.0 };
            }
            b[i] = theta[i] + gamma * y * x[i];
        }
        let direct = solve_dense(&a, &b);
        for i in 0..p {
            assert!(
                (state.theta[i] - direct[i]).abs() <= 1e-12 * (1.0 + direct[i].abs()),
                "component {i}: scalar-lambda {} vs direct {}",
                state.theta[i],
                direct[i]
            );
        }
    }
}

#[test]
fn implicit_step_satisfies_fixed_point_residual() {
    // theta_n - theta_{n-1} + gamma * grad(y, x^T theta_n) must vanish.
    for model in [LossModel::Quadratic, LossModel::Logistic] {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..500 {
            let p = rng.random_range(1..=8);
            let x = normal_vec(&mut rng, p);
            let y = match model {
                LossModel::Logistic => f64::from(rng.random_bool(0.5)),
                _ => rng.sample(StandardNormal),
            };
            let theta = normal_vec(&mut rng, p);
            let gamma = 10f64.powf(rng.random_range(-3.0..1.5));
            let point = DataPoint::new(x, y);

            let mut state = fresh_state(theta.clone());
            step_implicit(&model, &point, &mut state, gamma).unwrap();

            let grad_new = model.gradient(&point, &state.theta).unwrap();
            let mut res_sq = 0.0;
            for i in 0..p {
                let r = state.theta[i] - theta[i] + gamma * grad_new[i];
                res_sq += r * r;
            }
            let bound = 1e-10 * (1.0 + norm_sq(&state.theta).sqrt());
            assert!(
                res_sq.sqrt() <= bound,
                "{model:?}: residual {} exceeds {}",
                res_sq.sqrt(),
                bound
            );
        }
    }
}

#[test]
fn explicit_and_implicit_steps_agree_to_second_order() {
    // For gamma = 1e-4 the two updates differ by O(gamma^2 * |grad|).
    let model = LossModel::Quadratic;
    let gamma = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    for _ in 0..200 {
        let p = rng.random_range(1..=6);
        let x = normal_vec(&mut rng, p);
        let y: f64 = rng.sample(StandardNormal);
        let theta = normal_vec(&mut rng, p);
        let point = DataPoint::new(x, y);

        let grad = model.gradient(&point, &theta).unwrap();
        let gnorm = norm_sq(&grad).sqrt();

        let mut se = fresh_state(theta.clone());
        let mut si = fresh_state(theta.clone());
        step_explicit(&model, &point, &mut se, gamma).unwrap();
        step_implicit(&model, &point, &mut si, gamma).unwrap();

        let mut diff_sq = 0.0;
        for i in 0..p {
            let d = se.theta[i] - si.theta[i];
            diff_sq += d * d;
        }
        assert!(
            diff_sq.sqrt() <= 1e-6 * (1.0 + gnorm),
            "step gap {} too large for |g|={}",
            diff_sq.sqrt(),
            gnorm
        );
    }
}

// ---------------------------------------------------------------------------
// Running mean vs. store-everything oracle
// ---------------------------------------------------------------------------

#[test]
fn running_mean_matches_stored_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let p = 7;
    let mut mean = RunningMean::new(p);
    let mut stored: Vec<Vec<f64>> = Vec::new();
    for _ in 0..1000 {
        let v = normal_vec(&mut rng, p);
        mean.update(&v);
        stored.push(v);
    }
    for i in 0..p {
        let brute: f64 = stored.iter().map(|v| v[i]).sum::<f64>() / stored.len() as f64;
        assert!(
            (mean.mean()[i] - brute).abs() <= 1e-12,
            "component {i}: running {} vs stored {}",
            mean.mean()[i],
            brute
        );
    }
}

// ---------------------------------------------------------------------------
// Drift closed form at the truth
// ---------------------------------------------------------------------------

/// Brute-force Monte Carlo for E[(x1^T x2)^2] with x ~ N(0, I_p); equals p.
fn mc_sq_inner(p: usize, reps: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..reps {
        let a = normal_vec(&mut rng, p);
        let b = normal_vec(&mut rng, p);
        let v = dot(&a, &b).powi(2);
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / reps as f64;
    let var = (sum_sq / reps as f64 - mean * mean).max(0.0);
    (mean, (var / reps as f64).sqrt())
}

#[test]
fn squared_inner_product_oracle_matches_dimension() {
    for p in [2, 5, 20] {
        let (mean, se) = mc_sq_inner(p, 200_000, 71);
        assert!(
            (mean - p as f64).abs() <= 5.0 * se,
            "p={p}: MC {mean} +- {se}"
        );
    }
}

#[test]
fn drift_at_truth_matches_closed_form() {
    // Quadratic, theta = theta_star, p=2, sigma^2=9, gamma=0.1:
    // expected inner product of successive gradients = -gamma sigma^2 E[(x1^T x2)^2].
    let theta_star = vec![1.0, -2.0];
    let sigma = 3.0;
    let gamma = 0.1;
    let generator = GaussianLinearGen::new(theta_star.clone(), sigma);
    let est = drift_at(
        &LossModel::Quadratic,
        &generator,
        &theta_star,
        gamma,
        UpdateKind::Explicit,
        100_000,
        42,
    )
    .unwrap();
    let (p_hat, p_se) = mc_sq_inner(2, 200_000, 43);
    let closed = -gamma * sigma * sigma * p_hat;
    let combined = (est.std_err.powi(2) + (gamma * sigma * sigma * p_se).powi(2)).sqrt();
    assert!(est.mean_delta < 0.0, "drift at truth must be negative");
    assert!(
        (est.mean_delta - closed).abs() <= 3.0 * combined,
        "drift {} vs closed form {} (3se = {})",
        est.mean_delta,
        closed,
        3.0 * combined
    );
}

#[test]
fn drift_is_exactly_zero_without_noise() {
    let theta_star = vec![0.5, 1.5];
    let generator = GaussianLinearGen::new(theta_star.clone(), 0.0);
    let est = drift_at(
        &LossModel::Quadratic,
        &generator,
        &theta_star,
        0.1,
        UpdateKind::Explicit,
        1000,
        1,
    )
    .unwrap();
    assert_eq!(est.mean_delta, 0.0);
    assert_eq!(est.std_err, 0.0);
}

#[test]
fn drift_is_positive_far_from_truth() {
    // Transient phase: successive gradients align, the statistic grows.
    let theta_star = vec![1.0, -2.0];
    let gamma: f64 = 0.01;
    let mut theta = theta_star.clone();
    theta[0] += 10.0 * gamma.sqrt();
    let generator = GaussianLinearGen::new(theta_star, 3.0);
    let est = drift_at(
        &LossModel::Quadratic,
        &generator,
        &theta,
        gamma,
        UpdateKind::Explicit,
        50_000,
        2,
    )
    .unwrap();
    assert!(
        est.mean_delta - 3.0 * est.std_err > 0.0,
        "expected positive drift, got {} +- {}",
        est.mean_delta,
        est.std_err
    );
}

// ---------------------------------------------------------------------------
// Least squares vs. normal-equations oracle
// ---------------------------------------------------------------------------

#[test]
fn ols_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    for _ in 0..20 {
        let n = 50;
        let k = 3;
        let design: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut row = vec![1.0];
                row.extend(normal_vec(&mut rng, k - 1));
                row
            })
            .collect();
        let beta_true = normal_vec(&mut rng, k);
        let y: Vec<f64> = design
            .iter()
            .map(|row| dot(row, &beta_true) + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let fit = ols_fit(&design, &y).unwrap();

        // normal equations solved with the independent dense solver
        let mut xtx = vec![vec![0.0; k]; k];
        let mut xty = vec![0.0; k];
        for row in 0..n {
            for i in 0..k {
                for j in 0..k {
                    xtx[i][j] += design[row][i] * design[row][j];
                }
                xty[i] += design[row][i] * y[row];
            }
        }
        let beta = solve_dense(&xtx, &xty);
        for i in 0..k {
            assert!(
                (fit.coefficients[i] - beta[i]).abs() <= 1e-8 * (1.0 + beta[i].abs()),
                "beta[{i}]: {} vs {}",
                fit.coefficients[i],
                beta[i]
            );
        }

        // classical SEs: sigma^2 (X^T X)^{-1} diagonal via the oracle solver
        let mut rss = 0.0;
        for row in 0..n {
            let r = y[row] - dot(&design[row], &beta);
            rss += r * r;
        }
        let s2 = rss / (n - k) as f64;
        for i in 0..k {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            let col = solve_dense(&xtx, &e);
            let se = (s2 * col[i]).sqrt();
            assert!(
                (fit.standard_errors[i] - se).abs() <= 1e-8 * (1.0 + se),
                "se[{i}]: {} vs {}",
                fit.standard_errors[i],
                se
            );
        }
    }
}

/// Regularized incomplete beta via Lentz continued fractions, independent of
/// the library's t-distribution dependency.
fn betainc_oracle(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    fn ln_gamma(z: f64) -> f64 {
        // Lanczos g=7, n=9
        const C: [f64; 9] = [
            0.999_999_999_999_809_93,
            676.520_368_121_885_1,
            -1259.139_216_722_402_8,
            771.323_428_777_653_13,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        if z < 0.5 {
            return std::f64::consts::PI.ln()
                - (std::f64::consts::PI * z).sin().ln()
                - ln_gamma(1.0 - z);
        }
        let z = z - 1.0;
        let mut x = C[0];
        for (i, &c) in C.iter().enumerate().skip(1) {
            x += c / (z + i as f64);
        }
        let t = z + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
    }
    fn contfrac(a: f64, b: f64, x: f64) -> f64 {
        let tiny = 1e-300;
        let mut c = 1.0;
        let mut d = 1.0 - (a + b) * x / (a + 1.0);
        if d.abs() < tiny {
            d = tiny;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..300 {
            let m = m as f64;
            let num = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
            d = 1.0 + num * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = 1.0 + num / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            h *= d * c;
            let num = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
            d = 1.0 + num * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = 1.0 + num / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        h
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln())
        .exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * contfrac(a, b, x) / a
    } else {
        1.0 - betainc_oracle(b, a, 1.0 - x)
    }
}

#[test]
fn t_distribution_p_values_match_incomplete_beta_oracle() {
    for &df in &[5.0, 20.0, 97.0] {
        for &t in &[0.0, 0.5, 1.96, 2.5, 4.0] {
            let p_lib = two_sided_t_p_value(t, df);
            // two-sided p = I_{df/(df+t^2)}(df/2, 1/2)
            let x = df / (df + t * t);
            let p_oracle = betainc_oracle(df / 2.0, 0.5, x);
            assert!(
                (p_lib - p_oracle).abs() < 1e-9,
                "t={t}, df={df}: lib {p_lib} vs oracle {p_oracle}"
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Scalar mean model behavior at the stability boundary
// ---------------------------------------------------------------------------

#[test]
fn scalar_mean_model_explicit_amplifies_at_gamma_two() {
    // x = 1, y ~ N(0,1): theta_n = 2 y_n - theta_{n-1}; variance grows linearly,
    // so the trajectory wanders far beyond any single observation.
    let model = LossModel::Quadratic;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut state = fresh_state(vec![0.0]);
    let mut max_abs: f64 = 0.0;
    let mut max_y: f64 = 0.0;
    for _ in 0..500 {
        let y: f64 = rng.sample(StandardNormal);
        max_y = max_y.max(y.abs());
        step_explicit(&model, &DataPoint::new(vec![1.0], y), &mut state, 2.0).unwrap();
        max_abs = max_abs.max(state.theta[0].abs());
    }
    assert!(
        max_abs > 2.0 * max_y,
        "expected amplification: max|theta|={max_abs}, max|y|={max_y}"
    );
    assert!(max_abs > 8.0, "max|theta|={max_abs}");
}

#[test]
fn scalar_mean_model_implicit_stays_bounded_at_gamma_two() {
    // Implicit update contracts: theta_n = (theta_{n-1} + 2 y_n) / 3.
    let model = LossModel::Quadratic;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut state = fresh_state(vec![0.0]);
    let mut max_abs: f64 = 0.0;
    for _ in 0..10_000 {
        let y: f64 = rng.sample(StandardNormal);
        step_implicit(&model, &DataPoint::new(vec![1.0], y), &mut state, 2.0).unwrap();
        max_abs = max_abs.max(state.theta[0].abs());
    }
    assert!(max_abs < 6.0, "implicit scalar chain wandered to {max_abs}");
}
