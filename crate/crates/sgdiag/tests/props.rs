//! Property-based invariants: the implicit step's defining equation, its
//! unconditional stability on noiseless data, agreement of the two forms of
//! the detector statistic, detection spacing, and small numeric helpers.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sgdiag::diagnostic::DiagnosticState;
use sgdiag::engine::{step_explicit, step_implicit, GeneratorStream, RunningMean, SgdState};
use sgdiag::generate::ScalarMeanGen;
use sgdiag::halving::{run_sgd_half, HalvingConfig};
use sgdiag::harness::ols::ols_fit;
use sgdiag::model::{DataPoint, LossModel};
use sgdiag::numeric::{dot, norm_sq, squared_distance};

fn finite_vec(len: usize, range: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-range..range, len)
}

proptest! {
    /// The implicit update is defined by lambda = y - h(u + gamma*lambda*|x|^2);
    /// the realized step must satisfy that equation.
    #[test]
    fn implicit_step_satisfies_its_fixed_point(
        x in finite_vec(3, 5.0),
        y_raw in -5.0..5.0f64,
        theta in finite_vec(3, 2.0),
        gamma in 1e-3..10.0f64,
        logistic in any::<bool>(),
    ) {
        let g2 = norm_sq(&x);
        prop_assume!(g2 > 1e-6);
        let model = if logistic { LossModel::Logistic } else { LossModel::Quadratic };
        let y = if logistic { f64::from(y_raw > 0.0) } else { y_raw };
        let u0 = dot(&x, &theta);
        let mut state = SgdState::new(theta.clone());
        step_implicit(&model, &DataPoint::new(x.clone(), y), &mut state, gamma).unwrap();
        // lambda from the realized step: delta = gamma * lambda * x
        let delta: Vec<f64> = state.theta.iter().zip(&theta).map(|(n, o)| n - o).collect();
        let lambda = dot(&delta, &x) / (gamma * g2);
        let residual = lambda - (y - model.transfer(u0 + gamma * lambda * g2));
        prop_assert!(
            residual.abs() < 1e-8 * (1.0 + lambda.abs()),
            "fixed-point residual {residual:e} at lambda {lambda}"
        );
    }

    /// On exactly consistent data the implicit quadratic step never moves
    /// away from the generating parameter, at any rate whatsoever.
    #[test]
    fn implicit_noiseless_step_never_expands_the_error(
        x in finite_vec(4, 3.0),
        theta_star in finite_vec(4, 3.0),
        theta in finite_vec(4, 3.0),
        gamma in 1e-3..1e3f64,
    ) {
        let y = dot(&x, &theta_star);
        let before = squared_distance(&theta, &theta_star);
        let mut state = SgdState::new(theta);
        step_implicit(&LossModel::Quadratic, &DataPoint::new(x, y), &mut state, gamma).unwrap();
        let after = squared_distance(&state.theta, &theta_star);
        prop_assert!(after <= before * (1.0 + 1e-12) + 1e-12, "{before} -> {after}");
    }

    /// The running mean agrees with the naive batch mean.
    #[test]
    fn running_mean_matches_naive(
        values in prop::collection::vec(finite_vec(3, 100.0), 1..50)
    ) {
        let mut rm = RunningMean::new(3);
        for v in &values {
            rm.update(v);
        }
        for j in 0..3 {
            let naive: f64 =
                values.iter().map(|v| v[j]).sum::<f64>() / values.len() as f64;
            prop_assert!((rm.mean()[j] - naive).abs() < 1e-10 * (1.0 + naive.abs()));
        }
    }

    /// The logistic transfer is monotone and stays a probability, no matter
    /// how extreme the predictor.
    #[test]
    fn logistic_transfer_monotone_and_bounded(a in -1e6..1e6f64, b in -1e6..1e6f64) {
        let m = LossModel::Logistic;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(m.transfer(lo) <= m.transfer(hi));
        prop_assert!((0.0..=1.0).contains(&m.transfer(a)));
    }

    /// Least-squares residuals are orthogonal to every design column.
    #[test]
    fn ols_residuals_orthogonal_to_design(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let draw = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![1.0, draw(&mut rng), draw(&mut rng)])
            .collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let fit = ols_fit(&xs, &y).unwrap();
        for j in 0..3 {
            let mut inner = 0.0;
            for (row, &yi) in xs.iter().zip(&y) {
                let fitted = dot(row, &fit.coefficients);
                inner += row[j] * (yi - fitted);
            }
            prop_assert!(inner.abs() < 1e-8 * n as f64, "column {j}: {inner:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    /// The difference form of the detector statistic (built from three
    /// consecutive iterates) reproduces the gradient form exactly on a
    /// constant-rate explicit chain.
    #[test]
    fn difference_and_gradient_forms_agree(
        seed in 0u64..1000,
        gamma in 1e-3..0.4f64,
        steps in 5usize..60,
    ) {
        let model = LossModel::Quadratic;
        let mut stream = GeneratorStream::new(ScalarMeanGen::new(1.0, 1.0), seed);
        let mut state = SgdState::new(vec![0.0]);
        let mut from_grads = DiagnosticState::new(u64::MAX);
        let mut from_diffs = DiagnosticState::new(u64::MAX);
        let mut thetas = vec![state.theta.clone()];
        use sgdiag::engine::DataStream;
        for _ in 0..steps {
            let point = stream.next_point().clone();
            step_explicit(&model, &point, &mut state, gamma).unwrap();
            from_grads
                .observe(state.last_grad.as_deref().unwrap())
                .unwrap();
            thetas.push(state.theta.clone());
            let k = thetas.len() - 1;
            if k >= 2 {
                from_diffs
                    .update_from_differences(&thetas[k], &thetas[k - 1], &thetas[k - 2], gamma)
                    .unwrap();
            }
        }
        let (a, b) = (from_grads.s, from_diffs.s);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "grad {a} vs diff {b}");
    }

    /// Consecutive detections are always separated by more than the burn-in,
    /// and the rate after k detections is exactly gamma0 / 2^k.
    #[test]
    fn detections_spaced_beyond_burnin_and_rate_halves_exactly(
        seed in 0u64..500,
        burnin in 3u64..40,
        gamma0 in 0.05..1.0f64,
    ) {
        let config = HalvingConfig {
            gamma0,
            burnin,
            maxit: 300,
            gamma_floor: 1e-6,
            update: sgdiag::engine::UpdateKind::Implicit,
            halving_factor: 0.5,
            divergence_threshold: 1e12,
            max_steps: Some(2_000),
            trace_stride: 1_000,
        };
        let mut stream = GeneratorStream::new(ScalarMeanGen::new(0.0, 1.0), seed);
        let (_, ht) = run_sgd_half(
            &LossModel::Quadratic,
            &mut stream,
            &config,
            &[0.0],
            None,
            None,
        )
        .unwrap();
        prop_assert!(!ht.diverged);
        for pair in ht.detections.windows(2) {
            prop_assert!(
                pair[1].iteration - pair[0].iteration > burnin,
                "detections {} and {} closer than burnin {burnin}",
                pair[0].iteration,
                pair[1].iteration
            );
        }
        for (k, d) in ht.detections.iter().enumerate() {
            prop_assert_eq!(d.gamma_before, gamma0 * 0.5f64.powi(k as i32));
        }
    }
}
