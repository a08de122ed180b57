//! Seeded i.i.d. observation generators for the simulated models. Generators
//! are immutable; all randomness flows through the caller-supplied RNG so the
//! same generator can serve many independent streams.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::{DataPoint, LossModel};
use crate::numeric::dot;

pub trait PointGenerator: Send + Sync {
    fn dim(&self) -> usize;
    fn draw(&self, rng: &mut ChaCha8Rng) -> DataPoint;
}

/// x ~ N(0, I_p), y = x^T theta_star + sigma * N(0,1).
#[derive(Debug, Clone)]
pub struct GaussianLinearGen {
    pub theta_star: Vec<f64>,
    pub sigma: f64,
}

impl GaussianLinearGen {
    pub fn new(theta_star: Vec<f64>, sigma: f64) -> Self {
        GaussianLinearGen { theta_star, sigma }
    }
}

impl PointGenerator for GaussianLinearGen {
    fn dim(&self) -> usize {
        self.theta_star.len()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> DataPoint {
        let x: Vec<f64> = (0..self.theta_star.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let eps: f64 = rng.sample(StandardNormal);
        let y = dot(&x, &self.theta_star) + self.sigma * eps;
        DataPoint::new(x, y)
    }
}

/// x ~ N(0, I_p), y ~ Bernoulli(sigmoid(x^T theta_star)).
#[derive(Debug, Clone)]
pub struct LogisticGen {
    pub theta_star: Vec<f64>,
}

impl LogisticGen {
    pub fn new(theta_star: Vec<f64>) -> Self {
        LogisticGen { theta_star }
    }
}

impl PointGenerator for LogisticGen {
    fn dim(&self) -> usize {
        self.theta_star.len()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> DataPoint {
        let x: Vec<f64> = (0..self.theta_star.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let prob = LossModel::Logistic.transfer(dot(&x, &self.theta_star));
        let y = f64::from(rng.random_bool(prob));
        DataPoint::new(x, y)
    }
}

/// The scalar mean model: x = 1, y ~ N(mean, sigma^2). The simplest setting
/// in which the explicit/implicit stability contrast is visible.
#[derive(Debug, Clone)]
pub struct ScalarMeanGen {
    pub mean: f64,
    pub sigma: f64,
}

impl ScalarMeanGen {
    pub fn new(mean: f64, sigma: f64) -> Self {
        ScalarMeanGen { mean, sigma }
    }
}

impl PointGenerator for ScalarMeanGen {
    fn dim(&self) -> usize {
        1
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> DataPoint {
        let eps: f64 = rng.sample(StandardNormal);
        DataPoint::new(vec![1.0], self.mean + self.sigma * eps)
    }
}
