use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Measurement;
use crate::rng::{stream, stream_rng};

/// White Gaussian noise whose standard deviation scales with the mean
/// absolute value of the clean measurement: `sigma = p / d_y · Σ |y_i|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub p: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn sigma(&self, y_clean: &Measurement) -> f64 {
        if y_clean.is_empty() {
            return 0.0;
        }
        let mean_abs: f64 = y_clean.data.iter().map(|v| v.abs()).sum::<f64>() / y_clean.len() as f64;
        self.p * mean_abs
    }
}

/// `y_clean + eps`, `eps ~ N(0, sigma² I)`; deterministic per seed.
pub fn add_noise(y_clean: &Measurement, model: &NoiseModel) -> Measurement {
    let sigma = model.sigma(y_clean);
    if sigma == 0.0 {
        return y_clean.clone();
    }
    let mut rng = stream_rng(model.seed, stream::NOISE);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    Measurement::new(
        y_clean
            .data
            .iter()
            .map(|v| v + normal.sample(&mut rng))
            .collect(),
    )
}
