use serde::{Deserialize, Serialize};

use super::{FeatureError, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Gaussian feature noise applied to training inputs only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub sigma: f64,
    pub enabled: bool,
}

impl PerturbationSpec {
    pub fn disabled() -> Self {
        Self {
            sigma: 0.0,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(FeatureError::Config(format!(
                "perturbation sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.enabled && self.sigma > 0.0
    }
}

/// `tokens + P` with `P ~ N(0, σ²)` drawn from the stream keyed by `seed`.
pub fn perturb(tokens: &Tensor<f32>, spec: &PerturbationSpec, seed: u64) -> Tensor<f32> {
    if !spec.is_active() {
        return tokens.clone();
    }
    let mut rng = CounterRng::new(seed);
    let mut out = tokens.clone();
    for v in out.data_mut() {
        *v += (spec.sigma * rng.normal()) as f32;
    }
    out
}
