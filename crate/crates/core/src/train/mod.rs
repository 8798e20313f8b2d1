//! Reconstruction loss, Adam, the training loop and checkpoints.

mod adam;
mod checkpoint;
mod fit;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureMap};
use crate::model::ModelError;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use fit::{fit, noise_sigmas, record_gradients, TrainState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch} in batch {batch} (records: {records})")]
    NonFinite { epoch: usize, batch: usize, records: String },
    #[error("checkpoint error at byte {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },
    #[error("checkpoint was written for a different model config")]
    ConfigMismatch,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Feature noise as a multiple of each scale's training-feature std.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub relative_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Squared per-position distance instead of the plain L2 norm.
    pub squared_distance: bool,
    pub noise: NoiseConfig,
    /// Write a checkpoint every this many epochs; 0 writes only the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            squared_distance: false,
            noise: NoiseConfig {
                enabled: true,
                relative_sigma: 0.1,
            },
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Full-dataset recipe: 200 epochs at learning rate 1e-4.
    pub fn reference_recipe() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be positive".into());
        }
        if !(self.noise.relative_sigma >= 0.0 && self.noise.relative_sigma.is_finite()) {
            return bad(format!("relative_sigma must be non-negative, got {}", self.noise.relative_sigma));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Per-scale loss `mean_pos ‖rec − org‖ + (1 − mean_pos cos(rec, org))` on
/// `N×C` token matrices.
pub fn scale_loss<T: Real>(g: &mut Graph<T>, rec: Var, org: Var, squared: bool) -> Result<Var> {
    let diff = g.sub(rec, org)?;
    let dist = g.row_norm(diff, squared)?;
    let dist = g.mean(dist)?;
    let cos = g.row_cosine(rec, org)?;
    let cos = g.mean(cos)?;
    let one = g.leaf(Tensor::scalar(T::one()), false);
    let cos_term = g.sub(one, cos)?;
    Ok(g.add(dist, cos_term)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub distance: Vec<f64>,
    pub cosine: Vec<f64>,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.distance.iter().chain(&self.cosine).sum()
    }
}

/// The training objective on whole feature maps, summed over scales.
pub fn compute_loss(f_rec: &[FeatureMap], f_org: &[FeatureMap], squared: bool) -> Result<LossTerms> {
    if f_rec.len() != f_org.len() {
        return Err(TrainError::Data(format!(
            "{} reconstructed scales for {} original scales",
            f_rec.len(),
            f_org.len()
        )));
    }
    let mut terms = LossTerms {
        distance: Vec::new(),
        cosine: Vec::new(),
    };
    for (r, o) in f_rec.iter().zip(f_org) {
        if r.dims() != o.dims() {
            return Err(TensorError::Shape {
                op: "compute_loss",
                lhs: vec![r.channels, r.height, r.width],
                rhs: vec![o.channels, o.height, o.width],
            }
            .into());
        }
        let mut g = Graph::<f64>::new();
        let rv = g.leaf(r.to_tokens().cast(), false);
        let ov = g.leaf(o.to_tokens().cast(), false);
        let diff = g.sub(rv, ov)?;
        let dist = g.row_norm(diff, squared)?;
        let dist = g.mean(dist)?;
        let cos = g.row_cosine(rv, ov)?;
        let cos = g.mean(cos)?;
        terms.distance.push(g.value(dist).data()[0]);
        terms.cosine.push(1.0 - g.value(cos).data()[0]);
    }
    Ok(terms)
}
