//! Anomaly scoring, AUROC evaluation and the ablation harness.

mod auroc;
mod report;
mod score;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Sample;
use crate::model::{model_forward, ModelConfig, ModelError, ReferenceBank, Reconstructor, Variant};
use crate::train::{fit, TrainConfig, TrainError, TrainState};

pub use auroc::auroc;
pub use report::{ablation_table, write_pgm, AblationRow, ClassMetrics, EvalReport};
pub use score::{bilinear_upsample, image_score, position_scores, score_map, ScoreMap};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("anomalous records without pixel masks: {0}")]
    MissingMasks(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Side of the mean filter applied before taking the image-level max.
    pub smoothing: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { smoothing: 4 }
    }
}

/// Score map of one sample, reconstructed without feature noise.
pub fn score_sample(model: &Reconstructor<f32>, bank: &ReferenceBank<f32>, sample: &Sample) -> Result<ScoreMap> {
    let rec = model_forward(model, bank, &sample.tokens)?;
    score_map(&rec, &sample.tokens, &sample.grids, (sample.image_height, sample.image_width))
}

pub fn score_samples(
    model: &Reconstructor<f32>,
    bank: &ReferenceBank<f32>,
    samples: &[Sample],
) -> Result<Vec<ScoreMap>> {
    samples.par_iter().map(|s| score_sample(model, bank, s)).collect()
}

/// Image and pixel AUROC, pooled over all samples and per class.
pub fn evaluate_maps(samples: &[Sample], maps: &[ScoreMap], config: &EvalConfig) -> Result<EvalReport> {
    assert_eq!(samples.len(), maps.len());
    let missing: Vec<&str> = samples
        .iter()
        .filter(|s| s.is_anomalous && s.pixel_mask.is_none())
        .map(|s| s.image_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingMasks(missing.join(", ")));
    }
    for (s, m) in samples.iter().zip(maps) {
        if let Some(mask) = &s.pixel_mask {
            if (mask.height, mask.width) != (m.height, m.width) {
                return Err(EvalError::Shape(format!(
                    "record {} has a {}x{} mask for a {}x{} score map",
                    s.image_id, mask.height, mask.width, m.height, m.width
                )));
            }
        }
    }
    let image_scores: Vec<f64> = maps.iter().map(|m| image_score(m, config.smoothing)).collect();
    let metrics = |idx: &[usize]| -> (Result<f64>, Result<f64>) {
        let scores: Vec<f64> = idx.iter().map(|&i| image_scores[i]).collect();
        let labels: Vec<bool> = idx.iter().map(|&i| samples[i].is_anomalous).collect();
        let image = auroc(&scores, &labels);
        let mut px_scores = Vec::new();
        let mut px_labels = Vec::new();
        for &i in idx {
            px_scores.extend_from_slice(&maps[i].values);
            match &samples[i].pixel_mask {
                Some(mask) => px_labels.extend(mask.data.iter().map(|&b| b != 0)),
                None => px_labels.extend(std::iter::repeat_n(false, maps[i].values.len())),
            }
        }
        (image, auroc(&px_scores, &px_labels))
    };
    let all: Vec<usize> = (0..samples.len()).collect();
    let (image, pixel) = metrics(&all);
    let mut classes: Vec<&str> = samples.iter().map(|s| s.class_label.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_class: Vec<ClassMetrics> = classes
        .into_iter()
        .map(|c| {
            let idx: Vec<usize> = all.iter().copied().filter(|&i| samples[i].class_label == c).collect();
            let (image, pixel) = metrics(&idx);
            ClassMetrics {
                class: c.to_string(),
                records: idx.len(),
                image_auroc: image.ok(),
                pixel_auroc: pixel.ok(),
            }
        })
        .collect();
    Ok(EvalReport {
        records: samples.len(),
        image_auroc: image?,
        pixel_auroc: pixel?,
        per_class,
    })
}

pub fn evaluate(
    model: &Reconstructor<f32>,
    bank: &ReferenceBank<f32>,
    samples: &[Sample],
    config: &EvalConfig,
) -> Result<EvalReport> {
    let maps = score_samples(model, bank, samples)?;
    evaluate_maps(samples, &maps, config)
}

/// Trains and evaluates each variant with the same data, seed and settings.
/// Rows come back in the canonical variant order.
pub fn run_ablation(
    train: &[Sample],
    test: &[Sample],
    variants: &[Variant],
    model: &ModelConfig,
    training: &TrainConfig,
    config: &EvalConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in Variant::ALL.into_iter().filter(|v| variants.contains(v)) {
        let cfg = ModelConfig {
            variant: v,
            ..model.clone()
        };
        let mut state = TrainState::init(&cfg, training.seed)?;
        fit(&mut state, train, training, |_| Ok(()))?;
        let report = evaluate(&state.model, &state.bank, test, config)?;
        let row = AblationRow {
            variant: v,
            final_loss: state.history.last().copied().unwrap_or(f32::NAN),
            report,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
