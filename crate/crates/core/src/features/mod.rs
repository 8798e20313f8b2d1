//! Model inputs: multi-scale feature records, neighbourhood aggregation,
//! training-time perturbation, the RLRF interchange format and a synthetic
//! multi-class dataset generator.

mod aggregate;
mod io;
mod perturb;
mod synth;

pub use aggregate::{neighborhood_aggregate, AggregationSpec};
pub use io::{
    decode_feature_record, encode_feature_record, load_split, read_feature_file, read_manifest,
    write_dataset, write_feature_file, write_manifest, ManifestEntry, Split, MANIFEST_NAME,
};
pub use perturb::{perturb, PerturbationSpec};
pub use synth::{generate_synthetic_dataset, AnomalySpec, SynthConfig};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// One scale's dense feature grid, `channels × height × width`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(FeatureError::Invalid(format!(
                "empty feature map {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(FeatureError::Invalid(format!(
                "feature map {channels}x{height}x{width} holds {} values",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.height + h) * self.width + w]
    }

    pub fn at_mut(&mut self, c: usize, h: usize, w: usize) -> &mut f32 {
        &mut self.data[(c * self.height + h) * self.width + w]
    }

    /// `N×C` token matrix, one row per position in row-major `(h, w)` order.
    pub fn to_tokens(&self) -> Tensor<f32> {
        let n = self.positions();
        let mut out = vec![0.0; n * self.channels];
        for c in 0..self.channels {
            for p in 0..n {
                out[p * self.channels + c] = self.data[c * n + p];
            }
        }
        Tensor::from_vec(&[n, self.channels], out).expect("non-empty map")
    }

    /// Inverse of [`FeatureMap::to_tokens`].
    pub fn from_tokens(tokens: &Tensor<f32>, height: usize, width: usize) -> Result<Self> {
        let (n, c) = tokens
            .dims2()
            .map_err(|e| FeatureError::Invalid(e.to_string()))?;
        if n != height * width {
            return Err(FeatureError::Invalid(format!(
                "{n} tokens cannot form a {height}x{width} grid"
            )));
        }
        let mut data = vec![0.0; n * c];
        for p in 0..n {
            for ch in 0..c {
                data[ch * n + p] = tokens.data()[p * c + ch];
            }
        }
        Self::new(c, height, width, data)
    }
}

/// Binary per-pixel ground truth at image resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl PixelMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn area_fraction(&self) -> f64 {
        self.data.iter().filter(|&&b| b != 0).count() as f64 / self.data.len() as f64
    }
}

/// One image's multi-scale features plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub image_id: String,
    pub class_label: String,
    pub is_anomalous: bool,
    pub image_height: usize,
    pub image_width: usize,
    pub pixel_mask: Option<PixelMask>,
    pub scales: Vec<FeatureMap>,
}

impl FeatureRecord {
    pub fn scale_dims(&self) -> Vec<(usize, usize, usize)> {
        self.scales.iter().map(FeatureMap::dims).collect()
    }
}

/// A record with its aggregated features flattened to `N_j×C_j` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub class_label: String,
    pub is_anomalous: bool,
    pub image_height: usize,
    pub image_width: usize,
    pub pixel_mask: Option<PixelMask>,
    pub grids: Vec<(usize, usize)>,
    pub tokens: Vec<Tensor<f32>>,
}

impl Sample {
    pub fn prepare(record: &FeatureRecord, aggregation: &AggregationSpec) -> Result<Self> {
        if aggregation.windows.len() != record.scales.len() {
            return Err(FeatureError::Config(format!(
                "{} aggregation windows for {} scales",
                aggregation.windows.len(),
                record.scales.len()
            )));
        }
        let mut tokens = Vec::with_capacity(record.scales.len());
        for (j, fm) in record.scales.iter().enumerate() {
            let p = aggregation.validate_for(j, fm)?;
            tokens.push(neighborhood_aggregate(fm, p)?.to_tokens());
        }
        Ok(Self {
            image_id: record.image_id.clone(),
            class_label: record.class_label.clone(),
            is_anomalous: record.is_anomalous,
            image_height: record.image_height,
            image_width: record.image_width,
            pixel_mask: record.pixel_mask.clone(),
            grids: record.scales.iter().map(|m| (m.height, m.width)).collect(),
            tokens,
        })
    }
}

pub fn prepare_samples(records: &[FeatureRecord], aggregation: &AggregationSpec) -> Result<Vec<Sample>> {
    dataset_layout(records)?;
    records.iter().map(|r| Sample::prepare(r, aggregation)).collect()
}

/// Checks that every record shares scale extents and image resolution, and
/// returns them.
pub fn dataset_layout(records: &[FeatureRecord]) -> Result<(Vec<(usize, usize, usize)>, (usize, usize))> {
    let first = records
        .first()
        .ok_or_else(|| FeatureError::Invalid("dataset is empty".into()))?;
    let dims = first.scale_dims();
    let image = (first.image_height, first.image_width);
    for r in records {
        if r.scale_dims() != dims || (r.image_height, r.image_width) != image {
            return Err(FeatureError::Invalid(format!(
                "record {} has scales {:?} at {}x{}, expected {:?} at {}x{}",
                r.image_id,
                r.scale_dims(),
                r.image_height,
                r.image_width,
                dims,
                image.0,
                image.1
            )));
        }
        if let Some(m) = &r.pixel_mask {
            if (m.height, m.width) != image {
                return Err(FeatureError::Invalid(format!(
                    "record {} has a {}x{} mask for a {}x{} image",
                    r.image_id, m.height, m.width, image.0, image.1
                )));
            }
        }
    }
    Ok((dims, image))
}
