use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureMap, Result};

/// Neighbourhood window per scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub windows: Vec<usize>,
}

impl AggregationSpec {
    pub fn validate_for(&self, scale: usize, fm: &FeatureMap) -> Result<usize> {
        let p = *self.windows.get(scale).ok_or_else(|| {
            FeatureError::Config(format!("no aggregation window configured for scale {scale}"))
        })?;
        if p == 0 || p % 2 == 0 {
            return Err(FeatureError::Config(format!(
                "aggregation window {p} for scale {scale} must be odd and positive"
            )));
        }
        if p > fm.height.min(fm.width) {
            return Err(FeatureError::Config(format!(
                "aggregation window {p} exceeds the {}x{} grid of scale {scale}",
                fm.height, fm.width
            )));
        }
        Ok(p)
    }
}

/// Channel-wise mean over the `p×p` window around each position, with the
/// window clipped to the grid (adaptive average pooling at the borders).
pub fn neighborhood_aggregate(fm: &FeatureMap, window: usize) -> Result<FeatureMap> {
    if window == 0 || window % 2 == 0 || window > fm.height.min(fm.width) {
        return Err(FeatureError::Config(format!(
            "aggregation window {window} invalid for a {}x{} grid",
            fm.height, fm.width
        )));
    }
    let r = window / 2;
    let (c, h, w) = fm.dims();
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
                let mut acc = 0.0f64;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        acc += fm.at(ch, yy, xx) as f64;
                    }
                }
                let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                *out.at_mut(ch, y, x) = (acc / count) as f32;
            }
        }
    }
    Ok(out)
}
