use super::{EvalError, Result};
use crate::tensor::Tensor;

const COSINE_EPS: f64 = 1e-8;

/// Per-pixel anomaly scores at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// `‖r − o‖ + 1 − cos(r, o)` for each row of two `N×C` token matrices.
pub fn position_scores(rec: &Tensor<f32>, org: &Tensor<f32>) -> Result<Vec<f64>> {
    if rec.shape() != org.shape() || rec.shape().len() != 2 {
        return Err(EvalError::Shape(format!(
            "reconstruction {:?} vs original {:?}",
            rec.shape(),
            org.shape()
        )));
    }
    let c = rec.shape()[1];
    Ok(rec
        .data()
        .chunks(c)
        .zip(org.data().chunks(c))
        .map(|(r, o)| {
            let (mut d2, mut rr, mut oo, mut ro) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for (&a, &b) in r.iter().zip(o) {
                let (a, b) = (a as f64, b as f64);
                d2 += (a - b) * (a - b);
                rr += a * a;
                oo += b * b;
                ro += a * b;
            }
            let cos = ro / (rr.sqrt().max(COSINE_EPS) * oo.sqrt().max(COSINE_EPS));
            d2.sqrt() + 1.0 - cos
        })
        .collect())
}

/// Align-corners-false bilinear resampling of a row-major `h×w` grid.
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    let coords = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(h, out_h);
    let xs = coords(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Mean of the per-scale score grids after upsampling each to `image_hw`.
/// `grids[j]` is the `(H_j, W_j)` layout of scale `j`.
pub fn score_map(
    f_rec: &[Tensor<f32>],
    f_org: &[Tensor<f32>],
    grids: &[(usize, usize)],
    image_hw: (usize, usize),
) -> Result<ScoreMap> {
    if f_rec.len() != f_org.len() || f_rec.len() != grids.len() || f_rec.is_empty() {
        return Err(EvalError::Shape(format!(
            "{} reconstructed, {} original, {} grid scales",
            f_rec.len(),
            f_org.len(),
            grids.len()
        )));
    }
    let (h, w) = image_hw;
    let mut acc = vec![0.0f64; h * w];
    for ((r, o), &(gh, gw)) in f_rec.iter().zip(f_org).zip(grids) {
        let s = position_scores(r, o)?;
        if s.len() != gh * gw {
            return Err(EvalError::Shape(format!("{} positions for a {gh}x{gw} grid", s.len())));
        }
        for (a, v) in acc.iter_mut().zip(bilinear_upsample(&s, gh, gw, h, w)) {
            *a += v;
        }
    }
    let inv = 1.0 / f_rec.len() as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    Ok(ScoreMap {
        height: h,
        width: w,
        values: acc,
    })
}

/// Maximum over all `k×k` windows of the window mean (`k` clipped to the map).
pub fn image_score(map: &ScoreMap, k: usize) -> f64 {
    let kh = k.clamp(1, map.height);
    let kw = k.clamp(1, map.width);
    let w1 = map.width + 1;
    // summed-area table
    let mut sat = vec![0.0f64; (map.height + 1) * w1];
    for y in 0..map.height {
        for x in 0..map.width {
            sat[(y + 1) * w1 + x + 1] = map.at(y, x) + sat[y * w1 + x + 1] + sat[(y + 1) * w1 + x] - sat[y * w1 + x];
        }
    }
    let area = (kh * kw) as f64;
    let mut best = f64::NEG_INFINITY;
    for y in 0..=map.height - kh {
        for x in 0..=map.width - kw {
            let s = sat[(y + kh) * w1 + x + kw] - sat[y * w1 + x + kw] - sat[(y + kh) * w1 + x] + sat[y * w1 + x];
            best = best.max(s / area);
        }
    }
    best
}
