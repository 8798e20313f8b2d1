use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::tensor::{MaskGrid, MASK_SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Hides each token's own window, itself included.
    Neighbor,
    /// Shows only each token's own window.
    Local,
}

/// `N×N` additive attention mask over an `H×W` token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub kind: MaskKind,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    grid: Arc<MaskGrid>,
}

impl AttentionMask {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn grid(&self) -> &Arc<MaskGrid> {
        &self.grid
    }

    /// `0` or the negative-infinity sentinel.
    pub fn additive(&self, i: usize, q: usize) -> f64 {
        if self.grid.is_blocked(i, q) {
            MASK_SENTINEL
        } else {
            0.0
        }
    }

    pub fn is_blocked(&self, i: usize, q: usize) -> bool {
        self.grid.is_blocked(i, q)
    }
}

/// Whether token `q` lies in the `window×window` neighbourhood of token `i`
/// on a row-major `width`-wide grid.
pub fn in_window(i: usize, q: usize, width: usize, window: usize) -> bool {
    let r = window / 2;
    let (iy, ix) = (i / width, i % width);
    let (qy, qx) = (q / width, q % width);
    iy.abs_diff(qy) <= r && ix.abs_diff(qx) <= r
}

pub fn build_mask(kind: MaskKind, height: usize, width: usize, window: usize) -> Result<AttentionMask> {
    if window == 0 || window % 2 == 0 {
        return Err(ModelError::Config(format!("attention window {window} must be odd and positive")));
    }
    if height == 0 || width == 0 {
        return Err(ModelError::Config(format!("empty token grid {height}x{width}")));
    }
    if kind == MaskKind::Neighbor && height <= window && width <= window {
        return Err(ModelError::Config(format!(
            "neighbour window {window} hides every token of a {height}x{width} grid"
        )));
    }
    let n = height * width;
    let mut blocked = Vec::with_capacity(n * n);
    for i in 0..n {
        for q in 0..n {
            let inside = in_window(i, q, width, window);
            blocked.push(match kind {
                MaskKind::Neighbor => inside,
                MaskKind::Local => !inside,
            });
        }
    }
    let grid = MaskGrid::new(n, n, blocked).map_err(|e| ModelError::Config(e.to_string()))?;
    Ok(AttentionMask {
        kind,
        height,
        width,
        window,
        grid: Arc::new(grid),
    })
}
