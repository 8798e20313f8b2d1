//! Reference-based reconstruction network.
//!
//! Each scale is reconstructed independently: an input FFN lifts the tokens
//! to the hidden width, `K` attention blocks rebuild them from the learnable
//! reference bank and an output FFN maps back to the feature width.

mod mask;
mod net;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use mask::{build_mask, in_window, AttentionMask, MaskKind};
pub use net::{
    init_reference, model_forward, BlockOutput, BoundModel, BranchInputs, ReferenceBank, Reconstructor,
};
pub use params::{ParamStore, ParamId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Geometry and widths of one feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub neighbor_window: usize,
    pub local_window: usize,
}

impl ScaleConfig {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Block structure compared in the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "residual+self")]
    ResidualSelf,
    #[serde(rename = "residual+cross")]
    ResidualCross,
    #[serde(rename = "cross")]
    Cross,
    #[serde(rename = "mlka")]
    Mlka,
    #[serde(rename = "lca")]
    Lca,
    #[serde(rename = "cross+mlka")]
    CrossMlka,
    #[serde(rename = "mlka+lca")]
    MlkaLca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    /// Q, K, V all from the block input, unmasked.
    SelfAttention,
    /// Q from the input, K and V from the reference, unmasked.
    Cross,
    /// Q and V from the input, K from the reference, neighbour-masked.
    Mlka,
    /// Q from the input, K and V from the reference, local-masked.
    Lca,
}

impl BranchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchKind::SelfAttention => "self",
            BranchKind::Cross => "cross",
            BranchKind::Mlka => "mlka",
            BranchKind::Lca => "lca",
        }
    }
}

/// Branches summed inside a block (with their weights, `α` for the
/// reference-valued branch of a pair) and whether the block input is added
/// back before the first LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStructure {
    pub residual: bool,
    pub branches: Vec<(BranchKind, f64)>,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::ResidualSelf,
        Variant::ResidualCross,
        Variant::Cross,
        Variant::Mlka,
        Variant::Lca,
        Variant::CrossMlka,
        Variant::MlkaLca,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ResidualSelf => "residual+self",
            Variant::ResidualCross => "residual+cross",
            Variant::Cross => "cross",
            Variant::Mlka => "mlka",
            Variant::Lca => "lca",
            Variant::CrossMlka => "cross+mlka",
            Variant::MlkaLca => "mlka+lca",
        }
    }

    pub fn structure(self, alpha: f64) -> BlockStructure {
        use BranchKind::*;
        let (residual, branches) = match self {
            Variant::ResidualSelf => (true, vec![(SelfAttention, 1.0)]),
            Variant::ResidualCross => (true, vec![(Cross, 1.0)]),
            Variant::Cross => (false, vec![(Cross, 1.0)]),
            Variant::Mlka => (false, vec![(Mlka, 1.0)]),
            Variant::Lca => (false, vec![(Lca, 1.0)]),
            Variant::CrossMlka => (false, vec![(Mlka, 1.0), (Cross, alpha)]),
            Variant::MlkaLca => (false, vec![(Mlka, 1.0), (Lca, alpha)]),
        };
        BlockStructure { residual, branches }
    }

    pub fn uses_neighbor_mask(self) -> bool {
        self.structure(1.0).branches.iter().any(|(k, _)| *k == BranchKind::Mlka)
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::MlkaLca
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scales: Vec<ScaleConfig>,
    pub blocks: usize,
    pub alpha: f64,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::synthetic_preset()
    }
}

impl ModelConfig {
    /// Full-size setting: three backbone stages of a 256×256 input.
    pub fn reference_preset() -> Self {
        let scale = |channels, side, hidden, window| ScaleConfig {
            channels,
            height: side,
            width: side,
            hidden,
            neighbor_window: window,
            local_window: window,
        };
        Self {
            scales: vec![scale(40, 64, 128, 5), scale(72, 32, 256, 7), scale(200, 16, 512, 11)],
            blocks: 4,
            alpha: 2.0,
            heads: 1,
            ffn_expansion: 4,
            variant: Variant::MlkaLca,
            seed: 0,
        }
    }

    /// Scaled-down setting for the default synthetic dataset.
    pub fn synthetic_preset() -> Self {
        let scale = |channels, side, hidden, window| ScaleConfig {
            channels,
            height: side,
            width: side,
            hidden,
            neighbor_window: window,
            local_window: window,
        };
        Self {
            scales: vec![scale(16, 16, 32, 5), scale(32, 8, 64, 3)],
            ..Self::reference_preset()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.scales.is_empty() {
            return bad("at least one scale is required".into());
        }
        if self.blocks == 0 {
            return bad("block count must be at least 1".into());
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 1, got {}", self.alpha));
        }
        if self.heads == 0 || self.ffn_expansion == 0 {
            return bad("heads and ffn_expansion must be positive".into());
        }
        for (j, s) in self.scales.iter().enumerate() {
            if s.channels == 0 || s.height == 0 || s.width == 0 {
                return bad(format!("scale {j} has an empty shape"));
            }
            if s.hidden < 2 || s.hidden % self.heads != 0 {
                return bad(format!(
                    "scale {j}: hidden width {} must be >= 2 and divisible by {} heads",
                    s.hidden, self.heads
                ));
            }
            for (name, w) in [("neighbor_window", s.neighbor_window), ("local_window", s.local_window)] {
                if w == 0 || w % 2 == 0 {
                    return bad(format!("scale {j}: {name} {w} must be odd and positive"));
                }
            }
            if s.height <= s.neighbor_window && s.width <= s.neighbor_window {
                return bad(format!(
                    "scale {j}: the {}x{} grid must exceed neighbor window {} in at least one dimension",
                    s.height, s.width, s.neighbor_window
                ));
            }
        }
        Ok(())
    }

    pub fn structure(&self) -> BlockStructure {
        self.variant.structure(self.alpha)
    }

    /// Stable text form embedded in checkpoints.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))
    }
}
