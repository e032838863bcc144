//! Model and run configuration.

use serde::{Deserialize, Serialize};

use crate::vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Low,
    High,
}

impl std::fmt::Display for ActionSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActionSpace::Low => write!(f, "low"),
            ActionSpace::High => write!(f, "high"),
        }
    }
}

/// Architecture switches mirroring the ablation axes: each flag disables
/// one information route while keeping the model runnable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Decoder text cross-attention branch.
    pub text_branch: bool,
    /// Decoder image cross-attention branch.
    pub image_branch: bool,
    /// Encoder image-to-text cross-attention (early fusion).
    pub early_fusion: bool,
    /// Full action history; when false, only the last action is decoded.
    pub full_history: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            text_branch: true,
            image_branch: true,
            early_fusion: true,
            full_history: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_word: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Raw visual feature width (coordinate vector appended on top).
    pub d_feat: usize,
    /// Columns of the observation grid; the environment renders 12, tests
    /// may shrink it.
    pub grid_cols: usize,
    pub vocab_size: usize,
    /// Encoder blocks per branch.
    pub n_blocks: usize,
    pub dropout: f64,
    pub action_space: ActionSpace,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale preset: small enough to train on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            d_word: 64,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            d_feat: 64,
            grid_cols: 12,
            vocab_size: vocab::size(),
            n_blocks: 1,
            dropout: 0.1,
            action_space: ActionSpace::Low,
            ablation: AblationFlags::default(),
        }
    }

    /// Full-scale preset (512-d model, 8 heads, 2048-d feed-forward,
    /// 300-d word vectors, 2048-d visual features).
    pub fn paper() -> Self {
        Self {
            d_word: 300,
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            d_feat: 2048,
            grid_cols: 12,
            vocab_size: vocab::size(),
            n_blocks: 1,
            dropout: 0.1,
            action_space: ActionSpace::Low,
            ablation: AblationFlags::default(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn n_views(&self) -> usize {
        3 * self.grid_cols
    }
}
