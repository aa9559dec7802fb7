//! Model hyper-parameters shared by the encoders, prompt machinery and decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural switches matching the component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    /// Semantic feature queries added to click queries (off = A1).
    pub use_semantic_queries: bool,
    /// Separate foreground/background branches for click queries (off = A2).
    pub split_fb_branches: bool,
    /// Cross-scale residual connections (off = A3).
    pub use_residual_connections: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { use_semantic_queries: true, split_fb_branches: true, use_residual_connections: true }
    }
}

impl AblationFlags {
    pub fn variant(name: &str) -> Option<Self> {
        let full = Self::default();
        match name {
            "full" => Some(full),
            "a1" | "A1" => Some(Self { use_semantic_queries: false, ..full }),
            "a2" | "A2" => Some(Self { split_fb_branches: false, ..full }),
            "a3" | "A3" => Some(Self { use_residual_connections: false, ..full }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width C shared by every pyramid level and query.
    pub channels: usize,
    /// Width of the first image-encoder stage; doubles per stage.
    pub base_width: usize,
    /// Convolutions per encoder stage (the first one strides).
    pub depth: usize,
    /// Width of the first mask&click encoder stage; doubles per stage.
    pub prompt_width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Number of target classes N (one object-query group each).
    pub num_targets: usize,
    /// Object queries per group M.
    pub queries_per_target: usize,
    /// Padded click count per polarity N1.
    pub max_clicks_per_polarity: usize,
    /// Pooling window radius r for semantic feature queries.
    pub window_radius: usize,
    /// Round-robin repetitions L over the three scales.
    pub rounds: usize,
    /// Truncates the decoder to its first layers; `None` runs all `3 * rounds`.
    pub max_layers: Option<usize>,
    pub flags: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            base_width: 32,
            depth: 2,
            prompt_width: 16,
            heads: 8,
            ffn_width: 256,
            num_targets: 3,
            queries_per_target: 4,
            max_clicks_per_polarity: 24,
            window_radius: 1,
            rounds: 2,
            max_layers: None,
            flags: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    /// CPU-sized configuration (C = 64).
    pub fn desk() -> Self {
        Self { channels: 64, base_width: 16, prompt_width: 8, heads: 4, ffn_width: 128, ..Self::default() }
    }

    /// Smallest configuration used for gradient audits (C = 8, one decoder layer).
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            base_width: 4,
            depth: 1,
            prompt_width: 2,
            heads: 2,
            ffn_width: 8,
            num_targets: 2,
            queries_per_target: 2,
            max_clicks_per_polarity: 4,
            window_radius: 1,
            rounds: 1,
            max_layers: Some(1),
            flags: AblationFlags::default(),
        }
    }

    pub fn num_layers(&self) -> usize {
        let all = 3 * self.rounds;
        self.max_layers.map_or(all, |m| m.min(all))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(format!("model config: {m}")));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad("heads must divide channels");
        }
        if self.channels % 4 != 0 {
            return bad("channels must be a multiple of 4 for the positional encoding");
        }
        if self.ffn_width == 0 || self.ffn_width % self.heads != 0 {
            return bad("ffn width must be a positive multiple of heads");
        }
        if self.base_width == 0 || self.prompt_width == 0 || self.depth == 0 {
            return bad("encoder widths and depth must be positive");
        }
        if self.num_targets == 0 || self.queries_per_target == 0 {
            return bad("need at least one target and one object query");
        }
        if self.max_clicks_per_polarity == 0 {
            return bad("click padding must be positive");
        }
        if self.rounds == 0 {
            return bad("decoder needs at least one round");
        }
        if self.max_layers == Some(0) {
            return bad("decoder needs at least one layer");
        }
        Ok(())
    }
}
