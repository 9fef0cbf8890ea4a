use std::fmt;
use std::str::FromStr;

use crate::data::{default_modalities, ModalitySpec};
use crate::error::{MapexError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RoutingMode {
    /// Modality `j` always goes to expert `j mod e` with `k = 1`.
    Deterministic,
    /// Router input is a fixed sinusoidal code of the modality index.
    PosEmbed,
    /// Router input is the learnable modality embedding.
    Modality,
}

impl RoutingMode {
    pub const ALL: [RoutingMode; 3] = [RoutingMode::Deterministic, RoutingMode::PosEmbed, RoutingMode::Modality];

    pub fn is_learned(self) -> bool {
        self != RoutingMode::Deterministic
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoutingMode::Deterministic => "deterministic",
            RoutingMode::PosEmbed => "pos-embed",
            RoutingMode::Modality => "modality",
        })
    }
}

impl FromStr for RoutingMode {
    type Err = MapexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(RoutingMode::Deterministic),
            "pos-embed" | "posembed" => Ok(RoutingMode::PosEmbed),
            "modality" => Ok(RoutingMode::Modality),
            other => Err(MapexError::config("routing", format!("unknown routing mode {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub experts: usize,
    pub expert_hidden: usize,
    pub top_k: usize,
    pub routing: RoutingMode,
    pub shared_expert: bool,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub modalities: Vec<ModalitySpec>,
    pub mask_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            depth: 4,
            heads: 4,
            experts: 8,
            expert_hidden: 128,
            top_k: 2,
            routing: RoutingMode::Modality,
            shared_expert: false,
            decoder_depth: 2,
            decoder_dim: 48,
            decoder_heads: 4,
            patch_size: 8,
            image_size: 32,
            modalities: default_modalities(),
            mask_ratio: 0.75,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used by gradient and equivalence checks.
    pub fn tiny() -> Self {
        ModelConfig {
            dim: 16,
            depth: 2,
            heads: 2,
            experts: 4,
            expert_hidden: 16,
            top_k: 2,
            decoder_depth: 1,
            decoder_dim: 8,
            decoder_heads: 2,
            patch_size: 4,
            image_size: 8,
            ..Default::default()
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens per modality.
    pub fn tokens_per_modality(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Experts selected per modality: forced to 1 under deterministic routing.
    pub fn effective_k(&self) -> usize {
        match self.routing {
            RoutingMode::Deterministic => 1,
            _ => self.top_k,
        }
    }

    pub fn patch_pixels(&self, modality: usize) -> usize {
        self.modalities[modality].channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(MapexError::config(k, m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return err("heads", format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim % 4 != 0 || self.decoder_dim % 4 != 0 {
            return err("dim", "token dims must be multiples of 4 for 2-D sinusoidal codes".into());
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return err("decoder_heads", "decoder_dim not divisible by decoder_heads".into());
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return err("top_k", format!("need 1 <= k <= e, got k={} e={}", self.top_k, self.experts));
        }
        if self.modalities.is_empty() {
            return err("modalities", "at least one modality".into());
        }
        if self.routing == RoutingMode::Deterministic && self.experts < self.num_modalities() {
            return err(
                "experts",
                format!("deterministic routing needs e >= m ({} < {})", self.experts, self.num_modalities()),
            );
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return err("mask_ratio", format!("{} outside (0, 1)", self.mask_ratio));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(
                "patch_size",
                format!("image size {} not divisible by patch {}", self.image_size, self.patch_size),
            );
        }
        Ok(())
    }
}
