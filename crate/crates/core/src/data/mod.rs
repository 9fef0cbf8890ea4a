//! Deterministic labeled multi-modal imagery with per-channel normalization and splits.

mod io;
mod synth;

pub use io::{export_dataset, import_dataset};
pub use synth::{compute_stats, few_shot_subset, generate, normalize, normalize_dataset};

use crate::autograd::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySpec {
    pub id: usize,
    pub name: String,
    pub channels: usize,
    /// Signal amplitude of the class pattern relative to unit noise scale.
    pub informativeness: f64,
}

impl ModalitySpec {
    pub fn new(id: usize, name: &str, channels: usize, informativeness: f64) -> Self {
        ModalitySpec { id, name: name.to_string(), channels, informativeness }
    }
}

pub fn default_modalities() -> Vec<ModalitySpec> {
    vec![
        ModalitySpec::new(0, "RGBish", 3, 0.6),
        ModalitySpec::new(1, "REDEDGEish", 2, 0.48),
        ModalitySpec::new(2, "SARish", 1, 0.36),
        ModalitySpec::new(3, "ELEish", 1, 0.27),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub modalities: Vec<ModalitySpec>,
    pub image_size: usize,
    pub patch_size: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: f64,
    /// Per-sample random phase offset, as a fraction of a full cycle (0 = fixed prototypes).
    pub phase_jitter: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            modalities: default_modalities(),
            image_size: 32,
            patch_size: 8,
            classes: 4,
            n_train: 512,
            n_val: 128,
            n_test: 128,
            noise: 0.3,
            phase_jitter: 1.0,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn total_channels(&self) -> usize {
        self.modalities.iter().map(|m| m.channels).sum()
    }
}

/// One co-registered sample: a `C_j × H × W` plane stack per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSample {
    pub id: usize,
    pub label: usize,
    pub planes: Vec<Tensor>,
}

impl MultiModalSample {
    pub fn plane(&self, modality: usize) -> &Tensor {
        &self.planes[modality]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Vec<MultiModalSample>,
    pub val: Vec<MultiModalSample>,
    pub test: Vec<MultiModalSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[MultiModalSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn modalities(&self) -> &[ModalitySpec] {
        &self.config.modalities
    }

    pub fn num_modalities(&self) -> usize {
        self.config.modalities.len()
    }
}

/// Per-channel statistics over the training split; channels indexed globally across modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}
