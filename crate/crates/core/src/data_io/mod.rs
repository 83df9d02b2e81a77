//! Datasets, configuration, binary formats, checkpoints and the
//! synthetic multi-domain generator.

mod checkpoint;
mod config;
mod formats;
mod synth;

pub use checkpoint::{Checkpoint, CKPT_VERSION};
pub use config::{Config, Reduction};
pub use formats::*;
pub use synth::{generate_synthetic, labeled_target, SyntheticSpec, SyntheticWorld};

use crate::tensor::Tensor;

/// Samples of one domain. Sources carry labels; the target does not.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset<T> {
    pub domain: usize,
    pub ids: Vec<u32>,
    /// `h × w × 3` images.
    pub samples: Vec<Tensor<T>>,
    pub labels: Option<Vec<usize>>,
}

impl<T> DomainDataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }
}
