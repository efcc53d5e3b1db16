//! Image file to feature vector: load, normalize, optionally augment and
//! perturb, then extract.

use std::path::Path;

use daf_core::imageio::{augment, load_image, perturb, AugmentSpec, PerturbSpec};
use daf_core::patchfeat::{FeatureExtractor, FeatureVector, PatchConfig};
use daf_core::{seed, Result};

pub struct ImagePipeline {
    extractor: FeatureExtractor,
    augment: Option<AugmentSpec>,
    perturb: Option<PerturbSpec>,
    seed: u64,
}

impl ImagePipeline {
    pub fn new(patch: PatchConfig) -> Result<Self> {
        Ok(ImagePipeline {
            extractor: FeatureExtractor::new(patch)?,
            augment: None,
            perturb: None,
            seed: 0,
        })
    }

    /// Training-time augmentation, seeded per row index.
    pub fn with_augment(mut self, spec: AugmentSpec, seed: u64) -> Self {
        self.augment = spec.enabled.then_some(spec);
        self.seed = seed;
        self
    }

    pub fn with_perturb(mut self, spec: Option<PerturbSpec>) -> Self {
        self.perturb = spec;
        self
    }

    pub fn dim(&self) -> usize {
        self.extractor.dim()
    }

    pub fn config(&self) -> &PatchConfig {
        self.extractor.config()
    }

    /// Features of the image at `path`; `index` seeds augmentation.
    pub fn features(&self, path: &Path, index: usize) -> Result<FeatureVector> {
        let mut img = load_image(path, self.config().input_size)?;
        if let Some(spec) = &self.augment {
            img = augment(&img, spec, seed::derive(self.seed, &[index as u64]));
        }
        if let Some(spec) = &self.perturb {
            img = perturb(&img, spec, seed::derive(self.seed, &[u64::MAX, index as u64]))?;
        }
        self.extractor.extract(&img)
    }
}
