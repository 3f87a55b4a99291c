//! Manifest ingestion, patient-level splitting, normalization, image
//! preparation and the synthetic generator.

pub mod manifest;
pub mod netpbm;
pub mod normalize;
pub mod resize;
pub mod split;
pub mod synth;

use std::path::Path;

use crate::dataset::Dataset;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use manifest::{load_manifest, Manifest, SampleRecord};
pub use normalize::{apply_stats, compute_stats, NormalizationStats};
pub use resize::prepare_image;
pub use split::{patient_level_split, SplitResult};
pub use synth::{generate_synthetic, Region, SyntheticDatasetSpec};

/// How raw images are turned into model inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageGeometry {
    pub size: (usize, usize),
    pub replicate_to_3: bool,
}

impl ImageGeometry {
    pub fn channels(&self) -> usize {
        if self.replicate_to_3 {
            3
        } else {
            1
        }
    }
}

/// Reads and prepares every image of `manifest` (paths relative to
/// `manifest_path`). Fails on the first missing or unreadable image.
pub fn load_images<T: Scalar>(manifest: &Manifest, manifest_path: &Path, geom: ImageGeometry) -> Result<Vec<Tensor<T>>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let path = manifest::resolve_image(manifest_path, &r.image_path);
            let raw = netpbm::read_pgm(&path)?;
            prepare_image(&raw, geom.size, geom.replicate_to_3)
        })
        .collect()
}

/// Normalizes images with `stats` and pairs them with the manifest labels.
pub fn normalized_dataset<T: Scalar>(
    manifest: &Manifest,
    images: &[Tensor<T>],
    stats: &NormalizationStats,
) -> Result<Dataset<T>> {
    let images = images.iter().map(|t| apply_stats(t, stats)).collect::<Result<Vec<_>>>()?;
    Dataset::new(images, manifest.labels())
}
