//! Samples, synthetic generation, PGM ingestion, augmentation and batching.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::numkit::ensure_binary;
use crate::{Error, Result, Tensor};

pub mod augment;
pub mod batch;
pub mod pgm;
pub mod synth;

pub use augment::{flip_rotate_augment, gaussian_noise_augment, GeomOp};
pub use batch::{batch_iter, stack, Batch, BatchIter};
pub use pgm::{binarize_gt, load_pgm, save_pgm};
pub use synth::{positive_rate, synth_generate, SynthConfig};

/// Grayscale image `(1, H, W)` in `[0, 1]` with its binary mask `(H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let image = match *image.shape() {
            [h, w] => image.reshape([1, h, w])?,
            [1, _, _] => image,
            _ => {
                return Err(Error::InvalidTensor(format!(
                    "image must be (H, W) or (1, H, W), got {:?}",
                    image.shape()
                )))
            }
        };
        if image.shape()[1..] != *mask.shape() {
            return Err(Error::ShapeMismatch {
                left: image.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        ensure_binary(&mask)?;
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("image values must lie in [0, 1]".into()));
        }
        Ok(Self { image, mask })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: 0,
        msg: format!("manifest {}: {e}", path.display()),
    })
}

pub fn manifest_json(entries: &[ManifestEntry]) -> String {
    serde_json::to_string_pretty(entries).expect("manifest serializes")
}

/// Loads every pair listed in a manifest; relative paths resolve against the
/// manifest's directory. Masks are binarized at 0.5.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    read_manifest(manifest)?
        .iter()
        .map(|e| {
            let image = load_pgm(&resolve(&e.image_path))?;
            let mask = binarize_gt(&load_pgm(&resolve(&e.mask_path))?, 0.5);
            Sample::new(image, mask)
        })
        .collect()
}
