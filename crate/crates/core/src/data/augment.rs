use serde::{Deserialize, Serialize};

use super::Sample;
use crate::{Error, Result, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeomOp {
    FlipH,
    FlipV,
    /// Counter-clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
}

impl GeomOp {
    pub const ALL: [GeomOp; 5] = [GeomOp::FlipH, GeomOp::FlipV, GeomOp::Rot90, GeomOp::Rot180, GeomOp::Rot270];

    /// Source `(row, col)` of destination `(i, j)` in an `h x w` plane.
    fn source(self, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            GeomOp::FlipH => (i, w - 1 - j),
            GeomOp::FlipV => (h - 1 - i, j),
            GeomOp::Rot90 => (j, w - 1 - i),
            GeomOp::Rot180 => (h - 1 - i, w - 1 - j),
            GeomOp::Rot270 => (h - 1 - j, i),
        }
    }
}

fn transform_planes(t: &Tensor, op: GeomOp) -> Tensor {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = t.len() / (h * w);
    let mut out = Vec::with_capacity(t.len());
    for p in 0..planes {
        let src = &t.data()[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = op.source(i, j, h, w);
                out.push(src[si * w + sj]);
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

/// Applies the same flip or rotation to image and mask.
pub fn flip_rotate_augment(sample: &Sample, op: GeomOp) -> Result<Sample> {
    let s = sample.mask.shape();
    if matches!(op, GeomOp::Rot90 | GeomOp::Rot270) && s[0] != s[1] {
        return Err(Error::Validation(format!(
            "quarter-turn rotation needs a square sample, got {}x{}",
            s[0], s[1]
        )));
    }
    Ok(Sample {
        image: transform_planes(&sample.image, op),
        mask: transform_planes(&sample.mask, op),
    })
}

/// Adds `N(0, sigma)` to every image pixel and clamps to `[0, 1]`.
pub fn gaussian_noise_augment(sample: &Sample, sigma: f64, rng: &mut SeededRng) -> Result<Sample> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Validation(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(sample.clone());
    }
    let mut image = sample.image.clone();
    for v in image.data_mut() {
        *v = rng.normal(*v, sigma).clamp(0.0, 1.0);
    }
    Ok(Sample {
        image,
        mask: sample.mask.clone(),
    })
}
