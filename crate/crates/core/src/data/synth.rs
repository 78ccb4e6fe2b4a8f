//! Procedural crack images with a controlled positive-pixel rate.
//!
//! Each image is a mid-gray background with additive Gaussian noise. Cracks
//! are persistent random walks, 1 or 2 pixels wide, drawn darker than the
//! background. The walk stops once the image's pixel budget is met; budgets
//! are drawn per image from `target_pos_rate * H * W * U(0.5, 1.5)`.

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::{Error, Result, SeededRng, Tensor};

pub const BACKGROUND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Expected share of crack pixels, in `(0, 0.1]`.
    pub target_pos_rate: f64,
    /// Inclusive range of cracks per image.
    pub n_cracks: (usize, usize),
    pub noise_sigma: f64,
    /// Intensity drop of crack pixels below the background.
    pub crack_intensity_delta: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            target_pos_rate: 0.011,
            n_cracks: (1, 3),
            noise_sigma: 0.05,
            crack_intensity_delta: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("width", "width and height must be positive"));
        }
        if !(self.target_pos_rate > 0.0 && self.target_pos_rate <= 0.1) {
            return Err(Error::config(
                "target_pos_rate",
                format!("must lie in (0, 0.1], got {}", self.target_pos_rate),
            ));
        }
        let (lo, hi) = self.n_cracks;
        if lo == 0 || hi < lo {
            return Err(Error::config("n_cracks", format!("invalid range {lo}..={hi}")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        if !(0.0..=BACKGROUND).contains(&self.crack_intensity_delta) {
            return Err(Error::config("crack_intensity_delta", "must lie in [0, 0.5]"));
        }
        // The smallest per-image budget must still cover one pixel per crack.
        let min_budget = 0.5 * self.target_pos_rate * (self.width * self.height) as f64;
        if min_budget < hi as f64 {
            return Err(Error::config(
                "target_pos_rate",
                format!(
                    "unattainable: {}x{} at rate {} leaves fewer crack pixels than the {hi} cracks need",
                    self.width, self.height, self.target_pos_rate
                ),
            ));
        }
        Ok(())
    }

    /// Checks that the image size suits a network with `depth` down-samplings.
    pub fn check_divisible(&self, depth: usize) -> Result<()> {
        let m = 1usize << depth;
        if !self.width.is_multiple_of(m) || !self.height.is_multiple_of(m) {
            return Err(Error::config(
                "width",
                format!("{}x{} is not divisible by 2^{depth}", self.width, self.height),
            ));
        }
        Ok(())
    }
}

fn render_sample(cfg: &SynthConfig, rng: &mut SeededRng) -> Result<Sample> {
    let (w, h) = (cfg.width, cfg.height);
    let total = w * h;
    let budget = (cfg.target_pos_rate * total as f64 * rng.uniform_range(0.5, 1.5)).round() as usize;
    let n = rng.int_range(cfg.n_cracks.0, cfg.n_cracks.1);
    let mut mask = vec![0u8; total];
    let mut marked = 0usize;
    let max_steps = 50 * total;
    let mut steps = 0usize;

    for crack in 0..n {
        let goal = budget * (crack + 1) / n;
        let thick = rng.uniform() < 0.5;
        while marked < goal {
            // Start (or restart after leaving the frame) a walk segment.
            let (mut x, mut y) = (rng.uniform_range(0.0, w as f64), rng.uniform_range(0.0, h as f64));
            let mut heading = rng.uniform_range(0.0, std::f64::consts::TAU);
            while marked < goal {
                steps += 1;
                if steps > max_steps {
                    return Err(Error::config("target_pos_rate", "unattainable: crack budget could not be placed"));
                }
                let (px, py) = (x.floor() as isize, y.floor() as isize);
                if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                    break;
                }
                let mut mark = |cx: isize, cy: isize| {
                    if cx >= 0 && cy >= 0 && cx < w as isize && cy < h as isize {
                        let i = cy as usize * w + cx as usize;
                        if mask[i] == 0 {
                            mask[i] = 1;
                            return 1;
                        }
                    }
                    0
                };
                marked += mark(px, py);
                if thick && marked < goal {
                    // Widen perpendicular to the dominant direction.
                    marked += if heading.cos().abs() > heading.sin().abs() {
                        mark(px, py + 1)
                    } else {
                        mark(px + 1, py)
                    };
                }
                heading += rng.normal(0.0, 0.3);
                x += heading.cos();
                y += heading.sin();
            }
        }
    }

    let mut image = Vec::with_capacity(total);
    for &m in &mask {
        let base = if m == 1 {
            BACKGROUND - cfg.crack_intensity_delta
        } else {
            BACKGROUND
        };
        let v = if cfg.noise_sigma > 0.0 {
            rng.normal(base, cfg.noise_sigma)
        } else {
            base
        };
        image.push(v.clamp(0.0, 1.0));
    }
    Ok(Sample {
        image: Tensor::from_parts(vec![1, h, w], image),
        mask: Tensor::from_parts(vec![h, w], mask.into_iter().map(f64::from).collect()),
    })
}

/// `count` samples; sample `i` draws from its own stream of `cfg.seed`.
pub fn synth_generate(cfg: &SynthConfig, count: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    (0..count)
        .map(|i| render_sample(cfg, &mut root.derive(i as u64)))
        .collect()
}

/// Share of positive mask pixels across `samples`.
pub fn positive_rate(samples: &[Sample]) -> f64 {
    let (pos, total) = samples.iter().fold((0.0, 0usize), |(p, t), s| {
        (p + s.mask.sum(), t + s.mask.len())
    });
    if total == 0 {
        0.0
    } else {
        pos / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::ensure_binary;

    #[test]
    fn crackforest_like_rate() {
        let cfg = SynthConfig { seed: 11, ..Default::default() };
        let samples = synth_generate(&cfg, 200).unwrap();
        let rate = positive_rate(&samples);
        assert!((0.0055..=0.0165).contains(&rate), "{rate}");
        for s in &samples {
            ensure_binary(&s.mask).unwrap();
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.image.shape(), &[1, 64, 64]);
        }
    }

    #[test]
    fn flat_rendering_without_noise_or_contrast() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            crack_intensity_delta: 0.0,
            ..Default::default()
        };
        let samples = synth_generate(&cfg, 3).unwrap();
        for s in samples {
            assert!(s.image.data().iter().all(|&v| v == BACKGROUND));
            assert!(s.mask.sum() > 0.0);
            ensure_binary(&s.mask).unwrap();
        }
    }

    #[test]
    fn cracks_are_darker() {
        let cfg = SynthConfig { noise_sigma: 0.0, ..Default::default() };
        let s = &synth_generate(&cfg, 1).unwrap()[0];
        for (&v, &m) in s.image.data().iter().zip(s.mask.data()) {
            assert_eq!(v, if m == 1.0 { BACKGROUND - cfg.crack_intensity_delta } else { BACKGROUND });
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let cfg = SynthConfig { seed: 5, ..Default::default() };
        assert_eq!(synth_generate(&cfg, 4).unwrap(), synth_generate(&cfg, 4).unwrap());
        let other = SynthConfig { seed: 6, ..cfg };
        assert_ne!(synth_generate(&cfg, 4).unwrap(), synth_generate(&other, 4).unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let tiny = SynthConfig { width: 4, height: 4, ..Default::default() };
        assert!(matches!(synth_generate(&tiny, 1), Err(Error::Config { .. })));
        let dense = SynthConfig { target_pos_rate: 0.2, ..Default::default() };
        assert!(synth_generate(&dense, 1).is_err());
        let no_cracks = SynthConfig { n_cracks: (0, 2), ..Default::default() };
        assert!(synth_generate(&no_cracks, 1).is_err());
        assert!(SynthConfig::default().check_divisible(2).is_ok());
        assert!(SynthConfig { width: 60, ..Default::default() }.check_divisible(3).is_err());
    }

    #[test]
    fn band_holds_for_random_configs() {
        let mut rng = SeededRng::new(99);
        for _ in 0..10 {
            let cfg = SynthConfig {
                width: 16 * rng.int_range(2, 6),
                height: 16 * rng.int_range(2, 6),
                target_pos_rate: rng.uniform_range(0.005, 0.05),
                n_cracks: (1, rng.int_range(1, 3)),
                seed: rng.next_u64(),
                ..Default::default()
            };
            if cfg.validate().is_err() {
                continue;
            }
            let rate = positive_rate(&synth_generate(&cfg, 50).unwrap());
            let rel = (rate - cfg.target_pos_rate).abs() / cfg.target_pos_rate;
            assert!(rel <= 0.5, "{cfg:?}: {rate}");
        }
    }
}
