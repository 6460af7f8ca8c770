//! Synthetic circle images with pixel-exact ground truth.
//!
//! Each image scatters red, green, and blue discs over a white background;
//! the label field records which class painted each pixel last (discs drawn
//! in class order, so later classes sit on top). Channel intensities are
//! Gaussian around a dominant mean for the class's own channel(s) and a
//! lower mean elsewhere, clamped to `[0, 255]` and scaled to `[0, 1]`.
//!
//! Everything is a pure function of the config: image `i` draws from its
//! own counter-mode stream of the seeded generator, so datasets are
//! byte-reproducible and images can be generated in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::ConfigError;
use crate::fields::LabelField;
use crate::tensor::Tensor4;

/// Number of classes the generator produces: three disc colors plus
/// background.
pub const SYNTH_CLASSES: usize = 4;

/// Generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    pub images_total: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Discs drawn per color, sampled uniformly from this inclusive range.
    pub circles_min: usize,
    pub circles_max: usize,
    /// Gaussian mean for a class's dominant channel(s), 0..255 scale.
    pub intensity_mean_dominant: f64,
    /// Gaussian mean for the remaining channels.
    pub intensity_mean_other: f64,
    pub intensity_std: f64,
    /// Structural element side for downstream label corruption.
    pub se_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            images_total: 55,
            radius_min: 8.0,
            radius_max: 16.0,
            circles_min: 2,
            circles_max: 4,
            intensity_mean_dominant: 200.0,
            intensity_mean_other: 60.0,
            intensity_std: 50.0,
            se_size: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.image_size == 0 {
            return Err(ConfigError::Parameter("image_size must be positive".into()));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(ConfigError::Parameter(format!(
                "radius range [{}, {}] is not positive and ordered",
                self.radius_min, self.radius_max
            )));
        }
        if self.radius_max >= self.image_size as f64 / 2.0 {
            return Err(ConfigError::Parameter(format!(
                "radius_max {} must be below half the image size {}",
                self.radius_max, self.image_size
            )));
        }
        if self.circles_min > self.circles_max {
            return Err(ConfigError::Parameter(format!(
                "circle count range [{}, {}] is reversed",
                self.circles_min, self.circles_max
            )));
        }
        if self.se_size % 2 == 0 || self.se_size == 0 {
            return Err(ConfigError::Parameter(format!(
                "se_size must be odd and positive, got {}",
                self.se_size
            )));
        }
        if !(self.intensity_std > 0.0) {
            return Err(ConfigError::Parameter("intensity_std must be positive".into()));
        }
        Ok(())
    }
}

/// Generates the whole dataset: one RGB image in `[0, 1]` plus its clean
/// label field per entry.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<(Tensor4, LabelField)>, ConfigError> {
    cfg.validate()?;
    let out: Vec<(Tensor4, LabelField)> =
        (0..cfg.images_total).into_par_iter().map(|i| gen_one(cfg, i)).collect();
    Ok(out)
}

/// Generates image `index` of the dataset described by `cfg`.
pub fn gen_one(cfg: &SynthConfig, index: usize) -> (Tensor4, LabelField) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let size = cfg.image_size;
    let bg = (SYNTH_CLASSES - 1) as u8;

    let mut labels = LabelField::zeros(size, size, SYNTH_CLASSES);
    for y in 0..size {
        for x in 0..size {
            labels.set(y, x, bg);
        }
    }
    // Discs in class order; later classes overwrite earlier ones.
    for class in 0..SYNTH_CLASSES - 1 {
        let count = rng.random_range(cfg.circles_min..=cfg.circles_max);
        for _ in 0..count {
            let cy = rng.random_range(0..size) as f64;
            let cx = rng.random_range(0..size) as f64;
            let r = rng.random_range(cfg.radius_min..=cfg.radius_max);
            let r2 = r * r;
            let y0 = ((cy - r).floor().max(0.0)) as usize;
            let y1 = ((cy + r).ceil() as usize).min(size - 1);
            let x0 = ((cx - r).floor().max(0.0)) as usize;
            let x1 = ((cx + r).ceil() as usize).min(size - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    if dy * dy + dx * dx <= r2 {
                        labels.set(y, x, class as u8);
                    }
                }
            }
        }
    }

    let dominant = Normal::new(cfg.intensity_mean_dominant, cfg.intensity_std)
        .expect("validated std is positive");
    let other = Normal::new(cfg.intensity_mean_other, cfg.intensity_std)
        .expect("validated std is positive");
    let mut img = Tensor4::zeros(1, size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let class = labels.at(y, x) as usize;
            let px = img.pixel_mut(0, y, x);
            for (ch, slot) in px.iter_mut().enumerate() {
                // Background (white) is dominant in every channel; a disc
                // class is dominant only in its own channel.
                let is_dominant = class == SYNTH_CLASSES - 1 || ch == class;
                let dist = if is_dominant { &dominant } else { &other };
                let v: f64 = dist.sample(&mut rng);
                *slot = v.clamp(0.0, 255.0) / 255.0;
            }
        }
    }
    (img, labels)
}
