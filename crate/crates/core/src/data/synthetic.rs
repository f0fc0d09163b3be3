//! Synthetic clean-task generator.
//!
//! Each class gets a fixed random prototype image; samples are the prototype
//! plus Gaussian pixel noise, clamped to [0, 1]. Contrast and noise are
//! chosen so a fresh classifier needs several epochs to fit the task. The
//! draw order is fixed: class prototypes first (class 0 upward, pixels
//! row-major), then train examples in id order, then test examples.

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Image};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Prototype pixel spread around 0.5; must lie in (0, 1].
    pub contrast: f64,
    /// Per-pixel Gaussian noise sigma; non-negative.
    pub noise_sigma: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 10,
            height: 16,
            width: 16,
            channels: 1,
            contrast: 0.35,
            noise_sigma: 0.35,
            train_size: 5000,
            test_size: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config("class count must be at least 2"));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::config("contrast must lie in (0, 1]"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise sigma must be non-negative"));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::config("train and test sizes must be positive"));
        }
        Ok(())
    }
}

/// Generates a (train, test) pair. Labels are assigned round-robin, so a
/// train size divisible by the class count yields exactly equal classes.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let dim = spec.height * spec.width * spec.channels;
    let mut rng = Rng::new(spec.seed);

    let prototypes: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| {
            (0..dim)
                .map(|_| 0.5 + spec.contrast * (rng.uniform() - 0.5))
                .collect()
        })
        .collect();

    let sample = |rng: &mut Rng, class: usize| -> Vec<f64> {
        prototypes[class]
            .iter()
            .map(|&p| (p + spec.noise_sigma * rng.standard_normal()).clamp(0.0, 1.0))
            .collect()
    };

    let make_split = |rng: &mut Rng, size: usize| -> Result<Dataset> {
        let examples = (0..size)
            .map(|i| {
                let class = i % spec.class_count;
                let image = Image::new(spec.height, spec.width, spec.channels, sample(rng, class))?;
                Ok(Example::clean(i as u64, image, class))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(examples, spec.class_count)
    };

    let train = make_split(&mut rng, spec.train_size)?;
    let test = make_split(&mut rng, spec.test_size)?;
    Ok((train, test))
}
