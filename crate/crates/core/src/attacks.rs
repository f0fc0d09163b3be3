//! Pixel-space trigger injectors and the dataset poisoning engine.
//!
//! Triggers are deliberately simple: a checkerboard patch, an alpha blend
//! with a fixed pattern, and a horizontal sinusoid. Poisoning marks each
//! modified example with a ground-truth flag that only evaluation code may
//! read.

use std::collections::BTreeSet;

use crate::data::{Dataset, Example, Image};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A pixel-space trigger pattern.
#[derive(Debug, Clone, PartialEq)]
pub enum TriggerSpec {
    /// Overwrites a `size`x`size` region with a 0/1 checkerboard whose
    /// top-left cell is 1. All channels receive the same value.
    GridPatch {
        anchor_row: usize,
        anchor_col: usize,
        size: usize,
    },
    /// `(1 - alpha) * image + alpha * pattern`, clamped to [0, 1].
    BlendPattern { pattern: Image, alpha: f64 },
    /// Adds `amplitude * sin(2 pi frequency col / width)` to every pixel.
    Sinusoid { amplitude: f64, frequency: u32 },
}

impl TriggerSpec {
    /// Seeded uniform-noise blend pattern matching the default blend attack.
    pub fn noise_blend(shape: crate::data::ImageShape, alpha: f64, seed: u64) -> Result<TriggerSpec> {
        let mut rng = Rng::new(seed);
        let pixels = (0..shape.len()).map(|_| rng.uniform()).collect();
        Ok(TriggerSpec::BlendPattern {
            pattern: Image::new(shape.height, shape.width, shape.channels, pixels)?,
            alpha,
        })
    }

    fn validate_for(&self, shape: crate::data::ImageShape) -> Result<()> {
        match self {
            TriggerSpec::GridPatch {
                anchor_row,
                anchor_col,
                size,
            } => {
                if *size == 0 {
                    return Err(Error::config("patch size must be positive"));
                }
                if anchor_row + size > shape.height || anchor_col + size > shape.width {
                    return Err(Error::config(format!(
                        "patch {size}x{size} at ({anchor_row},{anchor_col}) exceeds {}x{} image",
                        shape.height, shape.width
                    )));
                }
            }
            TriggerSpec::BlendPattern { pattern, alpha } => {
                if pattern.shape() != shape {
                    return Err(Error::config("blend pattern shape differs from image".to_string()));
                }
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::config("blend alpha must lie in [0, 1]"));
                }
            }
            TriggerSpec::Sinusoid { amplitude, .. } => {
                if !(0.0..=1.0).contains(amplitude) {
                    return Err(Error::config("sinusoid amplitude must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// Applies a trigger, returning a new image; the input is untouched.
pub fn apply_trigger(image: &Image, trigger: &TriggerSpec) -> Result<Image> {
    trigger.validate_for(image.shape())?;
    let mut out = image.clone();
    match trigger {
        TriggerSpec::GridPatch {
            anchor_row,
            anchor_col,
            size,
        } => {
            for dr in 0..*size {
                for dc in 0..*size {
                    let value = if (dr + dc) % 2 == 0 { 1.0 } else { 0.0 };
                    for ch in 0..out.channels {
                        let idx = out.index(anchor_row + dr, anchor_col + dc, ch);
                        out.pixels[idx] = value;
                    }
                }
            }
        }
        TriggerSpec::BlendPattern { pattern, alpha } => {
            for (p, q) in out.pixels.iter_mut().zip(&pattern.pixels) {
                *p = ((1.0 - alpha) * *p + alpha * q).clamp(0.0, 1.0);
            }
        }
        TriggerSpec::Sinusoid {
            amplitude,
            frequency,
        } => {
            let width = out.width as f64;
            for row in 0..out.height {
                for col in 0..out.width {
                    let shift = amplitude
                        * (2.0 * std::f64::consts::PI * *frequency as f64 * col as f64 / width).sin();
                    for ch in 0..out.channels {
                        let idx = out.index(row, col, ch);
                        out.pixels[idx] = (out.pixels[idx] + shift).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// How poisoned examples are labeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Trigger applied to non-target examples, labels switched to the target.
    Dirty,
    /// Trigger applied to target-class examples, labels left unchanged.
    CleanLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoisonSpec {
    pub trigger: TriggerSpec,
    pub target_label: usize,
    pub poisoning_rate: f64,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl PoisonSpec {
    fn validate(&self, class_count: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.poisoning_rate) {
            return Err(Error::config("poisoning rate must lie in [0, 1]"));
        }
        if self.target_label >= class_count {
            return Err(Error::config(format!(
                "target label {} out of range for {class_count} classes",
                self.target_label
            )));
        }
        Ok(())
    }
}

/// Ground-truth record of which ids were poisoned.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoisonReport {
    pub poisoned_ids: BTreeSet<u64>,
    pub achieved_rate: f64,
    /// (id, original label) pairs for re-attaching provenance to datasets
    /// loaded from plain image/label files.
    pub original_labels: Vec<(u64, usize)>,
}

/// `ceil(rate * n)` with a guard against float round-up on exact products.
fn poison_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Poisons a seeded sample of the dataset in place of the selected examples;
/// ids and ordering are preserved.
pub fn poison_dataset(train: &Dataset, spec: &PoisonSpec) -> Result<(Dataset, PoisonReport)> {
    spec.validate(train.class_count())?;
    let n = train.len();
    let count = poison_count(spec.poisoning_rate, n);

    let eligible: Vec<usize> = train
        .examples()
        .iter()
        .enumerate()
        .filter(|(_, e)| match spec.label_mode {
            LabelMode::Dirty => e.label != spec.target_label,
            LabelMode::CleanLabel => e.label == spec.target_label,
        })
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < count {
        return Err(Error::input(format!(
            "need {count} eligible examples to poison, found {}",
            eligible.len()
        )));
    }

    let mut order = eligible;
    let mut rng = Rng::new(spec.seed);
    rng.shuffle(&mut order);
    order.truncate(count);

    let mut examples: Vec<Example> = train.examples().to_vec();
    let mut poisoned_ids = BTreeSet::new();
    let mut original_labels = Vec::with_capacity(count);
    for idx in order {
        let e = &examples[idx];
        let image = apply_trigger(&e.image, &spec.trigger)?;
        let label = match spec.label_mode {
            LabelMode::Dirty => spec.target_label,
            LabelMode::CleanLabel => e.label,
        };
        poisoned_ids.insert(e.id);
        original_labels.push((e.id, e.label));
        examples[idx] = Example::new(e.id, image, label, e.label, true)?;
    }
    original_labels.sort_unstable();

    let report = PoisonReport {
        poisoned_ids,
        achieved_rate: count as f64 / n as f64,
        original_labels,
    };
    let poisoned = Dataset::with_shape(examples, train.class_count(), train.shape())?;
    Ok((poisoned, report))
}

/// Builds the triggered test set used for attack success rate: every test
/// example whose original label differs from the target gets the trigger and
/// the target label; true target-class examples are excluded.
pub fn build_backdoor_testset(test: &Dataset, spec: &PoisonSpec) -> Result<Dataset> {
    spec.validate(test.class_count())?;
    if test.is_empty() {
        return Err(Error::input("test set is empty"));
    }
    let examples = test
        .examples()
        .iter()
        .filter(|e| e.original_label != spec.target_label)
        .map(|e| {
            let image = apply_trigger(&e.image, &spec.trigger)?;
            Example::new(e.id, image, spec.target_label, e.original_label, true)
        })
        .collect::<Result<Vec<_>>>()?;
    if examples.is_empty() {
        return Err(Error::input(
            "every test example belongs to the target class; backdoor test set is empty".to_string(),
        ));
    }
    Dataset::with_shape(examples, test.class_count(), test.shape())
}
