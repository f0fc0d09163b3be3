//! Dataset representation, synthetic clean-task generation, and IDX files.
//!
//! Ground-truth poison flags travel with every example but exist only for
//! evaluation: training code must never branch on them. The flag is private
//! and exposed through [`Example::ground_truth_poisoned`], which only the
//! metrics module reads; an architectural test in `metrics` enforces this.

mod idx;
mod synthetic;

pub use idx::{load_idx, write_idx};
pub use synthetic::{gen_synthetic, SyntheticSpec};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Grayscale or multi-channel image with row-major pixels in [0, 1].
/// Index layout: `(row * width + col) * channels + channel`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::config(format!(
                "image has {} pixels, expected {}",
                pixels.len(),
                height * width * channels
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("pixels must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    pub fn pixel(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[self.index(row, col, channel)]
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape {
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A labeled example with a stable id and evaluation-only poison provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub image: Image,
    pub label: usize,
    pub original_label: usize,
    poisoned: bool,
}

impl Example {
    pub fn new(
        id: u64,
        image: Image,
        label: usize,
        original_label: usize,
        poisoned: bool,
    ) -> Result<Self> {
        if !poisoned && label != original_label {
            return Err(Error::config(format!(
                "unpoisoned example {id} has label {label} != original {original_label}"
            )));
        }
        Ok(Self {
            id,
            image,
            label,
            original_label,
            poisoned,
        })
    }

    pub fn clean(id: u64, image: Image, label: usize) -> Self {
        Self {
            id,
            image,
            label,
            original_label: label,
            poisoned: false,
        }
    }

    /// Evaluation-only provenance: whether this example was poisoned.
    /// Training and isolation code must not call this; only metrics may.
    pub fn ground_truth_poisoned(&self) -> bool {
        self.poisoned
    }

    /// Copy with a replaced label, preserving provenance. Used by the
    /// relabeling unlearning arms; for unpoisoned examples the original
    /// label follows the new one so the provenance invariant holds.
    pub fn with_label(&self, label: usize) -> Example {
        let mut e = self.clone();
        e.label = label;
        if !e.poisoned {
            e.original_label = label;
        }
        e
    }

    /// Copy with a replaced image, preserving labels and provenance.
    pub fn with_image(&self, image: Image) -> Example {
        let mut e = self.clone();
        e.image = image;
        e
    }
}

/// Ordered collection of examples sharing one image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    class_count: usize,
    shape: ImageShape,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, class_count: usize) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::config("class count must be at least 2"));
        }
        let shape = match examples.first() {
            Some(e) => e.image.shape(),
            None => return Err(Error::config("cannot infer shape of an empty dataset")),
        };
        Self::with_shape(examples, class_count, shape)
    }

    /// Like [`Dataset::new`] but with an explicit shape, allowing empty sets.
    pub fn with_shape(examples: Vec<Example>, class_count: usize, shape: ImageShape) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::config("class count must be at least 2"));
        }
        let mut seen = BTreeSet::new();
        for e in &examples {
            if !seen.insert(e.id) {
                return Err(Error::config(format!("duplicate example id {}", e.id)));
            }
            if e.image.shape() != shape {
                return Err(Error::config(format!("example {} has a different shape", e.id)));
            }
            if e.label >= class_count || e.original_label >= class_count {
                return Err(Error::config(format!(
                    "example {} label out of range for {class_count} classes",
                    e.id
                )));
            }
        }
        Ok(Self {
            examples,
            class_count,
            shape,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.shape.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Marks the given ids as poisoned and restores their original labels
    /// from the provided pairs. Used when re-attaching provenance to a
    /// dataset loaded from plain image/label files.
    pub fn attach_provenance(&mut self, poisoned: &[(u64, usize)]) -> Result<()> {
        let mut by_id: std::collections::BTreeMap<u64, usize> = std::collections::BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            by_id.insert(e.id, i);
        }
        for &(id, original_label) in poisoned {
            let idx = *by_id
                .get(&id)
                .ok_or_else(|| Error::input(format!("provenance id {id} not in dataset")))?;
            if original_label >= self.class_count {
                return Err(Error::input(format!(
                    "provenance original label {original_label} out of range"
                )));
            }
            let e = &mut self.examples[idx];
            e.poisoned = true;
            e.original_label = original_label;
        }
        Ok(())
    }
}

/// Seeded uniform sample of `n` examples without replacement; ids are
/// preserved, order follows the shuffle.
pub fn subsample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > dataset.len() {
        return Err(Error::input(format!(
            "cannot subsample {n} from {} examples",
            dataset.len()
        )));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut indices);
    indices.truncate(n);
    let examples = indices
        .into_iter()
        .map(|i| dataset.examples[i].clone())
        .collect();
    Dataset::with_shape(examples, dataset.class_count(), dataset.shape())
}
