//! Bit-exact reader/writer for the big-endian IDX image/label format.
//!
//! Images: magic `0x00000803`, then `count`, `rows`, `cols` as big-endian
//! u32, then unsigned bytes row-major. Labels: magic `0x00000801`, then
//! `count`, then one byte per label. Pixel bytes are scaled by 1/255 on load
//! and by 255 (rounded) on write, so writing a loaded dataset reproduces the
//! file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, Example, Image};
use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(reader: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::format(format!("{what}: file truncated")))?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an image/label file pair into a dataset. Ids are assigned 0..n-1 in
/// file order; the class count is inferred as `max label + 1` (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut images = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut images, "images magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(format!(
            "images magic: wrong magic 0x{magic:08X} (expected 0x{IMAGE_MAGIC:08X})"
        )));
    }
    let count = read_u32_be(&mut images, "images count")? as usize;
    let rows = read_u32_be(&mut images, "images rows")? as usize;
    let cols = read_u32_be(&mut images, "images cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format("images dimensions: zero rows or cols".to_string()));
    }
    let mut pixel_bytes = vec![0u8; count * rows * cols];
    images
        .read_exact(&mut pixel_bytes)
        .map_err(|_| Error::format("images data: file truncated".to_string()))?;

    let mut labels = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut labels, "labels magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(format!(
            "labels magic: wrong magic 0x{magic:08X} (expected 0x{LABEL_MAGIC:08X})"
        )));
    }
    let label_count = read_u32_be(&mut labels, "labels count")? as usize;
    if label_count != count {
        return Err(Error::format(format!(
            "labels count: {label_count} labels for {count} images"
        )));
    }
    let mut label_bytes = vec![0u8; label_count];
    labels
        .read_exact(&mut label_bytes)
        .map_err(|_| Error::format("labels data: file truncated".to_string()))?;

    let class_count = label_bytes
        .iter()
        .map(|&b| b as usize + 1)
        .max()
        .unwrap_or(2)
        .max(2);

    let examples = (0..count)
        .map(|i| {
            let start = i * rows * cols;
            let pixels = pixel_bytes[start..start + rows * cols]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            let image = Image::new(rows, cols, 1, pixels)?;
            Ok(Example::clean(i as u64, image, label_bytes[i] as usize))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples, class_count)
}

/// Writes a dataset as an IDX image/label file pair. Multi-channel images
/// are not representable in this format.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = dataset.shape();
    if shape.channels != 1 {
        return Err(Error::input("IDX files hold single-channel images".to_string()));
    }
    let count = dataset.len() as u32;

    let mut images = BufWriter::new(File::create(images_path)?);
    images.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    images.write_all(&count.to_be_bytes())?;
    images.write_all(&(shape.height as u32).to_be_bytes())?;
    images.write_all(&(shape.width as u32).to_be_bytes())?;
    for e in dataset.examples() {
        for &p in &e.image.pixels {
            images.write_all(&[(p * 255.0).round().clamp(0.0, 255.0) as u8])?;
        }
    }
    images.flush()?;

    let mut labels = BufWriter::new(File::create(labels_path)?);
    labels.write_all(&LABEL_MAGIC.to_be_bytes())?;
    labels.write_all(&count.to_be_bytes())?;
    for e in dataset.examples() {
        labels.write_all(&[e.label as u8])?;
    }
    labels.flush()?;
    Ok(())
}
