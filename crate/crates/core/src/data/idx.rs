//! IDX (MNIST) reader. Big-endian header: magic, then one u32 per dimension,
//! then the payload bytes in row-major order.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::data::{choose_per_class, Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::Scalar;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_payload<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    Ok(buf)
}

/// Returns `(rows, cols, pixel bytes per image)`.
pub fn read_idx_images<R: Read>(mut r: R) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let magic = read_u32(&mut r)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("image magic {magic} != {IMAGES_MAGIC}")));
    }
    let count = read_u32(&mut r)? as usize;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let pixels = rows * cols;
    let payload = read_payload(&mut r, count * pixels)?;
    let images = if pixels == 0 {
        vec![Vec::new(); count]
    } else {
        payload.chunks_exact(pixels).map(<[u8]>::to_vec).collect()
    };
    Ok((rows, cols, images))
}

pub fn read_idx_labels<R: Read>(mut r: R) -> Result<Vec<u8>> {
    let magic = read_u32(&mut r)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!("label magic {magic} != {LABELS_MAGIC}")));
    }
    let count = read_u32(&mut r)? as usize;
    read_payload(&mut r, count)
}

fn read_pair<R1: Read, R2: Read>(images: R1, labels: R2) -> Result<(Vec<Vec<u8>>, Vec<u8>)> {
    let (_, _, images) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if images.len() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok((images, labels))
}

fn to_example<S: Scalar>(px: &[u8], label: u8) -> LabeledExample<S> {
    let scale = S::one() / S::of(255.0);
    LabeledExample { features: px.iter().map(|&b| S::of(b as f64) * scale).collect(), label: label as usize }
}

fn class_count(labels: &[u8]) -> usize {
    labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
}

/// Reads an image/label stream pair. Pixels are scaled to `[0, 1]` by dividing by 255.
pub fn load_idx<S: Scalar, R1: Read, R2: Read>(images: R1, labels: R2) -> Result<Dataset<LabeledExample<S>>> {
    let (images, labels) = read_pair(images, labels)?;
    let examples = images.iter().zip(&labels).map(|(px, &l)| to_example(px, l)).collect();
    Ok(Dataset::new(examples, class_count(&labels)))
}

/// Same result as [`load_idx`] followed by [`Dataset::subsample_per_class`],
/// converting only the kept images.
pub fn load_idx_per_class<S: Scalar, R1: Read, R2: Read>(
    images: R1,
    labels: R2,
    per_class: usize,
    seed: u64,
) -> Result<Dataset<LabeledExample<S>>> {
    let (images, labels) = read_pair(images, labels)?;
    let num_classes = class_count(&labels);
    let wide: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let keep = choose_per_class(&wide, num_classes, per_class, seed)?;
    let examples = keep.into_iter().map(|i| to_example(&images[i], labels[i])).collect();
    Ok(Dataset::new(examples, num_classes))
}

pub fn load_idx_files<S: Scalar>(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset<LabeledExample<S>>> {
    let img = BufReader::new(File::open(images)?);
    let lbl = BufReader::new(File::open(labels)?);
    load_idx(img, lbl)
}

pub fn load_idx_files_per_class<S: Scalar>(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    per_class: usize,
    seed: u64,
) -> Result<Dataset<LabeledExample<S>>> {
    let img = BufReader::new(File::open(images)?);
    let lbl = BufReader::new(File::open(labels)?);
    load_idx_per_class(img, lbl, per_class, seed)
}
