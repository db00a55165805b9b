//! IDX files: big-endian header, `u8` payload.
//!
//! Images use magic `0x00000803` (`[m, h, w]`, grayscale) or the RGB extension
//! `0x00000804` (`[m, h, w, c]`). Labels use `0x00000801`.

use std::fs;
use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_GRAY: u32 = 0x0803;
const IMAGES_RGB: u32 = 0x0804;
const LABELS: u32 = 0x0801;

fn header(bytes: &[u8], expected: &'static str, allowed: &[u32]) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if !allowed.contains(&magic) {
        return Err(Error::IdxMagic {
            found: magic,
            expected,
        });
    }
    let rank = (magic & 0xff) as usize;
    let start = 4 + 4 * rank;
    if bytes.len() < start {
        return Err(Error::IdxTruncated {
            expected: start,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..start]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if dims.contains(&0) {
        return Err(Error::IdxHeader(format!("zero dimension in {dims:?}")));
    }
    let expected_len = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| Error::IdxHeader(format!("dimensions {dims:?} overflow")))?;
    match bytes.len() {
        n if n < expected_len => Err(Error::IdxTruncated {
            expected: expected_len,
            found: n,
        }),
        n if n > expected_len => Err(Error::IdxTrailing {
            expected: expected_len,
            found: n,
        }),
        _ => Ok((dims, start)),
    }
}

/// Parses an image file into `[m, h, w, c]` with values scaled by 1/255.
pub fn read_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let (mut dims, start) = header(bytes, "0x00000803 or 0x00000804", &[IMAGES_GRAY, IMAGES_RGB])?;
    if dims.len() == 3 {
        dims.push(1);
    }
    let data = bytes[start..].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(dims, data)
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, start) = header(bytes, "0x00000801", &[LABELS])?;
    Ok(bytes[start..].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, n_classes: usize) -> Result<Dataset> {
    let x = read_idx_images(&read(images.as_ref())?)?;
    let y = read_idx_labels(&read(labels.as_ref())?)?;
    Dataset::new(x, y, n_classes, Split::Eval)
}

fn encode(magic: u32, dims: &[usize], payload: impl Iterator<Item = u8>) -> Result<Vec<u8>> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::IdxHeader(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend(payload);
    Ok(out)
}

/// Writes a dataset as IDX, quantizing pixels to `round(255 v)`. Grayscale
/// sets use the 3-dimensional layout, others the RGB extension.
pub fn save_idx(dataset: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let shape = dataset.images().shape();
    let pixels = dataset.images().data().iter().map(|&v| (v * 255.0).round() as u8);
    let image_bytes = if shape[3] == 1 {
        encode(IMAGES_GRAY, &shape[..3], pixels)?
    } else {
        encode(IMAGES_RGB, shape, pixels)?
    };
    if dataset.n_classes() > 256 {
        return Err(Error::IdxHeader("labels above 255 do not fit in a byte".into()));
    }
    let label_bytes = encode(LABELS, &[dataset.len()], dataset.labels().iter().map(|&l| l as u8))?;
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    fs::write(ip, image_bytes).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, label_bytes).map_err(|e| Error::io(lp, e))?;
    Ok(())
}
