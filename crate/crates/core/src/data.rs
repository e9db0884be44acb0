//! MNIST-style IDX datasets.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;

use crate::error::{Result, SpideError};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Images and labels of one split. Pixels are kept as bytes and scaled to
/// `[0, 1]` on access.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    dim: usize,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, dim: usize, num_classes: usize, split: Split) -> Result<Self> {
        if dim == 0 || pixels.len() != labels.len() * dim {
            return Err(SpideError::Contract(format!(
                "{} pixels do not form {} images of size {dim}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= num_classes) {
            return Err(SpideError::Contract(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            pixels,
            labels,
            dim,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Flattened image `i` with pixels divided by 255.
    pub fn image(&self, i: usize) -> Array1<f64> {
        self.pixels[i * self.dim..(i + 1) * self.dim]
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect()
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Keep only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * self.dim);
        }
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| SpideError::Parse {
            offset: offset as u64,
            message: format!("file truncated: need 4 header bytes, {} available", bytes.len().saturating_sub(offset)),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(SpideError::Parse {
            offset: 0,
            message: format!("bad magic 0x{magic:08X}, expected 0x{expected:08X}"),
        });
    }
    Ok(())
}

/// Parse an IDX3 image file. Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| SpideError::Parse {
            offset: 4,
            message: "image dimensions overflow".into(),
        })?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(SpideError::Parse {
            offset: (16 + body.len()) as u64,
            message: format!("file truncated: header declares {need} pixel bytes, found {}", body.len()),
        });
    }
    Ok((n, rows, cols, &body[..need]))
}

/// Parse an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(SpideError::Parse {
            offset: (8 + body.len()) as u64,
            message: format!("file truncated: header declares {n} labels, found {}", body.len()),
        });
    }
    Ok(&body[..n])
}

/// Load an image/label IDX pair.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, num_classes: usize, split: Split) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(SpideError::Parse {
            offset: 4,
            message: format!("image file has {n} entries, label file has {}", labels.len()),
        });
    }
    Dataset::new(pixels.to_vec(), labels.to_vec(), rows * cols, num_classes, split)
}

/// Load a split from a directory holding the standard MNIST file names.
pub fn load_mnist_dir(dir: &Path, split: Split, num_classes: usize) -> Result<Dataset> {
    let (img, lbl) = split.file_names();
    load_mnist_idx(&dir.join(img), &dir.join(lbl), num_classes, split)
}

pub fn encode_idx_images(pixels: &[u8], n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Write a dataset as an IDX pair under the standard file names of `split`.
pub fn write_mnist_dir(dir: &Path, data: &Dataset, rows: usize, cols: usize) -> Result<()> {
    if rows * cols != data.dim() {
        return Err(SpideError::Contract(format!("{rows}x{cols} does not match image size {}", data.dim())));
    }
    fs::create_dir_all(dir)?;
    let (img, lbl) = data.split.file_names();
    fs::File::create(dir.join(img))?.write_all(&encode_idx_images(data.raw_pixels(), data.len(), rows, cols))?;
    fs::File::create(dir.join(lbl))?.write_all(&encode_idx_labels(data.labels()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let pixels = vec![0u8, 255, 128, 7, 0, 0, 0, 0];
        let bytes = encode_idx_images(&pixels, 2, 2, 2);
        let (n, r, c, p) = parse_idx_images(&bytes).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(p, &pixels[..]);
        let lb = encode_idx_labels(&[3, 9]);
        assert_eq!(parse_idx_labels(&lb).unwrap(), &[3, 9]);
    }

    #[test]
    fn zero_image_is_zero_vector() {
        let d = Dataset::new(vec![0; 4], vec![1], 4, 10, Split::Test).unwrap();
        assert!(d.image(0).iter().all(|&v| v == 0.0));
        let d = Dataset::new(vec![255; 4], vec![1], 4, 10, Split::Test).unwrap();
        assert!(d.image(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bad_magic_names_offset() {
        let mut bytes = encode_idx_images(&[0; 4], 1, 2, 2);
        bytes[..4].copy_from_slice(&0xDEAD_BEEFu32.to_be_bytes());
        let err = parse_idx_images(&bytes).unwrap_err();
        match err {
            SpideError::Parse { offset, message } => {
                assert_eq!(offset, 0);
                assert!(message.contains("DEADBEEF"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode_idx_images(&[0; 8], 2, 2, 2);
        assert!(matches!(parse_idx_images(&bytes[..20]), Err(SpideError::Parse { .. })));
        assert!(matches!(parse_idx_images(&bytes[..10]), Err(SpideError::Parse { .. })));
        let lb = encode_idx_labels(&[1, 2, 3]);
        assert!(matches!(parse_idx_labels(&lb[..9]), Err(SpideError::Parse { .. })));
    }

    #[test]
    fn count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("i"), encode_idx_images(&[0; 8], 2, 2, 2)).unwrap();
        fs::write(dir.path().join("l"), encode_idx_labels(&[1, 2, 3])).unwrap();
        let err = load_mnist_idx(&dir.path().join("i"), &dir.path().join("l"), 10, Split::Train).unwrap_err();
        assert!(matches!(err, SpideError::Parse { .. }));
    }

    #[test]
    fn label_range_is_checked() {
        assert!(Dataset::new(vec![0; 2], vec![10], 2, 10, Split::Train).is_err());
    }
}
