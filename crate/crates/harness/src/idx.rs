//! IDX (MNIST-style) image/label files.
//!
//! Both files start with a big-endian magic number (`0x00000803` for
//! unsigned-byte 3-D image tensors, `0x00000801` for 1-D label vectors),
//! then one big-endian `u32` per dimension, then raw bytes.

use std::path::Path;

use exitsteal_core::data::LabeledSet;
use exitsteal_core::numerics::Tensor;
use exitsteal_core::Error;

use crate::error::{HarnessError, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_error(offset: usize, message: impl Into<String>) -> HarnessError {
    HarnessError::Core(Error::Format {
        offset,
        message: message.into(),
    })
}

fn header(bytes: &[u8], magic: u32, what: &str) -> Result<Vec<usize>> {
    let rank = (magic & 0xff) as usize;
    let word = |i: usize| -> Result<u32> {
        let at = 4 * i;
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| {
                format_error(
                    bytes.len(),
                    format!("{what}: truncated header, expected {} bytes, got {}", 4 * (rank + 1), bytes.len()),
                )
            })
    };
    let found = word(0)?;
    if found != magic {
        return Err(format_error(
            0,
            format!("{what}: bad magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let dims = (1..=rank).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let body = 4 * (rank + 1);
    let expected = body + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(format_error(
            bytes.len().min(expected),
            format!("{what}: expected {expected} bytes for dims {dims:?}, got {}", bytes.len()),
        ));
    }
    Ok(dims)
}

/// Decodes an image file into `[n, channels, rows, cols]` scaled to `[0, 1]`.
///
/// With `duplicate_channels`, each single-channel image is copied into three
/// identical channels.
pub fn parse_idx_images(bytes: &[u8], duplicate_channels: bool) -> Result<Tensor> {
    let dims = header(bytes, IMAGES_MAGIC, "images")?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let pixels = &bytes[16..];
    let channels = if duplicate_channels { 3 } else { 1 };
    let mut data = Vec::with_capacity(n * channels * h * w);
    for img in pixels.chunks(h * w).take(n) {
        for _ in 0..channels {
            data.extend(img.iter().map(|&p| f64::from(p) / 255.0));
        }
    }
    Ok(Tensor::new(vec![n, channels, h, w], data)?)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    header(bytes, LABELS_MAGIC, "labels")?;
    Ok(bytes[8..].iter().map(|&b| usize::from(b)).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

pub fn load_idx_images(path: &Path, duplicate_channels: bool) -> Result<Tensor> {
    parse_idx_images(&read(path)?, duplicate_channels)
}

/// Loads a matching image/label file pair.
pub fn load_idx_dataset(images: &Path, labels: &Path, duplicate_channels: bool) -> Result<LabeledSet> {
    let x = load_idx_images(images, duplicate_channels)?;
    let y = parse_idx_labels(&read(labels)?)?;
    if x.rows() != y.len() {
        return Err(HarnessError::Core(Error::Contract(format!(
            "{} has {} images but {} has {} labels",
            images.display(),
            x.rows(),
            labels.display(),
            y.len()
        ))));
    }
    Ok(LabeledSet::new(x, y)?)
}

/// Encodes images (`[n, rows, cols]` bytes) as an IDX file; used to build fixtures.
pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_echo_and_scaling() {
        let bytes = encode_idx_images(2, 2, 3, &[0, 255, 51, 0, 0, 0, 1, 2, 3, 4, 5, 6]);
        let t = parse_idx_images(&bytes, false).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 3]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[2], 0.2);
    }

    #[test]
    fn duplicated_channels_are_identical() {
        let bytes = encode_idx_images(1, 2, 2, &[9, 8, 7, 6]);
        let t = parse_idx_images(&bytes, true).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        let d = t.data();
        assert_eq!(&d[0..4], &d[4..8]);
        assert_eq!(&d[0..4], &d[8..12]);
    }

    #[test]
    fn truncation_names_lengths() {
        let bytes = encode_idx_images(2, 2, 2, &[0; 8]);
        let err = parse_idx_images(&bytes[..20], false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 24 bytes") && msg.contains("got 20"), "{msg}");
        let err = parse_idx_images(&bytes[..6], false).unwrap_err();
        assert!(err.to_string().contains("truncated header"));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_idx_labels(&[1, 2]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![1, 2]);
        bytes[3] = 0x03;
        assert!(matches!(
            parse_idx_labels(&bytes),
            Err(HarnessError::Core(Error::Format { offset: 0, .. }))
        ));
    }
}
