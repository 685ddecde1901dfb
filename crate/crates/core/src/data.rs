//! Datasets: IDX ingestion, pixel normalization, synthetic blobs, subsets.
//!
//! All images leaving this module live on the `[-1, 1]` scale.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw images from an IDX3 file, row-major `count × rows × cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize, context: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::Truncated {
            context: format!("{context} header"),
            expected: offset + 4,
            actual: bytes.len(),
        }),
    }
}

fn check_body(bytes: &[u8], header: usize, body: usize, context: &str) -> Result<()> {
    let expected = header.checked_add(body).ok_or_else(|| Error::Format {
        context: context.into(),
        reason: "declared size overflows".into(),
    })?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            context: context.into(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            context: context.into(),
            reason: format!("{} trailing bytes", bytes.len() - expected),
        });
    }
    Ok(())
}

/// Parses an IDX3 unsigned-byte image file held in memory.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let ctx = "IDX image file";
    let magic = read_u32(bytes, 0, ctx)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            context: ctx.into(),
            reason: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, ctx)? as usize;
    let rows = read_u32(bytes, 8, ctx)? as usize;
    let cols = read_u32(bytes, 12, ctx)? as usize;
    let body = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format {
            context: ctx.into(),
            reason: "declared size overflows".into(),
        })?;
    check_body(bytes, 16, body, ctx)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

/// Parses an IDX1 unsigned-byte label file held in memory.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let ctx = "IDX label file";
    let magic = read_u32(bytes, 0, ctx)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            context: ctx.into(),
            reason: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, ctx)? as usize;
    check_body(bytes, 8, count, ctx)?;
    Ok(bytes[8..].to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    parse_idx_images(&read_file(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read_file(path.as_ref())?)
}

/// Maps bytes `0..=255` onto `[-1, 1]` via `v / 127.5 − 1`, evaluated as
/// `(v − 127.5) / 127.5` so that [`denormalize_pixel`] inverts it exactly.
pub fn normalize_pixels(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&v| (f64::from(v) - 127.5) / 127.5).collect()
}

/// Inverse of [`normalize_pixels`] for a single value.
pub fn denormalize_pixel(v: f64) -> f64 {
    v * 127.5 + 127.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    /// `images` is `N×C×H×W` with values in `[-1, 1]`; labels must be below
    /// `class_count`.
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::dim(format!(
                "dataset images must be N×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if class_count < 2 {
            return Err(Error::contract("a dataset needs at least two classes"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if let Some(bad) = images.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    /// Single-channel dataset from parsed IDX image and label files.
    pub fn from_idx(images: &IdxImages, labels: &[u8], class_count: usize) -> Result<Self> {
        if images.count != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        let tensor = Tensor::new(
            vec![images.count, 1, images.rows, images.cols],
            normalize_pixels(&images.pixels),
        )?;
        Self::new(
            tensor,
            labels.iter().map(|&l| usize::from(l)).collect(),
            class_count,
        )
    }

    pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, class_count: usize) -> Result<Self> {
        Self::from_idx(&load_idx_images(images)?, &load_idx_labels(labels)?, class_count)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// Contiguous batch `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.slice_rows(start, end)?;
        Ok((x, self.labels[start..end].to_vec()))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn take(&self, indices: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Ok(Self {
            images,
            labels,
            class_count: self.class_count,
        })
    }

    /// Uniform sample of `n` items without replacement.
    pub fn subset<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Self> {
        if n > self.len() {
            return Err(Error::contract(format!(
                "subset of {n} from a dataset of {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        self.take(&order[..n])
    }

    /// Disjoint uniform train/test samples of the requested sizes.
    pub fn split<R: Rng + ?Sized>(&self, n_train: usize, n_test: usize, rng: &mut R) -> Result<(Self, Self)> {
        if n_train + n_test > self.len() {
            return Err(Error::contract(format!(
                "split of {n_train}+{n_test} from a dataset of {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        Ok((
            self.take(&order[..n_train])?,
            self.take(&order[n_train..n_train + n_test])?,
        ))
    }
}

/// Seed for cluster centers; independent of the sampling seed so that
/// every draw of a given shape shares the same centers.
const BLOB_CENTER_SEED: u64 = 0xB10B_5EED;

/// Gaussian clusters around fixed centers in `[-0.7, 0.7]^dim`, clipped to
/// `[-1, 1]`. Images have shape `N×1×1×dim`.
pub fn synthetic_blobs(
    seed: u64,
    n_per_class: usize,
    class_count: usize,
    dim: usize,
    spread: f64,
) -> Result<Dataset> {
    if class_count < 2 {
        return Err(Error::contract("synthetic_blobs needs at least two classes"));
    }
    if dim == 0 {
        return Err(Error::contract("synthetic_blobs needs dim ≥ 1"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::contract(format!(
            "spread must be finite and ≥ 0, got {spread}"
        )));
    }
    let mut center_rng = ChaCha8Rng::seed_from_u64(BLOB_CENTER_SEED);
    let centers: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..dim).map(|_| center_rng.random_range(-0.7..0.7)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread).map_err(|e| Error::contract(e.to_string()))?;
    let n = n_per_class * class_count;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % class_count;
        for &c in &centers[class] {
            let v = if spread > 0.0 {
                c + noise.sample(&mut rng)
            } else {
                c
            };
            data.push(v.clamp(-1.0, 1.0));
        }
        labels.push(class);
    }
    Dataset::new(Tensor::new(vec![n, 1, 1, dim], data)?, labels, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(pixels);
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn golden_image_fixture() {
        let pixels = [0, 255, 17, 128, 1, 2, 3, 4];
        let parsed = parse_idx_images(&idx_images(2, 2, 2, &pixels)).unwrap();
        assert_eq!((parsed.count, parsed.rows, parsed.cols), (2, 2, 2));
        assert_eq!(parsed.pixels, pixels);
    }

    #[test]
    fn label_magic_rejected_by_image_loader() {
        let mut bytes = idx_images(1, 1, 1, &[0]);
        bytes[3] = 0x01;
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(err.to_string().contains("0x00000801"), "{err}");
    }

    #[test]
    fn golden_labels_and_truncation() {
        assert_eq!(parse_idx_labels(&idx_labels(&[7, 2, 1])).unwrap(), vec![7, 2, 1]);
        let mut short = idx_labels(&[7, 2, 1]);
        short.pop();
        match parse_idx_labels(&short) {
            Err(Error::Truncated { expected, actual, .. }) => assert_eq!((expected, actual), (11, 10)),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_pixels(&[0, 255]), vec![-1.0, 1.0]);
        let mid = normalize_pixels(&[128])[0];
        assert!((mid - 0.003_921_568_627_450_98).abs() < 1e-15);
        for v in 0..=255u8 {
            assert_eq!(denormalize_pixel(normalize_pixels(&[v])[0]), f64::from(v));
        }
    }

    #[test]
    fn dataset_rejects_bad_labels_and_ranges() {
        let images = Tensor::zeros(&[2, 1, 1, 2]);
        assert!(Dataset::new(images.clone(), vec![0, 3], 3).is_err());
        let bad = Tensor::full(&[1, 1, 1, 1], 1.5);
        assert!(Dataset::new(bad, vec![0], 2).is_err());
        assert!(Dataset::new(images, vec![0, 1], 2).is_ok());
    }

    #[test]
    fn blobs_are_deterministic_and_centered() {
        let a = synthetic_blobs(4, 10, 3, 5, 0.1).unwrap();
        assert_eq!(a, synthetic_blobs(4, 10, 3, 5, 0.1).unwrap());
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
        let exact = synthetic_blobs(9, 4, 2, 3, 0.0).unwrap();
        let first = exact.images().slice_rows(0, 1).unwrap();
        let third = exact.images().slice_rows(2, 3).unwrap();
        assert_eq!(first.data(), third.data());
    }

    #[test]
    fn subset_contract() {
        let data = synthetic_blobs(1, 5, 2, 2, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(data.subset(11, &mut rng).is_err());
        assert!(data.subset(0, &mut rng).unwrap().is_empty());
        let full = data.subset(10, &mut rng).unwrap();
        let mut got = full.labels().to_vec();
        got.sort();
        let mut want = data.labels().to_vec();
        want.sort();
        assert_eq!(got, want);
        let a = data.subset(4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = data.subset(4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }
}
