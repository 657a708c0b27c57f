//! Dataset ingestion: IDX parsing, class splits, batching and a synthetic
//! blob generator used as the CI dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unsupported IDX magic number 0x{0:08x}")]
    UnsupportedMagic(u32),
    #[error("truncated IDX payload: header declares {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("empty split: no samples left for the requested classes")]
    EmptySplit,
    #[error("image file {images} holds {n_images} samples but label file {labels} holds {n_labels}")]
    CountMismatch {
        images: PathBuf,
        labels: PathBuf,
        n_images: usize,
        n_labels: usize,
    },
    #[error("expected an IDX {expected} file at {path}")]
    WrongKind { path: PathBuf, expected: &'static str },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Decoded contents of one IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxData {
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::TruncatedPayload {
            expected: offset + 4,
            actual: bytes.len(),
        })
}

/// Parses an IDX image (`0x803`) or label (`0x801`) file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, DataError> {
    let magic = read_be_u32(bytes, 0)?;
    match magic {
        IDX_LABELS_MAGIC => {
            let count = read_be_u32(bytes, 4)? as usize;
            let payload = &bytes[8..];
            if payload.len() != count {
                return Err(DataError::TruncatedPayload {
                    expected: count,
                    actual: payload.len(),
                });
            }
            Ok(IdxData::Labels(payload.to_vec()))
        }
        IDX_IMAGES_MAGIC => {
            let count = read_be_u32(bytes, 4)? as usize;
            let rows = read_be_u32(bytes, 8)? as usize;
            let cols = read_be_u32(bytes, 12)? as usize;
            let payload = &bytes[16..];
            let expected = count * rows * cols;
            if payload.len() != expected {
                return Err(DataError::TruncatedPayload {
                    expected,
                    actual: payload.len(),
                });
            }
            Ok(IdxData::Images {
                count,
                rows,
                cols,
                pixels: payload.to_vec(),
            })
        }
        other => Err(DataError::UnsupportedMagic(other)),
    }
}

/// Serializes back into the IDX byte layout accepted by [`parse_idx`].
pub fn encode_idx(data: &IdxData) -> Vec<u8> {
    match data {
        IdxData::Labels(labels) => {
            let mut out = Vec::with_capacity(8 + labels.len());
            out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
            out
        }
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => {
            let mut out = Vec::with_capacity(16 + pixels.len());
            out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
            for dim in [*count, *rows, *cols] {
                out.extend_from_slice(&(dim as u32).to_be_bytes());
            }
            out.extend_from_slice(pixels);
            out
        }
    }
}

/// Scales byte intensities into the unit interval.
pub fn normalize(raw: &[u8]) -> Vec<f32> {
    raw.iter().map(|&v| v as f32 / 255.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    MainTrain,
    MainTest,
    Anomaly,
}

/// Single-channel images with dense integer labels.
///
/// Images are stored contiguously, row-major, one `rows * cols` block per
/// sample. `class_map` maps the label a sample carried when it was loaded to
/// its current dense label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    rows: usize,
    cols: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
    class_map: BTreeMap<usize, usize>,
    role: Role,
}

impl LabeledDataset {
    /// Builds a dataset whose class map is the identity over the observed labels.
    pub fn new(
        rows: usize,
        cols: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
        role: Role,
    ) -> Self {
        assert_eq!(
            images.len(),
            labels.len() * rows * cols,
            "image buffer does not match label count"
        );
        let class_map = labels.iter().map(|&l| (l, l)).collect();
        Self {
            rows,
            cols,
            images,
            labels,
            class_map,
            role,
        }
    }

    pub fn from_idx(images: &IdxData, labels: &IdxData, role: Role) -> Result<Self, DataError> {
        let (count, rows, cols, pixels) = match images {
            IdxData::Images {
                count,
                rows,
                cols,
                pixels,
            } => (*count, *rows, *cols, pixels),
            IdxData::Labels(_) => {
                return Err(DataError::WrongKind {
                    path: PathBuf::new(),
                    expected: "image",
                })
            }
        };
        let labels = match labels {
            IdxData::Labels(l) => l,
            IdxData::Images { .. } => {
                return Err(DataError::WrongKind {
                    path: PathBuf::new(),
                    expected: "label",
                })
            }
        };
        if labels.len() != count {
            return Err(DataError::CountMismatch {
                images: PathBuf::new(),
                labels: PathBuf::new(),
                n_images: count,
                n_labels: labels.len(),
            });
        }
        Ok(Self::new(
            rows,
            cols,
            normalize(pixels),
            labels.iter().map(|&l| l as usize).collect(),
            role,
        ))
    }

    /// Loads an (images, labels) IDX file pair from disk.
    pub fn load_idx_pair(images: &Path, labels: &Path, role: Role) -> Result<Self, DataError> {
        let read = |path: &Path| {
            fs::read(path).map_err(|source| DataError::Io {
                path: path.to_path_buf(),
                source,
            })
        };
        let image_data = parse_idx(&read(images)?)?;
        let label_data = parse_idx(&read(labels)?)?;
        Self::from_idx(&image_data, &label_data, role).map_err(|e| match e {
            DataError::CountMismatch {
                n_images, n_labels, ..
            } => DataError::CountMismatch {
                images: images.to_path_buf(),
                labels: labels.to_path_buf(),
                n_images,
                n_labels,
            },
            DataError::WrongKind { expected, .. } => DataError::WrongKind {
                path: if expected == "image" {
                    images.to_path_buf()
                } else {
                    labels.to_path_buf()
                },
                expected,
            },
            other => other,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_map(&self) -> &BTreeMap<usize, usize> {
        &self.class_map
    }

    /// Dense label → load-time label.
    pub fn inverse_class_map(&self) -> BTreeMap<usize, usize> {
        self.class_map.iter().map(|(&o, &d)| (d, o)).collect()
    }

    /// Number of dense classes (one past the largest dense label).
    pub fn n_classes(&self) -> usize {
        self.class_map.values().max().map_or(0, |m| m + 1)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// First `count` samples.
    pub fn take(&self, count: usize) -> Self {
        let count = count.min(self.len());
        let p = self.pixels_per_image();
        Self {
            rows: self.rows,
            cols: self.cols,
            images: self.images[..count * p].to_vec(),
            labels: self.labels[..count].to_vec(),
            class_map: self.class_map.clone(),
            role: self.role,
        }
    }
}

/// Keeps the samples whose current label is in `keep`.
///
/// With `relabel`, kept labels are remapped to `0..keep.len()` in ascending
/// order of the original label.
pub fn split_classes(
    ds: &LabeledDataset,
    keep: &[usize],
    relabel: bool,
) -> Result<LabeledDataset, DataError> {
    let mut keep: Vec<usize> = keep.to_vec();
    keep.sort_unstable();
    keep.dedup();
    if keep.is_empty() {
        return Err(DataError::EmptySplit);
    }
    let remap: BTreeMap<usize, usize> = keep
        .iter()
        .enumerate()
        .map(|(dense, &orig)| (orig, if relabel { dense } else { orig }))
        .collect();

    let p = ds.pixels_per_image();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (i, &label) in ds.labels.iter().enumerate() {
        if let Some(&new) = remap.get(&label) {
            images.extend_from_slice(&ds.images[i * p..(i + 1) * p]);
            labels.push(new);
        }
    }
    if labels.is_empty() {
        return Err(DataError::EmptySplit);
    }
    let class_map = ds
        .class_map
        .iter()
        .filter_map(|(&orig, cur)| remap.get(cur).map(|&new| (orig, new)))
        .collect();
    Ok(LabeledDataset {
        rows: ds.rows,
        cols: ds.cols,
        images,
        labels,
        class_map,
        role: ds.role,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl MiniBatch {
    pub fn gather(ds: &LabeledDataset, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * ds.pixels_per_image());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(ds.image(i));
            labels.push(ds.labels[i]);
        }
        Self {
            rows: ds.rows,
            cols: ds.cols,
            images,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Sample order for one epoch, identity when `shuffle` is off.
pub fn epoch_order(len: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order
}

/// Lazily materialized mini-batches over one epoch.
pub struct Batches<'a> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = MiniBatch;

    fn next(&mut self) -> Option<MiniBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = MiniBatch::gather(self.ds, &self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Partitions a (seeded) permutation of `ds` into batches of at most `batch_size`.
pub fn make_batches(ds: &LabeledDataset, batch_size: usize, seed: u64, shuffle: bool) -> Batches<'_> {
    assert!(batch_size >= 1, "batch size must be positive");
    Batches {
        ds,
        order: epoch_order(ds.len(), seed, shuffle),
        batch_size,
        cursor: 0,
    }
}

/// Synthetic dataset: one bright Gaussian blob per class on a `side`×`side`
/// grid plus pixel noise.
///
/// Blob centers sit on a circle of radius `separation` (pixels) around the
/// grid center, one angle per class. Samples are interleaved by class.
pub fn synth_blobs(
    n_classes: usize,
    per_class: usize,
    side: usize,
    separation: f64,
    seed: u64,
) -> LabeledDataset {
    assert!(n_classes >= 2, "need at least two classes");
    assert!(per_class >= 1, "need at least one sample per class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.5).unwrap();
    let noise = Normal::new(0.0, 0.05).unwrap();
    let sigma = (side as f64 / 10.0).max(1.0);
    let mid = (side as f64 - 1.0) / 2.0;

    let mut images = Vec::with_capacity(n_classes * per_class * side * side);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for _ in 0..per_class {
        for class in 0..n_classes {
            let angle = std::f64::consts::TAU * class as f64 / n_classes as f64;
            let cy = mid + separation * angle.sin() + jitter.sample(&mut rng);
            let cx = mid + separation * angle.cos() + jitter.sample(&mut rng);
            let amplitude = 0.8 + 0.2 * rng.random::<f64>();
            for r in 0..side {
                for c in 0..side {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    let v = amplitude * (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                    images.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(side, side, images, labels, Role::MainTrain)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label_file(labels: &[u8]) -> Vec<u8> {
        encode_idx(&IdxData::Labels(labels.to_vec()))
    }

    #[test]
    fn parses_label_file() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 1];
        assert_eq!(parse_idx(&bytes).unwrap(), IdxData::Labels(vec![7, 2, 1]));
        assert_eq!(label_file(&[7, 2, 1]), bytes.to_vec());
    }

    #[test]
    fn parses_image_file() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28];
        bytes.extend((0..1568).map(|i| (i % 256) as u8));
        match parse_idx(&bytes).unwrap() {
            IdxData::Images {
                count,
                rows,
                cols,
                pixels,
            } => {
                assert_eq!((count, rows, cols), (2, 28, 28));
                assert_eq!(pixels.len(), 1568);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_magic() {
        let bytes = [0, 0, 8, 2, 0, 0, 0, 0];
        assert!(matches!(
            parse_idx(&bytes),
            Err(DataError::UnsupportedMagic(0x802))
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 7, 2];
        assert!(matches!(
            parse_idx(&bytes),
            Err(DataError::TruncatedPayload {
                expected: 3,
                actual: 2
            })
        ));
        assert!(matches!(
            parse_idx(&[0, 0]),
            Err(DataError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn normalize_scales_by_255() {
        let v = normalize(&[0, 255, 51]);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - 0.2).abs() < 1e-7);
    }

    fn tiny(labels: &[usize]) -> LabeledDataset {
        let images = labels.iter().map(|&l| l as f32).collect();
        LabeledDataset::new(1, 1, images, labels.to_vec(), Role::MainTrain)
    }

    #[test]
    fn split_keeps_requested_class() {
        let ds = tiny(&[0, 1, 2, 0]);
        let out = split_classes(&ds, &[0], true).unwrap();
        assert_eq!(out.labels(), &[0, 0]);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn split_relabels_dense_ascending() {
        let ds = tiny(&[1, 5, 9, 0, 3]);
        let keep: Vec<usize> = (1..=9).collect();
        let out = split_classes(&ds, &keep, true).unwrap();
        assert_eq!(out.labels(), &[0, 4, 8, 2]);
        assert_eq!(out.class_map().get(&5), Some(&4));
        assert_eq!(out.class_map().get(&0), None);
        // images follow their samples
        assert_eq!(out.images(), &[1.0, 5.0, 9.0, 3.0]);
    }

    #[test]
    fn split_rejects_empty() {
        let ds = tiny(&[0, 1]);
        assert!(matches!(split_classes(&ds, &[], true), Err(DataError::EmptySplit)));
        assert!(matches!(split_classes(&ds, &[7], true), Err(DataError::EmptySplit)));
    }

    #[test]
    fn split_composes_class_maps() {
        let ds = tiny(&[1, 2, 3, 4]);
        let first = split_classes(&ds, &[2, 3, 4], true).unwrap();
        let second = split_classes(&first, &[1, 2], true).unwrap();
        // original 3 → 1 → 0, original 4 → 2 → 1
        assert_eq!(second.class_map().get(&3), Some(&0));
        assert_eq!(second.class_map().get(&4), Some(&1));
        assert_eq!(second.labels(), &[0, 1]);
    }

    #[test]
    fn batch_sizes_cover_dataset() {
        let ds = tiny(&[0; 10]);
        let sizes: Vec<usize> = make_batches(&ds, 4, 0, true).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn batches_deterministic_per_seed() {
        let ds = tiny(&(0..20).map(|i| i % 3).collect::<Vec<_>>());
        let a: Vec<_> = make_batches(&ds, 6, 9, true).collect();
        let b: Vec<_> = make_batches(&ds, 6, 9, true).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn unshuffled_batches_keep_order() {
        let images: Vec<f32> = (0..7).map(|i| i as f32).collect();
        let ds = LabeledDataset::new(1, 1, images.clone(), vec![0; 7], Role::MainTrain);
        let flat: Vec<f32> = make_batches(&ds, 3, 123, false).flat_map(|b| b.images).collect();
        assert_eq!(flat, images);
    }

    #[test]
    fn synth_is_balanced_and_deterministic() {
        let ds = synth_blobs(2, 5, 12, 3.0, 4);
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels().iter().filter(|&&l| l == 0).count(), 5);
        assert_eq!(ds, synth_blobs(2, 5, 12, 3.0, 4));
        assert!(ds.images().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
