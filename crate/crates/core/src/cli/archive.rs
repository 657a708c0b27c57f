//! Binary model archive.
//!
//! Layout: `b"OODN"`, u32 LE format version, u64 LE header length, JSON
//! header, then the parameter blobs (little-endian, in header order). The
//! header lists every blob with its dtype and element count, and flags which
//! optional parts are present.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::centerloss::Centers;
use crate::detector::{ClassStats, DetectorModel};
use crate::head::{HeadConfig, OodHead};
use crate::nn::{ArchSpec, Backbone, EpochRecord, Tensor, TrainConfig};

pub const MAGIC: [u8; 4] = *b"OODN";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("not a model archive (magic {found:?})")]
    BadMagic { found: [u8; 4] },
    #[error("archive format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt archive: {0}")]
    CorruptLength(String),
    #[error("archive header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("archive contents: {0}")]
    Invalid(String),
    #[error("archive i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: Dtype,
    pub len: usize,
}

/// How the stored parameters were produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub train: Option<TrainConfig>,
    pub head: Option<HeadConfig>,
    pub epochs: Vec<EpochRecord>,
    pub tool_version: String,
}

/// Metadata stored in the JSON header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub arch: ArchSpec,
    pub classes: usize,
    pub dim: usize,
    pub lambda: f64,
    pub percentile: f64,
    pub tau: f64,
    pub seed: u64,
    /// Original dataset label → dense class index.
    pub class_map: BTreeMap<usize, usize>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: ArchiveMeta,
    has_centers: bool,
    has_detector: bool,
    has_thresholds: bool,
    has_head: bool,
    center_alpha: Option<f64>,
    center_lambda: Option<f64>,
    detector_counts: Vec<usize>,
    blobs: Vec<BlobEntry>,
}

/// Everything a trained model consists of. Only the backbone is mandatory.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub meta: ArchiveMeta,
    pub backbone: Backbone<f32>,
    pub centers: Option<Centers<f32>>,
    pub detector: Option<DetectorModel>,
    pub head: Option<OodHead<f32>>,
}

enum Blob {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

fn push_f32(blobs: &mut Vec<(BlobEntry, Blob)>, name: String, values: &[f32]) {
    blobs.push((
        BlobEntry {
            name,
            dtype: Dtype::F32,
            len: values.len(),
        },
        Blob::F32(values.to_vec()),
    ));
}

fn push_f64(blobs: &mut Vec<(BlobEntry, Blob)>, name: String, values: &[f64]) {
    blobs.push((
        BlobEntry {
            name,
            dtype: Dtype::F64,
            len: values.len(),
        },
        Blob::F64(values.to_vec()),
    ));
}

/// Serializes a model into archive bytes.
pub fn to_bytes(model: &ModelState) -> Vec<u8> {
    let mut blobs = Vec::new();
    for (i, t) in model.backbone.params().iter().enumerate() {
        push_f32(&mut blobs, format!("backbone.{i}"), t.values());
    }
    if let Some(c) = &model.centers {
        push_f32(&mut blobs, "centers".into(), c.values());
    }
    if let Some(det) = &model.detector {
        for (y, s) in det.stats.iter().enumerate() {
            push_f64(&mut blobs, format!("detector.{y}.mean"), &s.mean);
            push_f64(&mut blobs, format!("detector.{y}.covariance"), &s.covariance);
        }
        let ridges: Vec<f64> = det.stats.iter().map(|s| s.ridge).collect();
        push_f64(&mut blobs, "detector.ridge".into(), &ridges);
        push_f64(&mut blobs, "detector.settings".into(), &[det.percentile, det.ridge]);
        if let Some(t) = &det.thresholds {
            push_f64(&mut blobs, "detector.thresholds".into(), t);
        }
    }
    if let Some(h) = &model.head {
        for (i, t) in h.params().iter().enumerate() {
            push_f32(&mut blobs, format!("head.{i}"), t.values());
        }
        push_f64(&mut blobs, "head.tau".into(), &[h.tau]);
    }

    let header = Header {
        meta: model.meta.clone(),
        has_centers: model.centers.is_some(),
        has_detector: model.detector.is_some(),
        has_thresholds: model.detector.as_ref().is_some_and(|d| d.thresholds.is_some()),
        has_head: model.head.is_some(),
        center_alpha: model.centers.as_ref().map(|c| c.alpha),
        center_lambda: model.centers.as_ref().map(|c| c.lambda),
        detector_counts: model
            .detector
            .as_ref()
            .map(|d| d.stats.iter().map(|s| s.count).collect())
            .unwrap_or_default(),
        blobs: blobs.iter().map(|(e, _)| e.clone()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, blob) in &blobs {
        match blob {
            Blob::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Blob::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct BlobReader<'a> {
    entries: std::slice::Iter<'a, BlobEntry>,
    payload: &'a [u8],
}

impl BlobReader<'_> {
    fn entry(&mut self, name: &str, dtype: Dtype) -> Result<(usize, &[u8]), ArchiveError> {
        let e = self
            .entries
            .next()
            .ok_or_else(|| ArchiveError::Invalid(format!("missing blob {name}")))?;
        if e.name != name || e.dtype != dtype {
            return Err(ArchiveError::Invalid(format!(
                "expected blob {name} ({dtype:?}), found {} ({:?})",
                e.name, e.dtype
            )));
        }
        let bytes = e.len * dtype.size();
        let (head, rest) = self.payload.split_at(bytes);
        self.payload = rest;
        Ok((e.len, head))
    }

    fn f32(&mut self, name: &str, expected: Option<usize>) -> Result<Vec<f32>, ArchiveError> {
        let (len, bytes) = self.entry(name, Dtype::F32)?;
        check_len(name, len, expected)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f64(&mut self, name: &str, expected: Option<usize>) -> Result<Vec<f64>, ArchiveError> {
        let (len, bytes) = self.entry(name, Dtype::F64)?;
        check_len(name, len, expected)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn check_len(name: &str, len: usize, expected: Option<usize>) -> Result<(), ArchiveError> {
    match expected {
        Some(e) if e != len => Err(ArchiveError::CorruptLength(format!(
            "blob {name} declares {len} values, the architecture needs {e}"
        ))),
        _ => Ok(()),
    }
}

/// Parses archive bytes, checking magic, version and every declared length.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelState, ArchiveError> {
    if bytes.len() < 4 {
        return Err(ArchiveError::CorruptLength(format!("{} bytes is too short", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic { found: magic });
    }
    if bytes.len() < PREAMBLE {
        return Err(ArchiveError::CorruptLength(format!("{} bytes is too short", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ArchiveError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| ArchiveError::CorruptLength(format!("header length {header_len} exceeds the file")))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])?;
    let payload = &bytes[header_end..];
    let declared: usize = header.blobs.iter().map(|b| b.len * b.dtype.size()).sum();
    if declared != payload.len() {
        return Err(ArchiveError::CorruptLength(format!(
            "header declares {declared} payload bytes, file has {}",
            payload.len()
        )));
    }

    let meta = header.meta.clone();
    let mut r = BlobReader {
        entries: header.blobs.iter(),
        payload,
    };
    let invalid = |e: &dyn std::fmt::Display| ArchiveError::Invalid(e.to_string());

    let mut backbone = Backbone::<f32>::new(&meta.arch, 0).map_err(|e| invalid(&e))?;
    for (i, slot) in backbone.params_mut().into_iter().enumerate() {
        let values = r.f32(&format!("backbone.{i}"), Some(slot.len()))?;
        slot.values_mut().copy_from_slice(&values);
    }
    let (classes, dim) = (backbone.n_classes(), backbone.feature_dim());

    let centers = if header.has_centers {
        let values = r.f32("centers", Some(classes * dim))?;
        Some(
            Centers::from_values(classes, dim, values, header.center_alpha.unwrap_or(0.5), header.center_lambda.unwrap_or(meta.lambda))
                .map_err(|e| invalid(&e))?,
        )
    } else {
        None
    };

    let detector = if header.has_detector {
        let mut parts = Vec::with_capacity(classes);
        for y in 0..classes {
            let mean = r.f64(&format!("detector.{y}.mean"), Some(dim))?;
            let cov = r.f64(&format!("detector.{y}.covariance"), Some(dim * dim))?;
            parts.push((mean, cov));
        }
        let ridges = r.f64("detector.ridge", Some(classes))?;
        let settings = r.f64("detector.settings", Some(2))?;
        if header.detector_counts.len() != classes {
            return Err(ArchiveError::CorruptLength("detector count list does not match classes".into()));
        }
        let stats = parts
            .into_iter()
            .zip(&ridges)
            .zip(&header.detector_counts)
            .enumerate()
            .map(|(y, (((mean, cov), &ridge), &count))| ClassStats::from_parts(y, mean, cov, ridge, count))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| invalid(&e))?;
        let thresholds = if header.has_thresholds {
            Some(r.f64("detector.thresholds", Some(classes))?)
        } else {
            None
        };
        Some(DetectorModel {
            stats,
            thresholds,
            percentile: settings[0],
            ridge: settings[1],
        })
    } else {
        None
    };

    let head = if header.has_head {
        let shapes: Vec<usize> = OodHead::<f32>::zeros(dim).params().iter().map(|t| t.len()).collect();
        let mut tensors = Vec::with_capacity(shapes.len());
        let template = OodHead::<f32>::zeros(dim);
        for (i, (len, t)) in shapes.iter().zip(template.params()).enumerate() {
            let values = r.f32(&format!("head.{i}"), Some(*len))?;
            tensors.push(Tensor::new(t.shape().to_vec(), values).map_err(|e| invalid(&e))?);
        }
        let tau = r.f64("head.tau", Some(1))?[0];
        Some(OodHead::from_params(dim, tensors, tau).map_err(|e| invalid(&e))?)
    } else {
        None
    };
    if r.entries.next().is_some() {
        return Err(ArchiveError::Invalid("unexpected trailing blobs".into()));
    }

    Ok(ModelState {
        meta,
        backbone,
        centers,
        detector,
        head,
    })
}

pub fn save_model(path: &Path, model: &ModelState) -> Result<(), ArchiveError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ArchiveError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, to_bytes(model)).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<ModelState, ArchiveError> {
    let bytes = fs::read(path).map_err(|source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
