//! Binary volume and label files with JSON sidecars.
//!
//! Volume: `MOMEVOL1`, dims `D W H` as little-endian u32, then `D·W·H`
//! little-endian f32 voxels, D slowest.
//! Labels: `MOMELBL1`, dims `D W H`, class count `K` (u32 LE), then
//! `K·D·W·H` bytes in {0, 1}.
//! Sidecar (`<file>.json`): `{id, spacing_mm?, annotated?, dataset_id?}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MomeError, Result};
use crate::types::{ClassVocabulary, PartialLabelSet, Volume};

pub const VOLUME_MAGIC: &[u8; 8] = b"MOMEVOL1";
pub const LABEL_MAGIC: &[u8; 8] = b"MOMELBL1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing_mm: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| MomeError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| MomeError::io(path, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| MomeError::Metadata {
        path: path.into(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| MomeError::Metadata {
        path: path.into(),
        detail: e.to_string(),
    })
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.bytes.len() < 8 || &self.bytes[..8] != magic {
            return Err(MomeError::BadMagic {
                path: self.path.into(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        self.pos = 8;
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(MomeError::Truncated {
                path: self.path.into(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn dims(&mut self) -> Result<[usize; 3]> {
        let dims = [self.u32()?, self.u32()?, self.u32()?];
        if dims.iter().any(|&d| d == 0) {
            return Err(MomeError::DimensionMismatch {
                path: self.path.into(),
                detail: format!("header dims {dims:?} contain zero"),
            });
        }
        Ok(dims)
    }

    /// The payload must be exactly `n` bytes long.
    fn payload(&mut self, n: usize) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest > n {
            return Err(MomeError::DimensionMismatch {
                path: self.path.into(),
                detail: format!("header implies {n} payload bytes, file has {rest}"),
            });
        }
        self.take(n)
    }
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + 4 * v.len());
    buf.extend_from_slice(VOLUME_MAGIC);
    for d in v.dims() {
        put_u32(&mut buf, d);
    }
    for x in v.voxels() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    write_bytes(path, &encode_volume(v))?;
    write_json(
        &sidecar_path(path),
        &Sidecar {
            id: v.id.clone(),
            spacing_mm: Some(v.spacing_mm()),
            annotated: None,
            dataset_id: None,
        },
    )
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = read_bytes(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    r.magic(VOLUME_MAGIC)?;
    let dims = r.dims()?;
    let n: usize = dims.iter().product();
    let payload = r.payload(4 * n)?;
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let meta: Sidecar = read_json(&sidecar_path(path))?;
    let spacing = meta.spacing_mm.ok_or_else(|| MomeError::Metadata {
        path: sidecar_path(path),
        detail: "missing spacing_mm".into(),
    })?;
    Volume::new(meta.id, dims, spacing, voxels)
}

pub fn encode_labels(l: &PartialLabelSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + l.masks().len());
    buf.extend_from_slice(LABEL_MAGIC);
    for d in l.dims() {
        put_u32(&mut buf, d);
    }
    put_u32(&mut buf, l.num_classes());
    buf.extend_from_slice(l.masks());
    buf
}

pub fn save_labels(l: &PartialLabelSet, path: &Path) -> Result<()> {
    write_bytes(path, &encode_labels(l))?;
    write_json(
        &sidecar_path(path),
        &Sidecar {
            id: l.volume_id.clone(),
            spacing_mm: None,
            annotated: Some(l.annotated().to_vec()),
            dataset_id: l.dataset_id.clone(),
        },
    )
}

/// Loads and validates a label file against `vocab`. Files whose
/// unannotated classes carry mask voxels are rejected.
pub fn load_labels(path: &Path, vocab: &ClassVocabulary) -> Result<PartialLabelSet> {
    let bytes = read_bytes(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    r.magic(LABEL_MAGIC)?;
    let dims = r.dims()?;
    let k = r.u32()?;
    if k != vocab.len() {
        return Err(MomeError::ClassCount {
            expected: vocab.len(),
            found: k,
        });
    }
    let n: usize = dims.iter().product();
    let masks = r.payload(k * n)?.to_vec();
    if let Some(offset) = masks.iter().position(|&b| b > 1) {
        return Err(MomeError::NonBinary {
            path: path.into(),
            offset,
            value: masks[offset],
        });
    }
    let meta: Sidecar = read_json(&sidecar_path(path))?;
    let annotated = meta.annotated.ok_or_else(|| MomeError::Metadata {
        path: sidecar_path(path),
        detail: "missing annotated".into(),
    })?;
    if annotated.len() != k {
        return Err(MomeError::ClassCount {
            expected: k,
            found: annotated.len(),
        });
    }
    let mut labels = PartialLabelSet::new(meta.id, dims, annotated, masks)?;
    labels.dataset_id = meta.dataset_id;
    Ok(labels)
}
