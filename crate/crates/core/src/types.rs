//! Domain records shared across the pipeline. Arrays are D-major with H
//! fastest, and class-indexed arrays follow vocabulary order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MomeError, Result};

/// A scalar CT-like field with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub id: String,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(id: impl Into<String>, dims: [usize; 3], spacing_mm: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(MomeError::Shape(format!("volume dims {dims:?} must be positive")));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(MomeError::Shape(format!(
                "volume dims {dims:?} need {} voxels, got {}",
                dims.iter().product::<usize>(),
                voxels.len()
            )));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(MomeError::Shape(format!("spacing {spacing_mm:?} must be positive")));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(MomeError::Numeric(format!("voxel {i} is not finite")));
        }
        Ok(Self {
            id: id.into(),
            dims,
            spacing_mm,
            voxels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn at(&self, d: usize, w: usize, h: usize) -> f32 {
        self.voxels[crate::tensor::voxel_index(self.dims, d, w, h)]
    }
}

/// Multi-hot class masks with a per-class annotation flag.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialLabelSet {
    pub volume_id: String,
    pub dataset_id: Option<String>,
    dims: [usize; 3],
    annotated: Vec<bool>,
    masks: Vec<u8>,
}

impl PartialLabelSet {
    /// Rejects non-binary masks and nonzero masks for unannotated classes.
    pub fn new(
        volume_id: impl Into<String>,
        dims: [usize; 3],
        annotated: Vec<bool>,
        masks: Vec<u8>,
    ) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) || masks.len() != n * annotated.len() {
            return Err(MomeError::Shape(format!(
                "{} classes × {dims:?} need {} mask bytes, got {}",
                annotated.len(),
                n * annotated.len(),
                masks.len()
            )));
        }
        if let Some(i) = masks.iter().position(|&v| v > 1) {
            return Err(MomeError::InvalidLabels(format!(
                "mask value {} at offset {i} is not binary",
                masks[i]
            )));
        }
        for (k, &ann) in annotated.iter().enumerate() {
            if !ann && masks[k * n..(k + 1) * n].iter().any(|&v| v != 0) {
                return Err(MomeError::InvalidLabels(format!(
                    "class {k} is unannotated but its mask is not empty"
                )));
            }
        }
        Ok(Self {
            volume_id: volume_id.into(),
            dataset_id: None,
            dims,
            annotated,
            masks,
        })
    }

    pub fn with_dataset(mut self, dataset_id: impl Into<String>) -> Self {
        self.dataset_id = Some(dataset_id.into());
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.annotated.len()
    }

    pub fn annotated(&self) -> &[bool] {
        &self.annotated
    }

    pub fn masks(&self) -> &[u8] {
        &self.masks
    }

    pub fn mask(&self, k: usize) -> &[u8] {
        let n: usize = self.dims.iter().product();
        &self.masks[k * n..(k + 1) * n]
    }

    /// Copy keeping only the classes flagged in `keep`; the rest become
    /// empty unannotated placeholders.
    pub fn restricted_to(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.annotated.len() {
            return Err(MomeError::ClassCount {
                expected: self.annotated.len(),
                found: keep.len(),
            });
        }
        let n: usize = self.dims.iter().product();
        let mut masks = self.masks.clone();
        let mut annotated = self.annotated.clone();
        for (k, &kept) in keep.iter().enumerate() {
            if !kept {
                masks[k * n..(k + 1) * n].fill(0);
                annotated[k] = false;
            }
        }
        Ok(Self {
            volume_id: self.volume_id.clone(),
            dataset_id: self.dataset_id.clone(),
            dims: self.dims,
            annotated,
            masks,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Organ,
    Tumor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub kind: ClassKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<usize>,
}

/// Ordered class list; its length is the class count `K` everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct ClassVocabulary {
    entries: Vec<ClassEntry>,
}

impl TryFrom<Vec<ClassEntry>> for ClassVocabulary {
    type Error = MomeError;

    fn try_from(entries: Vec<ClassEntry>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<ClassVocabulary> for Vec<ClassEntry> {
    fn from(v: ClassVocabulary) -> Self {
        v.entries
    }
}

impl ClassVocabulary {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(MomeError::Config("vocabulary is empty".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(MomeError::Config(format!("duplicate class name {:?}", e.name)));
            }
            match (e.kind, e.host) {
                (ClassKind::Tumor, Some(h)) if h < entries.len() && entries[h].kind == ClassKind::Organ => {}
                (ClassKind::Tumor, _) => {
                    return Err(MomeError::Config(format!(
                        "tumor class {:?} must reference an organ class",
                        e.name
                    )))
                }
                (ClassKind::Organ, None) => {}
                (ClassKind::Organ, Some(_)) => {
                    return Err(MomeError::Config(format!(
                        "organ class {:?} cannot have a host",
                        e.name
                    )))
                }
            }
        }
        Ok(Self { entries })
    }

    /// Four organs and two tumor classes.
    pub fn desk() -> Self {
        let organ = |n: &str| ClassEntry {
            name: n.into(),
            kind: ClassKind::Organ,
            host: None,
        };
        let tumor = |n: &str, h| ClassEntry {
            name: n.into(),
            kind: ClassKind::Tumor,
            host: Some(h),
        };
        Self::new(vec![
            organ("liver"),
            organ("kidney"),
            organ("spleen"),
            organ("pancreas"),
            tumor("liver tumor", 0),
            tumor("kidney tumor", 1),
        ])
        .expect("desk vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn get(&self, k: usize) -> Result<&ClassEntry> {
        self.entries.get(k).ok_or(MomeError::OutOfRange {
            index: k,
            len: self.entries.len(),
        })
    }

    pub fn indices_of(&self, kind: ClassKind) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&k| self.entries[k].kind == kind)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dataset_id: String,
    #[serde(default)]
    pub split: Split,
    pub volume_ids: Vec<String>,
    pub annotated_classes: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub vocabulary: ClassVocabulary,
    pub datasets: Vec<DatasetEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ManifestViolation {
    DuplicateMembership {
        volume_id: String,
        datasets: Vec<String>,
    },
    AnnotationMismatch {
        volume_id: String,
        dataset_id: String,
        class: usize,
    },
    ClassCount {
        dataset_id: String,
        expected: usize,
        found: usize,
    },
    MissingLabels {
        volume_id: String,
    },
    UnlistedLabels {
        volume_id: String,
    },
}

impl std::fmt::Display for ManifestViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::DuplicateMembership { volume_id, datasets } => {
                write!(f, "volume {volume_id} listed in datasets {datasets:?}")
            }
            Self::AnnotationMismatch {
                volume_id,
                dataset_id,
                class,
            } => write!(
                f,
                "volume {volume_id}: class {class} annotation disagrees with dataset {dataset_id}"
            ),
            Self::ClassCount {
                dataset_id,
                expected,
                found,
            } => write!(f, "dataset {dataset_id}: {found} class flags, expected {expected}"),
            Self::MissingLabels { volume_id } => write!(f, "volume {volume_id} has no labels"),
            Self::UnlistedLabels { volume_id } => {
                write!(f, "labels for {volume_id} belong to no dataset")
            }
        }
    }
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.datasets.iter().filter(move |d| d.split == split)
    }

    pub fn volume_ids(&self, split: Split) -> Vec<String> {
        self.split(split).flat_map(|d| d.volume_ids.iter().cloned()).collect()
    }
}

/// Every manifest invariant breach found, in a stable order. Empty iff
/// the manifest is consistent with `labels`.
pub fn validate_manifest(m: &DatasetManifest, labels: &[PartialLabelSet]) -> Vec<ManifestViolation> {
    let k = m.vocabulary.len();
    let mut out = Vec::new();
    let mut membership: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for d in &m.datasets {
        if d.annotated_classes.len() != k {
            out.push(ManifestViolation::ClassCount {
                dataset_id: d.dataset_id.clone(),
                expected: k,
                found: d.annotated_classes.len(),
            });
        }
        for v in &d.volume_ids {
            membership.entry(v).or_default().push(&d.dataset_id);
        }
    }
    for (v, ds) in &membership {
        if ds.len() > 1 {
            out.push(ManifestViolation::DuplicateMembership {
                volume_id: v.to_string(),
                datasets: ds.iter().map(|s| s.to_string()).collect(),
            });
        }
    }
    let by_id: BTreeMap<&str, &PartialLabelSet> =
        labels.iter().map(|l| (l.volume_id.as_str(), l)).collect();
    for d in &m.datasets {
        for v in &d.volume_ids {
            let Some(l) = by_id.get(v.as_str()) else {
                out.push(ManifestViolation::MissingLabels {
                    volume_id: v.clone(),
                });
                continue;
            };
            for (class, (&a, &b)) in l.annotated().iter().zip(&d.annotated_classes).enumerate() {
                if a != b {
                    out.push(ManifestViolation::AnnotationMismatch {
                        volume_id: v.clone(),
                        dataset_id: d.dataset_id.clone(),
                        class,
                    });
                }
            }
        }
    }
    for l in labels {
        if !membership.contains_key(l.volume_id.as_str()) {
            out.push(ManifestViolation::UnlistedLabels {
                volume_id: l.volume_id.clone(),
            });
        }
    }
    out
}
