//! Dataset manifests.
//!
//! A manifest is a JSON document:
//!
//! ```json
//! {
//!   "category": "bottle",
//!   "image_size": [224, 224],
//!   "levels": ["1", "2", "3"],
//!   "samples": [
//!     {"id": "train/000", "split": "train", "label": "normal",
//!      "tensors": {"1": "train/000_l1.npy", "2": "...", "3": "..."}},
//!     {"id": "test/broken/003", "split": "test", "label": "anomalous",
//!      "tensors": {"1": "...", "2": "...", "3": "..."}, "mask": "gt/003.png"}
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Levels may be
//! written as strings or integers. Masks are either PNG images (non-zero pixels
//! are anomalous) or tensor files of shape `(h, w)` or `(1, h, w)`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub label: Label,
    /// One tensor file per level, in manifest level order.
    pub tensor_paths: Vec<PathBuf>,
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub category: String,
    pub image_height: usize,
    pub image_width: usize,
    pub levels: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[serde(untagged)]
enum LevelId {
    Text(String),
    Number(u64),
}

impl LevelId {
    fn into_text(self) -> String {
        match self {
            LevelId::Text(s) => s,
            LevelId::Number(n) => n.to_string(),
        }
    }
}

/// Serialized manifest layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDocument {
    pub category: String,
    pub image_size: [usize; 2],
    pub levels: Vec<serde_json::Value>,
    pub samples: Vec<SampleDocument>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleDocument {
    pub id: String,
    pub split: Split,
    pub label: Label,
    pub tensors: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn train(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }

    pub fn has_masks(&self) -> bool {
        self.test().any(|s| s.mask_path.is_some())
    }

    /// Copy of this manifest with a different sample list.
    pub fn with_samples(&self, samples: Vec<SampleRecord>) -> Self {
        Self {
            category: self.category.clone(),
            image_height: self.image_height,
            image_width: self.image_width,
            levels: self.levels.clone(),
            samples,
        }
    }

    /// Checks structural invariants without touching the filesystem.
    pub fn validate_structure(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Manifest("image_size must be positive".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::Manifest("no feature levels declared".into()));
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id {:?}", s.id)));
            }
            if s.split == Split::Train && s.label == Label::Anomalous {
                return Err(Error::Manifest(format!(
                    "record {:?}: train samples must be anomaly-free",
                    s.id
                )));
            }
            if s.split == Split::Train && s.mask_path.is_some() {
                return Err(Error::Manifest(format!(
                    "record {:?}: masks are only allowed on test samples",
                    s.id
                )));
            }
            if s.tensor_paths.len() != self.levels.len() {
                return Err(Error::Manifest(format!(
                    "record {:?}: {} tensors for {} levels",
                    s.id,
                    s.tensor_paths.len(),
                    self.levels.len()
                )));
            }
        }
        Ok(())
    }

    /// Serializes with paths made relative to `base` where possible.
    pub fn to_document(&self, base: &Path) -> ManifestDocument {
        let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        ManifestDocument {
            category: self.category.clone(),
            image_size: [self.image_height, self.image_width],
            levels: self.levels.iter().map(|l| serde_json::Value::String(l.clone())).collect(),
            samples: self
                .samples
                .iter()
                .map(|s| SampleDocument {
                    id: s.id.clone(),
                    split: s.split,
                    label: s.label,
                    tensors: self
                        .levels
                        .iter()
                        .cloned()
                        .zip(s.tensor_paths.iter().map(|p| rel(p)))
                        .collect(),
                    mask: s.mask_path.as_deref().map(rel),
                })
                .collect(),
        }
    }
}

/// Writes a manifest document as pretty JSON.
pub fn save_manifest(path: impl AsRef<Path>, doc: &ManifestDocument) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(doc).expect("manifest serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Parses and eagerly validates a manifest, including every referenced file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDocument = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = from_document(doc, base)?;
    check_files(&manifest)?;
    Ok(manifest)
}

/// Builds a manifest from a parsed document; relative paths resolve against `base`.
pub fn from_document(doc: ManifestDocument, base: &Path) -> Result<DatasetManifest> {
    let levels = doc
        .levels
        .into_iter()
        .map(|v| {
            serde_json::from_value::<LevelId>(v)
                .map(LevelId::into_text)
                .map_err(|_| Error::Manifest("levels must be strings or integers".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

    let mut samples = Vec::with_capacity(doc.samples.len());
    for s in doc.samples {
        let mut tensors = s.tensors;
        let mut tensor_paths = Vec::with_capacity(levels.len());
        for level in &levels {
            let p = tensors.remove(level).ok_or_else(|| {
                Error::Manifest(format!("record {:?}: no tensor for level {level}", s.id))
            })?;
            tensor_paths.push(resolve(p));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Manifest(format!(
                "record {:?}: tensor for undeclared level {extra}",
                s.id
            )));
        }
        samples.push(SampleRecord {
            id: s.id,
            split: s.split,
            label: s.label,
            tensor_paths,
            mask_path: s.mask.map(resolve),
        });
    }

    let manifest = DatasetManifest {
        category: doc.category,
        image_height: doc.image_size[0],
        image_width: doc.image_size[1],
        levels,
        samples,
    };
    manifest.validate_structure()?;
    Ok(manifest)
}

fn check_files(manifest: &DatasetManifest) -> Result<()> {
    for s in &manifest.samples {
        for (level, p) in manifest.levels.iter().zip(&s.tensor_paths) {
            if !p.is_file() {
                return Err(Error::Manifest(format!(
                    "record {:?}: level {level} tensor {} does not exist",
                    s.id,
                    p.display()
                )));
            }
        }
        if let Some(mask) = &s.mask_path {
            if !mask.is_file() {
                return Err(Error::Manifest(format!(
                    "record {:?}: mask {} does not exist",
                    s.id,
                    mask.display()
                )));
            }
            load_mask(mask, manifest.image_height, manifest.image_width)
                .map_err(|e| Error::Manifest(format!("record {:?}: {e}", s.id)))?;
        }
    }
    Ok(())
}

/// Reads a binary ground-truth mask; `true` marks anomalous pixels.
pub fn load_mask(path: &Path, height: usize, width: usize) -> Result<Vec<bool>> {
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let (dims, bits) = if is_png {
        let img = image::open(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?
            .into_luma8();
        let dims = (img.height() as usize, img.width() as usize);
        (dims, img.into_raw().into_iter().map(|v| v != 0).collect())
    } else {
        let array = tensor::read_array(path)?;
        let dims = match array.shape[..] {
            [h, w] | [1, h, w] => (h, w),
            _ => {
                return Err(Error::Manifest(format!(
                    "{}: mask must have shape (h, w) or (1, h, w), found {:?}",
                    path.display(),
                    array.shape
                )))
            }
        };
        (dims, array.data.into_iter().map(|v| v != 0.0).collect())
    };
    if dims != (height, width) {
        return Err(Error::Manifest(format!(
            "{}: mask is {}x{}, image size is {height}x{width}",
            path.display(),
            dims.0,
            dims.1
        )));
    }
    Ok(bits)
}
