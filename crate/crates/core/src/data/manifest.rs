//! Dataset manifests: one TOML file listing image/mask pairs with paths
//! relative to the manifest's directory.
//!
//! ```toml
//! [class_map]
//! background = 0
//! graspable = 1
//! contain = 2
//! arm = 3
//!
//! [normalization]
//! mean = [0.5, 0.5, 0.5]
//! std = [0.25, 0.25, 0.25]
//!
//! [[records]]
//! image_path = "images/0000.png"
//! mask_path = "masks/0000.png"
//! bbox = [40, 30, 90, 100]
//! split = "train"
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BBox;
use crate::error::{Error, Result};
use crate::types::CLASS_NAMES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_category: Option<String>,
}

/// Per-channel image normalization, applied to values scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalization {
    /// Statistics of the ImageNet-pretrained ResNet encoders.
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn validate(&self) -> Result<()> {
        if self.mean.iter().any(|m| !m.is_finite()) || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Manifest(format!(
                "normalization needs finite means and positive deviations, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn default_class_map() -> BTreeMap<String, u8> {
    CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| (n.to_string(), i as u8))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default = "default_class_map")]
    pub class_map: BTreeMap<String, u8>,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub records: Vec<SampleRecord>,
    /// Directory that relative record paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<SampleRecord>) -> Self {
        DatasetManifest {
            class_map: default_class_map(),
            normalization: Normalization::default(),
            records,
            root: root.into(),
        }
    }

    /// Parses manifest text without touching the file system.
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let m = Self::parse(&text, &root).map_err(|e| match e {
            Error::Manifest(msg) => Error::Manifest(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        for r in &m.records {
            for p in [&r.image_path, &r.mask_path] {
                let full = m.resolve(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!(
                        "{}: referenced file {} does not exist",
                        path.display(),
                        full.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Structural checks: contiguous class ids matching the label set,
    /// well-formed boxes and normalization.
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u8> = self.class_map.values().copied().collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| id as usize != i) {
            return Err(Error::Manifest(format!(
                "class ids must form a contiguous range from 0, got {:?}",
                self.class_map
            )));
        }
        if self.class_map != default_class_map() {
            return Err(Error::Manifest(format!(
                "class map must be {:?}, got {:?}",
                default_class_map(),
                self.class_map
            )));
        }
        self.normalization.validate()?;
        for (i, r) in self.records.iter().enumerate() {
            if let Some(b) = r.bbox {
                b.validate().map_err(|e| Error::Manifest(format!("record {i}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one split, sharing this manifest's root.
    pub fn filter_split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
            ..self.clone()
        }
    }
}
