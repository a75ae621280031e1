use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainNormal,
    TrainAnomaly,
    Test,
}

/// One line of the JSON-lines manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub label: u8,
    pub feature_path: String,
    #[serde(default)]
    pub mask_path: Option<String>,
}

/// Labelled index of feature files. Paths inside entries are relative to
/// `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let manifest = Self {
            root: root.into(),
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Loads a manifest; entry paths resolve against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::load_with_root(path, root)
    }

    pub fn load_with_root(path: impl AsRef<Path>, root: impl Into<PathBuf>) -> Result<Self> {
        let path = path.as_ref();
        let entries = read_json_lines(path)?;
        Self::new(root, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json_lines(path, &self.entries)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            let expected = match e.split {
                Split::TrainNormal => Some(0),
                Split::TrainAnomaly => Some(1),
                Split::Test => None,
            };
            if e.label > 1 || expected.is_some_and(|l| l != e.label) {
                return Err(Error::Config(format!(
                    "manifest entry {:?}: label {} inconsistent with split {:?}",
                    e.id, e.label, e.split
                )));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate manifest id {:?}", e.id)));
            }
        }
        let (n, k) = (self.normal_count(), self.anomaly_count());
        if k > 0 && k >= n {
            log::warn!("weakly supervised setting expects K < N, got K = {k}, N = {n}");
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// N, the number of normal training images.
    pub fn normal_count(&self) -> usize {
        self.split(Split::TrainNormal).count()
    }

    /// K, the number of anomaly training images.
    pub fn anomaly_count(&self) -> usize {
        self.split(Split::TrainAnomaly).count()
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn feature_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.resolve(&entry.feature_path)
    }

    pub fn mask_path(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        entry.mask_path.as_deref().map(|p| self.resolve(p))
    }
}

pub fn read_json_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn write_json_lines<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
