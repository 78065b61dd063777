//! JSON Lines triplet manifests with paths relative to the manifest file.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub content_path: String,
    pub style_path: String,
    pub stylized_path: String,
    pub style_id: String,
    pub split: Split,
    pub seed: u64,
    pub category: usize,
    /// Index of the content scene; records sharing it show the same content.
    pub content_index: usize,
    pub caption: String,
    pub content_mask_path: String,
    pub stylized_mask_path: String,
}

impl ManifestRecord {
    fn paths(&self) -> [&str; 5] {
        [
            &self.content_path,
            &self.style_path,
            &self.stylized_path,
            &self.content_mask_path,
            &self.stylized_mask_path,
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { records };
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate triplet id {:?}", r.id)));
            }
        }
        Ok(())
    }

    /// Every referenced file must exist relative to `base`.
    pub fn check_paths(&self, base: &Path) -> Result<()> {
        for r in &self.records {
            for p in r.paths() {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(Error::DanglingPath(full));
                }
            }
        }
        Ok(())
    }

    /// Writes one record per line after checking ids and paths.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.check_ids()?;
        self.check_paths(&base_dir(path))?;
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(line).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 1)))?,
            );
        }
        let m = Self::new(records)?;
        m.check_paths(&base_dir(path))?;
        Ok(m)
    }

    pub fn style_ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.style_id.as_str()).collect()
    }

    pub fn with_split(&self, split: Split) -> Self {
        Self {
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }
}

/// Directory that manifest-relative paths resolve against.
pub fn base_dir(manifest: &Path) -> PathBuf {
    match manifest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn style_hash(style_id: &str) -> [u8; 32] {
    Sha256::digest(style_id.as_bytes()).into()
}

/// Style-level split: the `round(n · test_fraction)` styles with the smallest
/// SHA-256 of their id go to test. Depends only on the id set.
pub fn split_styles<'a>(style_ids: impl IntoIterator<Item = &'a str>, test_fraction: f64) -> Result<Vec<(String, Split)>> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test_fraction must be in [0, 1], got {test_fraction}")));
    }
    let ids: BTreeSet<&str> = style_ids.into_iter().collect();
    let mut hashed: Vec<([u8; 32], &str)> = ids.iter().map(|id| (style_hash(id), *id)).collect();
    hashed.sort();
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    let test: HashSet<&str> = hashed.iter().take(n_test).map(|(_, id)| *id).collect();
    Ok(ids
        .iter()
        .map(|id| (id.to_string(), if test.contains(id) { Split::Test } else { Split::Train }))
        .collect())
}
