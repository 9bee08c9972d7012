//! Dataset manifests: one record per line, tab-separated
//! `input-path<TAB>target-path-or-"-"<TAB>source-tag`.
//! Paths are resolved against the manifest's root directory and must
//! exist at load time.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, UieError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceTag {
    Reference,
    NonReference,
}

impl SourceTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(SourceTag::Reference),
            "non-reference" => Ok(SourceTag::NonReference),
            other => Err(UieError::Format(format!(
                "unknown source tag {other:?} (want reference | non-reference)"
            ))),
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceTag::Reference => write!(f, "reference"),
            SourceTag::NonReference => write!(f, "non-reference"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestEntry {
    pub input: PathBuf,
    pub target: Option<PathBuf>,
    pub source: SourceTag,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Parse a manifest file; relative paths resolve against the file's
    /// parent directory. Every referenced path must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| UieError::io(path, e))?;
        let root = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(UieError::Format(format!(
                    "{}:{}: expected 3 tab-separated fields, got {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            let resolve = |s: &str| -> PathBuf {
                let p = PathBuf::from(s);
                if p.is_absolute() {
                    p
                } else {
                    root.join(p)
                }
            };
            let input = resolve(fields[0]);
            if !input.exists() {
                return Err(UieError::Load(format!(
                    "{}:{}: input path missing: {}",
                    path.display(),
                    lineno + 1,
                    input.display()
                )));
            }
            let target = if fields[1] == "-" {
                None
            } else {
                let t = resolve(fields[1]);
                if !t.exists() {
                    return Err(UieError::Load(format!(
                        "{}:{}: target path missing: {}",
                        path.display(),
                        lineno + 1,
                        t.display()
                    )));
                }
                Some(t)
            };
            let source = SourceTag::parse(fields[2])?;
            entries.push(ManifestEntry {
                input,
                target,
                source,
            });
        }
        Ok(DatasetManifest { root, entries })
    }

    /// Entries that carry a target path.
    pub fn paired(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.target.is_some())
    }
}
