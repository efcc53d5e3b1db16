//! Labeled image lists stored as CSV with header `path,label,tag`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: u8,
    #[serde(default)]
    pub tag: String,
}

/// Rows plus the directory relative paths are resolved against.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base: PathBuf) -> Self {
        Manifest { rows, base }
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bad = |m: String| CliError::Manifest(format!("{}: {m}", path.display()));
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| bad(e.to_string()))?;
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        let names: Vec<&str> = headers.iter().collect();
        if names != ["path", "label", "tag"] && names != ["path", "label"] {
            return Err(bad(format!("header must be path,label,tag, found {}", names.join(","))));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
            let row = rec.map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
            if row.label > 1 {
                return Err(bad(format!("row {}: label {} is not 0 or 1", i + 1, row.label)));
            }
            rows.push(row);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { rows, base })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))?;
        for row in &self.rows {
            w.serialize(row)
                .map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base.join(&row.path)
        }
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn tags(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.tag.clone()).collect()
    }

    /// SHA-256 over the rows as written, independent of the base directory.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update(r.path.to_string_lossy().as_bytes());
            h.update([0, r.label, 0]);
            h.update(r.tag.as_bytes());
            h.update([b'\n']);
        }
        h.finalize().into()
    }

    /// Imports a tree where `root/real/**` holds real images and every other
    /// top-level directory `root/<generator>/**` holds fakes tagged with the
    /// directory name. Paths are stored relative to `root`.
    pub fn from_dirs(root: &Path) -> CliResult<Self> {
        let io = |p: &Path, e| CliError::from(daf_core::DafError::io(p, e));
        let mut tops: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        tops.sort();
        let mut rows = Vec::new();
        for top in tops {
            let tag = top.file_name().unwrap_or_default().to_string_lossy().to_string();
            let label = u8::from(tag != "real");
            let mut files = Vec::new();
            collect_images(&top, &mut files).map_err(|e| io(&top, e))?;
            files.sort();
            for f in files {
                let rel = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
                rows.push(ManifestRow { path: rel, label, tag: tag.clone() });
            }
        }
        if rows.is_empty() {
            return Err(CliError::Manifest(format!("no images found under {}", root.display())));
        }
        Ok(Manifest { rows, base: root.to_path_buf() })
    }
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_images(&p, out)?;
        } else if p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        {
            out.push(p);
        }
    }
    Ok(())
}
