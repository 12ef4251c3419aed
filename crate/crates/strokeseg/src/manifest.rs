//! Dataset index: `patient_id,volume_path,mask_path,fold`.
//!
//! Relative paths are resolved against the manifest's directory; an empty
//! fold cell means "not assigned".

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 4] = ["patient_id", "volume_path", "mask_path", "fold"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub patient_id: String,
    pub volume_path: PathBuf,
    pub mask_path: PathBuf,
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    patient_id: String,
    volume_path: String,
    mask_path: String,
    fold: Option<usize>,
}

fn manifest_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, patient_id: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.patient_id == patient_id)
    }

    /// Entries assigned to `fold`.
    pub fn fold(&self, fold: usize) -> Vec<&Entry> {
        self.entries
            .iter()
            .filter(|e| e.fold == Some(fold))
            .collect()
    }

    /// Entries assigned to any other fold.
    pub fn training(&self, fold: usize) -> Vec<&Entry> {
        self.entries
            .iter()
            .filter(|e| e.fold.is_some_and(|f| f != fold))
            .collect()
    }

    pub fn folds(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.entries.iter().filter_map(|e| e.fold).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    fn check(&self, path: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.patient_id.is_empty() {
                return Err(manifest_err(path, "empty patient_id"));
            }
            if !seen.insert(e.patient_id.as_str()) {
                return Err(manifest_err(
                    path,
                    format!("duplicate patient_id {}", e.patient_id),
                ));
            }
            if let Some(f) = e.fold.filter(|f| *f > 4) {
                return Err(manifest_err(
                    path,
                    format!("fold {f} of {} outside 0..=4", e.patient_id),
                ));
            }
        }
        Ok(())
    }

    /// Writes the manifest, storing paths relative to its directory where
    /// possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.check(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        }
        let rel = |p: &Path| {
            let dir_abs = absolute(&dir);
            let p_abs = absolute(p);
            p_abs
                .strip_prefix(&dir_abs)
                .map(Path::to_path_buf)
                .unwrap_or(p_abs)
                .to_string_lossy()
                .into_owned()
        };
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        w.write_record(HEADER)?;
        for e in &self.entries {
            w.serialize(Row {
                patient_id: e.patient_id.clone(),
                volume_path: rel(&e.volume_path),
                mask_path: rel(&e.mask_path),
                fold: e.fold,
            })?;
        }
        w.flush().map_err(Error::io(path))?;
        Ok(())
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Reads and validates a manifest. Every referenced sidecar must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    if text.trim().is_empty() {
        return Ok(Manifest::default());
    }
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != HEADER {
        return Err(manifest_err(
            path,
            format!(
                "header must be {}, got {}",
                HEADER.join(","),
                header.join(",")
            ),
        ));
    }
    let mut entries = Vec::new();
    for (line, row) in r.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| manifest_err(path, format!("row {}: {e}", line + 2)))?;
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                dir.join(p)
            }
        };
        entries.push(Entry {
            patient_id: row.patient_id,
            volume_path: resolve(&row.volume_path),
            mask_path: resolve(&row.mask_path),
            fold: row.fold,
        });
    }
    let m = Manifest { entries };
    m.check(path)?;
    for e in &m.entries {
        for p in [&e.volume_path, &e.mask_path] {
            let (json, _) = crate::vol::vol_paths(p);
            if !json.exists() {
                return Err(manifest_err(
                    path,
                    format!("{}: missing {}", e.patient_id, json.display()),
                ));
            }
        }
    }
    Ok(m)
}
