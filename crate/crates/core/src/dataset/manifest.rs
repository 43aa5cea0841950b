//! `path,class` CSV manifests.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassCatalog, LabeledImage};
use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub class: String,
}

fn read_rows(manifest: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| Error::Ingestion {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Decode every image listed in `manifest` (paths relative to `root`).
///
/// Classes are indexed in order of first appearance in the manifest.
pub fn load_manifest(root: &Path, manifest: &Path) -> Result<(Vec<LabeledImage>, ClassCatalog)> {
    let rows = read_rows(manifest)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut names: Vec<String> = Vec::new();
    let mut labels = Vec::with_capacity(rows.len());
    for row in &rows {
        let label = match names.iter().position(|n| n == &row.class) {
            Some(i) => i,
            None => {
                names.push(row.class.clone());
                names.len() - 1
            }
        };
        labels.push(label);
    }

    let images = rows
        .par_iter()
        .zip(labels.par_iter())
        .map(|(row, &label)| {
            let path: PathBuf = root.join(&row.path);
            let pixels = Image::open(&path)?;
            Ok(LabeledImage {
                pixels,
                label,
                source_id: row.path.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let catalog = ClassCatalog::from_labels(names, labels)?;
    Ok((images, catalog))
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Build manifest rows from a `root/<class>/<image>` layout. Class directories
/// and files are visited in lexical order so the result is reproducible.
pub fn scan_class_dirs(root: &Path) -> Result<Vec<ManifestRow>> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();

    let mut rows = Vec::new();
    for dir in class_dirs {
        let class = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Ingestion {
                path: dir.clone(),
                reason: "class directory name is not UTF-8".into(),
            })?
            .to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        for f in files {
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            rows.push(ManifestRow {
                path: format!("{class}/{name}"),
                class: class.clone(),
            });
        }
    }
    Ok(rows)
}
