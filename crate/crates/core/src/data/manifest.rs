//! JSON manifest listing the feature files of a dataset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::feature_file::{read_features, write_features};
use super::synthetic::SyntheticSpec;
use crate::error::{Error, FormatError, Result};
use crate::pipeline::FeatureBundle;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: Option<SyntheticSpec>,
    pub samples: Vec<ManifestEntry>,
}

/// Writes one feature file per bundle plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, bundles: &[FeatureBundle], spec: Option<&SyntheticSpec>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(bundles.len());
    for (i, b) in bundles.iter().enumerate() {
        let name = format!("sample_{i:05}.drxf");
        write_features(b, &dir.join(&name))?;
        samples.push(ManifestEntry {
            path: name,
            label: b.label,
        });
    }
    let manifest = Manifest {
        spec: spec.cloned(),
        samples,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| FormatError::Malformed(format!("manifest: {e}")))?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| FormatError::Malformed(format!("manifest: {e}")).into())
}

/// Loads every sample of a manifest (a file, or a directory holding `manifest.json`).
pub fn load_dataset(path: &Path) -> Result<(Manifest, Vec<FeatureBundle>)> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let manifest = read_manifest(&file)?;
    let base = file.parent().unwrap_or(Path::new("."));
    let mut bundles = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let b = read_features(&base.join(&e.path))?;
        if b.label != e.label {
            return Err(FormatError::Malformed(format!(
                "{}: label {} disagrees with manifest label {}",
                e.path, b.label, e.label
            ))
            .into());
        }
        bundles.push(b);
    }
    if bundles.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((manifest, bundles))
}
