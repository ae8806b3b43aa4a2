pub mod eval;
pub mod gen;
pub mod inspect;
pub mod train;
pub mod verify;

use crate::Failure;
use grc_core::lidar::{parse_kitti_bin, parse_kitti_label, PointCloud};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Dataset manifest written by `gen` and read back by `train`/`eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub class_count: u32,
    pub count: usize,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
    /// Echo of the generator description (scene family or fixed spec).
    pub generator: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub bin: String,
    pub label: String,
    pub seed: u64,
    pub points: usize,
}

/// Load scans listed in a dataset manifest, labels attached.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<PointCloud>), Failure> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Failure::data(format!(
            "no manifest.json in {}; generate data with `grc gen` first",
            dir.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let mut scenes = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        let bin = std::fs::read(dir.join(&entry.bin))?;
        let (mut cloud, _) = parse_kitti_bin(&bin)?;
        let labels = std::fs::read(dir.join(&entry.label))?;
        cloud.labels = Some(parse_kitti_label(&labels, cloud.len(), None)?);
        scenes.push(cloud);
    }
    Ok((manifest, scenes))
}

/// Checkpoint prefix from a user-supplied path that may carry the .grcw or
/// .json extension.
pub fn checkpoint_prefix(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("grcw") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

/// Verbose progress lines go to stderr, gated by GRC_VERBOSE.
pub fn verbose() -> bool {
    std::env::var("GRC_VERBOSE").map(|v| v != "0" && !v.is_empty()).unwrap_or(false)
}
