//! Dataset files: `manifest.json` plus one JSON record per line in
//! `records.jsonl`.

use std::fmt::Write as _;
use std::path::Path;

use super::schema::{Dataset, DatasetManifest, ImageRecord, Mode};
use crate::error::{DatasetError, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| Error::json(&manifest_path, e))?;
    manifest.push('\n');
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    let records_path = dir.join(RECORDS_FILE);
    let mut out = String::new();
    for r in &dataset.records {
        let line = serde_json::to_string(r).map_err(|e| Error::json(&records_path, e))?;
        writeln!(out, "{line}").expect("writing to a String");
    }
    std::fs::write(&records_path, out).map_err(|e| Error::io(&records_path, e))
}

/// Loads and validates a dataset directory. With `mode` given, a dataset
/// of the other mode is rejected.
pub fn load_dataset(dir: &Path, mode: Option<Mode>) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if let Some(m) = mode {
        if m != manifest.mode {
            return Err(DatasetError::Manifest(format!("dataset is {} but {m} was requested", manifest.mode)).into());
        }
    }
    let records_path = dir.join(RECORDS_FILE);
    let text = std::fs::read_to_string(&records_path).map_err(|e| Error::io(&records_path, e))?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ImageRecord = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: n + 1,
            msg: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(Dataset::new(manifest, records)?)
}
