//! Run manifests and output path handling.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::Failure;

/// Bumped whenever the layout of any emitted JSON record changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Directory for outputs whose path is not given explicitly.
pub const OUT_DIR_ENV: &str = "SUPERPOSE_OUT_DIR";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub workers: usize,
    pub artifact_version: String,
    pub timestamp: String,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64, workers: usize) -> Result<Self, Failure> {
        Ok(RunManifest {
            schema_version: SCHEMA_VERSION,
            command: command.into(),
            argv: std::env::args().collect(),
            config: serde_json::to_value(config).map_err(Failure::runtime)?,
            seed,
            workers,
            artifact_version: env!("CARGO_PKG_VERSION").into(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            outputs: Vec::new(),
        })
    }

    /// Manifest location for a primary output `out`: `<out>.manifest.json`.
    pub fn path_for(out: &Path) -> PathBuf {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }

    /// File name that output records embed to point back at this manifest.
    pub fn reference(out: &Path) -> String {
        Self::path_for(out).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    }

    pub fn write(&self, primary: &Path) -> Result<PathBuf, Failure> {
        let path = Self::path_for(primary);
        let text = serde_json::to_string_pretty(self).map_err(Failure::runtime)?;
        std::fs::write(&path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// `explicit`, or `default_name` under `$SUPERPOSE_OUT_DIR` (else the working
/// directory). Parent directories are created.
pub fn resolve_out(explicit: Option<&Path>, default_name: &str) -> Result<PathBuf, Failure> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(default_name),
            _ => PathBuf::from(default_name),
        },
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    Ok(path)
}

/// Writes one JSON value per line.
pub fn write_jsonl(path: &Path, rows: &[serde_json::Value]) -> Result<(), Failure> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(Failure::runtime)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Adds `"manifest": reference` to a JSON object.
pub fn tag(mut v: serde_json::Value, reference: &str) -> serde_json::Value {
    if let serde_json::Value::Object(m) = &mut v {
        m.insert("manifest".into(), reference.into());
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_next_to_output() {
        let p = RunManifest::path_for(Path::new("out/r.jsonl"));
        assert_eq!(p, Path::new("out/r.jsonl.manifest.json"));
        assert_eq!(RunManifest::reference(Path::new("out/r.jsonl")), "r.jsonl.manifest.json");
    }

    #[test]
    fn tag_only_touches_objects() {
        let v = tag(serde_json::json!({"a": 1}), "m.json");
        assert_eq!(v["manifest"], "m.json");
        assert_eq!(tag(serde_json::json!(3), "m.json"), serde_json::json!(3));
    }
}
