//! Output directories with a content-hashed manifest written last.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tag_core::hashing::sha256_hex;

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub tool: String,
    pub version: String,
    pub config_hash: Option<String>,
    pub files: Vec<FileEntry>,
}

/// Writes every file, then the manifest. A directory without a manifest is a
/// partial run.
pub fn persist_artifact(out_dir: &Path, files: &[(String, String)], config_hash: Option<String>) -> CliResult<RunArtifact> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST);
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
    }
    let mut entries = Vec::with_capacity(files.len());
    for (name, content) in files {
        if name == MANIFEST || name.contains('/') || name.contains('\\') {
            return Err(CliError::invalid("artifact", format!("bad file name {name:?}")));
        }
        let path = out_dir.join(name);
        std::fs::write(&path, content).map_err(|e| CliError::io(&path, e))?;
        entries.push(FileEntry {
            name: name.clone(),
            sha256: sha256_hex(content.as_bytes()),
            bytes: content.len() as u64,
        });
    }
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    let artifact = RunArtifact {
        tool: "tag".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash,
        files: entries,
    };
    let json = serde_json::to_string_pretty(&artifact).expect("manifest serializes") + "\n";
    std::fs::write(&manifest_path, json).map_err(|e| CliError::io(&manifest_path, e))?;
    Ok(artifact)
}

/// Reads the manifest and checks every listed file against its hash.
pub fn verify_artifact(dir: &Path) -> CliResult<RunArtifact> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::Manifest(format!("{}: {e} (partial run?)", manifest_path.display())))?;
    let artifact: RunArtifact =
        serde_json::from_str(&text).map_err(|e| CliError::Manifest(format!("{}: {e}", manifest_path.display())))?;
    for f in &artifact.files {
        let path = dir.join(&f.name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))?;
        let actual = sha256_hex(&bytes);
        if actual != f.sha256 {
            return Err(CliError::Manifest(format!("{}: sha256 {actual} does not match manifest {}", path.display(), f.sha256)));
        }
    }
    Ok(artifact)
}
