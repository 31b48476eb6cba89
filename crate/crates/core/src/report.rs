//! Artifact plumbing: atomic writes, content digests, CSV assembly, and the
//! run manifest written beside every produced artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Writes bytes to `path` via a temp file in the same directory plus rename,
/// so readers never observe a half-written artifact.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.to_path_buf();
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    tmp.set_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Builds a CSV body with a header row, one line per row, `\n` line endings.
/// Values are written as given; numeric formatting is the caller's Display.
pub fn csv_body(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// A file a command read or wrote, with its content digest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written beside every artifact-producing command's
/// outputs. Two runs with the same inputs and seed produce manifests that
/// differ at most in `wall_time_ms`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub wall_time_ms: u64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_ms: 0,
        }
    }

    pub fn record_input(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.inputs.push(FileRecord {
            path: path.as_ref().display().to_string(),
            sha256: file_digest(&path)?,
        });
        Ok(())
    }

    pub fn record_output(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.outputs.push(FileRecord {
            path: path.as_ref().display().to_string(),
            sha256: file_digest(&path)?,
        });
        Ok(())
    }

    /// Writes the manifest beside the primary output as
    /// `<name>.manifest.json`.
    pub fn write_beside(&self, primary_output: impl AsRef<Path>) -> Result<PathBuf> {
        let path = manifest_path(primary_output);
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }
}

/// Manifest path for a given artifact: `out.csv` -> `out.csv.manifest.json`.
pub fn manifest_path(artifact: impl AsRef<Path>) -> PathBuf {
    let p = artifact.as_ref();
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    p.with_file_name(format!("{name}.manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        // No temp litter left behind.
        let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }

    #[test]
    fn sha256_known_answer() {
        // Standard test vector for "abc".
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn csv_has_header_and_stable_order() {
        let body = csv_body(
            &["a", "b"],
            &[vec!["1".into(), "2".into()], vec!["3".into(), "4".into()]],
        );
        assert_eq!(body, "a,b\n1,2\n3,4\n");
    }

    #[test]
    fn manifest_roundtrip_and_path() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("report.csv");
        std::fs::write(&out, "h\n").unwrap();
        let mut m = RunManifest::new("test", serde_json::json!({"k": 1}), 7);
        m.record_output(&out).unwrap();
        let mpath = m.write_beside(&out).unwrap();
        assert_eq!(mpath, dir.path().join("report.csv.manifest.json"));
        let back: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
        assert_eq!(back.command, "test");
        assert_eq!(back.outputs[0].sha256, m.outputs[0].sha256);
    }
}
