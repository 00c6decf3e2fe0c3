//! Run manifests and output-directory locking.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vad_core::{KvConfig, Result, VadError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".vad.lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub output: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// Output-relative path to SHA-256 hex digest.
    pub artifacts: BTreeMap<String, String>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, config: &KvConfig, seed: u64, inputs: &[&Path], output: &Path) -> Self {
        Self {
            command: command.to_string(),
            config: config.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            seed,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            output: output.display().to_string(),
            started_unix: unix_now(),
            finished_unix: 0.0,
            artifacts: BTreeMap::new(),
        }
    }

    /// Hashes every file under `dir`, stamps the end time and writes
    /// `manifest.json` through a rename.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        self.artifacts = checksums(dir)?;
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| VadError::Validation(format!("cannot encode manifest: {e}")))?;
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut f = fs::File::create(&tmp).map_err(|e| VadError::io(&tmp, e))?;
        f.write_all(text.as_bytes()).map_err(|e| VadError::io(&tmp, e))?;
        f.sync_all().map_err(|e| VadError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| VadError::io(&path, e))?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| VadError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| VadError::Validation(format!("{}: {e}", path.display())))
    }
}

/// SHA-256 of every regular file below `dir`, keyed by relative path.
/// The manifest and lock files are skipped.
pub fn checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| VadError::io(&d, e))? {
            let entry = entry.map_err(|e| VadError::io(&d, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == MANIFEST_FILE || name == LOCK_FILE || name.ends_with(".tmp") {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| VadError::io(&path, e))?;
            let rel = path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.insert(rel, format!("{:x}", Sha256::digest(&bytes)));
        }
    }
    Ok(out)
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| VadError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(VadError::Validation(format!(
                "{} is locked by another vad command (remove {} if that command is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(VadError::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn manifest_round_trip_with_checksums() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/a.txt"), b"abc").unwrap();
        let mut kv = KvConfig::default();
        kv.set("model.T", "9");
        let m = RunManifest::start("synth", &kv, 7, &[], dir.path()).finish(dir.path()).unwrap();
        assert_eq!(
            m.artifacts["sub/a.txt"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let back = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        assert!(!back.artifacts.contains_key(MANIFEST_FILE));
    }
}
