//! Run manifest (per-stage artifacts with hashes) and the output-directory
//! lock.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use memgen_core::model::{file_sha256, sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::Stage;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".memgen.lock";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash over the stage's settings and its upstream artifacts.
    pub input_hash: String,
    pub artifacts: BTreeMap<String, ArtifactRecord>,
    pub completed_at: String,
    pub tool_version: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn load_or_default(out: &Path) -> CliResult<Self> {
        let path = out.join(MANIFEST_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(RunManifest::default()),
            Err(e) => Err(CliError::io(path, e)),
        }
    }

    pub fn save(&self, out: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }

    /// The stage's record, with every artifact re-hashed against the disk.
    pub fn verified(&self, out: &Path, stage: Stage) -> CliResult<&StageRecord> {
        let rec = self
            .stages
            .get(&stage)
            .ok_or_else(|| CliError::StaleArtifact(format!("stage {} has not run in {}", stage.name(), out.display())))?;
        for (key, a) in &rec.artifacts {
            let path = out.join(&a.path);
            if !path.exists() {
                return Err(CliError::StaleArtifact(format!("{} artifact {key} missing at {}", stage.name(), path.display())));
            }
            if file_sha256(&path)? != a.sha256 {
                return Err(CliError::StaleArtifact(format!("{} artifact {key} at {} changed since it was recorded", stage.name(), path.display())));
            }
        }
        Ok(rec)
    }

    /// Absolute path of a verified stage artifact.
    pub fn artifact(&self, out: &Path, stage: Stage, key: &str) -> CliResult<PathBuf> {
        let rec = self.verified(out, stage)?;
        let a = rec
            .artifacts
            .get(key)
            .ok_or_else(|| CliError::StaleArtifact(format!("{} has no artifact {key}", stage.name())))?;
        Ok(out.join(&a.path))
    }

    /// Artifact hashes of a verified stage, keyed by artifact name.
    pub fn hashes(&self, out: &Path, stage: Stage) -> CliResult<BTreeMap<String, String>> {
        let rec = self.verified(out, stage)?;
        Ok(rec.artifacts.iter().map(|(k, a)| (k.clone(), a.sha256.clone())).collect())
    }

    /// True when the stage ran with the same inputs and its artifacts still
    /// verify.
    pub fn is_current(&self, out: &Path, stage: Stage, input_hash: &str) -> bool {
        self.stages.get(&stage).is_some_and(|r| r.input_hash == input_hash) && self.verified(out, stage).is_ok()
    }

    /// Records a finished stage; downstream stages are dropped since their
    /// inputs may have changed.
    pub fn record(&mut self, out: &Path, stage: Stage, input_hash: String, artifacts: &[(&str, PathBuf)]) -> CliResult<()> {
        let mut map = BTreeMap::new();
        for (key, path) in artifacts {
            let rel = path.strip_prefix(out).unwrap_or(path).to_string_lossy().replace('\\', "/");
            let bytes = std::fs::metadata(path).map_err(|e| CliError::io(path, e))?.len();
            map.insert(key.to_string(), ArtifactRecord { path: rel, sha256: file_sha256(path)?, bytes });
        }
        self.stages.retain(|s, _| *s < stage);
        self.stages.insert(
            stage,
            StageRecord {
                input_hash,
                artifacts: map,
                completed_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
            },
        );
        Ok(())
    }

    /// The manifest with timestamps removed, for run-to-run comparison.
    pub fn without_timestamps(&self) -> RunManifest {
        let mut m = self.clone();
        for r in m.stages.values_mut() {
            r.completed_at.clear();
        }
        m
    }
}

/// Hash of a stage's settings and the artifact hashes it consumes.
pub fn input_hash(stage: Stage, settings: &Value, upstream: &BTreeMap<String, BTreeMap<String, String>>) -> CliResult<String> {
    let doc = serde_json::json!({ "stage": stage.name(), "settings": settings, "upstream": upstream });
    Ok(sha256_hex(serde_json::to_string(&doc)?.as_bytes()))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let path = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                std::fs::write(&path, std::process::id().to_string()).map_err(|e| CliError::io(&path, e))?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(CliError::io(path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_until_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        let err = DirLock::acquire(dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Locked(_)));
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn tampered_artifact_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let f = out.join("a.txt");
        std::fs::write(&f, "one").unwrap();
        let mut m = RunManifest::default();
        m.record(out, Stage::Capture, "h".into(), &[("pairs", f.clone())]).unwrap();
        assert!(m.is_current(out, Stage::Capture, "h"));
        assert!(!m.is_current(out, Stage::Capture, "other"));
        std::fs::write(&f, "two").unwrap();
        let err = m.verified(out, Stage::Capture).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let err = m.verified(out, Stage::Analyze).unwrap_err();
        assert!(matches!(err, CliError::StaleArtifact(_)));
    }

    #[test]
    fn rerunning_a_stage_drops_downstream_records() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let f = out.join("x");
        std::fs::write(&f, "x").unwrap();
        let mut m = RunManifest::default();
        for s in [Stage::Datagen, Stage::Train, Stage::Capture] {
            m.record(out, s, "h".into(), &[("x", f.clone())]).unwrap();
        }
        m.record(out, Stage::Train, "h2".into(), &[("x", f.clone())]).unwrap();
        assert_eq!(m.stages.keys().copied().collect::<Vec<_>>(), vec![Stage::Datagen, Stage::Train]);
        m.save(out).unwrap();
        assert_eq!(RunManifest::load_or_default(out).unwrap(), m);
    }
}
