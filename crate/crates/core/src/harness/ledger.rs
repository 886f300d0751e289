//! Append-only JSONL ledger of completed pipeline stages.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    /// Method name, or empty for dataset-level stages.
    pub method: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Artifact paths relative to the run directory.
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub summary: serde_json::Value,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub struct Ledger {
    path: PathBuf,
    root: PathBuf,
}

impl Ledger {
    pub fn new(run_dir: &Path) -> Self {
        Self {
            path: run_dir.join("ledger.jsonl"),
            root: run_dir.to_path_buf(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> Result<Vec<RunRecord>> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        file.lock_shared()?;
        let mut out = Vec::new();
        for line in BufReader::new(&file).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    /// The most recent record of `stage` with this hash whose artifacts all exist.
    pub fn completed(&self, stage: &str, config_hash: &str) -> Result<Option<RunRecord>> {
        Ok(self
            .records()?
            .into_iter()
            .rev()
            .find(|r| r.stage == stage && r.config_hash == config_hash && r.artifacts.iter().all(|a| self.root.join(a).exists())))
    }

    pub fn append(&self, record: &RunRecord) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
        file.lock()?;
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        file.write_all(&line)?;
        file.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(stage: &str, hash: &str, artifacts: Vec<String>) -> RunRecord {
        RunRecord {
            stage: stage.into(),
            method: "msvcl".into(),
            seed: Some(1),
            config_hash: hash.into(),
            started_unix: 1,
            finished_unix: 2,
            artifacts,
            summary: serde_json::Value::Null,
        }
    }

    #[test]
    fn completed_requires_matching_hash_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let l = Ledger::new(dir.path());
        assert!(l.records().unwrap().is_empty());
        std::fs::write(dir.path().join("a.bin"), b"x").unwrap();
        l.append(&record("pretrain", "h1", vec!["a.bin".into()])).unwrap();
        l.append(&record("pretrain", "h2", vec!["missing.bin".into()])).unwrap();
        assert_eq!(l.records().unwrap().len(), 2);
        assert!(l.completed("pretrain", "h1").unwrap().is_some());
        assert!(l.completed("pretrain", "h2").unwrap().is_none());
        assert!(l.completed("finetune", "h1").unwrap().is_none());
    }

    #[test]
    fn concurrent_appends_keep_lines_intact() {
        let dir = tempfile::tempdir().unwrap();
        std::thread::scope(|s| {
            for t in 0..4 {
                let root = dir.path().to_path_buf();
                s.spawn(move || {
                    let l = Ledger::new(&root);
                    for i in 0..25 {
                        l.append(&record("x", &format!("{t}-{i}"), vec![])).unwrap();
                    }
                });
            }
        });
        assert_eq!(Ledger::new(dir.path()).records().unwrap().len(), 100);
    }
}
