//! On-disk layout of a service data directory.

use std::fs;
use std::path::{Path, PathBuf};

use palign::Result;

/// Environment variable naming the data directory root.
pub const DATA_DIR_ENV: &str = "PALIGN_DATA_DIR";

const SUBDIRS: [&str; 7] = ["datasets", "checkpoints", "annotations", "jobs", "curves", "reports", "staging"];

#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    /// Opens `root`, creating the standard subdirectories.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for d in SUBDIRS {
            fs::create_dir_all(root.join(d))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    /// Open-domain dialog pairs for phase 1.
    pub fn base_dataset(&self) -> PathBuf {
        self.root.join("datasets/base.jsonl")
    }

    /// Closed-domain pairs for phase 2; also the gold answers merged into
    /// exported preferences.
    pub fn gold_dataset(&self) -> PathBuf {
        self.root.join("datasets/gold.jsonl")
    }

    pub fn preferences(&self) -> PathBuf {
        self.root.join("datasets/preferences.jsonl")
    }

    pub fn phase1_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/phase1.paln")
    }

    /// The aligned model the chat endpoint serves.
    pub fn lm_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/lm.paln")
    }

    pub fn reward_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints/reward.paln")
    }

    pub fn tasks(&self) -> PathBuf {
        self.root.join("annotations/tasks.jsonl")
    }

    pub fn ratings(&self) -> PathBuf {
        self.root.join("annotations/ratings.jsonl")
    }

    pub fn jobs(&self) -> PathBuf {
        self.root.join("jobs")
    }

    pub fn curve(&self, name: &str) -> PathBuf {
        self.root.join("curves").join(format!("{name}.csv"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    /// Scratch space for a job; its files are moved into place only on success.
    pub fn staging(&self, job_id: &str) -> PathBuf {
        self.root.join("staging").join(job_id)
    }

    /// Drops staging leftovers of interrupted jobs.
    pub fn clear_staging(&self) -> Result<()> {
        let dir = self.root.join("staging");
        fs::remove_dir_all(&dir)?;
        fs::create_dir_all(&dir)?;
        Ok(())
    }
}

/// Moves `from` over `to` with a rename, so readers see the old file or the
/// new one and never a partial write.
pub fn promote(from: &Path, to: &Path) -> Result<()> {
    if let Some(parent) = to.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::rename(from, to)?;
    Ok(())
}
