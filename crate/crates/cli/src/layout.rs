use std::fs;
use std::path::{Path, PathBuf};

use lungseg::Error;

/// Fixed directory layout under `--out`.
#[derive(Clone, Debug)]
pub struct OutLayout {
    pub root: PathBuf,
    pub predictions: PathBuf,
    pub reports: PathBuf,
    pub checkpoints: PathBuf,
    pub history: PathBuf,
}

impl OutLayout {
    pub fn new(root: &Path) -> Self {
        OutLayout {
            root: root.to_path_buf(),
            predictions: root.join("predictions"),
            reports: root.join("reports"),
            checkpoints: root.join("checkpoints"),
            history: root.join("history.jsonl"),
        }
    }

    pub fn create(root: &Path) -> Result<Self, Error> {
        let l = OutLayout::new(root);
        for dir in [&l.root, &l.predictions, &l.reports, &l.checkpoints] {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(l)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports.join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints.join(name)
    }
}
