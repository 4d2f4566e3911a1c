//! Atomic file output: everything is staged in memory and written through a
//! temp-file rename, so a failing run leaves no truncated artifacts behind.

use std::path::{Path, PathBuf};

use cil_core::Result;

#[derive(Default)]
pub struct OutputSet {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl OutputSet {
    pub fn add(&mut self, name: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn add_json<T: serde::Serialize>(&mut self, name: impl Into<PathBuf>, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    /// Write every staged file under `dir` via write-to-temp + rename.
    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in self.files {
            let target = dir.join(&name);
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let tmp = target.with_extension(format!(
                "{}.tmp-{}",
                target.extension().and_then(|e| e.to_str()).unwrap_or(""),
                std::process::id()
            ));
            std::fs::write(&tmp, &bytes)?;
            std::fs::rename(&tmp, &target)?;
            written.push(target);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_writes_all_or_stages_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputSet::default();
        out.add("a.csv", b"x,y\n".to_vec());
        out.add_json("b.json", &serde_json::json!({"k": 1})).unwrap();
        let written = out.commit(dir.path()).unwrap();
        assert_eq!(written.len(), 2);
        assert!(dir.path().join("a.csv").exists());
        let listing: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(listing.len(), 2, "no temp files left behind: {listing:?}");
    }
}
