//! Output directories: one invocation owns a directory for its lifetime.

use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ToolConfig;
use crate::failure::Failure;

const LOCK_FILE: &str = ".psgtool.lock";
pub const SNAPSHOT_FILE: &str = "config.toml";

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `path` if needed and takes its lock, failing if another
    /// invocation holds it.
    pub fn acquire(path: &Path) -> Result<Self, Failure> {
        fs::create_dir_all(path).map_err(|e| Failure::usage(format!("cannot create {}: {e}", path.display())))?;
        match OpenOptions::new().write(true).create_new(true).open(path.join(LOCK_FILE)) {
            Ok(_) => Ok(Self { path: path.to_path_buf() }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Failure::usage(format!(
                "{} is in use by another psgtool run (delete {LOCK_FILE} there if that run is gone)",
                path.display()
            ))),
            Err(e) => Err(Failure::usage(format!("cannot lock {}: {e}", path.display()))),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn snapshot(&self, cfg: &ToolConfig, command: &str) -> Result<(), Failure> {
        fs::write(self.file(SNAPSHOT_FILE), cfg.to_toml(command)?)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.file(name), text)?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunDir::acquire(dir.path()).unwrap();
        assert_eq!(RunDir::acquire(dir.path()).err().unwrap().code, 2);
        drop(first);
        assert!(RunDir::acquire(dir.path()).is_ok());
    }
}
