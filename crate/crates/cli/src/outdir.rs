use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use crate::CliError;

pub const CHECKPOINTS: &str = "checkpoints";
pub const LOGS: &str = "logs";
pub const PREDICTIONS: &str = "predictions";
pub const REPORTS: &str = "reports";
pub const FIGURES: &str = "figures";
pub const LOCK: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    /// Creates `root` if needed and takes its lock file.
    pub fn acquire(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::runtime(format!("creating {}: {e}", root.display())))?;
        let path = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(Self { path, _file: file }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::input(format!(
                "{} is locked by another command (remove {} if no command is running)",
                root.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::runtime(format!("creating {}: {e}", path.display()))),
        }
    }

    /// Creates (if needed) and returns `root/name`.
    pub fn subdir(&self, name: &str) -> Result<PathBuf, CliError> {
        let dir = self.path.parent().expect("lock lives in a directory").join(name);
        fs::create_dir_all(&dir).map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))?;
        Ok(dir)
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}
