use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const LOCK_NAME: &str = ".gcl4sr.lock";

/// Exclusive claim on an output directory, released on drop.
pub struct OutDir {
    dir: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let lock = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).with_context(|| format!("writing {}", lock.display()))?;
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => bail!(
                "{} is in use by another run; delete {} if no run is active",
                dir.display(),
                lock.display()
            ),
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        Ok(Self { dir: dir.to_path_buf(), lock })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
