//! Output directories that appear only once complete.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// A hidden sibling `.<name>.partial` directory, renamed to its final name
/// on [`Staged::commit`] and removed if dropped before that.
pub struct Staged {
    target: PathBuf,
    dir: PathBuf,
    committed: bool,
}

impl Staged {
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() {
            bail!("output directory {} already exists", target.display());
        }
        let name = target
            .file_name()
            .with_context(|| format!("output path {} has no directory name", target.display()))?;
        let dir = target.with_file_name(format!(".{}.partial", name.to_string_lossy()));
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("removing stale {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            target: target.to_path_buf(),
            dir,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn commit(mut self) -> Result<()> {
        fs::rename(&self.dir, &self.target)
            .with_context(|| format!("moving {} into place", self.target.display()))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}
