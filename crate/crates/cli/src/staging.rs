//! Write-then-rename helpers so an aborted command leaves nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use tempfile::{NamedTempFile, TempDir};

use crate::error::{CliError, CliResult};

fn parent_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Checks that `out` can become a fresh output directory: it must be
/// absent or empty, and its parent must exist.
pub fn check_out_dir(out: &Path) -> CliResult<()> {
    if out.exists() {
        let empty = out.is_dir() && fs::read_dir(out)?.next().is_none();
        if !empty {
            return Err(CliError::data(format!("{} exists and is not an empty directory", out.display())));
        }
    }
    let parent = parent_of(out);
    if !parent.is_dir() {
        return Err(CliError::data(format!("output parent {} does not exist", parent.display())));
    }
    Ok(())
}

/// A directory filled in place of `out` and moved there by [`StagedDir::commit`].
/// Dropping it uncommitted deletes everything written so far.
pub struct StagedDir {
    tmp: TempDir,
    out: PathBuf,
}

impl StagedDir {
    pub fn new(out: &Path) -> CliResult<Self> {
        check_out_dir(out)?;
        let tmp = tempfile::Builder::new()
            .prefix(".nerf-poison-staging-")
            .tempdir_in(parent_of(out))?;
        Ok(StagedDir { tmp, out: out.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        self.tmp.path()
    }

    pub fn commit(self) -> CliResult<()> {
        if self.out.is_dir() {
            fs::remove_dir(&self.out)?;
        }
        let staged = self.tmp.keep();
        fs::rename(&staged, &self.out).map_err(|e| {
            let _ = fs::remove_dir_all(&staged);
            CliError::data(format!("moving outputs to {}: {e}", self.out.display()))
        })
    }
}

/// Staged single files, committed together.
pub struct StagedFiles {
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl StagedFiles {
    pub fn new() -> Self {
        StagedFiles { files: Vec::new() }
    }

    pub fn add(&mut self, out: &Path, bytes: &[u8]) -> CliResult<()> {
        use std::io::Write;
        let parent = parent_of(out);
        if !parent.is_dir() {
            return Err(CliError::data(format!("output parent {} does not exist", parent.display())));
        }
        if out.is_dir() {
            return Err(CliError::data(format!("{} is a directory", out.display())));
        }
        let mut tmp = tempfile::Builder::new().prefix(".nerf-poison-").tempfile_in(parent)?;
        tmp.write_all(bytes)?;
        self.files.push((tmp, out.to_path_buf()));
        Ok(())
    }

    pub fn commit(self) -> CliResult<()> {
        for (tmp, out) in self.files {
            tmp.persist(&out)
                .map_err(|e| CliError::data(format!("writing {}: {}", out.display(), e.error)))?;
        }
        Ok(())
    }
}
