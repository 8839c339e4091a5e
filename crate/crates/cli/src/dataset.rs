//! On-disk dataset layout.
//!
//! ```text
//! <dir>/images/view_000.png ...  every view, training and held-out
//! <dir>/poses.json               training frames
//! <dir>/poses_heldout.json       held-out frames (optional)
//! <dir>/gt_field.ckpt            ground-truth field (synthetic scenes)
//! ```
//!
//! Frame `file` entries are relative to the dataset directory.

use std::path::{Path, PathBuf};

use nerf_poison::imaging::{load_png, Image};
use nerf_poison::scene::{load_poses, Camera, PoseFrame};

use crate::error::{CliError, CliResult};

pub const IMAGES_DIR: &str = "images";
pub const POSES_FILE: &str = "poses.json";
pub const HELDOUT_POSES_FILE: &str = "poses_heldout.json";
pub const GT_FIELD_FILE: &str = "gt_field.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub train: Vec<PoseFrame>,
    pub heldout: Vec<PoseFrame>,
}

impl Dataset {
    pub fn open(dir: &Path) -> CliResult<Self> {
        if !dir.is_dir() {
            return Err(CliError::data(format!("dataset {} is not a directory", dir.display())));
        }
        let poses = dir.join(POSES_FILE);
        if !poses.is_file() {
            return Err(CliError::data(format!("missing poses: {}", poses.display())));
        }
        let train = load_poses(&poses)?;
        let heldout_path = dir.join(HELDOUT_POSES_FILE);
        let heldout = if heldout_path.is_file() {
            load_poses(&heldout_path)?
        } else {
            Vec::new()
        };
        Ok(Dataset { dir: dir.to_path_buf(), train, heldout })
    }

    pub fn frames(&self, split: Split) -> &[PoseFrame] {
        match split {
            Split::Train => &self.train,
            Split::Heldout => &self.heldout,
        }
    }

    pub fn cameras(&self, split: Split) -> Vec<Camera> {
        self.frames(split).iter().map(|f| f.camera.clone()).collect()
    }

    /// Images of a split. With `override_dir`, each frame's image is taken
    /// from that directory by file name instead.
    pub fn images(&self, split: Split, override_dir: Option<&Path>) -> CliResult<Vec<Image>> {
        self.frames(split)
            .iter()
            .map(|f| {
                let path = self.image_path(f, override_dir)?;
                let img = load_png(&path)?;
                if img.width() != f.camera.width || img.height() != f.camera.height {
                    return Err(CliError::data(format!(
                        "{} is {}x{} but its camera is {}x{}",
                        path.display(),
                        img.width(),
                        img.height(),
                        f.camera.width,
                        f.camera.height
                    )));
                }
                Ok(img)
            })
            .collect()
    }

    pub fn image_path(&self, frame: &PoseFrame, override_dir: Option<&Path>) -> CliResult<PathBuf> {
        match override_dir {
            None => Ok(self.dir.join(&frame.file)),
            Some(d) => {
                let name = Path::new(&frame.file)
                    .file_name()
                    .ok_or_else(|| CliError::data(format!("frame file `{}` has no file name", frame.file)))?;
                Ok(d.join(name))
            }
        }
    }
}

/// View label used in metric tables: the image file stem.
pub fn view_name(frame: &PoseFrame) -> String {
    Path::new(&frame.file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| frame.file.clone())
}

pub fn image_file_name(index: usize) -> String {
    format!("view_{index:03}.png")
}
