//! Datasets, the synthetic ground-truth scenes, mesh extraction and the
//! evaluation metrics.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! cameras.json   {"images": [{"file", "mask", "K", "W2C"}, ...], "scene_scale": s}
//! images/*.png   8-bit RGB, gamma 2.2
//! masks/*.png    8-bit gray, >127 is foreground
//! gt.json        optional ground truth (synthetic scenes only)
//! ```
//!
//! World coordinates are divided by `scene_scale` on load so the object
//! fits the unit sphere.

mod camera;
mod image;
mod mesh;
mod metrics;
mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use camera::Camera;
pub use image::{decode_channel, encode_channel, read_mask, read_png, write_mask, write_png, GAMMA};
pub use mesh::{export_ply, marching_cubes, ply_string, read_ply, sample_mesh, MaterialMesh, VertexMaterial};
pub use metrics::{chamfer_brute_force, chamfer_distance, psnr, PSNR_CAP};
pub use synthetic::{make_synthetic, view_positions, GroundTruth, Shape, SyntheticSpec};

use crate::Error;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub cameras: Vec<Camera>,
    /// Linear RGB in `[0, 1]`, row-major per image.
    pub images: Vec<Vec<[f64; 3]>>,
    pub masks: Vec<Vec<bool>>,
    pub scene_scale: f64,
    pub ground_truth: Option<GroundTruth>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    images: Vec<CameraEntry>,
    scene_scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraEntry {
    file: String,
    mask: String,
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "W2C")]
    w2c: [f64; 12],
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Views used for validation: `holdout` if given, else the last view.
    pub fn holdout(&self, holdout: &[usize]) -> Vec<usize> {
        if holdout.is_empty() {
            vec![self.len().saturating_sub(1)]
        } else {
            holdout.to_vec()
        }
    }

    /// Views used for training: all views not held out. With a single view
    /// that view is used for both.
    pub fn training_views(&self, holdout: &[usize]) -> Vec<usize> {
        let held = self.holdout(holdout);
        let views: Vec<usize> = (0..self.len()).filter(|i| !held.contains(i)).collect();
        if views.is_empty() {
            (0..self.len()).collect()
        } else {
            views
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.is_empty() {
            return Err(Error::Data("dataset has no views".into()));
        }
        if self.images.len() != self.cameras.len() || self.masks.len() != self.cameras.len() {
            return Err(Error::Data(format!(
                "{} cameras, {} images, {} masks",
                self.cameras.len(),
                self.images.len(),
                self.masks.len()
            )));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.validate().map_err(|e| Error::Data(format!("view {i}: {e}")))?;
            let n = cam.width * cam.height;
            if self.images[i].len() != n || self.masks[i].len() != n {
                return Err(Error::Data(format!("view {i}: image or mask size differs from the camera")));
            }
        }
        if !(self.scene_scale > 0.0 && self.scene_scale.is_finite()) {
            return Err(Error::Data(format!("scene_scale {} must be positive", self.scene_scale)));
        }
        Ok(())
    }

    /// Writes the dataset in the documented layout, in normalized
    /// coordinates (`scene_scale` is written as stored).
    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        self.validate()?;
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        let mut entries = Vec::new();
        for (i, cam) in self.cameras.iter().enumerate() {
            let file = format!("images/{i:03}.png");
            let mask = format!("masks/{i:03}.png");
            write_png(&dir.join(&file), cam.width, cam.height, &self.images[i], true)?;
            write_mask(&dir.join(&mask), cam.width, cam.height, &self.masks[i])?;
            let world = cam.rescaled(1.0 / self.scene_scale);
            entries.push(CameraEntry { file, mask, k: world.k, w2c: world.w2c });
        }
        let cameras = CameraFile { images: entries, scene_scale: self.scene_scale };
        std::fs::write(dir.join("cameras.json"), to_json(&cameras)?)?;
        if let Some(gt) = &self.ground_truth {
            std::fs::write(dir.join("gt.json"), to_json(gt)?)?;
        }
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String, Error> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Data(e.to_string()))
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset, Error> {
    let path = dir.join("cameras.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let file: CameraFile = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut cameras = Vec::new();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for entry in &file.images {
        let (w, h, img) = read_png(&dir.join(&entry.file))?;
        let (mw, mh, mask) = read_mask(&dir.join(&entry.mask))?;
        if (mw, mh) != (w, h) {
            return Err(Error::Data(format!("{}: mask is {mw}x{mh}, image is {w}x{h}", entry.mask)));
        }
        let cam = Camera { k: entry.k, w2c: entry.w2c, width: w, height: h };
        cameras.push(cam.rescaled(file.scene_scale));
        images.push(img);
        masks.push(mask);
    }
    let gt_path = dir.join("gt.json");
    let ground_truth = if gt_path.exists() {
        let text = std::fs::read_to_string(&gt_path)?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", gt_path.display())))?)
    } else {
        None
    };
    let data = SceneDataset { cameras, images, masks, scene_scale: file.scene_scale, ground_truth };
    data.validate()?;
    Ok(data)
}
