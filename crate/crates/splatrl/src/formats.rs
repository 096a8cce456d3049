//! On-disk formats.
//!
//! * Scene: JSON with the raw optimizer parameters of every Gaussian
//!   (`log_scale`, `opacity_logit`), so a load reproduces the scene exactly.
//! * Cameras: JSON, one entry per camera with a world-to-camera `pose` as a
//!   3x4 row-major `[R | t]` and pinhole intrinsics.
//! * Targets: 16-bit RGB PNGs named `NNN.png` in camera order.
//! * Rendered images: 8-bit PNG or binary PPM, chosen by file extension.
//! * Checkpoint: the core's versioned binary run state.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{ImageBuffer, Rgb as Px};
use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use splatrl_core::sensitivity::View;
use splatrl_core::{Camera, Gaussian, GaussianId, Image, Scene};

pub const SCENE_VERSION: u32 = 1;
pub const CAMERA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianRecord {
    pub id: u64,
    pub position: [f64; 3],
    /// Quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub version: u32,
    pub extent: f64,
    pub background: [f64; 3],
    pub next_id: u64,
    pub gaussians: Vec<GaussianRecord>,
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        Self {
            version: SCENE_VERSION,
            extent: s.extent,
            background: s.background,
            next_id: s.next_id(),
            gaussians: s
                .gaussians
                .iter()
                .map(|g| GaussianRecord {
                    id: g.id.0,
                    position: g.position.into(),
                    rotation: g.rotation.into(),
                    log_scale: g.log_scale.into(),
                    opacity_logit: g.opacity_logit,
                    color: g.color.into(),
                })
                .collect(),
        }
    }
}

impl SceneFile {
    pub fn into_scene(self) -> Result<Scene> {
        if self.version != SCENE_VERSION {
            bail!(splatrl_core::Error::Decode(format!("scene file version {} (expected {SCENE_VERSION})", self.version)));
        }
        let gaussians = self
            .gaussians
            .into_iter()
            .map(|r| Gaussian {
                id: GaussianId(r.id),
                position: Vector3::from(r.position),
                rotation: Vector4::from(r.rotation),
                log_scale: Vector3::from(r.log_scale),
                opacity_logit: r.opacity_logit,
                color: Vector3::from(r.color),
            })
            .collect();
        Ok(Scene::with_ids(gaussians, self.extent, self.background, self.next_id)?)
    }
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    let text = serde_json::to_string_pretty(&SceneFile::from(scene))?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: SceneFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    file.into_scene()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    /// World-to-camera `[R | t]`, row-major.
    pub pose: [f64; 12],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub version: u32,
    pub cameras: Vec<CameraRecord>,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let mut pose = [0.0; 12];
        for r in 0..3 {
            for k in 0..3 {
                pose[4 * r + k] = c.rotation[(r, k)];
            }
            pose[4 * r + 3] = c.translation[r];
        }
        Self { width: c.width, height: c.height, fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, near: c.near, pose }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        let p = &self.pose;
        let rotation = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
        let translation = Vector3::new(p[3], p[7], p[11]);
        Ok(Camera::new(rotation, translation, (self.fx, self.fy), (self.cx, self.cy), (self.width, self.height), self.near)?)
    }
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let file = CameraFile { version: CAMERA_VERSION, cameras: cameras.iter().map(CameraRecord::from).collect() };
    fs::write(path, serde_json::to_string_pretty(&file)?).with_context(|| format!("writing {}", path.display()))
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: CameraFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if file.version != CAMERA_VERSION {
        bail!(splatrl_core::Error::Decode(format!("camera file version {} (expected {CAMERA_VERSION})", file.version)));
    }
    file.cameras.iter().map(CameraRecord::to_camera).collect()
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// Writes a 16-bit RGB PNG.
pub fn save_png16(path: &Path, img: &Image) -> Result<()> {
    let buf: ImageBuffer<Px<u16>, Vec<u16>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        Px(c.map(|v| quantize(v, 65535.0) as u16))
    });
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Writes an 8-bit image; the format follows the extension (`png`, `ppm`).
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    let buf: ImageBuffer<Px<u8>, Vec<u8>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        Px(c.map(|v| quantize(v, 255.0) as u8))
    });
    buf.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Reads any PNG or PPM into linear `[0, 1]` channels.
pub fn load_image(path: &Path) -> Result<Image> {
    let buf = image::open(path).with_context(|| format!("reading {}", path.display()))?.into_rgb16();
    let (w, h) = buf.dimensions();
    Ok(Image::from_fn(w as usize, h as usize, |x, y| buf.get_pixel(x as u32, y as u32).0.map(|v| v as f64 / 65535.0)))
}

pub fn target_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:03}.png"))
}

/// Loads cameras and their targets.
pub fn load_views(cameras: &Path, targets: &Path) -> Result<Vec<View>> {
    let cams = load_cameras(cameras)?;
    cams.into_iter()
        .enumerate()
        .map(|(i, camera)| {
            let target = load_image(&target_path(targets, i))?;
            if target.width != camera.width || target.height != camera.height {
                bail!(splatrl_core::Error::ShapeMismatch(format!(
                    "target {i} is {}x{}, camera is {}x{}",
                    target.width, target.height, camera.width, camera.height
                )));
            }
            Ok(View { camera, target })
        })
        .collect()
}

pub fn save_views(cameras: &Path, targets: &Path, views: &[View]) -> Result<()> {
    fs::create_dir_all(targets).with_context(|| format!("creating {}", targets.display()))?;
    let cams: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    save_cameras(cameras, &cams)?;
    for (i, v) in views.iter().enumerate() {
        save_png16(&target_path(targets, i), &v.target)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use splatrl_core::synth::{generate, RecipeKind, SceneRecipe};

    #[test]
    fn scene_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let syn = generate(&SceneRecipe::new(RecipeKind::Clutter, 2, 64)).unwrap();
        let p = dir.path().join("s.json");
        save_scene(&p, &syn.scene).unwrap();
        assert_eq!(load_scene(&p).unwrap(), syn.scene);
    }

    #[test]
    fn empty_scene_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = Scene::new(Vec::new(), Some(2.0), [0.1, 0.2, 0.3]).unwrap();
        let p = dir.path().join("e.json");
        save_scene(&p, &s).unwrap();
        assert_eq!(load_scene(&p).unwrap(), s);
    }

    #[test]
    fn cameras_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let syn = generate(&SceneRecipe::new(RecipeKind::FlatCard, 1, 64)).unwrap();
        let cams: Vec<Camera> = syn.views.iter().map(|v| v.camera.clone()).collect();
        let p = dir.path().join("c.json");
        save_cameras(&p, &cams).unwrap();
        assert_eq!(load_cameras(&p).unwrap(), cams);
    }

    #[test]
    fn png16_targets_are_close() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(20, 10, |x, y| [x as f64 / 19.0, y as f64 / 9.0, 0.3]);
        let p = dir.path().join("t.png");
        save_png16(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!((back.width, back.height), (20, 10));
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 65535.0 + 1e-12);
            }
        }
    }

    #[test]
    fn ppm_output_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(8, 8, [1.0, 0.0, 0.5]);
        let p = dir.path().join("o.ppm");
        save_image(&p, &img).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.get(3, 3)[0], 1.0);
    }

    #[test]
    fn wrong_version_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        fs::write(&p, r#"{"version":9,"extent":1,"background":[0,0,0],"next_id":0,"gaussians":[]}"#).unwrap();
        assert!(load_scene(&p).is_err());
    }
}
