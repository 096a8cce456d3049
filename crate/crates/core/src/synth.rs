//! Seeded synthetic scenes. Targets are rendered from the ground-truth
//! scene with this crate's own rasterizer, so an exact fit always exists.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use nalgebra::{Vector2, Vector3, Vector4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::projection::{project, FlatScene, Gaussian2d};
use crate::raster::{render, RenderOptions};
use crate::scene::{logit, Camera, Gaussian, GaussianId, Scene};
use crate::sensitivity::View;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecipeKind {
    /// High-frequency color checker of small Gaussians on a card.
    TextureGrid,
    /// A handful of large, smooth Gaussians on a card.
    FlatCard,
    /// A cloud of Gaussians, each repeated several times with slight offsets.
    Clutter,
}

impl RecipeKind {
    pub const ALL: [RecipeKind; 3] = [RecipeKind::TextureGrid, RecipeKind::FlatCard, RecipeKind::Clutter];

    pub fn name(self) -> &'static str {
        match self {
            RecipeKind::TextureGrid => "texture-grid",
            RecipeKind::FlatCard => "flat-card",
            RecipeKind::Clutter => "clutter",
        }
    }
}

impl fmt::Display for RecipeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecipeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::UnknownRecipe(String::from(s)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecipe {
    pub kind: RecipeKind,
    pub seed: u64,
    /// Square image side in pixels.
    pub resolution: usize,
    pub cameras: usize,
    /// Grid side (texture-grid), blob count (flat-card) or base count
    /// before repetition (clutter).
    pub count: usize,
    /// Checker cells per grid side (texture-grid only).
    pub checker_cells: usize,
    /// Copies of each base Gaussian (clutter only).
    pub redundancy: usize,
    pub camera_radius: f64,
}

impl SceneRecipe {
    pub fn new(kind: RecipeKind, seed: u64, resolution: usize) -> Self {
        let (count, cameras) = match kind {
            RecipeKind::TextureGrid => (32, 12),
            RecipeKind::FlatCard => (48, 12),
            RecipeKind::Clutter => (160, 16),
        };
        Self { kind, seed, resolution, cameras, count, checker_cells: 8, redundancy: 3, camera_radius: 3.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(64..=128).contains(&self.resolution) {
            return Err(Error::Validation(format!("resolution {} outside 64..=128", self.resolution)));
        }
        if !(8..=24).contains(&self.cameras) {
            return Err(Error::Validation(format!("{} cameras outside 8..=24", self.cameras)));
        }
        if self.count == 0 || self.redundancy == 0 || self.checker_cells == 0 {
            return Err(Error::Validation("recipe counts must be positive".into()));
        }
        if !(self.camera_radius > 1.5) {
            return Err(Error::Validation("camera radius must exceed 1.5".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub recipe: SceneRecipe,
    pub scene: Scene,
    pub views: Vec<View>,
}

fn hsv(h: f64, s: f64, v: f64) -> Vector3<f64> {
    let h6 = (h - libm::floor(h)) * 6.0;
    let f = h6 - libm::floor(h6);
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as u32 {
        0 => Vector3::new(v, t, p),
        1 => Vector3::new(q, v, p),
        2 => Vector3::new(p, v, t),
        3 => Vector3::new(p, q, v),
        4 => Vector3::new(t, p, v),
        _ => Vector3::new(v, p, q),
    }
}

fn random_quat(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    let q: Vector4<f64> = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
    q / q.norm()
}

/// Cameras on a frontal arc (cards) or a full ring (clutter), all looking at
/// the origin, with the focal length chosen so a 2.4-unit wide region at the
/// ring radius fills the frame.
fn ring(recipe: &SceneRecipe, full: bool) -> Result<Vec<Camera>> {
    let n = recipe.cameras;
    let r = recipe.camera_radius;
    let focal = recipe.resolution as f64 / 2.0 * r / 1.2;
    (0..n)
        .map(|k| {
            let u = (k as f64 + 0.5) / n as f64;
            let (az, el) = if full {
                (u * 2.0 * core::f64::consts::PI, 0.35 * libm::sin(6.0 * core::f64::consts::PI * u))
            } else {
                ((u - 0.5) * 1.2, 0.25 * libm::sin(4.0 * core::f64::consts::PI * u))
            };
            let eye = Vector3::new(r * libm::cos(el) * libm::sin(az), r * libm::sin(el), -r * libm::cos(el) * libm::cos(az));
            Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), focal, recipe.resolution, recipe.resolution)
        })
        .collect()
}

fn texture_grid(recipe: &SceneRecipe, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let n = recipe.count;
    let spacing = 2.0 / n as f64;
    let cells = recipe.checker_cells;
    let palette: Vec<Vector3<f64>> = (0..cells * cells).map(|_| hsv(rng.random(), rng.random_range(0.5..1.0), rng.random_range(0.6..1.0))).collect();
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let (ci, cj) = (i * cells / n, j * cells / n);
            let base = palette[cj * cells + ci];
            let color = if (i + j) % 2 == 0 { base } else { base * 0.25 };
            let pos = Vector3::new(-1.0 + spacing * (i as f64 + 0.5), -1.0 + spacing * (j as f64 + 0.5), 0.0);
            out.push(Gaussian::new(
                pos,
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                Vector3::new(0.5 * spacing, 0.5 * spacing, 0.1 * spacing),
                0.95,
                color,
            ));
        }
    }
    out
}

fn flat_card(recipe: &SceneRecipe, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    (0..recipe.count)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..core::f64::consts::PI);
            let q = Vector4::new(libm::cos(angle / 2.0), 0.0, 0.0, libm::sin(angle / 2.0));
            Gaussian::new(
                Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.05..0.05)),
                q,
                Vector3::new(rng.random_range(0.1..0.3), rng.random_range(0.08..0.2), 0.02),
                rng.random_range(0.6..0.95),
                hsv(rng.random(), rng.random_range(0.3..0.9), rng.random_range(0.5..1.0)),
            )
        })
        .collect()
}

fn clutter(recipe: &SceneRecipe, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let mut out = Vec::with_capacity(recipe.count * recipe.redundancy);
    for _ in 0..recipe.count {
        let dir: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let radius = 0.8 * libm::cbrt(rng.random::<f64>());
        let center = dir / dir.norm() * radius;
        let q = random_quat(rng);
        let s = Vector3::new(rng.random_range(0.04..0.12), rng.random_range(0.04..0.12), rng.random_range(0.04..0.12));
        let color = hsv(rng.random(), rng.random_range(0.4..1.0), rng.random_range(0.5..1.0));
        let opacity: f64 = rng.random_range(0.5..0.9);
        // copies share the opacity so that together they reach the base value
        let each = 1.0 - libm::pow(1.0 - opacity, 1.0 / recipe.redundancy as f64);
        for _ in 0..recipe.redundancy {
            let jitter: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
            out.push(Gaussian::new(center + jitter * 0.01, q, s, each, color));
        }
    }
    out
}

/// Builds the ground-truth scene and renders one target per camera.
pub fn generate(recipe: &SceneRecipe) -> Result<Synthetic> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let (gaussians, full_ring) = match recipe.kind {
        RecipeKind::TextureGrid => (texture_grid(recipe, &mut rng), false),
        RecipeKind::FlatCard => (flat_card(recipe, &mut rng), false),
        RecipeKind::Clutter => (clutter(recipe, &mut rng), true),
    };
    let scene = Scene::new(gaussians, Some(1.0), [0.0; 3])?;
    let views = ring(recipe, full_ring)?
        .into_iter()
        .map(|camera| {
            let splats = project(&scene, &camera);
            let target = render(&splats, camera.width, camera.height, scene.background, RenderOptions::default()).image;
            View { camera, target }
        })
        .collect();
    Ok(Synthetic { recipe: recipe.clone(), scene, views })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Degrade {
    /// Keep a seeded random `fraction` of the Gaussians (at least one).
    Sparse { fraction: f64 },
    /// Add Gaussian noise to positions (in units of the extent) and colors.
    Jitter { position: f64, color: f64 },
}

impl Degrade {
    pub const SPARSE: Degrade = Degrade::Sparse { fraction: 0.1 };
}

/// Derives an initialization from a ground-truth scene. The result gets
/// fresh ids `0..n` in the kept order.
pub fn degrade(scene: &Scene, mode: Degrade, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = match mode {
        Degrade::Sparse { fraction } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Validation(format!("sparse fraction {fraction} outside (0, 1]")));
            }
            let keep = (libm::round(scene.len() as f64 * fraction) as usize).clamp(1.min(scene.len()), scene.len());
            let mut idx = sample(&mut rng, scene.len(), keep).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| scene.gaussians[i].clone()).collect()
        }
        Degrade::Jitter { position, color } => scene
            .gaussians
            .iter()
            .map(|g| {
                let mut g = g.clone();
                let dp: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let dc: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                g.position += dp * (position * scene.extent);
                g.color = (g.color + dc * color).map(|c| c.clamp(0.0, 1.0));
                g
            })
            .collect(),
    };
    Scene::new(gaussians, Some(scene.extent), scene.background)
}

/// Screen-space stack of `n` random splats over a `size` x `size` image,
/// with a random background; used by the leave-one-out checks.
pub fn random_stack(seed: u64, n: usize, size: usize) -> FlatScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = size as f64 / 2.0;
    let spread = size as f64 / 4.0;
    let splats = (0..n)
        .map(|i| Gaussian2d {
            id: GaussianId(i as u64),
            mean: Vector2::new(c + rng.random_range(-spread..spread), c + rng.random_range(-spread..spread)),
            log_scale: Vector2::new(
                libm::log(size as f64 * rng.random_range(0.1..0.6)),
                libm::log(size as f64 * rng.random_range(0.1..0.6)),
            ),
            angle: rng.random_range(0.0..core::f64::consts::PI),
            opacity_logit: logit(rng.random_range(0.002..0.999)),
            color: [rng.random(), rng.random(), rng.random()],
            depth: rng.random_range(1.0..10.0),
        })
        .collect();
    FlatScene { splats, background: [rng.random(), rng.random(), rng.random()] }
}

/// `n` translucent splats wide enough to cover every pixel of a `size` x
/// `size` image, so each pixel has exactly `n` contributors.
pub fn uniform_stack(seed: u64, n: usize, size: usize) -> FlatScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = size as f64 / 2.0;
    let splats = (0..n)
        .map(|i| Gaussian2d {
            id: GaussianId(i as u64),
            mean: Vector2::new(c + rng.random_range(-1.0..1.0), c + rng.random_range(-1.0..1.0)),
            log_scale: Vector2::new(libm::log(size as f64 * 8.0), libm::log(size as f64 * 8.0)),
            angle: 0.0,
            opacity_logit: logit(rng.random_range(0.02..0.06)),
            color: [rng.random(), rng.random(), rng.random()],
            depth: rng.random_range(1.0..10.0),
        })
        .collect();
    FlatScene { splats, background: [rng.random(), rng.random(), rng.random()] }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    #[test]
    fn names_round_trip() {
        for k in RecipeKind::ALL {
            assert_eq!(k.name().parse::<RecipeKind>().unwrap(), k);
        }
        assert!(matches!("nope".parse::<RecipeKind>(), Err(Error::UnknownRecipe(_))));
    }

    #[test]
    fn clutter_repeats_each_gaussian() {
        let mut r = SceneRecipe::new(RecipeKind::Clutter, 1, 64);
        r.count = 20;
        r.redundancy = 3;
        assert_eq!(generate(&r).unwrap().scene.len(), 60);
    }

    #[test]
    fn jitter_of_zero_is_identity() {
        let s = generate(&SceneRecipe::new(RecipeKind::FlatCard, 3, 64)).unwrap().scene;
        assert_eq!(degrade(&s, Degrade::Jitter { position: 0.0, color: 0.0 }, 5).unwrap(), s);
    }

    #[test]
    fn sparse_keeps_a_tenth() {
        let gs: Vec<Gaussian> = (0..100)
            .map(|i| Gaussian::new(Vector3::new(i as f64, 0.0, 0.0), Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::new(0.1, 0.1, 0.1), 0.5, Vector3::zeros()))
            .collect();
        let s = Scene::new(gs, None, [0.0; 3]).unwrap();
        let d = degrade(&s, Degrade::SPARSE, 4).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d, degrade(&s, Degrade::SPARSE, 4).unwrap());
    }

    #[test]
    fn ground_truth_reproduces_targets() {
        let syn = generate(&SceneRecipe::new(RecipeKind::TextureGrid, 2, 64)).unwrap();
        for v in syn.views.iter().take(3) {
            let img = render(&project(&syn.scene, &v.camera), 64, 64, syn.scene.background, RenderOptions::default()).image;
            assert_eq!(psnr(&img, &v.target).unwrap(), crate::metrics::PSNR_CAP);
        }
    }

    #[test]
    fn validation() {
        let mut r = SceneRecipe::new(RecipeKind::FlatCard, 0, 64);
        r.cameras = 4;
        assert!(generate(&r).is_err());
        r.cameras = 8;
        r.resolution = 32;
        assert!(generate(&r).is_err());
    }
}
