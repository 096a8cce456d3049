//! Gaussian primitives, scenes and pinhole cameras.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::codec::{Decode, Encode, Reader, Writer};
use crate::error::{Error, Result};

/// Upper bound on decoded opacity. Keeps `1 / (1 - alpha)` at most 100 in the
/// leave-one-out formula.
pub const MAX_OPACITY: f64 = 0.99;

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct GaussianId(pub u64);

impl fmt::Display for GaussianId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    libm::log(p / (1.0 - p))
}

/// A 3D Gaussian. Scale and opacity are stored in the unconstrained spaces the
/// optimizer works in (log-scale, pre-sigmoid logit).
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub id: GaussianId,
    pub position: Vector3<f64>,
    /// Quaternion as (w, x, y, z).
    pub rotation: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl Gaussian {
    /// Builds a Gaussian from decoded values. The rotation is normalized.
    pub fn new(
        position: Vector3<f64>,
        rotation: Vector4<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Self {
        let opacity = opacity.clamp(1e-12, MAX_OPACITY);
        Self {
            id: GaussianId(0),
            position,
            rotation: normalize_quat(rotation),
            log_scale: scale.map(libm::log),
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(libm::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit).min(MAX_OPACITY)
    }

    pub fn set_opacity(&mut self, opacity: f64) {
        self.opacity_logit = logit(opacity.clamp(1e-12, MAX_OPACITY));
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&normalize_quat(self.rotation))
    }

    pub fn max_scale(&self) -> f64 {
        let s = self.scale();
        s.x.max(s.y).max(s.z)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

pub fn normalize_quat(q: Vector4<f64>) -> Vector4<f64> {
    let n = q.norm();
    if n > 0.0 {
        q / n
    } else {
        Vector4::new(1.0, 0.0, 0.0, 0.0)
    }
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R diag(s)^2 R^T` for the Gaussian's rotation and decoded scale.
pub fn covariance_3d(g: &Gaussian) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let s = g.scale();
    let m = r * Matrix3::from_diagonal(&s);
    let c = m * m.transpose();
    // exact symmetry regardless of rounding order
    (c + c.transpose()) * 0.5
}

/// A collection of Gaussians plus the scene-level quantities thresholds are
/// normalized against.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    pub extent: f64,
    pub background: Rgb,
    next_id: u64,
}

impl Scene {
    /// Assigns ids `0..n` in order. `extent` defaults to the bounding-sphere
    /// radius of the positions; an empty scene must provide it.
    pub fn new(mut gaussians: Vec<Gaussian>, extent: Option<f64>, background: Rgb) -> Result<Self> {
        for (i, g) in gaussians.iter_mut().enumerate() {
            g.id = GaussianId(i as u64);
            if !g.is_finite() {
                return Err(Error::Validation(format!("gaussian {i} has a non-finite parameter")));
            }
        }
        if background.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("background is not finite".into()));
        }
        let extent = match extent {
            Some(e) => e,
            None if gaussians.is_empty() => {
                return Err(Error::Validation(
                    "extent must be given explicitly for an empty scene".into(),
                ))
            }
            None => bounding_sphere_radius(&gaussians),
        };
        if !(extent.is_finite() && extent > 0.0) {
            return Err(Error::Validation(format!("extent must be finite and > 0, got {extent}")));
        }
        let next_id = gaussians.len() as u64;
        Ok(Self { gaussians, extent, background, next_id })
    }

    /// Rebuilds a scene whose Gaussians already carry ids (checkpoints, clones).
    pub fn with_ids(gaussians: Vec<Gaussian>, extent: f64, background: Rgb, next_id: u64) -> Result<Self> {
        let s = Self { gaussians, extent, background, next_id };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Hands out an id that has never been used in this scene.
    pub fn fresh_id(&mut self) -> GaussianId {
        let id = GaussianId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn ids(&self) -> impl Iterator<Item = GaussianId> + '_ {
        self.gaussians.iter().map(|g| g.id)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return Err(Error::Validation(format!("extent must be > 0, got {}", self.extent)));
        }
        let mut seen = BTreeSet::new();
        for g in &self.gaussians {
            if !seen.insert(g.id) {
                return Err(Error::Consistency(format!("duplicate gaussian id {}", g.id)));
            }
            if g.id.0 >= self.next_id {
                return Err(Error::Consistency(format!(
                    "gaussian id {} not below next id {}",
                    g.id, self.next_id
                )));
            }
            if !g.is_finite() {
                return Err(Error::Validation(format!("gaussian {} is not finite", g.id)));
            }
        }
        Ok(())
    }
}

/// Radius of the sphere centered at the centroid that contains every position.
pub fn bounding_sphere_radius(gaussians: &[Gaussian]) -> f64 {
    if gaussians.is_empty() {
        return 0.0;
    }
    let n = gaussians.len() as f64;
    let c = gaussians.iter().fold(Vector3::zeros(), |acc, g| acc + g.position) / n;
    gaussians.iter().map(|g| (g.position - c).norm()).fold(0.0, f64::max)
}

/// Pinhole camera with a world-to-camera rigid transform. Camera space looks
/// down +z with x to the right and y down; pixel `(i, j)` has its center at
/// `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

pub const MIN_RESOLUTION: usize = 16;

impl Camera {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        focal: (f64, f64),
        principal: (f64, f64),
        resolution: (usize, usize),
        near: f64,
    ) -> Result<Self> {
        let cam = Self {
            rotation,
            translation,
            fx: focal.0,
            fy: focal.1,
            cx: principal.0,
            cy: principal.1,
            width: resolution.0,
            height: resolution.1,
            near,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll. The principal
    /// point is the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            rotation,
            translation,
            (focal, focal),
            (width as f64 / 2.0, height as f64 / 2.0),
            (width, height),
            0.01,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Validation(format!("focal lengths must be > 0, got ({}, {})", self.fx, self.fy)));
        }
        if self.width < MIN_RESOLUTION || self.height < MIN_RESOLUTION {
            return Err(Error::Validation(format!(
                "resolution must be at least {MIN_RESOLUTION}x{MIN_RESOLUTION}, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.near > 0.0) {
            return Err(Error::Validation(format!("near plane must be > 0, got {}", self.near)));
        }
        let finite = self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
            && [self.fx, self.fy, self.cx, self.cy, self.near].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("camera has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn to_camera_space(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

impl Encode for Gaussian {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.id.0);
        for v in self.position.iter().chain(self.rotation.iter()).chain(self.log_scale.iter()) {
            w.f64(*v);
        }
        w.f64(self.opacity_logit);
        for v in self.color.iter() {
            w.f64(*v);
        }
    }
}

impl Decode for Gaussian {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let id = GaussianId(r.u64()?);
        let mut v = [0.0; 14];
        for x in v.iter_mut() {
            *x = r.f64()?;
        }
        Ok(Self {
            id,
            position: Vector3::new(v[0], v[1], v[2]),
            rotation: Vector4::new(v[3], v[4], v[5], v[6]),
            log_scale: Vector3::new(v[7], v[8], v[9]),
            opacity_logit: v[10],
            color: Vector3::new(v[11], v[12], v[13]),
        })
    }
}

impl Encode for Scene {
    fn encode(&self, w: &mut Writer) {
        w.f64(self.extent);
        for c in self.background {
            w.f64(c);
        }
        w.u64(self.next_id);
        w.usize(self.gaussians.len());
        for g in &self.gaussians {
            g.encode(w);
        }
    }
}

impl Decode for Scene {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let extent = r.f64()?;
        let background = [r.f64()?, r.f64()?, r.f64()?];
        let next_id = r.u64()?;
        let n = r.len(8 * 15)?;
        let gaussians = (0..n).map(|_| Gaussian::decode(r)).collect::<Result<Vec<_>>>()?;
        Scene::with_ids(gaussians, extent, background, next_id)
    }
}

impl Encode for Camera {
    fn encode(&self, w: &mut Writer) {
        for v in self.rotation.iter().chain(self.translation.iter()) {
            w.f64(*v);
        }
        for v in [self.fx, self.fy, self.cx, self.cy, self.near] {
            w.f64(v);
        }
        w.usize(self.width);
        w.usize(self.height);
    }
}

impl Decode for Camera {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let mut m = [0.0; 9];
        for x in m.iter_mut() {
            *x = r.f64()?;
        }
        let rotation = Matrix3::from_column_slice(&m);
        let translation = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
        let (fx, fy, cx, cy, near) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let (width, height) = (r.usize()?, r.usize()?);
        Camera::new(rotation, translation, (fx, fy), (cx, cy), (width, height), near)
    }
}
