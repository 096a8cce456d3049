//! Projection of 3D Gaussians to screen-space splats.
//!
//! The 2D covariance is the first-order (EWA) approximation
//! `J W Σ Wᵀ Jᵀ + 0.3·I`, with `J` the pinhole Jacobian at the Gaussian
//! center and `W` the camera rotation. The dilation keeps every footprint
//! invertible and at least about a pixel wide.

use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};

use crate::scene::{covariance_3d, sigmoid, Camera, GaussianId, Rgb, Scene, MAX_OPACITY};

/// Screen-space covariance dilation in pixels².
pub const COV2D_DILATION: f64 = 0.3;

/// Smallest alpha that counts as a contribution.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSplat {
    pub id: GaussianId,
    /// Position of the source primitive in its scene.
    pub index: usize,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: Rgb,
    /// `3 * sqrt(largest eigenvalue of cov)`.
    pub radius: f64,
    /// Half-extents of the axis-aligned box holding every pixel where
    /// `alpha >= ALPHA_MIN`; zero when the opacity is below the cutoff.
    pub half_extent: Vector2<f64>,
}

impl ProjectedSplat {
    pub fn from_parts(
        id: GaussianId,
        index: usize,
        mean: Vector2<f64>,
        cov: Matrix2<f64>,
        depth: f64,
        opacity: f64,
        color: Rgb,
    ) -> Self {
        let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
        let det = a * c - b * b;
        let conic = Matrix2::new(c, -b, -b, a) / det;
        let mid = 0.5 * (a + c);
        let lambda_max = mid + libm::sqrt(0.25 * (a - c) * (a - c) + b * b);
        let radius = 3.0 * libm::sqrt(lambda_max);
        // alpha >= ALPHA_MIN  <=>  dᵀ conic d <= 2 ln(opacity / ALPHA_MIN)
        let level = 2.0 * libm::log(opacity.min(MAX_OPACITY) / ALPHA_MIN);
        let half_extent = if level >= 0.0 {
            Vector2::new(libm::sqrt(level * a), libm::sqrt(level * c)).add_scalar(1e-6)
        } else {
            Vector2::zeros()
        };
        Self { id, index, mean, cov, conic, depth, opacity, color, radius, half_extent }
    }

    /// True when either the 3-sigma disc or the alpha cutoff box reaches the
    /// rectangle `[0, width] x [0, height]`.
    pub fn touches_viewport(&self, width: usize, height: usize) -> bool {
        let (w, h) = (width as f64, height as f64);
        let hit = |hx: f64, hy: f64| {
            self.mean.x + hx >= 0.0 && self.mean.x - hx <= w && self.mean.y + hy >= 0.0 && self.mean.y - hy <= h
        };
        hit(self.radius, self.radius) || (self.half_extent.x > 0.0 && hit(self.half_extent.x, self.half_extent.y))
    }
}

pub fn depth_order(a: &ProjectedSplat, b: &ProjectedSplat) -> Ordering {
    a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id))
}

/// Pinhole Jacobian of `(fx x/z + cx, fy y/z + cy)` at camera-space `t`.
pub fn pinhole_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * t.x * iz * iz, 0.0, cam.fy * iz, -cam.fy * t.y * iz * iz)
}

/// Projects every visible Gaussian and returns the splats sorted by
/// `(depth, id)`. Gaussians at or behind the near plane, or whose footprint
/// misses the image, are dropped.
pub fn project(scene: &Scene, cam: &Camera) -> Vec<ProjectedSplat> {
    let mut out = Vec::with_capacity(scene.len());
    for (index, g) in scene.gaussians.iter().enumerate() {
        let t = cam.to_camera_space(&g.position);
        if t.z <= cam.near {
            continue;
        }
        let j = pinhole_jacobian(cam, &t);
        let m = cam.rotation * covariance_3d(g) * cam.rotation.transpose();
        let mut cov = j * m * j.transpose();
        cov[(0, 0)] += COV2D_DILATION;
        cov[(1, 1)] += COV2D_DILATION;
        let sym = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
        cov[(0, 1)] = sym;
        cov[(1, 0)] = sym;
        let mean = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
        let c = g.color;
        let s = ProjectedSplat::from_parts(g.id, index, mean, cov, t.z, g.opacity(), [c.x, c.y, c.z]);
        if s.touches_viewport(cam.width, cam.height) {
            out.push(s);
        }
    }
    out.sort_by(depth_order);
    out
}

/// A Gaussian that lives directly in screen space, with an explicit depth
/// that supplies the compositing order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian2d {
    pub id: GaussianId,
    pub mean: Vector2<f64>,
    pub log_scale: Vector2<f64>,
    /// Rotation of the first principal axis, radians.
    pub angle: f64,
    pub opacity_logit: f64,
    pub color: Rgb,
    pub depth: f64,
}

impl Gaussian2d {
    pub fn covariance(&self) -> Matrix2<f64> {
        let (s, c) = libm::sincos(self.angle);
        let r = Matrix2::new(c, -s, s, c);
        let d = Matrix2::from_diagonal(&self.log_scale.map(|v| libm::exp(2.0 * v)));
        let m = r * d * r.transpose();
        (m + m.transpose()) * 0.5
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit).min(MAX_OPACITY)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatScene {
    pub splats: Vec<Gaussian2d>,
    pub background: Rgb,
}

/// Screen-space pass-through: no pinhole step, only dilation, culling and
/// the `(depth, id)` sort.
pub fn project_2d(scene: &FlatScene, width: usize, height: usize) -> Vec<ProjectedSplat> {
    let mut out: Vec<_> = scene
        .splats
        .iter()
        .enumerate()
        .map(|(index, g)| {
            let mut cov = g.covariance();
            cov[(0, 0)] += COV2D_DILATION;
            cov[(1, 1)] += COV2D_DILATION;
            ProjectedSplat::from_parts(g.id, index, g.mean, cov, g.depth, g.opacity(), g.color)
        })
        .filter(|s| s.touches_viewport(width, height))
        .collect();
    out.sort_by(depth_order);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector4};

    fn axis_camera() -> Camera {
        Camera::new(Matrix3::identity(), Vector3::zeros(), (100.0, 100.0), (32.0, 32.0), (64, 64), 0.1).unwrap()
    }

    fn at(p: Vector3<f64>, s: f64) -> Gaussian {
        Gaussian::new(p, Vector4::new(1.0, 0.0, 0.0, 0.0), Vector3::new(s, s, s), 0.5, Vector3::new(1.0, 0.0, 0.0))
    }

    #[test]
    fn on_axis_projection_matches_hand_evaluation() {
        let (z, s, f) = (4.0, 0.1, 100.0);
        let scene = Scene::new(alloc::vec![at(Vector3::new(0.0, 0.0, z), s)], Some(1.0), [0.0; 3]).unwrap();
        let splats = project(&scene, &axis_camera());
        assert_eq!(splats.len(), 1);
        let sp = &splats[0];
        assert_relative_eq!(sp.mean, Vector2::new(32.0, 32.0), epsilon = 1e-12);
        let expect = (f * s / z).powi(2) + 0.3;
        assert_relative_eq!(sp.cov, Matrix2::new(expect, 0.0, 0.0, expect), epsilon = 1e-12);
        assert_relative_eq!(sp.conic * sp.cov, Matrix2::identity(), epsilon = 1e-12);
        assert_eq!(sp.depth, z);
    }

    #[test]
    fn behind_near_plane_is_culled() {
        let cam = axis_camera();
        let scene = Scene::new(alloc::vec![at(Vector3::new(0.0, 0.0, cam.near / 2.0), 0.01)], Some(1.0), [0.0; 3]).unwrap();
        assert!(project(&scene, &cam).is_empty());
    }

    #[test]
    fn far_off_screen_is_culled() {
        let scene = Scene::new(alloc::vec![at(Vector3::new(50.0, 0.0, 4.0), 0.01)], Some(1.0), [0.0; 3]).unwrap();
        assert!(project(&scene, &axis_camera()).is_empty());
    }

    #[test]
    fn equal_depth_orders_by_id() {
        let a = at(Vector3::new(0.1, 0.0, 3.0), 0.1);
        let b = at(Vector3::new(-0.1, 0.0, 3.0), 0.1);
        let scene = Scene::new(alloc::vec![a, b], Some(1.0), [0.0; 3]).unwrap();
        let ids: Vec<_> = project(&scene, &axis_camera()).iter().map(|s| s.id).collect();
        assert_eq!(ids, alloc::vec![GaussianId(0), GaussianId(1)]);
    }

    fn flat(id: u64, depth: f64) -> Gaussian2d {
        Gaussian2d {
            id: GaussianId(id),
            mean: Vector2::new(8.0, 8.0),
            log_scale: Vector2::zeros(),
            angle: 0.0,
            opacity_logit: 0.0,
            color: [1.0; 3],
            depth,
        }
    }

    #[test]
    fn flat_projection_sorts_front_first() {
        let scene = FlatScene { splats: alloc::vec![flat(0, 2.0), flat(1, 1.0)], background: [0.0; 3] };
        let out = project_2d(&scene, 16, 16);
        assert_eq!(out[0].id, GaussianId(1));
        assert_eq!(out[1].id, GaussianId(0));
    }

    #[test]
    fn flat_identity_covariance_is_dilated() {
        let scene = FlatScene { splats: alloc::vec![flat(0, 1.0)], background: [0.0; 3] };
        let out = project_2d(&scene, 16, 16);
        assert_relative_eq!(out[0].cov, Matrix2::identity() * 1.3, epsilon = 1e-12);
    }
}
