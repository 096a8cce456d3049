//! Reverse-mode gradients of the training loss through compositing,
//! the screen-space Gaussian, the EWA projection and the 3D covariance
//! parameterization.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use crate::error::Result;
use crate::image::Image;
use crate::metrics::{training_loss_with_grad, LossConfig};
use crate::projection::{pinhole_jacobian, project, ProjectedSplat};
use crate::raster::{falloff_power, pixel_center, render, RenderOptions, RenderOutput};
use crate::scene::{covariance_3d, normalize_quat, quat_to_matrix, sigmoid, Camera, Gaussian, GaussianId, Scene, MAX_OPACITY};

/// Number of scalar parameters per Gaussian.
pub const PARAM_COUNT: usize = 14;

/// Parameter vector layout: position (3), rotation (4), log-scale (3),
/// opacity logit (1), color (3).
pub type Params = [f64; PARAM_COUNT];

pub mod layout {
    use core::ops::Range;
    pub const POSITION: Range<usize> = 0..3;
    pub const ROTATION: Range<usize> = 3..7;
    pub const LOG_SCALE: Range<usize> = 7..10;
    pub const OPACITY: usize = 10;
    pub const COLOR: Range<usize> = 11..14;
}

pub fn params_of(g: &Gaussian) -> Params {
    let mut p = [0.0; PARAM_COUNT];
    p[0..3].copy_from_slice(g.position.as_slice());
    p[3..7].copy_from_slice(g.rotation.as_slice());
    p[7..10].copy_from_slice(g.log_scale.as_slice());
    p[10] = g.opacity_logit;
    p[11..14].copy_from_slice(g.color.as_slice());
    p
}

pub fn set_params(g: &mut Gaussian, p: &Params) {
    g.position = Vector3::new(p[0], p[1], p[2]);
    g.rotation = Vector4::new(p[3], p[4], p[5], p[6]);
    g.log_scale = Vector3::new(p[7], p[8], p[9]);
    g.opacity_logit = p[10];
    g.color = Vector3::new(p[11], p[12], p[13]);
}

/// Loss gradients for every Gaussian of a scene (scene order), plus the
/// view-space positional gradient statistic used by the heuristic controller.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub ids: Vec<GaussianId>,
    pub params: Vec<Params>,
    /// Sum over views of the screen-space mean-gradient norm (NDC units).
    pub view_grad_sum: Vec<f64>,
    /// Number of views in which the Gaussian covered at least one pixel.
    pub view_count: Vec<u32>,
}

impl GaussianGrads {
    pub fn zeros(scene: &Scene) -> Self {
        let n = scene.len();
        Self { ids: scene.ids().collect(), params: vec![[0.0; PARAM_COUNT]; n], view_grad_sum: vec![0.0; n], view_count: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Adds another view's gradients (same scene layout) into this one.
    pub fn accumulate(&mut self, other: &GaussianGrads) {
        debug_assert_eq!(self.ids, other.ids);
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for i in 0..self.len() {
            self.view_grad_sum[i] += other.view_grad_sum[i];
            self.view_count[i] += other.view_count[i];
        }
    }

    /// Mean view-space gradient norm over the views that covered each
    /// Gaussian; zero for Gaussians never covered.
    pub fn mean_view_grad(&self) -> Vec<f64> {
        self.view_grad_sum
            .iter()
            .zip(&self.view_count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|v| v.is_finite())) && self.view_grad_sum.iter().all(|v| v.is_finite())
    }
}

/// Screen-space gradients of one splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector2<f64>,
    /// d/d(conic entries a, b, c) with b the off-diagonal as one variable.
    conic: Vector3<f64>,
    opacity: f64,
    color: Vector3<f64>,
}

#[cfg(feature = "parallel")]
impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

pub struct BackwardResult {
    pub loss: f64,
    pub grads: GaussianGrads,
    pub splats: Vec<ProjectedSplat>,
    pub output: RenderOutput,
}

/// Renders `scene` from `cam`, evaluates the training loss against `target`
/// and returns the gradients of that loss for every Gaussian parameter.
pub fn backward(scene: &Scene, cam: &Camera, target: &Image, cfg: &LossConfig) -> Result<BackwardResult> {
    backward_with(scene, cam, target, cfg, RenderOptions::recording())
}

pub fn backward_with(scene: &Scene, cam: &Camera, target: &Image, cfg: &LossConfig, opts: RenderOptions) -> Result<BackwardResult> {
    let splats = project(scene, cam);
    let output = render(&splats, cam.width, cam.height, scene.background, RenderOptions { record_state: true, ..opts });
    let (loss, dl_dimage) = training_loss_with_grad(&output.image, target, cfg)?;
    let grads = backward_from_render(scene, cam, &splats, &output, &dl_dimage);
    Ok(BackwardResult { loss, grads, splats, output })
}

/// Chains an image-space loss gradient back to Gaussian parameters, given
/// the recorded render of `splats` (as produced by [`project`]).
pub fn backward_from_render(
    scene: &Scene,
    cam: &Camera,
    splats: &[ProjectedSplat],
    output: &RenderOutput,
    dl_dimage: &Image,
) -> GaussianGrads {
    let screen = screen_space_grads(splats, output, dl_dimage);
    let mut grads = GaussianGrads::zeros(scene);
    let half = Vector2::new(cam.width as f64 / 2.0, cam.height as f64 / 2.0);
    for (k, s) in splats.iter().enumerate() {
        let g = &scene.gaussians[s.index];
        let sg = &screen[k];
        grads.params[s.index] = chain_to_params(g, cam, s, sg);
        if output.coverage_counts[k] > 0 {
            grads.view_grad_sum[s.index] = sg.mean.component_mul(&half).norm();
            grads.view_count[s.index] = 1;
        }
    }
    grads
}

fn screen_space_grads(splats: &[ProjectedSplat], output: &RenderOutput, dl_dimage: &Image) -> Vec<SplatGrad> {
    let states = output.states.as_ref().expect("backward needs a recorded render");
    let width = output.image.width;
    let height = output.image.height;
    let n = splats.len();

    let run_rows = |y0: usize, y1: usize| -> Vec<SplatGrad> {
        let mut acc = vec![SplatGrad::default(); n];
        for y in y0..y1 {
            for x in 0..width {
                let i = y * width + x;
                let contribs = states.pixel(i);
                if contribs.is_empty() {
                    continue;
                }
                let g = dl_dimage.data[i];
                let full = output.image.data[i];
                let p = pixel_center(x, y);
                for c in contribs {
                    let s = &splats[c.splat as usize];
                    let a = c.alpha;
                    let t = c.transmittance;
                    let sg = &mut acc[c.splat as usize];
                    let w = t * a;
                    let mut dl_da = 0.0;
                    for ch in 0..3 {
                        sg.color[ch] += g[ch] * w;
                        let after = full[ch] - c.prefix[ch];
                        dl_da += g[ch] * (t * s.color[ch] - after / (1.0 - a));
                    }
                    // clamped alphas do not depend on the splat parameters
                    let power = falloff_power(s, &p);
                    let gauss = libm::exp(power);
                    if s.opacity * gauss > MAX_OPACITY {
                        continue;
                    }
                    sg.opacity += dl_da * gauss;
                    let dl_dpower = dl_da * a;
                    let d = p - s.mean;
                    // power = -½ (a dx² + 2 b dx dy + c dy²)
                    sg.mean += dl_dpower * (s.conic * d);
                    sg.conic += dl_dpower * Vector3::new(-0.5 * d.x * d.x, -d.x * d.y, -0.5 * d.y * d.y);
                }
            }
        }
        acc
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        const BAND: usize = 16;
        let bands: Vec<Vec<SplatGrad>> = (0..height.div_ceil(BAND))
            .into_par_iter()
            .map(|b| run_rows(b * BAND, ((b + 1) * BAND).min(height)))
            .collect();
        let mut total = vec![SplatGrad::default(); n];
        for band in &bands {
            for (t, b) in total.iter_mut().zip(band) {
                t.add(b);
            }
        }
        total
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_rows(0, height)
    }
}

fn chain_to_params(g: &Gaussian, cam: &Camera, s: &ProjectedSplat, sg: &SplatGrad) -> Params {
    let mut out = [0.0; PARAM_COUNT];

    // color and opacity
    out[11] = sg.color.x;
    out[12] = sg.color.y;
    out[13] = sg.color.z;
    let sig = sigmoid(g.opacity_logit);
    if sig < MAX_OPACITY {
        out[10] = sg.opacity * sig * (1.0 - sig);
    }

    // conic -> 2D covariance: G_Σ = -Q G_Q Q
    let q = s.conic;
    let g_q = Matrix2::new(sg.conic.x, 0.5 * sg.conic.y, 0.5 * sg.conic.y, sg.conic.z);
    let g_cov2 = -(q * g_q * q);

    // Σ2 = J M Jᵀ + dilation, M = W Σ3 Wᵀ
    let w = cam.rotation;
    let t = cam.to_camera_space(&g.position);
    let j: Matrix2x3<f64> = pinhole_jacobian(cam, &t);
    let sigma3 = covariance_3d(g);
    let m = w * sigma3 * w.transpose();
    let g_m: Matrix3<f64> = j.transpose() * g_cov2 * j;
    let g_j: Matrix2x3<f64> = 2.0 * g_cov2 * j * m;
    let g_sigma3 = w.transpose() * g_m * w;

    // Σ3 = A Aᵀ, A = R diag(s)
    let qn = normalize_quat(g.rotation);
    let r = quat_to_matrix(&qn);
    let scale = g.scale();
    let a = r * Matrix3::from_diagonal(&scale);
    let g_a = 2.0 * g_sigma3 * a;
    let mut g_r = Matrix3::zeros();
    for i in 0..3 {
        for jj in 0..3 {
            g_r[(i, jj)] = g_a[(i, jj)] * scale[jj];
        }
    }
    for jj in 0..3 {
        let g_s: f64 = (0..3).map(|i| g_a[(i, jj)] * r[(i, jj)]).sum();
        out[7 + jj] = g_s * scale[jj];
    }
    let g_qn = rotation_grad(&qn, &g_r);
    let norm = g.rotation.norm();
    let g_rot = (g_qn - qn * qn.dot(&g_qn)) / norm;
    out[3..7].copy_from_slice(g_rot.as_slice());

    // camera-space position through the mean and the Jacobian
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_t = Vector3::new(
        sg.mean.x * fx * iz,
        sg.mean.y * fy * iz,
        -sg.mean.x * fx * t.x * iz2 - sg.mean.y * fy * t.y * iz2,
    );
    g_t.x += g_j[(0, 2)] * (-fx * iz2);
    g_t.y += g_j[(1, 2)] * (-fy * iz2);
    g_t.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz3)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    let g_p = w.transpose() * g_t;
    out[0..3].copy_from_slice(g_p.as_slice());
    out
}

/// Gradient with respect to a unit quaternion `(w, x, y, z)` of a loss whose
/// gradient with respect to the rotation matrix is `g`.
fn rotation_grad(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    // dR/dw, dR/dx, dR/dy, dR/dz (row-major entries)
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    Vector4::new(g.dot(&dw), g.dot(&dx), g.dot(&dy), g.dot(&dz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::training_loss;
    use crate::scene::logit;
    use nalgebra::Matrix3;

    fn one_splat_scene(color: f64) -> (Scene, Camera) {
        let cam = Camera::new(Matrix3::identity(), Vector3::zeros(), (40.0, 40.0), (8.0, 8.0), (16, 16), 0.1).unwrap();
        let g = Gaussian::new(
            Vector3::new(0.0125, 0.0125, 2.0),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
            Vector3::new(0.01, 0.01, 0.01),
            0.5,
            Vector3::new(color, color, color),
        );
        (Scene::new(alloc::vec![g], Some(1.0), [0.0; 3]).unwrap(), cam)
    }

    #[test]
    fn color_gradient_is_sign_times_weight() {
        let (scene, cam) = one_splat_scene(0.8);
        let target = Image::filled(16, 16, [0.1, 0.9, 0.1]);
        let cfg = LossConfig { lambda: 0.0 };
        let r = backward(&scene, &cam, &target, &cfg).unwrap();
        let n = (16 * 16 * 3) as f64;
        // sum over covered pixels of sign(C - gt) · T · α
        let mut expect = [0.0; 3];
        let states = r.output.states.as_ref().unwrap();
        for i in 0..256 {
            for c in states.pixel(i) {
                let px = r.output.image.data[i];
                for ch in 0..3 {
                    expect[ch] += (px[ch] - target.data[i][ch]).signum() * c.transmittance * c.alpha / n;
                }
            }
        }
        for ch in 0..3 {
            assert!((r.grads.params[0][11 + ch] - expect[ch]).abs() < 1e-15);
        }
        assert!(expect[0] > 0.0 && expect[1] < 0.0);
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let (scene, cam) = one_splat_scene(0.6);
        let splats = project(&scene, &cam);
        let target = render(&splats, 16, 16, [0.0; 3], RenderOptions::default()).image;
        let cfg = LossConfig { lambda: 0.2 };
        let r = backward(&scene, &cam, &target, &cfg).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(training_loss(&r.output.image, &target, &cfg).unwrap(), 0.0);
        assert!(r.grads.params[0].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn saturated_opacity_logit_has_no_gradient() {
        let (mut scene, cam) = one_splat_scene(0.6);
        scene.gaussians[0].opacity_logit = logit(0.995);
        let target = Image::filled(16, 16, [0.0; 3]);
        let r = backward(&scene, &cam, &target, &LossConfig { lambda: 0.0 }).unwrap();
        assert_eq!(r.grads.params[0][layout::OPACITY], 0.0);
    }

    #[test]
    fn uncovered_gaussians_have_zero_statistic() {
        let (mut scene, cam) = one_splat_scene(0.6);
        let mut far = scene.gaussians[0].clone();
        far.position = Vector3::new(50.0, 0.0, 2.0);
        far.id = scene.fresh_id();
        scene.gaussians.push(far);
        let target = Image::filled(16, 16, [0.0; 3]);
        let r = backward(&scene, &cam, &target, &LossConfig::default()).unwrap();
        assert_eq!(r.grads.view_count, alloc::vec![1, 0]);
        assert_eq!(r.grads.mean_view_grad()[1], 0.0);
        assert!(r.grads.mean_view_grad()[0] >= 0.0);
    }
}
