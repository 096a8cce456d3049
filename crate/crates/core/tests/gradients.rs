//! Central finite differences against the analytic backward pass.
//!
//! Scenes are resampled until every alpha cutoff ellipse encloses the whole
//! frame, and the binary target stays at least 0.1 away from every
//! rendered value, so the loss is smooth within the difference stencil.

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatrl_core::backward::{backward, params_of, set_params, PARAM_COUNT};
use splatrl_core::image::Image;
use splatrl_core::metrics::{training_loss, LossConfig};
use splatrl_core::projection::{project, ALPHA_MIN};
use splatrl_core::raster::{falloff_power, render, RenderOptions};
use splatrl_core::{Camera, Gaussian, Scene};

const H: f64 = 1e-4;
const REL: f64 = 1e-3;
const ABS: f64 = 1e-6;

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Scene {
    let gs = (0..n)
        .map(|i| {
            let q = Vector4::new(rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            Gaussian::new(
                Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 3.0 + 0.13 * i as f64 + rng.random_range(0.0..0.05)),
                q,
                Vector3::new(rng.random_range(0.8..1.5), rng.random_range(0.8..1.5), rng.random_range(0.8..1.5)),
                rng.random_range(0.1..0.5),
                Vector3::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)),
            )
        })
        .collect();
    Scene::new(gs, Some(1.0), [0.2, 0.1, 0.3]).unwrap()
}

// the falloff is convex, so clearing the cutoff at the frame corners clears
// it everywhere
fn covers_frame(scene: &Scene, cam: &Camera) -> bool {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let corners = [Vector2::new(0.0, 0.0), Vector2::new(w, 0.0), Vector2::new(0.0, h), Vector2::new(w, h)];
    let splats = project(scene, cam);
    splats.len() == scene.len() && splats.iter().all(|s| corners.iter().all(|c| s.opacity * falloff_power(s, c).exp() >= 2.0 * ALPHA_MIN))
}

fn camera() -> Camera {
    let r = Matrix3::new(0.98, 0.0, 0.2, 0.0, 1.0, 0.0, -0.2, 0.0, 0.98);
    let r = nalgebra::Rotation3::from_matrix(&r).into_inner();
    Camera::new(r, Vector3::new(0.05, -0.02, 0.1), (40.0, 42.0), (16.0, 15.5), (32, 32), 0.1).unwrap()
}

fn loss_of(scene: &Scene, cam: &Camera, target: &Image, cfg: &LossConfig) -> f64 {
    let splats = project(scene, cam);
    let out = render(&splats, cam.width, cam.height, scene.background, RenderOptions::default());
    training_loss(&out.image, target, cfg).unwrap()
}

fn check(seed: u64, lambda: f64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=10);
    let cam = camera();
    let scene = loop {
        let s = random_scene(&mut rng, n);
        if covers_frame(&s, &cam) {
            break s;
        }
    };
    let target = Image::from_fn(32, 32, |_, _| core::array::from_fn(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }));
    let cfg = LossConfig { lambda };
    let analytic = backward(&scene, &cam, &target, &cfg).unwrap().grads;
    let (mut ok, mut total) = (0, 0);
    for gi in 0..scene.len() {
        let base = params_of(&scene.gaussians[gi]);
        for k in 0..PARAM_COUNT {
            let eval = |delta: f64| {
                let mut s = scene.clone();
                let mut p = base;
                p[k] += delta;
                set_params(&mut s.gaussians[gi], &p);
                loss_of(&s, &cam, &target, &cfg)
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            let a = analytic.params[gi][k];
            total += 1;
            if (a - fd).abs() <= ABS.max(REL * fd.abs().max(a.abs())) {
                ok += 1;
            } else {
                eprintln!("seed {seed} lambda {lambda} gaussian {gi} param {k}: analytic {a:e} fd {fd:e}");
            }
        }
    }
    (ok, total)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (mut ok, mut total) = (0, 0);
    for seed in 0..20 {
        for lambda in [0.0, 0.2] {
            let (o, t) = check(seed, lambda);
            ok += o;
            total += t;
        }
    }
    assert_eq!(ok, total);
}
