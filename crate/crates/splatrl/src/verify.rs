//! Oracle suites behind `verify` and `bench`, shared with the acceptance
//! target.

use anyhow::Result;
use nalgebra::{Matrix3, Rotation3, Vector2, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use splatrl_core::backward::{backward, params_of, set_params, PARAM_COUNT};
use splatrl_core::density::Action;
use splatrl_core::metrics::{training_loss, LossConfig};
use splatrl_core::projection::{project, project_2d, FlatScene, ProjectedSplat, ALPHA_MIN};
use splatrl_core::raster::{falloff_power, render, RenderOptions};
use splatrl_core::sensitivity::{leave_one_out_color, naive_leave_one_out, score_view};
use splatrl_core::synth::{random_stack, uniform_stack};
use splatrl_core::theory::{
    disjoint_scene, max_overlap, monotone_descent_run, overlapping_scene, probe_one_step, surrogate_error_survey, EditRecord,
};
use splatrl_core::{Camera, Gaussian, Image, Scene};

pub const STACK_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub trials: usize,
    /// Largest per-channel difference between closed form and re-render.
    pub max_error: f64,
    /// Deepest per-pixel contributor list seen.
    pub max_contributors: usize,
}

/// Closed-form leave-one-out against full re-rendering on `trials` random
/// stacks of 1 to 256 splats over a 16x16 image.
pub fn verify_sensitivity(trials: usize, seed: u64) -> SensitivityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SensitivityReport { trials, max_error: 0.0, max_contributors: 0 };
    for t in 0..trials {
        // every eighth trial is a deep stack of faint splats
        let n = if t % 8 == 0 { 256 } else { rng.random_range(1..=256) };
        let fs = if t % 8 == 0 { uniform_stack(rng.random(), n, STACK_SIZE) } else { random_stack(rng.random(), n, STACK_SIZE) };
        let splats = project_2d(&fs, STACK_SIZE, STACK_SIZE);
        let out = render(&splats, STACK_SIZE, STACK_SIZE, fs.background, RenderOptions::recording());
        let states = out.states.as_ref().expect("recorded");
        for i in 0..STACK_SIZE * STACK_SIZE {
            report.max_contributors = report.max_contributors.max(states.pixel(i).len());
        }
        for (k, s) in splats.iter().enumerate() {
            let naive = naive_leave_one_out(&splats, STACK_SIZE, STACK_SIZE, fs.background, s.id);
            for i in 0..STACK_SIZE * STACK_SIZE {
                let fast = leave_one_out_color(&out.pixel_state(i).expect("recorded"), k as u32, fs.background);
                for c in 0..3 {
                    report.max_error = report.max_error.max((fast[c] - naive.data[i][c]).abs());
                }
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub scenes: usize,
    pub checked: usize,
    pub failures: Vec<String>,
    pub max_rel_error: f64,
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL: f64 = 1e-3;
pub const FD_ABS: f64 = 1e-6;

fn fd_candidate(rng: &mut ChaCha8Rng, n: usize) -> Scene {
    let gs = (0..n)
        .map(|i| {
            Gaussian::new(
                Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 3.0 + 0.13 * i as f64 + rng.random_range(0.0..0.05)),
                Vector4::new(rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
                Vector3::new(rng.random_range(0.8..1.5), rng.random_range(0.8..1.5), rng.random_range(0.8..1.5)),
                rng.random_range(0.1..0.5),
                Vector3::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)),
            )
        })
        .collect();
    Scene::new(gs, Some(1.0), [0.2, 0.1, 0.3]).expect("finite scene")
}

/// True when every splat clears twice the alpha cutoff over the whole
/// frame. The falloff is convex, so checking the frame corners suffices.
pub fn covers_frame(scene: &Scene, cam: &Camera) -> bool {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let corners = [Vector2::new(0.0, 0.0), Vector2::new(w, 0.0), Vector2::new(0.0, h), Vector2::new(w, h)];
    project(scene, cam).len() == scene.len()
        && project(scene, cam)
            .iter()
            .all(|s| corners.iter().all(|c| s.opacity * falloff_power(s, c).exp() >= 2.0 * ALPHA_MIN))
}

/// Random scene whose alpha cutoffs stay outside the frame, so the loss is
/// smooth within the difference stencil.
fn fd_scene(rng: &mut ChaCha8Rng, n: usize, cam: &Camera) -> Scene {
    loop {
        let s = fd_candidate(rng, n);
        if covers_frame(&s, cam) {
            return s;
        }
    }
}

fn fd_camera() -> Camera {
    let r = Rotation3::from_matrix(&Matrix3::new(0.98, 0.0, 0.2, 0.0, 1.0, 0.0, -0.2, 0.0, 0.98)).into_inner();
    Camera::new(r, Vector3::new(0.05, -0.02, 0.1), (40.0, 42.0), (16.0, 15.5), (32, 32), 0.1).expect("valid camera")
}

/// Analytic gradients against central differences on `scenes` random
/// scenes of up to 10 Gaussians at 32x32, each with λ ∈ {0, 0.2}.
pub fn verify_gradients(scenes: usize, seed: u64) -> Result<GradientReport> {
    let mut report = GradientReport { scenes, checked: 0, failures: Vec::new(), max_rel_error: 0.0 };
    let cam = fd_camera();
    for s in 0..scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
        let n = rng.random_range(3..=10);
        let scene = fd_scene(&mut rng, n, &cam);
        let target = Image::from_fn(32, 32, |_, _| std::array::from_fn(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }));
        for lambda in [0.0, 0.2] {
            let cfg = LossConfig { lambda };
            let analytic = backward(&scene, &cam, &target, &cfg)?.grads;
            for gi in 0..scene.len() {
                let base = params_of(&scene.gaussians[gi]);
                for k in 0..PARAM_COUNT {
                    let eval = |delta: f64| -> Result<f64> {
                        let mut sc = scene.clone();
                        let mut p = base;
                        p[k] += delta;
                        set_params(&mut sc.gaussians[gi], &p);
                        let out = render(&project(&sc, &cam), 32, 32, sc.background, RenderOptions::default());
                        Ok(training_loss(&out.image, &target, &cfg)?)
                    };
                    let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
                    let a = analytic.params[gi][k];
                    let scale = fd.abs().max(a.abs());
                    report.checked += 1;
                    if scale > FD_ABS {
                        report.max_rel_error = report.max_rel_error.max((a - fd).abs() / scale);
                    }
                    if (a - fd).abs() > FD_ABS.max(FD_REL * scale) {
                        report.failures.push(format!("scene {s} λ {lambda} gaussian {gi} param {k}: analytic {a:e}, fd {fd:e}"));
                    }
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EditRow {
    pub scene: String,
    pub seed: u64,
    pub gaussian: u64,
    pub action: &'static str,
    pub surrogate: f64,
    pub exact: f64,
    pub accepted: bool,
    pub loss_before: f64,
    pub loss_after: f64,
}

impl EditRow {
    fn new(scene: &str, seed: u64, r: &EditRecord) -> Self {
        Self {
            scene: scene.into(),
            seed,
            gaussian: r.edit.id.0,
            action: r.edit.action.name(),
            surrogate: r.surrogate,
            exact: r.exact,
            accepted: r.accepted,
            loss_before: r.loss_before,
            loss_after: r.loss_after,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TheoryReport {
    /// Largest measured surrogate error on the disjoint scenes.
    pub disjoint_delta: f64,
    pub max_overlap: usize,
    pub descent_runs: usize,
    pub accepted_edits: usize,
    /// Accepted edits that decreased the loss by less than `τ - δ̂`.
    pub margin_violations: usize,
    /// Runs whose accepted count exceeded `⌈L_0 / (τ - δ̂)⌉`.
    pub termination_violations: usize,
    pub probes: usize,
    pub bound_violations: usize,
    pub overlapping_delta: f64,
    pub rows: Vec<EditRow>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.disjoint_delta < 1e-6
            && self.max_overlap <= 1
            && self.accepted_edits > 0
            && self.margin_violations == 0
            && self.termination_violations == 0
            && self.bound_violations == 0
    }
}

pub const DESCENT_TAU: f64 = 0.01;

/// Greedy descent with τ = 0.01 on `seeds` disjoint-footprint scenes and
/// the one-step bound on every Gaussian of `seeds` overlapping scenes.
pub fn verify_theory(seeds: u64) -> Result<TheoryReport> {
    let mut report = TheoryReport::default();
    // clone and split offspring overlap each other, so the disjoint scenes
    // are edited by maintain and prune only
    let actions = [Action::Maintain, Action::Prune];
    for seed in 0..seeds {
        let (scene, views) = disjoint_scene(seed, 4)?;
        let sel = [0, 1];
        report.max_overlap = report.max_overlap.max(max_overlap(&scene, &views));
        let survey = surrogate_error_survey(&scene, 32, &actions, &views, &sel, seed)?;
        report.disjoint_delta = report.disjoint_delta.max(survey.max_error);
        let run = monotone_descent_run(&scene, DESCENT_TAU, survey.max_error, &actions, 64, &views, &sel, seed)?;
        report.descent_runs += 1;
        report.accepted_edits += run.accepted();
        report.margin_violations += run.violations().len();
        if run.edit_bound().is_none_or(|b| run.accepted() > b) {
            report.termination_violations += 1;
        }
        report.rows.extend(run.records.iter().map(|r| EditRow::new("disjoint", seed, r)));
    }
    for seed in 0..seeds {
        let (scene, views) = overlapping_scene(seed, 10)?;
        for g in &scene.gaussians {
            let p = probe_one_step(&scene, g.id, &views, &[0, 1, 2], seed)?;
            report.probes += 1;
            report.overlapping_delta = report.overlapping_delta.max(p.delta_local);
            if !p.bound_holds(1e-9) {
                report.bound_violations += 1;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub contributors: usize,
    pub fast_seconds: f64,
    pub naive_seconds: f64,
}

/// CPU seconds used by the whole process, so time stolen by other tenants
/// of the machine does not count.
fn cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "process CPU clock unavailable");
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// Naive timings are long and steadier, so fewer reps suffice.
pub const NAIVE_REPS: usize = 5;

fn time_min<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    (0..reps.max(1))
        .map(|_| {
            let t = cpu_seconds();
            f();
            cpu_seconds() - t
        })
        .fold(f64::INFINITY, f64::min)
}

fn fast_scores(fs: &FlatScene, size: usize, target: &Image) -> Vec<f64> {
    let splats = project_2d(fs, size, size);
    let out = render(&splats, size, size, fs.background, RenderOptions::recording());
    score_view(fs.splats.len(), &splats, &out, target).expect("shapes match").sen
}

fn naive_scores(fs: &FlatScene, size: usize, target: &Image) -> Vec<f64> {
    let splats: Vec<ProjectedSplat> = project_2d(fs, size, size);
    let full = render(&splats, size, size, fs.background, RenderOptions::default()).image;
    let l1 = |img: &Image| -> Vec<f64> {
        img.data.iter().zip(&target.data).map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).abs()).sum()).collect()
    };
    let base = l1(&full);
    let mut sen = vec![0.0; fs.splats.len()];
    for s in &splats {
        let removed = l1(&naive_leave_one_out(&splats, size, size, fs.background, s.id));
        sen[s.index] = removed.iter().zip(&base).map(|(r, b)| r - b).sum();
    }
    sen
}

/// Times the closed-form sensitivity pass against per-splat re-rendering on
/// uniform stacks where every pixel has exactly `n` contributors.
pub fn bench_sensitivity(ns: &[usize], size: usize, reps: usize, seed: u64) -> Vec<BenchRow> {
    let target = Image::filled(size, size, [0.5; 3]);
    let stacks: Vec<FlatScene> = ns.iter().map(|&n| uniform_stack(seed, n, size)).collect();
    // reps cycle through the depths so slow drift in machine speed hits
    // every depth alike
    let mut rows: Vec<BenchRow> =
        ns.iter().map(|&n| BenchRow { contributors: n, fast_seconds: f64::INFINITY, naive_seconds: f64::INFINITY }).collect();
    for rep in 0..reps.max(1) {
        for (row, fs) in rows.iter_mut().zip(&stacks) {
            row.fast_seconds = row.fast_seconds.min(time_min(1, || {
                std::hint::black_box(fast_scores(fs, size, &target));
            }));
            if rep < NAIVE_REPS {
                row.naive_seconds = row.naive_seconds.min(time_min(1, || {
                    std::hint::black_box(naive_scores(fs, size, &target));
                }));
            }
        }
    }
    rows
}

/// Largest difference between the two sensitivity paths on one stack.
pub fn bench_agreement(n: usize, size: usize, seed: u64) -> f64 {
    let target = Image::filled(size, size, [0.5; 3]);
    let fs = uniform_stack(seed, n, size);
    fast_scores(&fs, size, &target)
        .iter()
        .zip(naive_scores(&fs, size, &target))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        let s = verify_sensitivity(4, 1);
        assert!(s.max_error < 1e-5);
        let g = verify_gradients(1, 0).unwrap();
        assert!(g.failures.is_empty(), "{:?}", g.failures);
        assert!(verify_theory(1).unwrap().passed());
    }

    #[test]
    fn bench_paths_agree() {
        assert!(bench_agreement(16, 16, 3) < 1e-9);
    }
}
