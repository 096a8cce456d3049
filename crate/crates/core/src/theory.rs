//! Empirical checks of the surrogate-reward guarantees: how far the
//! sensitivity reward strays from the exact loss change of an edit, greedy
//! descent with an acceptance margin, and the one-step suboptimality bound.
//!
//! The loss here is the summed absolute error over pixels, channels and the
//! selected views, the same quantity the sensitivity score is built from.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::{apply_actions, Action, DensityStep};
use crate::error::{Error, Result};
use crate::projection::project;
use crate::raster::{render, RenderOptions};
use crate::scene::{Camera, Gaussian, GaussianId, Scene};
use crate::sensitivity::{sensitivity_reward, sensitivity_scores, SensitivityRecord, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edit {
    pub id: GaussianId,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditRecord {
    pub edit: Edit,
    /// Sensitivity reward of the edited Gaussian.
    pub surrogate: f64,
    /// `L_before - L_after` from two full evaluations.
    pub exact: f64,
    pub accepted: bool,
    pub loss_before: f64,
    pub loss_after: f64,
}

impl EditRecord {
    pub fn error(&self) -> f64 {
        (self.surrogate - self.exact).abs()
    }
}

/// Summed absolute error of `scene` over the selected views.
pub fn scene_loss(scene: &Scene, views: &[View], selection: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &v in selection {
        let view = views.get(v).ok_or_else(|| Error::Validation(format!("view {v} out of range")))?;
        let splats = project(scene, &view.camera);
        let img = render(&splats, view.camera.width, view.camera.height, scene.background, RenderOptions::default()).image;
        view.target.same_shape(&img)?;
        total += img.data.iter().zip(&view.target.data).flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs())).sum::<f64>();
    }
    Ok(total)
}

/// Applies `edit` to one Gaussian, maintaining all others.
pub fn apply_edit<R: Rng + ?Sized>(scene: &Scene, edit: Edit, rng: &mut R) -> Result<DensityStep> {
    let k = scene
        .gaussians
        .iter()
        .position(|g| g.id == edit.id)
        .ok_or_else(|| Error::Consistency(format!("no gaussian with id {}", edit.id.0)))?;
    let mut actions = vec![Action::Maintain; scene.len()];
    actions[k] = edit.action;
    apply_actions(scene, &actions, rng)
}

/// Loss before minus loss after `edit`. `scene` itself is not modified.
pub fn exact_gain<R: Rng + ?Sized>(scene: &Scene, edit: Edit, views: &[View], selection: &[usize], rng: &mut R) -> Result<f64> {
    let before = scene_loss(scene, views, selection)?;
    let step = apply_edit(scene, edit, rng)?;
    Ok(before - scene_loss(&step.scene, views, selection)?)
}

/// Surrogate and exact gain of one edit, given the scene's sensitivity
/// record and loss. Returns the edited scene as well.
pub fn evaluate_edit<R: Rng + ?Sized>(
    scene: &Scene,
    record: &SensitivityRecord,
    loss: f64,
    edit: Edit,
    views: &[View],
    rng: &mut R,
) -> Result<(EditRecord, Scene)> {
    let step = apply_edit(scene, edit, rng)?;
    let after = sensitivity_scores(&step.scene, views, &record.views)?;
    let rewards = sensitivity_reward(record, &after, &step.lineage)?;
    let surrogate = rewards.iter().find(|(id, _)| *id == edit.id).map(|r| r.1).unwrap_or(0.0);
    let loss_after = scene_loss(&step.scene, views, &record.views)?;
    let rec = EditRecord { edit, surrogate, exact: loss - loss_after, accepted: false, loss_before: loss, loss_after };
    Ok((rec, step.scene))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Survey {
    pub records: Vec<EditRecord>,
    /// Largest `|R - R*|` over the surveyed edits.
    pub max_error: f64,
}

/// Measures `|R - R*|` over `n` seeded random single-Gaussian edits, with
/// actions drawn uniformly from `actions`.
pub fn surrogate_error_survey(scene: &Scene, n: usize, actions: &[Action], views: &[View], selection: &[usize], seed: u64) -> Result<Survey> {
    if n == 0 || actions.is_empty() || scene.is_empty() {
        return Err(Error::Validation("a survey needs at least one edit, action and gaussian".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let record = sensitivity_scores(scene, views, selection)?;
    let loss = scene_loss(scene, views, selection)?;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let id = scene.gaussians[rng.random_range(0..scene.len())].id;
        let action = actions[rng.random_range(0..actions.len())];
        records.push(evaluate_edit(scene, &record, loss, Edit { id, action }, views, &mut rng)?.0);
    }
    let max_error = records.iter().map(EditRecord::error).fold(0.0, f64::max);
    Ok(Survey { records, max_error })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentRun {
    pub tau: f64,
    /// Surrogate error bound the run is checked against.
    pub delta: f64,
    pub initial_loss: f64,
    pub records: Vec<EditRecord>,
    pub scene: Scene,
}

impl DescentRun {
    pub fn accepted(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }

    /// `ceil(L_0 / (tau - delta))`, or `None` when `tau <= delta`.
    pub fn edit_bound(&self) -> Option<usize> {
        (self.tau > self.delta).then(|| libm::ceil(self.initial_loss / (self.tau - self.delta)) as usize)
    }

    /// Accepted edits that decreased the loss by less than `tau - delta`.
    pub fn violations(&self) -> Vec<EditRecord> {
        let margin = self.tau - self.delta;
        self.records.iter().filter(|r| r.accepted && r.loss_after > r.loss_before - margin).copied().collect()
    }
}

/// Greedy descent: each round scores every `(gaussian, action)` candidate,
/// applies the best one if its surrogate reaches `tau`, and stops
/// otherwise or after `max_edits` accepted edits. Every evaluated best
/// candidate is recorded, the last one rejected unless the edit cap hit.
pub fn monotone_descent_run(
    scene: &Scene,
    tau: f64,
    delta: f64,
    actions: &[Action],
    max_edits: usize,
    views: &[View],
    selection: &[usize],
    seed: u64,
) -> Result<DescentRun> {
    if !(tau > 0.0) {
        return Err(Error::Validation("acceptance margin must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = scene.clone();
    let initial_loss = scene_loss(scene, views, selection)?;
    let mut loss = initial_loss;
    let mut records = Vec::new();
    let mut accepted = 0;
    while accepted < max_edits && !current.is_empty() {
        let record = sensitivity_scores(&current, views, selection)?;
        let mut best: Option<(EditRecord, Scene)> = None;
        for g in &current.gaussians {
            for &action in actions {
                let split_seed: u64 = rng.random();
                let mut edit_rng = ChaCha8Rng::seed_from_u64(split_seed);
                let cand = evaluate_edit(&current, &record, loss, Edit { id: g.id, action }, views, &mut edit_rng)?;
                if best.as_ref().is_none_or(|b| cand.0.surrogate > b.0.surrogate) {
                    best = Some(cand);
                }
            }
        }
        let Some((mut rec, next)) = best else { break };
        if rec.surrogate < tau {
            records.push(rec);
            break;
        }
        rec.accepted = true;
        records.push(rec);
        accepted += 1;
        loss = rec.loss_after;
        current = next;
    }
    Ok(DescentRun { tau, delta, initial_loss, records, scene: current })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneStepProbe {
    pub id: GaussianId,
    /// Surrogate reward per action, in [`Action::ALL`] order.
    pub surrogate: [f64; 4],
    pub exact: [f64; 4],
    /// Largest surrogate error over the four actions.
    pub delta_local: f64,
}

impl OneStepProbe {
    /// Action with the largest surrogate (first on ties).
    pub fn chosen(&self) -> Action {
        Action::ALL[argmax(&self.surrogate)]
    }

    pub fn best_exact(&self) -> f64 {
        self.exact.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `R*(chosen) >= max_a R*(a) - 2 delta_local`, up to `tol`.
    pub fn bound_holds(&self, tol: f64) -> bool {
        self.exact[self.chosen().index()] >= self.best_exact() - 2.0 * self.delta_local - tol
    }
}

fn argmax(v: &[f64; 4]) -> usize {
    (1..4).fold(0, |b, k| if v[k] > v[b] { k } else { b })
}

/// Evaluates all four actions on Gaussian `id`.
pub fn probe_one_step(scene: &Scene, id: GaussianId, views: &[View], selection: &[usize], seed: u64) -> Result<OneStepProbe> {
    let record = sensitivity_scores(scene, views, selection)?;
    let loss = scene_loss(scene, views, selection)?;
    let mut surrogate = [0.0; 4];
    let mut exact = [0.0; 4];
    for a in Action::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rec, _) = evaluate_edit(scene, &record, loss, Edit { id, action: a }, views, &mut rng)?;
        surrogate[a.index()] = rec.surrogate;
        exact[a.index()] = rec.exact;
    }
    let delta_local = (0..4).map(|k| (surrogate[k] - exact[k]).abs()).fold(0.0, f64::max);
    Ok(OneStepProbe { id, surrogate, exact, delta_local })
}

/// Largest number of recorded contributors at any pixel of any view.
pub fn max_overlap(scene: &Scene, views: &[View]) -> usize {
    views
        .iter()
        .map(|v| {
            let splats = project(scene, &v.camera);
            let out = render(&splats, v.camera.width, v.camera.height, scene.background, RenderOptions::recording());
            let states = out.states.expect("recorded");
            (0..out.image.pixel_count()).map(|i| states.pixel(i).len()).max().unwrap_or(0)
        })
        .max()
        .unwrap_or(0)
}

/// Small Gaussians on a widely spaced grid, seen by two near-frontal
/// 64x64 cameras so that no two footprints share a pixel. The targets show
/// only a seeded subset of the grid plus a color shift, so pruning the
/// others, and keeping the rest, is what lowers the loss.
pub fn disjoint_scene(seed: u64, side: usize) -> Result<(Scene, Vec<View>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = 0.5;
    let origin = -spacing * (side as f64 - 1.0) / 2.0;
    let mut gaussians = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            gaussians.push(Gaussian::new(
                Vector3::new(origin + spacing * i as f64, origin + spacing * j as f64, 0.0),
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                Vector3::new(0.04, 0.04, 0.04),
                rng.random_range(0.5..0.9),
                Vector3::new(rng.random(), rng.random(), rng.random()),
            ));
        }
    }
    let scene = Scene::new(gaussians, Some(1.0), [0.0; 3])?;
    let mut truth = scene.clone();
    let mut order: Vec<usize> = (0..truth.len()).collect();
    order.shuffle(&mut rng);
    let keep = &order[..truth.len() / 2];
    truth.gaussians = truth.gaussians.iter().enumerate().filter(|(k, _)| keep.contains(k)).map(|(_, g)| g.clone()).collect();
    for g in &mut truth.gaussians {
        g.color = g.color.map(|c| (c + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
    }
    let views = [-0.15, 0.15]
        .into_iter()
        .map(|az: f64| {
            let eye = Vector3::new(3.0 * libm::sin(az), 0.0, -3.0 * libm::cos(az));
            let camera = Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 80.0, 64, 64)?;
            let splats = project(&truth, &camera);
            let target = render(&splats, 64, 64, truth.background, RenderOptions::default()).image;
            Ok(View { camera, target })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scene, views))
}

/// A tight cluster of overlapping translucent Gaussians, fitted against a
/// jittered copy of itself.
pub fn overlapping_scene(seed: u64, n: usize) -> Result<(Scene, Vec<View>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians: Vec<Gaussian> = (0..n)
        .map(|_| {
            Gaussian::new(
                Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
                Vector4::new(1.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
                Vector3::new(rng.random_range(0.08..0.2), rng.random_range(0.08..0.2), rng.random_range(0.08..0.2)),
                rng.random_range(0.3..0.8),
                Vector3::new(rng.random(), rng.random(), rng.random()),
            )
        })
        .collect();
    let scene = Scene::new(gaussians, Some(1.0), [0.0; 3])?;
    let truth = crate::synth::degrade(&scene, crate::synth::Degrade::Jitter { position: 0.05, color: 0.15 }, seed ^ 0x5eed)?;
    let views = [0.0, 1.3, 2.6]
        .into_iter()
        .map(|az: f64| {
            let eye = Vector3::new(2.5 * libm::sin(az), 0.3, -2.5 * libm::cos(az));
            let camera = Camera::look_at(eye, Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0), 60.0, 32, 32)?;
            let splats = project(&truth, &camera);
            let target = render(&splats, 32, 32, truth.background, RenderOptions::default()).image;
            Ok(View { camera, target })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scene, views))
}
