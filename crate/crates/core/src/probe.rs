//! Local-optimality probe: for sampled Gaussians, branch the run once per
//! action, optimize each branch for a short horizon and call the action with
//! the best resulting PSNR locally optimal.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::density::Action;
use crate::error::{Error, Result};
use crate::scene::GaussianId;
use crate::trainer::Trainer;

pub const DEFAULT_HORIZON: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSample {
    pub id: GaussianId,
    /// Index of the Gaussian in the probed scene.
    pub index: usize,
    /// Mean PSNR after the horizon, per action in [`Action::ALL`] order.
    pub psnr: [f64; 4],
}

impl ProbeSample {
    /// Argmax-PSNR action, first on ties.
    pub fn best(&self) -> Action {
        let k = (1..4).fold(0, |b, k| if self.psnr[k] > self.psnr[b] { k } else { b });
        Action::ALL[k]
    }
}

/// Sorted scene indices of `max(1, round(fraction * n))` Gaussians, capped at
/// `n`.
pub fn sample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!("sample fraction must be in (0, 1], got {fraction}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let k = (libm::round(fraction * n as f64) as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Probes the Gaussians at `indices` of `trainer.scene`. Each branch applies
/// one action to one Gaussian, maintains the rest and then runs `horizon`
/// plain optimization steps; branches share the view sequence.
pub fn local_optimality_probe(trainer: &Trainer, indices: &[usize], horizon: usize) -> Result<Vec<ProbeSample>> {
    let n = trainer.scene.len();
    let mut out = Vec::with_capacity(indices.len());
    for &index in indices {
        if index >= n {
            return Err(Error::Validation(format!("probe index {index} for {n} gaussians")));
        }
        let mut psnr = [0.0; 4];
        for a in Action::ALL {
            let mut actions = vec![Action::Maintain; n];
            actions[index] = a;
            let mut branch = trainer.branch(&actions)?;
            for _ in 0..horizon {
                branch.optimize_step()?;
            }
            psnr[a.index()] = branch.evaluate()?.0;
        }
        out.push(ProbeSample { id: trainer.scene.gaussians[index].id, index, psnr });
    }
    Ok(out)
}

/// Fraction of samples whose best action equals `choices[sample.index]`.
pub fn match_rate(samples: &[ProbeSample], choices: &[Action]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("no probe samples".into()));
    }
    let mut hits = 0;
    for s in samples {
        let c = choices.get(s.index).ok_or_else(|| Error::Validation(format!("no choice for index {}", s.index)))?;
        hits += usize::from(*c == s.best());
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub iteration: usize,
    pub samples: Vec<ProbeSample>,
    pub learned: Vec<Action>,
    pub heuristic: Vec<Action>,
}

impl ProbeReport {
    pub fn learned_rate(&self) -> Result<f64> {
        match_rate(&self.samples, &self.learned)
    }

    pub fn heuristic_rate(&self) -> Result<f64> {
        match_rate(&self.samples, &self.heuristic)
    }
}

/// Advances a learned run to each checkpoint iteration and probes
/// `per_checkpoint` Gaussians there (all of them if fewer exist). The
/// learned choice is the policy's most probable action; the heuristic one
/// comes from `options` applied to the same state.
pub fn probe_run(
    trainer: &mut Trainer,
    checkpoints: &[usize],
    per_checkpoint: usize,
    horizon: usize,
    options: &crate::trainer::HeuristicOptions,
    seed: u64,
) -> Result<Vec<ProbeReport>> {
    let mut reports = Vec::with_capacity(checkpoints.len());
    for (k, &it) in checkpoints.iter().enumerate() {
        trainer.run_until(it)?;
        let n = trainer.scene.len();
        let fraction = if n == 0 { 1.0 } else { (per_checkpoint as f64 / n as f64).min(1.0) };
        let indices = sample_indices(n, fraction, seed.wrapping_add(k as u64))?;
        let learned = trainer.clone().decide()?.actions;
        let heuristic = trainer.heuristic_actions(options);
        let samples = local_optimality_probe(trainer, &indices, horizon)?;
        reports.push(ProbeReport { iteration: trainer.iteration, samples, learned, heuristic });
    }
    Ok(reports)
}
