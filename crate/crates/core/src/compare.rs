//! Desk-scale controller comparison: each run starts from a sparse
//! initialization of a synthetic scene; the heuristic is count-matched to the
//! learned run on the same recipe and seed.

use alloc::vec::Vec;

use crate::density::Lineage;
use crate::error::Result;
use crate::synth::{degrade, generate, Degrade, RecipeKind, SceneRecipe};
use crate::trainer::{Controller, HeuristicOptions, LearnedOptions, TrainConfig, Trainer};

pub const DESK_ITERATIONS: usize = 2000;
pub const DESK_RESOLUTION: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub psnr: f64,
    pub ssim: f64,
    pub gaussians: usize,
}

/// Gaussian count after each density step.
pub fn count_trajectory(lineage_log: &[(usize, Lineage)]) -> Vec<usize> {
    lineage_log.iter().map(|(_, l)| l.entries.iter().map(|e| e.offspring.len()).sum()).collect()
}

/// The scaled default schedule, evaluating only at the end.
pub fn desk_config(iterations: usize, seed: u64, controller: Controller) -> TrainConfig {
    TrainConfig { controller, seed, eval_interval: iterations, ..TrainConfig::scaled(iterations) }
}

/// Trains one controller on `kind` from the sparse initialization.
pub fn desk_run(kind: RecipeKind, seed: u64, resolution: usize, iterations: usize, controller: Controller) -> Result<Trainer> {
    let syn = generate(&SceneRecipe::new(kind, seed, resolution))?;
    let init = degrade(&syn.scene, Degrade::SPARSE, seed)?;
    let mut t = Trainer::new(desk_config(iterations, seed, controller), init, syn.views)?;
    t.run()?;
    Ok(t)
}

pub fn summarize(t: &Trainer) -> Result<RunSummary> {
    let (psnr, ssim) = match t.log.last() {
        Some(r) if r.iteration == t.iteration => (r.psnr, r.ssim),
        _ => t.evaluate()?,
    };
    Ok(RunSummary { psnr, ssim, gaussians: t.scene.len() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub learned: RunSummary,
    pub heuristic: RunSummary,
    pub maintain: RunSummary,
}

/// Runs the learned controller, the heuristic matched to its count after
/// every density step, and the maintain-only baseline.
pub fn compare(kind: RecipeKind, seed: u64, resolution: usize, iterations: usize) -> Result<Comparison> {
    let learned = desk_run(kind, seed, resolution, iterations, Controller::Learned(LearnedOptions::default()))?;
    let targets = count_trajectory(&learned.lineage_log);
    let options = HeuristicOptions { count_targets: (!targets.is_empty()).then_some(targets), ..HeuristicOptions::default() };
    let heuristic = desk_run(kind, seed, resolution, iterations, Controller::Heuristic(options))?;
    let maintain = desk_run(kind, seed, resolution, iterations, Controller::MaintainOnly)?;
    Ok(Comparison { learned: summarize(&learned)?, heuristic: summarize(&heuristic)?, maintain: summarize(&maintain)? })
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
