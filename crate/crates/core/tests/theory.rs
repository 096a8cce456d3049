use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatrl_core::density::Action;
use splatrl_core::projection::project;
use splatrl_core::raster::{render, RenderOptions};
use splatrl_core::theory::*;

#[test]
fn disjoint_scene_has_exact_surrogate() {
    for seed in 0..3 {
        let (scene, views) = disjoint_scene(seed, 4).unwrap();
        assert_eq!(max_overlap(&scene, &views), 1);
        let survey = surrogate_error_survey(&scene, 24, &[Action::Maintain, Action::Prune], &views, &[0, 1], seed).unwrap();
        assert!(survey.max_error < 1e-6, "seed {seed}: {}", survey.max_error);
    }
}

#[test]
fn maintain_edits_have_no_error() {
    let (scene, views) = overlapping_scene(4, 10).unwrap();
    let survey = surrogate_error_survey(&scene, 10, &[Action::Maintain], &views, &[0, 1, 2], 1).unwrap();
    assert!(survey.records.iter().all(|r| r.surrogate == 0.0 && r.exact == 0.0));
}

#[test]
fn overlapping_scene_reports_positive_error() {
    let (scene, views) = overlapping_scene(2, 12).unwrap();
    let survey = surrogate_error_survey(&scene, 30, &Action::ALL, &views, &[0, 1, 2], 9).unwrap();
    assert!(survey.max_error > 0.0);
}

// Loss recomputed by hand from fresh renders, independent of scene_loss.
#[test]
fn exact_gain_matches_independent_loss() {
    let (scene, views) = overlapping_scene(6, 8).unwrap();
    let loss = |s: &splatrl_core::scene::Scene| -> f64 {
        let mut total = 0.0;
        for v in &views {
            let img = render(&project(s, &v.camera), v.camera.width, v.camera.height, s.background, RenderOptions::default()).image;
            for (p, q) in img.data.iter().zip(&v.target.data) {
                for c in 0..3 {
                    total += (p[c] - q[c]).abs();
                }
            }
        }
        total
    };
    for (k, action) in Action::ALL.into_iter().enumerate() {
        let edit = Edit { id: scene.gaussians[k].id, action };
        let gain = exact_gain(&scene, edit, &views, &[0, 1, 2], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let edited = apply_edit(&scene, edit, &mut ChaCha8Rng::seed_from_u64(3)).unwrap().scene;
        let expected = loss(&scene) - loss(&edited);
        assert!((gain - expected).abs() < 1e-9 * (1.0 + expected.abs()), "{action:?}: {gain} vs {expected}");
    }
}

#[test]
fn descent_respects_margin_and_terminates() {
    for seed in 0..3 {
        let (scene, views) = disjoint_scene(seed, 4).unwrap();
        let actions = [Action::Maintain, Action::Prune];
        let delta = surrogate_error_survey(&scene, 32, &actions, &views, &[0, 1], seed).unwrap().max_error;
        let run = monotone_descent_run(&scene, 0.01, delta, &actions, 64, &views, &[0, 1], seed).unwrap();
        assert!(run.accepted() > 0);
        assert!(run.violations().is_empty(), "{:?}", run.violations());
        assert!(run.accepted() <= run.edit_bound().unwrap());
        assert!(!run.records.last().unwrap().accepted);
    }
}

#[test]
fn one_step_bound_holds_on_overlapping_scenes() {
    for seed in 0..3 {
        let (scene, views) = overlapping_scene(seed, 10).unwrap();
        for g in &scene.gaussians {
            let p = probe_one_step(&scene, g.id, &views, &[0, 1, 2], seed).unwrap();
            assert!(p.bound_holds(1e-9), "{p:?}");
        }
    }
}
