use splatrl_core::compare::desk_config;
use splatrl_core::synth::{degrade, generate, Degrade, RecipeKind, SceneRecipe};
use splatrl_core::trainer::{evaluate_scene, Controller, LearnedOptions, TrainConfig, Trainer};

fn setup(kind: RecipeKind) -> (splatrl_core::scene::Scene, Vec<splatrl_core::sensitivity::View>) {
    let syn = generate(&SceneRecipe { cameras: 8, ..SceneRecipe::new(kind, 3, 64) }).unwrap();
    (degrade(&syn.scene, Degrade::SPARSE, 3).unwrap(), syn.views)
}

fn config(controller: Controller) -> TrainConfig {
    TrainConfig {
        iterations: 300,
        densify_from: 50,
        densify_until: 250,
        densify_interval: 50,
        sensitivity_views: 4,
        eval_interval: 100,
        controller,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn frozen_all_maintain_matches_no_density_run() {
    let (init, views) = setup(RecipeKind::TextureGrid);
    let frozen = Controller::Learned(LearnedOptions { frozen: true, greedy: true, ..Default::default() });
    let mut a = Trainer::new(config(frozen), init.clone(), views.clone()).unwrap();
    a.run().unwrap();
    assert!(a.lineage_log.iter().all(|(_, l)| l.entries.iter().all(|e| e.offspring == [e.parent])));

    let plain = TrainConfig { densify_interval: 1000, ..config(Controller::MaintainOnly) };
    let mut b = Trainer::new(plain, init, views).unwrap();
    b.run().unwrap();
    assert!(b.lineage_log.is_empty());
    assert_eq!(a.scene, b.scene);
    let psnr = |t: &Trainer| t.log.iter().map(|r| r.psnr).collect::<Vec<_>>();
    assert_eq!(psnr(&a), psnr(&b));
}

#[test]
fn optimization_alone_lowers_the_loss() {
    let (init, views) = setup(RecipeKind::FlatCard);
    let mut t = Trainer::new(TrainConfig { densify_interval: 1000, ..config(Controller::MaintainOnly) }, init, views).unwrap();
    t.run().unwrap();
    assert!(t.log.last().unwrap().loss < t.log[0].loss);
}

#[test]
fn full_run_gains_ten_db_over_initialization() {
    let syn = generate(&SceneRecipe::new(RecipeKind::TextureGrid, 1, 64)).unwrap();
    let init = degrade(&syn.scene, Degrade::SPARSE, 1).unwrap();
    let before = evaluate_scene(&init, &syn.views, 16).unwrap().0;
    let mut t = Trainer::new(desk_config(1000, 1, Controller::Learned(LearnedOptions::default())), init, syn.views).unwrap();
    t.run().unwrap();
    let after = t.log.last().unwrap().psnr;
    assert!(after >= before + 10.0, "{before} -> {after}");
}

#[test]
fn same_seed_gives_identical_logs() {
    let (init, views) = setup(RecipeKind::Clutter);
    let run = || {
        let mut t = Trainer::new(config(Controller::Learned(LearnedOptions::default())), init.clone(), views.clone()).unwrap();
        t.run().unwrap();
        t
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.scene, b.scene);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (init, views) = setup(RecipeKind::TextureGrid);
    let mut full = Trainer::new(config(Controller::Learned(LearnedOptions::default())), init.clone(), views.clone()).unwrap();
    full.run().unwrap();

    let mut first = Trainer::new(config(Controller::Learned(LearnedOptions::default())), init, views.clone()).unwrap();
    first.run_until(150).unwrap();
    let mut resumed = Trainer::restore(&first.checkpoint(), views).unwrap();
    resumed.run().unwrap();
    assert_eq!(resumed, full);
}
