//! The optimization loop with periodic density control by the threshold
//! heuristic, the learned policy, or nothing at all.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamConfig, AdamState, FlatAdam, LearningRates};
use crate::backward::{backward_with, layout, GaussianGrads};
use crate::codec::{Decode, Encode, Reader, Writer};
use crate::density::{
    apply_actions, heuristic_decide, heuristic_decide_budget, prune_oversized, reset_opacity, Action, HeuristicThresholds, Lineage,
};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, LossConfig};
use crate::policy::{greedy_actions, raw_features, sample_actions, ActionDist, FeatureNormalizer, PolicyNet, BLOCKS, FEATURE_DIM, HIDDEN};
use crate::ppo::{maintain_baseline, ppo_update, Batch, PpoConfig, RolloutBuffer, StepRecord};
use crate::projection::project;
use crate::raster::{render, RenderOptions};
use crate::scene::Scene;
use crate::sensitivity::{combine_views, score_view, sensitivity_reward, sensitivity_scores, View};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SPLC";
const CHECKPOINT_VERSION: u32 = 1;

const MAIN_STREAM: u64 = 0;
const DENSITY_STREAM: u64 = 1;
const POLICY_INIT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicOptions {
    pub thresholds: HeuristicThresholds,
    /// Prune Gaussians larger than this fraction of the extent.
    pub prune_oversized: Option<f64>,
    /// `(interval, ceiling)`: cap opacities every `interval` iterations
    /// inside the densification window.
    pub opacity_reset: Option<(usize, f64)>,
    /// Target Gaussian count after each density step. When set, the
    /// heuristic densifies the top-gradient Gaussians needed to reach it
    /// instead of thresholding; the last entry repeats.
    pub count_targets: Option<Vec<usize>>,
}

impl Default for HeuristicOptions {
    fn default() -> Self {
        Self { thresholds: HeuristicThresholds::default(), prune_oversized: None, opacity_reset: None, count_targets: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LearnedOptions {
    pub ppo: PpoConfig,
    /// Keep the policy fixed (no rollouts, no updates).
    pub frozen: bool,
    /// Take the most probable action instead of sampling.
    pub greedy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    Heuristic(HeuristicOptions),
    Learned(LearnedOptions),
    /// Density steps run but every Gaussian is maintained.
    MaintainOnly,
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Heuristic(_) => "heuristic",
            Controller::Learned(_) => "learned",
            Controller::MaintainOnly => "maintain-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    /// Views per sensitivity record.
    pub sensitivity_views: usize,
    pub loss: LossConfig,
    pub rates: LearningRates,
    pub adam: AdamConfig,
    pub controller: Controller,
    pub max_gaussians: usize,
    /// Iterations between log rows; the last iteration is always logged.
    pub eval_interval: usize,
    pub tile_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            densify_from: 500,
            densify_until: 15_000,
            densify_interval: 100,
            sensitivity_views: 10,
            loss: LossConfig::default(),
            rates: LearningRates::default(),
            adam: AdamConfig::default(),
            controller: Controller::Learned(LearnedOptions::default()),
            max_gaussians: 5000,
            eval_interval: 100,
            tile_size: crate::raster::TILE_SIZE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The default schedule with iteration counts scaled to a run of
    /// `iterations`.
    pub fn scaled(iterations: usize) -> Self {
        let d = Self::default();
        let scale = |v: usize| v * iterations / d.iterations;
        Self { iterations, densify_from: scale(d.densify_from), densify_until: scale(d.densify_until), ..d }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.densify_interval == 0 || self.eval_interval == 0 {
            return Err(Error::Validation("iteration counts and intervals must be positive".into()));
        }
        if self.sensitivity_views == 0 {
            return Err(Error::Validation("sensitivity needs at least one view".into()));
        }
        if self.max_gaussians == 0 || self.tile_size == 0 {
            return Err(Error::Validation("max_gaussians and tile_size must be positive".into()));
        }
        self.loss.validate()?;
        self.rates.validate()?;
        match &self.controller {
            Controller::Heuristic(h) => {
                h.thresholds.validate()?;
                if matches!(h.opacity_reset, Some((0, _))) {
                    return Err(Error::Validation("opacity reset interval must be positive".into()));
                }
                if matches!(&h.count_targets, Some(t) if t.is_empty()) {
                    return Err(Error::Validation("count targets must not be empty".into()));
                }
            }
            Controller::Learned(l) => l.ppo.validate()?,
            Controller::MaintainOnly => {}
        }
        Ok(())
    }

    fn density_due(&self, it: usize) -> bool {
        it % self.densify_interval == 0 && it >= self.densify_from && it <= self.densify_until
    }

    fn window_progress(&self, it: usize) -> f64 {
        let span = self.densify_until.saturating_sub(self.densify_from).max(1);
        it.saturating_sub(self.densify_from) as f64 / span as f64
    }
}

/// One row of the run log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogRow {
    pub iteration: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub gaussians: usize,
    /// Counts per action (maintain, clone, split, prune) over the density
    /// steps since the previous row.
    pub actions: [usize; 4],
    pub mean_reward: Option<f64>,
    pub mean_advantage: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub baseline: Option<f64>,
}

/// A learned controller's network, optimizer and rollout state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    pub net: PolicyNet,
    pub adam: FlatAdam,
    pub normalizer: FeatureNormalizer,
    pub buffer: RolloutBuffer,
}

impl PolicyState {
    pub fn new(net: PolicyNet) -> Self {
        let adam = FlatAdam::new(net.param_count(), AdamConfig::default());
        Self { net, adam, normalizer: FeatureNormalizer::default(), buffer: RolloutBuffer::default() }
    }
}

/// What a density step decided, with the policy inputs when a policy ran.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub actions: Vec<Action>,
    pub features: Option<Vec<[f64; FEATURE_DIM]>>,
    pub dists: Option<Vec<ActionDist>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Pending {
    loss_sum: f64,
    loss_count: usize,
    actions: [usize; 4],
    rewards: Vec<f64>,
    baselines: Vec<f64>,
    advantage: Option<f64>,
    clip_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub scene: Scene,
    pub views: Vec<View>,
    pub adam: AdamState,
    pub policy: Option<PolicyState>,
    pub iteration: usize,
    pub density_steps: usize,
    pub log: Vec<LogRow>,
    /// `(iteration, lineage)` for every density step.
    pub lineage_log: Vec<(usize, Lineage)>,
    main_rng: ChaCha8Rng,
    density_rng: ChaCha8Rng,
    view_queue: Vec<usize>,
    /// View-space gradient statistic since the last density step; the
    /// parameter gradients stay zero.
    grad_accum: GaussianGrads,
    pending: Pending,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    pub fn new(config: TrainConfig, scene: Scene, views: Vec<View>) -> Result<Self> {
        let policy = match config.controller {
            Controller::Learned(_) => {
                let mut rng = stream_rng(config.seed, POLICY_INIT_STREAM);
                Some(PolicyState::new(PolicyNet::new(FEATURE_DIM, HIDDEN, BLOCKS, &mut rng)))
            }
            _ => None,
        };
        Self::with_policy(config, scene, views, policy)
    }

    /// Starts a run with a given policy state (for instance a pre-trained
    /// network); `policy` must be present exactly when the controller is
    /// learned.
    pub fn with_policy(config: TrainConfig, scene: Scene, views: Vec<View>, policy: Option<PolicyState>) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        if views.is_empty() {
            return Err(Error::Validation("training needs at least one view".into()));
        }
        for v in &views {
            if v.target.width != v.camera.width || v.target.height != v.camera.height {
                return Err(Error::ShapeMismatch(format!(
                    "target {}x{} for a {}x{} camera",
                    v.target.width, v.target.height, v.camera.width, v.camera.height
                )));
            }
        }
        if policy.is_some() != matches!(config.controller, Controller::Learned(_)) {
            return Err(Error::Validation("a policy is required by, and only by, the learned controller".into()));
        }
        if let Some(p) = &policy {
            if p.net.input != FEATURE_DIM {
                return Err(Error::Validation(format!("policy expects {} features, not {FEATURE_DIM}", p.net.input)));
            }
        }
        let adam = AdamState::new(&scene, config.adam, config.rates);
        let grad_accum = GaussianGrads::zeros(&scene);
        Ok(Self {
            main_rng: stream_rng(config.seed, MAIN_STREAM),
            density_rng: stream_rng(config.seed, DENSITY_STREAM),
            config,
            scene,
            views,
            adam,
            policy,
            iteration: 0,
            density_steps: 0,
            log: Vec::new(),
            lineage_log: Vec::new(),
            view_queue: Vec::new(),
            grad_accum,
            pending: Pending::default(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.iterations)
    }

    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        while self.iteration < iteration.min(self.config.iterations) {
            self.step()?;
        }
        Ok(())
    }

    fn next_view(&mut self) -> usize {
        if self.view_queue.is_empty() {
            self.view_queue = (0..self.views.len()).collect();
            self.view_queue.shuffle(&mut self.main_rng);
        }
        self.view_queue.pop().unwrap_or(0)
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions { tile_size: self.config.tile_size, record_state: true }
    }

    /// One optimization iteration, followed by density control, opacity
    /// reset and logging when due.
    pub fn step(&mut self) -> Result<()> {
        self.optimize_step()?;
        let it = self.iteration;
        if self.config.density_due(it) {
            self.density_step()?;
        }
        if let Controller::Heuristic(HeuristicOptions { opacity_reset: Some((interval, ceiling)), .. }) = self.config.controller {
            if it % interval == 0 && it >= self.config.densify_from && it <= self.config.densify_until {
                reset_opacity(&mut self.scene, ceiling);
                for m in self.adam.m.iter_mut().chain(self.adam.v.iter_mut()) {
                    m[layout::OPACITY] = 0.0;
                }
            }
        }
        if it % self.config.eval_interval == 0 || it == self.config.iterations {
            self.push_log_row()?;
        }
        Ok(())
    }

    /// A gradient step on the next view, with no density control or
    /// logging.
    pub fn optimize_step(&mut self) -> Result<()> {
        let v = self.next_view();
        let view = &self.views[v];
        let res = backward_with(&self.scene, &view.camera, &view.target, &self.config.loss, self.render_options())?;
        if !res.loss.is_finite() || !res.grads.is_finite() {
            return Err(Error::NonFinite(format!("loss {} at iteration {}", res.loss, self.iteration)));
        }
        for (k, (s, c)) in res.grads.view_grad_sum.iter().zip(&res.grads.view_count).enumerate() {
            self.grad_accum.view_grad_sum[k] += s;
            self.grad_accum.view_count[k] += c;
        }
        let progress = self.iteration as f64 / self.config.iterations as f64;
        adam_step(&mut self.scene, &res.grads, &mut self.adam, progress)?;
        self.pending.loss_sum += res.loss;
        self.pending.loss_count += 1;
        self.iteration += 1;
        Ok(())
    }

    /// A copy of this run with `actions` applied as an extra density step.
    /// Policy buffers and logs are carried over untouched.
    pub fn branch(&self, actions: &[Action]) -> Result<Trainer> {
        let mut b = self.clone();
        b.apply(actions)?;
        Ok(b)
    }

    /// Mean PSNR and SSIM over all views.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        evaluate_scene(&self.scene, &self.views, self.config.tile_size)
    }

    fn push_log_row(&mut self) -> Result<()> {
        let (p, s) = self.evaluate()?;
        let pending = core::mem::take(&mut self.pending);
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        self.log.push(LogRow {
            iteration: self.iteration,
            loss: if pending.loss_count == 0 { 0.0 } else { pending.loss_sum / pending.loss_count as f64 },
            psnr: p,
            ssim: s,
            gaussians: self.scene.len(),
            actions: pending.actions,
            mean_reward: mean(&pending.rewards),
            mean_advantage: pending.advantage,
            clip_fraction: pending.clip_fraction,
            baseline: mean(&pending.baselines),
        });
        Ok(())
    }

    fn sample_views(&mut self) -> Vec<usize> {
        let k = self.config.sensitivity_views.min(self.views.len());
        let mut sel = sample(&mut self.density_rng, self.views.len(), k).into_vec();
        sel.sort_unstable();
        sel
    }

    /// Gradients averaged over the selected views and the matching
    /// sensitivity record, from one recorded render per view.
    pub fn view_statistics(&self, selection: &[usize]) -> Result<(GaussianGrads, crate::sensitivity::SensitivityRecord)> {
        let mut grads = GaussianGrads::zeros(&self.scene);
        let mut per_view = Vec::with_capacity(selection.len());
        for &v in selection {
            let view = &self.views[v];
            let res = backward_with(&self.scene, &view.camera, &view.target, &self.config.loss, self.render_options())?;
            grads.accumulate(&res.grads);
            per_view.push(score_view(self.scene.len(), &res.splats, &res.output, &view.target)?);
        }
        let inv = 1.0 / selection.len() as f64;
        for p in &mut grads.params {
            p.iter_mut().for_each(|x| *x *= inv);
        }
        Ok((grads, combine_views(&self.scene, &per_view, selection)))
    }

    /// Policy features for the current scene on the given views. Does not
    /// update the normalizer.
    pub fn policy_features(&self, selection: &[usize]) -> Result<Vec<[f64; FEATURE_DIM]>> {
        let policy = self.policy.as_ref().ok_or_else(|| Error::Validation("no policy in this run".into()))?;
        let (grads, record) = self.view_statistics(selection)?;
        Ok(policy.normalizer.apply(&raw_features(&grads, &record)?))
    }

    /// The heuristic's decision for the current state, from the gradient
    /// statistic accumulated since the last density step.
    pub fn heuristic_actions(&self, options: &HeuristicOptions) -> Vec<Action> {
        let stat = self.grad_accum.mean_view_grad();
        let th = &options.thresholds;
        let mut actions = match &options.count_targets {
            None => heuristic_decide(&stat, &self.scene, th),
            Some(targets) => {
                let target = targets[self.density_steps.min(targets.len() - 1)];
                let prunes = self.scene.gaussians.iter().filter(|g| g.opacity() < th.opacity).count();
                let budget = target.saturating_sub(self.scene.len() - prunes);
                heuristic_decide_budget(&stat, &self.scene, th, budget)
            }
        };
        if let Some(f) = options.prune_oversized {
            prune_oversized(&self.scene, &mut actions, f);
        }
        actions
    }

    /// Downgrades densifications, newest Gaussians first, until the step
    /// fits under `max_gaussians`.
    fn cap_actions(&self, actions: &mut [Action]) -> Vec<usize> {
        let grow = |a: &Action| matches!(a, Action::Clone | Action::Split);
        let prunes = actions.iter().filter(|a| **a == Action::Prune).count();
        let mut after = self.scene.len() - prunes + actions.iter().filter(|a| grow(a)).count();
        let mut changed = Vec::new();
        for k in (0..actions.len()).rev() {
            if after <= self.config.max_gaussians.max(self.scene.len() - prunes) {
                break;
            }
            if grow(&actions[k]) {
                actions[k] = Action::Maintain;
                after -= 1;
                changed.push(k);
            }
        }
        changed
    }

    fn density_step(&mut self) -> Result<()> {
        let controller = self.config.controller.clone();
        match controller {
            Controller::MaintainOnly => {
                let actions = vec![Action::Maintain; self.scene.len()];
                self.apply(&actions)?;
            }
            Controller::Heuristic(options) => {
                let mut actions = self.heuristic_actions(&options);
                self.cap_actions(&mut actions);
                self.apply(&actions)?;
            }
            Controller::Learned(options) => self.learned_step(&options)?,
        }
        self.density_steps += 1;
        Ok(())
    }

    fn apply(&mut self, actions: &[Action]) -> Result<Lineage> {
        let step = apply_actions(&self.scene, actions, &mut self.density_rng)?;
        for a in actions {
            self.pending.actions[a.index()] += 1;
        }
        self.scene = step.scene;
        self.adam.rebuild(&self.scene, &step.moments)?;
        self.grad_accum = GaussianGrads::zeros(&self.scene);
        self.lineage_log.push((self.iteration, step.lineage.clone()));
        Ok(step.lineage)
    }

    fn learned_step(&mut self, options: &LearnedOptions) -> Result<()> {
        let selection = self.sample_views();
        let (grads, before) = self.view_statistics(&selection)?;
        let raw = raw_features(&grads, &before)?;
        let policy = self.policy.as_mut().expect("learned controller has a policy");
        if !options.frozen {
            policy.normalizer.observe(&raw);
        }
        let features = policy.normalizer.apply(&raw);
        let flat: Vec<f64> = features.iter().flatten().copied().collect();
        let dists = policy.net.forward(&flat)?;
        let (mut actions, mut logp) = if options.greedy {
            let a = greedy_actions(&dists);
            let lp = a.iter().zip(&dists).map(|(a, d)| d.log_prob(*a)).collect();
            (a, lp)
        } else {
            sample_actions(&dists, &mut self.density_rng)
        };
        for k in self.cap_actions(&mut actions) {
            logp[k] = dists[k].log_prob(Action::Maintain);
        }
        let ids: Vec<_> = self.scene.ids().collect();
        let lineage = self.apply(&actions)?;
        if options.frozen {
            return Ok(());
        }

        let after = sensitivity_scores(&self.scene, &self.views, &selection)?;
        let rewards: Vec<f64> = sensitivity_reward(&before, &after, &lineage)?.into_iter().map(|(_, r)| r).collect();
        self.pending.baselines.push(maintain_baseline(&actions, &rewards)?);
        self.pending.rewards.extend_from_slice(&rewards);

        let policy = self.policy.as_mut().expect("learned controller has a policy");
        policy.buffer.push(StepRecord { ids, features, actions, old_logp: logp, rewards, lineage })?;
        if policy.buffer.steps.len() >= options.ppo.horizon {
            let advantages = policy.buffer.advantages(&options.ppo)?;
            let raw_adv = policy.buffer.raw_advantages(&options.ppo)?;
            let batch = Batch::from_buffer(&policy.buffer, advantages)?;
            let lr = options.ppo.lr_at(self.config.window_progress(self.iteration));
            let diag = ppo_update(&mut policy.net, &mut policy.adam, &batch, &options.ppo, lr, &mut self.density_rng)?;
            let flat_adv: Vec<f64> = raw_adv.into_iter().flatten().collect();
            self.pending.advantage = Some(flat_adv.iter().sum::<f64>() / flat_adv.len().max(1) as f64);
            self.pending.clip_fraction = Some(diag.mean.clip_fraction);
            policy.buffer.clear();
        }
        Ok(())
    }

    /// What the run's controller would decide now, without applying it.
    /// Learned controllers report their most probable action.
    pub fn decide(&mut self) -> Result<Decision> {
        match self.config.controller.clone() {
            Controller::MaintainOnly => Ok(Decision { actions: vec![Action::Maintain; self.scene.len()], features: None, dists: None }),
            Controller::Heuristic(o) => Ok(Decision { actions: self.heuristic_actions(&o), features: None, dists: None }),
            Controller::Learned(_) => {
                let selection = self.sample_views();
                let features = self.policy_features(&selection)?;
                let flat: Vec<f64> = features.iter().flatten().copied().collect();
                let dists = self.policy.as_ref().expect("learned controller has a policy").net.forward(&flat)?;
                Ok(Decision { actions: greedy_actions(&dists), features: Some(features), dists: Some(dists) })
            }
        }
    }

    /// Serializes the full run state. The views are not included.
    pub fn checkpoint(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        self.config.encode(&mut w);
        self.scene.encode(&mut w);
        self.adam.encode(&mut w);
        w.bool(self.policy.is_some());
        if let Some(p) = &self.policy {
            p.net.encode(&mut w);
            p.adam.encode(&mut w);
            p.normalizer.encode(&mut w);
            p.buffer.encode(&mut w);
        }
        w.usize(self.iteration);
        w.usize(self.density_steps);
        w.usize(self.log.len());
        for row in &self.log {
            row.encode(&mut w);
        }
        w.usize(self.lineage_log.len());
        for (it, l) in &self.lineage_log {
            w.usize(*it);
            l.encode(&mut w);
        }
        encode_rng(&mut w, &self.main_rng);
        encode_rng(&mut w, &self.density_rng);
        w.usize(self.view_queue.len());
        for &v in &self.view_queue {
            w.usize(v);
        }
        w.f64s(&self.grad_accum.view_grad_sum);
        w.usize(self.grad_accum.view_count.len());
        for &c in &self.grad_accum.view_count {
            w.u32(c);
        }
        self.pending.encode(&mut w);
        w.into_bytes()
    }

    /// Rebuilds a run from [`Trainer::checkpoint`] output and its views.
    pub fn restore(bytes: &[u8], views: Vec<View>) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes()? != CHECKPOINT_MAGIC {
            return Err(Error::Decode("not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Decode(format!("unsupported checkpoint version {version}")));
        }
        let config = TrainConfig::decode(&mut r)?;
        let scene = Scene::decode(&mut r)?;
        let adam = AdamState::decode(&mut r)?;
        let policy = if r.bool()? {
            Some(PolicyState {
                net: PolicyNet::decode(&mut r)?,
                adam: FlatAdam::decode(&mut r)?,
                normalizer: FeatureNormalizer::decode(&mut r)?,
                buffer: RolloutBuffer::decode(&mut r)?,
            })
        } else {
            None
        };
        let mut t = Self::with_policy(config, scene, views, policy)?;
        t.adam = adam;
        t.iteration = r.usize()?;
        t.density_steps = r.usize()?;
        let rows = r.len(8)?;
        t.log = (0..rows).map(|_| LogRow::decode(&mut r)).collect::<Result<_>>()?;
        let steps = r.len(8)?;
        t.lineage_log = (0..steps).map(|_| Ok((r.usize()?, Lineage::decode(&mut r)?))).collect::<Result<_>>()?;
        t.main_rng = decode_rng(&mut r)?;
        t.density_rng = decode_rng(&mut r)?;
        let q = r.len(8)?;
        t.view_queue = (0..q).map(|_| r.usize()).collect::<Result<_>>()?;
        if t.view_queue.iter().any(|&v| v >= t.views.len()) {
            return Err(Error::Decode("checkpoint refers to views that were not supplied".into()));
        }
        t.grad_accum.view_grad_sum = r.f64s()?;
        let c = r.len(4)?;
        t.grad_accum.view_count = (0..c).map(|_| r.u32()).collect::<Result<_>>()?;
        if t.grad_accum.view_grad_sum.len() != t.scene.len() || c != t.scene.len() {
            return Err(Error::Decode("gradient statistics do not match the scene".into()));
        }
        t.pending = Pending::decode(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Decode("trailing bytes after checkpoint".into()));
        }
        if t.adam.ids != t.scene.ids().collect::<Vec<_>>() {
            return Err(Error::Decode("optimizer state does not match the scene".into()));
        }
        Ok(t)
    }
}

/// Mean PSNR and SSIM of `scene` over `views`.
pub fn evaluate_scene(scene: &Scene, views: &[View], tile_size: usize) -> Result<(f64, f64)> {
    let (mut p, mut s) = (0.0, 0.0);
    for v in views {
        let splats = project(scene, &v.camera);
        let img = render(&splats, v.camera.width, v.camera.height, scene.background, RenderOptions { tile_size, record_state: false }).image;
        p += psnr(&img, &v.target)?;
        s += ssim(&img, &v.target)?;
    }
    let n = views.len().max(1) as f64;
    Ok((p / n, s / n))
}

fn encode_rng(w: &mut Writer, rng: &ChaCha8Rng) {
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    let pos = rng.get_word_pos();
    w.u64(pos as u64);
    w.u64((pos >> 64) as u64);
}

fn decode_rng(r: &mut Reader) -> Result<ChaCha8Rng> {
    let seed: [u8; 32] = r.bytes()?.try_into().map_err(|_| Error::Decode("rng seed must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    rng.set_word_pos(lo | (hi << 64));
    Ok(rng)
}

fn encode_opt(w: &mut Writer, v: Option<f64>) {
    w.bool(v.is_some());
    w.f64(v.unwrap_or(0.0));
}

fn decode_opt(r: &mut Reader) -> Result<Option<f64>> {
    let some = r.bool()?;
    let v = r.f64()?;
    Ok(some.then_some(v))
}

impl Encode for LogRow {
    fn encode(&self, w: &mut Writer) {
        w.usize(self.iteration);
        w.f64(self.loss);
        w.f64(self.psnr);
        w.f64(self.ssim);
        w.usize(self.gaussians);
        for a in self.actions {
            w.usize(a);
        }
        for v in [self.mean_reward, self.mean_advantage, self.clip_fraction, self.baseline] {
            encode_opt(w, v);
        }
    }
}

impl Decode for LogRow {
    fn decode(r: &mut Reader) -> Result<Self> {
        Ok(Self {
            iteration: r.usize()?,
            loss: r.f64()?,
            psnr: r.f64()?,
            ssim: r.f64()?,
            gaussians: r.usize()?,
            actions: [r.usize()?, r.usize()?, r.usize()?, r.usize()?],
            mean_reward: decode_opt(r)?,
            mean_advantage: decode_opt(r)?,
            clip_fraction: decode_opt(r)?,
            baseline: decode_opt(r)?,
        })
    }
}

impl Encode for Pending {
    fn encode(&self, w: &mut Writer) {
        w.f64(self.loss_sum);
        w.usize(self.loss_count);
        for a in self.actions {
            w.usize(a);
        }
        w.f64s(&self.rewards);
        w.f64s(&self.baselines);
        encode_opt(w, self.advantage);
        encode_opt(w, self.clip_fraction);
    }
}

impl Decode for Pending {
    fn decode(r: &mut Reader) -> Result<Self> {
        Ok(Self {
            loss_sum: r.f64()?,
            loss_count: r.usize()?,
            actions: [r.usize()?, r.usize()?, r.usize()?, r.usize()?],
            rewards: r.f64s()?,
            baselines: r.f64s()?,
            advantage: decode_opt(r)?,
            clip_fraction: decode_opt(r)?,
        })
    }
}

impl Encode for PpoConfig {
    fn encode(&self, w: &mut Writer) {
        for v in [self.gamma, self.lambda, self.clip] {
            w.f64(v);
        }
        w.usize(self.epochs);
        w.usize(self.horizon);
        for v in [self.lr_start, self.lr_end] {
            w.f64(v);
        }
        w.usize(self.minibatch);
        w.f64(self.entropy_coef);
    }
}

impl Decode for PpoConfig {
    fn decode(r: &mut Reader) -> Result<Self> {
        Ok(Self {
            gamma: r.f64()?,
            lambda: r.f64()?,
            clip: r.f64()?,
            epochs: r.usize()?,
            horizon: r.usize()?,
            lr_start: r.f64()?,
            lr_end: r.f64()?,
            minibatch: r.usize()?,
            entropy_coef: r.f64()?,
        })
    }
}

impl Encode for Controller {
    fn encode(&self, w: &mut Writer) {
        match self {
            Controller::Heuristic(h) => {
                w.u8(0);
                for v in [h.thresholds.grad, h.thresholds.scale, h.thresholds.opacity] {
                    w.f64(v);
                }
                encode_opt(w, h.prune_oversized);
                w.bool(h.opacity_reset.is_some());
                let (interval, ceiling) = h.opacity_reset.unwrap_or((0, 0.0));
                w.usize(interval);
                w.f64(ceiling);
                w.bool(h.count_targets.is_some());
                let targets = h.count_targets.as_deref().unwrap_or(&[]);
                w.usize(targets.len());
                for &t in targets {
                    w.usize(t);
                }
            }
            Controller::Learned(l) => {
                w.u8(1);
                l.ppo.encode(w);
                w.bool(l.frozen);
                w.bool(l.greedy);
            }
            Controller::MaintainOnly => w.u8(2),
        }
    }
}

impl Decode for Controller {
    fn decode(r: &mut Reader) -> Result<Self> {
        match r.u8()? {
            0 => {
                let thresholds = HeuristicThresholds { grad: r.f64()?, scale: r.f64()?, opacity: r.f64()? };
                let prune_oversized = decode_opt(r)?;
                let has_reset = r.bool()?;
                let reset = (r.usize()?, r.f64()?);
                let has_targets = r.bool()?;
                let n = r.len(8)?;
                let targets = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
                Ok(Controller::Heuristic(HeuristicOptions {
                    thresholds,
                    prune_oversized,
                    opacity_reset: has_reset.then_some(reset),
                    count_targets: has_targets.then_some(targets),
                }))
            }
            1 => Ok(Controller::Learned(LearnedOptions { ppo: PpoConfig::decode(r)?, frozen: r.bool()?, greedy: r.bool()? })),
            2 => Ok(Controller::MaintainOnly),
            t => Err(Error::Decode(format!("unknown controller tag {t}"))),
        }
    }
}

impl Encode for TrainConfig {
    fn encode(&self, w: &mut Writer) {
        for v in [self.iterations, self.densify_from, self.densify_until, self.densify_interval, self.sensitivity_views] {
            w.usize(v);
        }
        w.f64(self.loss.lambda);
        self.rates.encode(w);
        self.adam.encode(w);
        self.controller.encode(w);
        for v in [self.max_gaussians, self.eval_interval, self.tile_size] {
            w.usize(v);
        }
        w.u64(self.seed);
    }
}

impl Decode for TrainConfig {
    fn decode(r: &mut Reader) -> Result<Self> {
        Ok(Self {
            iterations: r.usize()?,
            densify_from: r.usize()?,
            densify_until: r.usize()?,
            densify_interval: r.usize()?,
            sensitivity_views: r.usize()?,
            loss: LossConfig { lambda: r.f64()? },
            rates: LearningRates::decode(r)?,
            adam: AdamConfig::decode(r)?,
            controller: Controller::decode(r)?,
            max_gaussians: r.usize()?,
            eval_interval: r.usize()?,
            tile_size: r.usize()?,
            seed: r.u64()?,
        })
    }
}
