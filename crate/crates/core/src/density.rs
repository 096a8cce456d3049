//! Density actions, their application with lineage tracking, and the
//! threshold heuristic.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adam::MomentSource;
use crate::codec::{Decode, Encode, Reader, Writer};
use crate::error::{Error, Result};
use crate::scene::{GaussianId, Scene};

/// Scale divisor applied to both offspring of a split.
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Maintain,
    Clone,
    Split,
    Prune,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Maintain, Action::Clone, Action::Split, Action::Prune];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Maintain => "maintain",
            Action::Clone => "clone",
            Action::Split => "split",
            Action::Prune => "prune",
        }
    }

    pub fn offspring_count(self) -> usize {
        match self {
            Action::Maintain => 1,
            Action::Clone | Action::Split => 2,
            Action::Prune => 0,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Action {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown action {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineageEntry {
    pub parent: GaussianId,
    pub action: Action,
    pub offspring: Vec<GaussianId>,
}

/// Parent to offspring mapping for one density step, in pre-step order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Lineage {
    pub entries: Vec<LineageEntry>,
}

impl Lineage {
    pub fn identity(ids: impl IntoIterator<Item = GaussianId>) -> Self {
        Self {
            entries: ids
                .into_iter()
                .map(|id| LineageEntry { parent: id, action: Action::Maintain, offspring: vec![id] })
                .collect(),
        }
    }

    /// Checks that `before` is exactly covered by parents, `after` exactly by
    /// offspring, and offspring counts agree with each action.
    pub fn validate(&self, before: &[GaussianId], after: &[GaussianId]) -> Result<()> {
        let mut parents: Vec<_> = self.entries.iter().map(|e| e.parent).collect();
        let mut pre = before.to_vec();
        parents.sort_unstable();
        pre.sort_unstable();
        if parents != pre {
            return Err(Error::Consistency("lineage parents do not match the pre-step ids".into()));
        }
        let mut kids: Vec<_> = self.entries.iter().flat_map(|e| e.offspring.iter().copied()).collect();
        let mut post = after.to_vec();
        kids.sort_unstable();
        post.sort_unstable();
        if kids != post {
            return Err(Error::Consistency("lineage offspring do not match the post-step ids".into()));
        }
        for e in &self.entries {
            if e.offspring.len() != e.action.offspring_count() {
                return Err(Error::Consistency(format!(
                    "{} of {} lists {} offspring",
                    e.action,
                    e.parent,
                    e.offspring.len()
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self, action: Action) -> usize {
        self.entries.iter().filter(|e| e.action == action).count()
    }
}

impl Encode for Lineage {
    fn encode(&self, w: &mut Writer) {
        w.usize(self.entries.len());
        for e in &self.entries {
            w.u64(e.parent.0);
            w.u8(e.action.index() as u8);
            w.usize(e.offspring.len());
            for id in &e.offspring {
                w.u64(id.0);
            }
        }
    }
}

impl Decode for Lineage {
    fn decode(r: &mut Reader) -> Result<Self> {
        let n = r.len(17)?;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let parent = GaussianId(r.u64()?);
            let action = Action::from_index(r.u8()? as usize).ok_or_else(|| Error::Decode("bad action tag".into()))?;
            let k = r.len(8)?;
            let offspring = (0..k).map(|_| r.u64().map(GaussianId)).collect::<Result<Vec<_>>>()?;
            entries.push(LineageEntry { parent, action, offspring });
        }
        Ok(Self { entries })
    }
}

/// Result of applying one round of actions.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityStep {
    pub scene: Scene,
    pub lineage: Lineage,
    /// Optimizer-state provenance for each Gaussian of the new scene.
    pub moments: Vec<MomentSource>,
}

/// Applies one action per Gaussian (`actions[k]` for `scene.gaussians[k]`).
/// Offspring are placed where the parent was; a clone keeps the parent id
/// first and appends a duplicate with a fresh id, a split replaces the
/// parent by two fresh-id samples from its density with scales divided by
/// [`SPLIT_SCALE_DIVISOR`].
pub fn apply_actions<R: Rng + ?Sized>(scene: &Scene, actions: &[Action], rng: &mut R) -> Result<DensityStep> {
    if actions.len() != scene.len() {
        return Err(Error::Consistency(format!("{} actions for {} gaussians", actions.len(), scene.len())));
    }
    let mut out = scene.clone();
    out.gaussians.clear();
    let mut lineage = Lineage { entries: Vec::with_capacity(scene.len()) };
    let mut moments = Vec::with_capacity(scene.len());
    let shrink = -libm::log(SPLIT_SCALE_DIVISOR);
    for (k, (g, &a)) in scene.gaussians.iter().zip(actions).enumerate() {
        let offspring = match a {
            Action::Maintain => {
                out.gaussians.push(g.clone());
                moments.push(MomentSource::Keep(k));
                vec![g.id]
            }
            Action::Prune => Vec::new(),
            Action::Clone => {
                let mut dup = g.clone();
                dup.id = out.fresh_id();
                out.gaussians.push(g.clone());
                moments.push(MomentSource::Keep(k));
                let ids = vec![g.id, dup.id];
                out.gaussians.push(dup);
                moments.push(MomentSource::Fresh);
                ids
            }
            Action::Split => {
                let r = g.rotation_matrix();
                let s = g.scale();
                let mut ids = Vec::with_capacity(2);
                for _ in 0..2 {
                    let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
                    let mut child = g.clone();
                    child.id = out.fresh_id();
                    child.position = g.position + r * s.component_mul(&z);
                    child.log_scale = g.log_scale.add_scalar(shrink);
                    ids.push(child.id);
                    out.gaussians.push(child);
                    moments.push(MomentSource::Fresh);
                }
                ids
            }
        };
        lineage.entries.push(LineageEntry { parent: g.id, action: a, offspring });
    }
    Ok(DensityStep { scene: out, lineage, moments })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicThresholds {
    /// Mean view-space positional gradient norm (NDC units).
    pub grad: f64,
    /// Fraction of the scene extent separating clone from split.
    pub scale: f64,
    pub opacity: f64,
}

impl Default for HeuristicThresholds {
    fn default() -> Self {
        Self { grad: 2e-4, scale: 0.01, opacity: 5e-3 }
    }
}

impl HeuristicThresholds {
    pub fn validate(&self) -> Result<()> {
        if [self.grad, self.scale, self.opacity].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Validation("heuristic thresholds must be positive".into()));
        }
        Ok(())
    }
}

fn densify_kind(scene: &Scene, k: usize, th: &HeuristicThresholds) -> Action {
    if scene.gaussians[k].max_scale() <= th.scale * scene.extent {
        Action::Clone
    } else {
        Action::Split
    }
}

/// Threshold rule: prune below the opacity threshold (checked first), else
/// densify when the gradient statistic reaches `th.grad` (clone small,
/// split large), else maintain. `grad_stat[k]` belongs to `scene.gaussians[k]`.
pub fn heuristic_decide(grad_stat: &[f64], scene: &Scene, th: &HeuristicThresholds) -> Vec<Action> {
    scene
        .gaussians
        .iter()
        .enumerate()
        .map(|(k, g)| {
            if g.opacity() < th.opacity {
                Action::Prune
            } else if grad_stat[k] >= th.grad {
                densify_kind(scene, k, th)
            } else {
                Action::Maintain
            }
        })
        .collect()
}

/// Same pruning rule, but densifies exactly the `budget` Gaussians with the
/// largest gradient statistic (ties broken by id) instead of thresholding.
pub fn heuristic_decide_budget(grad_stat: &[f64], scene: &Scene, th: &HeuristicThresholds, budget: usize) -> Vec<Action> {
    let mut actions: Vec<Action> =
        scene.gaussians.iter().map(|g| if g.opacity() < th.opacity { Action::Prune } else { Action::Maintain }).collect();
    let mut order: Vec<usize> = (0..scene.len()).filter(|&k| actions[k] == Action::Maintain && grad_stat[k] > 0.0).collect();
    order.sort_by(|&a, &b| grad_stat[b].total_cmp(&grad_stat[a]).then(scene.gaussians[a].id.cmp(&scene.gaussians[b].id)));
    for &k in order.iter().take(budget) {
        actions[k] = densify_kind(scene, k, th);
    }
    actions
}

/// Marks Gaussians whose largest world-space scale exceeds
/// `fraction * extent` for pruning, leaving other decisions untouched.
pub fn prune_oversized(scene: &Scene, actions: &mut [Action], fraction: f64) {
    for (a, g) in actions.iter_mut().zip(&scene.gaussians) {
        if g.max_scale() > fraction * scene.extent {
            *a = Action::Prune;
        }
    }
}

/// Caps every opacity at `ceiling`.
pub fn reset_opacity(scene: &mut Scene, ceiling: f64) {
    for g in &mut scene.gaussians {
        if g.opacity() > ceiling {
            g.set_opacity(ceiling);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use nalgebra::Vector4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene_with(scales: &[f64], opacities: &[f64]) -> Scene {
        let gs = scales
            .iter()
            .zip(opacities)
            .enumerate()
            .map(|(i, (&s, &o))| {
                Gaussian::new(
                    Vector3::new(i as f64, 0.5, -0.25),
                    Vector4::new(0.9, 0.1, -0.2, 0.3),
                    Vector3::new(s, 0.5 * s, 0.25 * s),
                    o,
                    Vector3::new(0.2, 0.4, 0.6),
                )
            })
            .collect();
        Scene::new(gs, Some(1.0), [0.0; 3]).unwrap()
    }

    #[test]
    fn threshold_cases() {
        let s = scene_with(&[0.005, 0.02, 0.005, 0.005], &[0.5, 0.5, 0.004, 0.5]);
        let a = heuristic_decide(&[3e-4, 3e-4, 3e-4, 1e-4], &s, &HeuristicThresholds::default());
        assert_eq!(a, vec![Action::Clone, Action::Split, Action::Prune, Action::Maintain]);
    }

    #[test]
    fn budget_densifies_largest_gradients() {
        let s = scene_with(&[0.005; 4], &[0.5; 4]);
        let a = heuristic_decide_budget(&[1e-6, 5e-6, 0.0, 3e-6], &s, &HeuristicThresholds::default(), 2);
        assert_eq!(a, vec![Action::Maintain, Action::Clone, Action::Maintain, Action::Clone]);
    }

    #[test]
    fn all_maintain_is_identity() {
        let s = scene_with(&[0.1, 0.2], &[0.5, 0.6]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let step = apply_actions(&s, &[Action::Maintain; 2], &mut rng).unwrap();
        assert_eq!(step.scene, s);
        assert_eq!(step.lineage, Lineage::identity(s.ids()));
        assert_eq!(step.moments, vec![MomentSource::Keep(0), MomentSource::Keep(1)]);
    }

    #[test]
    fn all_clone_doubles() {
        let s = scene_with(&[0.1, 0.2, 0.3], &[0.5; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let step = apply_actions(&s, &[Action::Clone; 3], &mut rng).unwrap();
        assert_eq!(step.scene.len(), 6);
        assert!(step.lineage.entries.iter().all(|e| e.offspring.len() == 2 && e.offspring[0] == e.parent));
        let before: Vec<_> = s.ids().collect();
        let after: Vec<_> = step.scene.ids().collect();
        step.lineage.validate(&before, &after).unwrap();
        assert_eq!(step.scene.gaussians[1].position, s.gaussians[0].position);
        assert_eq!(step.scene.gaussians[1].id, GaussianId(3));
    }

    #[test]
    fn split_replays_with_seed() {
        let s = scene_with(&[0.1], &[0.5]);
        let step = apply_actions(&s, &[Action::Split], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let again = apply_actions(&s, &[Action::Split], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(step, again);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = &s.gaussians[0];
        for child in &step.scene.gaussians {
            let z: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let expect = p.position + p.rotation_matrix() * p.scale().component_mul(&z);
            assert_eq!(child.position, expect);
            for (c, q) in child.scale().iter().zip(p.scale().iter()) {
                assert!((c - q / 1.6).abs() <= 1e-15 * q);
            }
            assert_eq!(child.opacity_logit, p.opacity_logit);
            assert_eq!(child.color, p.color);
            assert_eq!(child.rotation, p.rotation);
        }
        assert_eq!(step.lineage.entries[0].offspring, vec![GaussianId(1), GaussianId(2)]);
    }

    #[test]
    fn prune_removes() {
        let s = scene_with(&[0.1, 0.2], &[0.5, 0.6]);
        let step = apply_actions(&s, &[Action::Prune, Action::Maintain], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(step.scene.len(), 1);
        assert_eq!(step.scene.gaussians[0].id, GaussianId(1));
        assert_eq!(step.moments, vec![MomentSource::Keep(1)]);
        assert!(step.lineage.entries[0].offspring.is_empty());
    }

    #[test]
    fn wrong_action_count_is_an_error() {
        let s = scene_with(&[0.1, 0.2], &[0.5, 0.6]);
        assert!(apply_actions(&s, &[Action::Prune], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn reset_caps_opacity() {
        let mut s = scene_with(&[0.1, 0.2], &[0.5, 0.005]);
        reset_opacity(&mut s, 0.01);
        assert!((s.gaussians[0].opacity() - 0.01).abs() < 1e-12);
        assert!((s.gaussians[1].opacity() - 0.005).abs() < 1e-12);
    }
}
