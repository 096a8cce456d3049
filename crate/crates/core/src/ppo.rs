//! PPO with the maintain-action reward as the value baseline. There is no
//! critic: the mean reward of the Gaussians that chose "maintain" at a step
//! plays the role of the state value in the TD residual.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::adam::FlatAdam;
use crate::codec::{Decode, Encode, Reader, Writer};
use crate::density::{Action, Lineage};
use crate::error::{Error, Result};
use crate::policy::{ActionDist, PolicyNet, FEATURE_DIM};
use crate::scene::GaussianId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Density steps per rollout window; advantages are truncated to it.
    pub horizon: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub minibatch: usize,
    pub entropy_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 2,
            horizon: 2,
            lr_start: 1e-3,
            lr_end: 1e-5,
            minibatch: 512,
            entropy_coef: 1e-3,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.gamma) || !unit(self.lambda) {
            return Err(Error::Validation("gamma and lambda must lie in (0, 1]".into()));
        }
        if !(self.clip > 0.0) || self.epochs == 0 || self.horizon == 0 || self.minibatch == 0 {
            return Err(Error::Validation("clip, epochs, horizon and minibatch must be positive".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) || !(self.entropy_coef >= 0.0) {
            return Err(Error::Validation("learning rates must be positive and the entropy coefficient nonnegative".into()));
        }
        Ok(())
    }

    /// Exponential interpolation from `lr_start` to `lr_end`.
    pub fn lr_at(&self, progress: f64) -> f64 {
        self.lr_start * libm::pow(self.lr_end / self.lr_start, progress.clamp(0.0, 1.0))
    }
}

/// Everything recorded for one density step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Pre-step ids, in the order actions were taken.
    pub ids: Vec<GaussianId>,
    pub features: Vec<[f64; FEATURE_DIM]>,
    pub actions: Vec<Action>,
    pub old_logp: Vec<f64>,
    pub rewards: Vec<f64>,
    pub lineage: Lineage,
}

impl StepRecord {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        if self.features.len() != n || self.actions.len() != n || self.old_logp.len() != n || self.rewards.len() != n {
            return Err(Error::Consistency("step record columns differ in length".into()));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("rollout reward".into()));
        }
        if self.lineage.entries.len() != n || self.lineage.entries.iter().zip(&self.ids).any(|(e, id)| e.parent != *id) {
            return Err(Error::Consistency("lineage does not follow the step's id order".into()));
        }
        Ok(())
    }
}

/// Mean reward of the maintain actions at a step, or of all actions when
/// nothing was maintained.
pub fn maintain_baseline(actions: &[Action], rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() || actions.len() != rewards.len() {
        return Err(Error::Consistency("baseline needs a non-empty step".into()));
    }
    let (sum, n) = actions
        .iter()
        .zip(rewards)
        .filter(|(a, _)| **a == Action::Maintain)
        .fold((0.0, 0usize), |(s, n), (_, r)| (s + r, n + 1));
    if n > 0 {
        Ok(sum / n as f64)
    } else {
        Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
    }
}

/// `r + γ r̄_{t+1} - r̄_t`, or `r - r̄_t` for a terminal transition.
pub fn td_delta(reward: f64, baseline: f64, next_baseline: Option<f64>, gamma: f64) -> f64 {
    match next_baseline {
        Some(next) => reward + gamma * next - baseline,
        None => reward - baseline,
    }
}

/// The Gaussian that carries a parent's trajectory into the next step:
/// itself when maintained, its lowest-id offspring after clone or split,
/// none after a prune.
pub fn continuation(entry: &crate::density::LineageEntry) -> Option<GaussianId> {
    entry.offspring.iter().copied().min()
}

/// Density steps of the current window, oldest first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<StepRecord>,
}

impl RolloutBuffer {
    pub fn push(&mut self, step: StepRecord) -> Result<()> {
        step.validate()?;
        if step.is_empty() {
            return Err(Error::Consistency("empty density step".into()));
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn transitions(&self) -> usize {
        self.steps.iter().map(|s| s.len()).sum()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }

    pub fn baselines(&self) -> Result<Vec<f64>> {
        self.steps.iter().map(|s| maintain_baseline(&s.actions, &s.rewards)).collect()
    }

    /// TD residuals per step. The last step of the buffer has no successor
    /// baseline and reuses its own.
    pub fn deltas(&self, gamma: f64) -> Result<Vec<Vec<f64>>> {
        let base = self.baselines()?;
        Ok(self
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let next = base.get(t + 1).copied().unwrap_or(base[t]);
                s.actions
                    .iter()
                    .zip(&s.rewards)
                    .map(|(&a, &r)| td_delta(r, base[t], (a != Action::Prune).then_some(next), gamma))
                    .collect()
            })
            .collect())
    }

    /// Advantages `Σ_l (γλ)^l δ_{t+l}` along each Gaussian's trajectory,
    /// truncated at `horizon` steps and at the end of the buffer, before
    /// standardization.
    pub fn raw_advantages(&self, cfg: &PpoConfig) -> Result<Vec<Vec<f64>>> {
        let deltas = self.deltas(cfg.gamma)?;
        let index: Vec<alloc::collections::BTreeMap<GaussianId, usize>> =
            self.steps.iter().map(|s| s.ids.iter().enumerate().map(|(k, &id)| (id, k)).collect()).collect();
        let gl = cfg.gamma * cfg.lambda;
        let mut out = Vec::with_capacity(self.steps.len());
        for (t, s) in self.steps.iter().enumerate() {
            let mut adv = Vec::with_capacity(s.len());
            for k in 0..s.len() {
                let mut total = deltas[t][k];
                let mut weight = 1.0;
                let (mut step, mut pos) = (t, k);
                for _ in 1..cfg.horizon {
                    if step + 1 >= self.steps.len() {
                        break;
                    }
                    let Some(next) = continuation(&self.steps[step].lineage.entries[pos]) else {
                        break;
                    };
                    let Some(&np) = index[step + 1].get(&next) else {
                        return Err(Error::Consistency(format!("trajectory of {next} breaks between density steps")));
                    };
                    step += 1;
                    pos = np;
                    weight *= gl;
                    total += weight * deltas[step][pos];
                }
                adv.push(total);
            }
            out.push(adv);
        }
        Ok(out)
    }

    /// Flattened, batch-standardized advantages in step-major order.
    pub fn advantages(&self, cfg: &PpoConfig) -> Result<Vec<f64>> {
        let raw: Vec<f64> = self.raw_advantages(cfg)?.into_iter().flatten().collect();
        Ok(standardize(&raw))
    }
}

/// Zero mean, unit variance (population), with `1e-8` added to the
/// standard deviation.
pub fn standardize(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = libm::sqrt(var) + 1e-8;
    x.iter().map(|v| (v - mean) / sd).collect()
}

/// `min(r A, clip(r, 1-ε, 1+ε) A)`
pub fn clipped_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the clipped branch is binding, so the objective does not
/// depend on the ratio.
pub fn is_clipped(ratio: f64, advantage: f64, clip: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip)
}

/// A batch of transitions for one update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub features: Vec<f64>,
    pub actions: Vec<Action>,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn from_buffer(buffer: &RolloutBuffer, advantages: Vec<f64>) -> Result<Self> {
        if advantages.len() != buffer.transitions() {
            return Err(Error::Consistency("advantage count does not match the buffer".into()));
        }
        let mut b = Batch { advantages, ..Default::default() };
        for s in &buffer.steps {
            b.features.extend(s.features.iter().flatten());
            b.actions.extend_from_slice(&s.actions);
            b.old_logp.extend_from_slice(&s.old_logp);
        }
        Ok(b)
    }

    pub fn subset(&self, idx: &[usize]) -> Batch {
        let mut b = Batch::default();
        for &i in idx {
            b.features.extend_from_slice(&self.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]);
            b.actions.push(self.actions[i]);
            b.old_logp.push(self.old_logp[i]);
            b.advantages.push(self.advantages[i]);
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SurrogateStats {
    /// Mean of the clipped objective (without the entropy bonus).
    pub objective: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

/// Gradient of the negated mean objective
/// `-(1/B) Σ [min(r Â, clip(r) Â) + c H]` with respect to the network
/// parameters, and batch statistics at the current parameters.
pub fn net_backward(net: &PolicyNet, batch: &Batch, clip: f64, entropy_coef: f64) -> Result<(Vec<f64>, SurrogateStats)> {
    let dists = net.forward(&batch.features)?;
    let n = batch.len() as f64;
    let mut stats = SurrogateStats::default();
    let mut dlogits = Vec::with_capacity(batch.len());
    for (i, d) in dists.iter().enumerate() {
        let a = batch.actions[i];
        let adv = batch.advantages[i];
        let logp = d.log_prob(a);
        let ratio = libm::exp(logp - batch.old_logp[i]);
        stats.objective += clipped_objective(ratio, adv, clip) / n;
        stats.mean_ratio += ratio / n;
        stats.approx_kl += (batch.old_logp[i] - logp) / n;
        stats.entropy += d.entropy() / n;
        let clipped = is_clipped(ratio, adv, clip);
        if clipped {
            stats.clip_fraction += 1.0 / n;
        }
        dlogits.push(objective_logit_grad(d, a, ratio, adv, clipped, entropy_coef, n));
    }
    let grad = net.backward(&batch.features, &dlogits)?;
    Ok((grad, stats))
}

fn objective_logit_grad(d: &ActionDist, a: Action, ratio: f64, adv: f64, clipped: bool, entropy_coef: f64, n: f64) -> [f64; 4] {
    let mut g = [0.0; 4];
    if !clipped && adv != 0.0 {
        let lp = d.log_prob_grad(a);
        for k in 0..4 {
            g[k] -= ratio * adv * lp[k] / n;
        }
    }
    if entropy_coef != 0.0 {
        let eg = d.entropy_grad();
        for k in 0..4 {
            g[k] -= entropy_coef * eg[k] / n;
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateDiagnostics {
    /// Statistics of the first minibatch pass, before any parameter change.
    pub initial: SurrogateStats,
    /// Statistics averaged over every minibatch of every epoch.
    pub mean: SurrogateStats,
    pub mean_advantage: f64,
    pub samples: usize,
}

/// Runs `cfg.epochs` passes of shuffled minibatch Adam steps on the clipped
/// objective.
pub fn ppo_update<R: Rng + ?Sized>(
    net: &mut PolicyNet,
    adam: &mut FlatAdam,
    batch: &Batch,
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateDiagnostics> {
    let mut diag = UpdateDiagnostics { samples: batch.len(), ..Default::default() };
    if batch.is_empty() {
        return Ok(diag);
    }
    diag.mean_advantage = batch.advantages.iter().sum::<f64>() / batch.len() as f64;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut passes = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (m, chunk) in order.chunks(cfg.minibatch).enumerate() {
            let mb = batch.subset(chunk);
            let (grad, stats) = net_backward(net, &mb, cfg.clip, cfg.entropy_coef)?;
            if !stats.objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "policy update: objective {} ratio {} kl {}",
                    stats.objective, stats.mean_ratio, stats.approx_kl
                )));
            }
            if epoch == 0 && m == 0 {
                diag.initial = stats;
            }
            diag.mean.objective += stats.objective;
            diag.mean.mean_ratio += stats.mean_ratio;
            diag.mean.clip_fraction += stats.clip_fraction;
            diag.mean.entropy += stats.entropy;
            diag.mean.approx_kl += stats.approx_kl;
            passes += 1.0;
            adam.step(&mut net.params, &grad, lr)?;
        }
    }
    diag.mean.objective /= passes;
    diag.mean.mean_ratio /= passes;
    diag.mean.clip_fraction /= passes;
    diag.mean.entropy /= passes;
    diag.mean.approx_kl /= passes;
    Ok(diag)
}

impl Encode for StepRecord {
    fn encode(&self, w: &mut Writer) {
        w.usize(self.ids.len());
        for i in 0..self.ids.len() {
            w.u64(self.ids[i].0);
            for &f in &self.features[i] {
                w.f64(f);
            }
            w.u8(self.actions[i].index() as u8);
            w.f64(self.old_logp[i]);
            w.f64(self.rewards[i]);
        }
        self.lineage.encode(w);
    }
}

impl Decode for StepRecord {
    fn decode(r: &mut Reader) -> Result<Self> {
        let n = r.len(8 * (FEATURE_DIM + 3) + 1)?;
        let mut s = StepRecord {
            ids: Vec::with_capacity(n),
            features: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            old_logp: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            lineage: Lineage::default(),
        };
        for _ in 0..n {
            s.ids.push(GaussianId(r.u64()?));
            let mut f = [0.0; FEATURE_DIM];
            for v in f.iter_mut() {
                *v = r.f64()?;
            }
            s.features.push(f);
            s.actions.push(Action::from_index(r.u8()? as usize).ok_or_else(|| Error::Decode("bad action tag".into()))?);
            s.old_logp.push(r.f64()?);
            s.rewards.push(r.f64()?);
        }
        s.lineage = Lineage::decode(r)?;
        Ok(s)
    }
}

impl Encode for RolloutBuffer {
    fn encode(&self, w: &mut Writer) {
        w.usize(self.steps.len());
        for s in &self.steps {
            s.encode(w);
        }
    }
}

impl Decode for RolloutBuffer {
    fn decode(r: &mut Reader) -> Result<Self> {
        let n = r.len(8)?;
        let steps = (0..n).map(|_| StepRecord::decode(r)).collect::<Result<Vec<_>>>()?;
        Ok(Self { steps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::LineageEntry;

    #[test]
    fn baseline_cases() {
        use Action::*;
        assert_eq!(maintain_baseline(&[Maintain, Maintain, Clone], &[0.2, -0.2, 5.0]).unwrap(), 0.0);
        assert_eq!(maintain_baseline(&[Maintain, Prune], &[0.7, 3.0]).unwrap(), 0.7);
        assert_eq!(maintain_baseline(&[Clone, Split, Prune], &[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert!(maintain_baseline(&[], &[]).is_err());
    }

    #[test]
    fn td_example() {
        assert!((td_delta(1.0, 0.3, Some(0.4), 0.99) - 1.096).abs() < 1e-12);
        assert!((td_delta(1.0, 0.3, None, 0.99) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_objective(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_objective(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_objective(1.0, 0.37, 0.2), 0.37);
        assert!(is_clipped(1.5, 1.0, 0.2));
        assert!(!is_clipped(1.5, -1.0, 0.2));
    }

    fn entry(parent: u64, action: Action, offspring: &[u64]) -> LineageEntry {
        LineageEntry { parent: GaussianId(parent), action, offspring: offspring.iter().map(|&i| GaussianId(i)).collect() }
    }

    fn step(ids: &[u64], actions: &[Action], rewards: &[f64], lineage: Vec<LineageEntry>) -> StepRecord {
        StepRecord {
            ids: ids.iter().map(|&i| GaussianId(i)).collect(),
            features: alloc::vec![[0.0; FEATURE_DIM]; ids.len()],
            actions: actions.to_vec(),
            old_logp: alloc::vec![-0.1; ids.len()],
            rewards: rewards.to_vec(),
            lineage: Lineage { entries: lineage },
        }
    }

    #[test]
    fn two_step_advantage_by_hand() {
        use Action::*;
        // step 0: g0 maintain (r=0.5), g1 clone (r=1.0 -> offspring 1, 3), g2 prune (r=-0.2)
        let s0 = step(&[0, 1, 2], &[Maintain, Clone, Prune], &[0.5, 1.0, -0.2], alloc::vec![
            entry(0, Maintain, &[0]),
            entry(1, Clone, &[1, 3]),
            entry(2, Prune, &[]),
        ]);
        // step 1: g0 maintain (0.1), g1 split (0.4), g3 maintain (-0.3)
        let s1 = step(&[0, 1, 3], &[Maintain, Split, Maintain], &[0.1, 0.4, -0.3], alloc::vec![
            entry(0, Maintain, &[0]),
            entry(1, Split, &[4, 5]),
            entry(3, Maintain, &[3]),
        ]);
        let mut buf = RolloutBuffer::default();
        buf.push(s0).unwrap();
        buf.push(s1).unwrap();
        let cfg = PpoConfig::default();
        let (g, gl) = (0.99, 0.99 * 0.95);
        let (b0, b1) = (0.5, (0.1 - 0.3) / 2.0);
        let d0 = [0.5 + g * b1 - b0, 1.0 + g * b1 - b0, -0.2 - b0];
        let d1 = [0.1 + g * b1 - b1, 0.4 + g * b1 - b1, -0.3 + g * b1 - b1];
        let adv = buf.raw_advantages(&cfg).unwrap();
        let expect0 = [d0[0] + gl * d1[0], d0[1] + gl * d1[1], d0[2]];
        for k in 0..3 {
            assert!((adv[0][k] - expect0[k]).abs() < 1e-15);
            assert!((adv[1][k] - d1[k]).abs() < 1e-15);
        }
        assert!((gl - 0.9405f64).abs() < 1e-15);
    }

    #[test]
    fn broken_lineage_is_an_error() {
        use Action::*;
        let s0 = step(&[0], &[Clone], &[1.0], alloc::vec![entry(0, Clone, &[0, 1])]);
        let s1 = step(&[1], &[Maintain], &[0.0], alloc::vec![entry(1, Maintain, &[1])]);
        let buf = RolloutBuffer { steps: alloc::vec![s0, s1] };
        assert!(buf.raw_advantages(&PpoConfig::default()).is_err());
    }

    #[test]
    fn zero_rewards_give_zero_advantages() {
        use Action::*;
        let s0 = step(&[0, 1], &[Maintain, Clone], &[0.0, 0.0], alloc::vec![entry(0, Maintain, &[0]), entry(1, Clone, &[1, 2])]);
        let buf = RolloutBuffer { steps: alloc::vec![s0] };
        assert!(buf.advantages(&PpoConfig::default()).unwrap().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn standardized_moments() {
        let s = standardize(&[1.0, 2.0, 3.0, 6.0]);
        let mean: f64 = s.iter().sum::<f64>() / 4.0;
        let var: f64 = s.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lr_schedule_endpoints() {
        let c = PpoConfig::default();
        assert!((c.lr_at(0.0) - 1e-3).abs() < 1e-18);
        assert!((c.lr_at(1.0) - 1e-5).abs() < 1e-18);
        assert!((c.lr_at(0.5) - 1e-4).abs() < 1e-17);
    }
}
