//! Adam for Gaussian parameters (per-group learning rates, moments that
//! follow Gaussians through density changes) and for flat parameter vectors.

use alloc::vec;
use alloc::vec::Vec;

use crate::backward::{layout, params_of, set_params, GaussianGrads, Params, PARAM_COUNT};
use crate::codec::{Decode, Encode, Reader, Writer};
use crate::error::{Error, Result};
use crate::scene::{normalize_quat, GaussianId, Scene};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-group learning rates. The position rate is multiplied by the scene
/// extent and decays exponentially to `position_final_ratio` of its initial
/// value over the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    pub position_final_ratio: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { position: 1.6e-4, position_final_ratio: 0.01, rotation: 1e-3, scale: 5e-3, opacity: 0.05, color: 2.5e-3 }
    }
}

impl LearningRates {
    /// Learning rate for each of the 14 parameters at `progress` in `[0, 1]`.
    pub fn per_param(&self, extent: f64, progress: f64) -> Params {
        let t = progress.clamp(0.0, 1.0);
        let pos = self.position * extent * libm::pow(self.position_final_ratio, t);
        let mut lr = [0.0; PARAM_COUNT];
        lr[layout::POSITION].fill(pos);
        lr[layout::ROTATION].fill(self.rotation);
        lr[layout::LOG_SCALE].fill(self.scale);
        lr[layout::OPACITY] = self.opacity;
        lr[layout::COLOR].fill(self.color);
        lr
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.position, self.position_final_ratio, self.rotation, self.scale, self.opacity, self.color];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation("learning rates must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, bc1: f64, bc2: f64, cfg: &AdamConfig) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let mhat = *m / bc1;
    let vhat = *v / bc2;
    *p -= lr * mhat / (libm::sqrt(vhat) + cfg.eps);
}

/// Where a Gaussian's optimizer state comes from after a density step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentSource {
    /// Carry the moments of the Gaussian at this index of the old scene.
    Keep(usize),
    /// Start from zero moments.
    Fresh,
}

/// Adam state aligned with a scene's Gaussian order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub rates: LearningRates,
    pub ids: Vec<GaussianId>,
    pub m: Vec<Params>,
    pub v: Vec<Params>,
    pub step: u64,
}

impl AdamState {
    pub fn new(scene: &Scene, config: AdamConfig, rates: LearningRates) -> Self {
        let n = scene.len();
        Self { config, rates, ids: scene.ids().collect(), m: vec![[0.0; PARAM_COUNT]; n], v: vec![[0.0; PARAM_COUNT]; n], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn moments_of(&self, id: GaussianId) -> Option<(&Params, &Params)> {
        self.ids.iter().position(|&i| i == id).map(|k| (&self.m[k], &self.v[k]))
    }

    /// Reorders the state to follow a density step. `sources[k]` describes
    /// the new scene's `k`-th Gaussian.
    pub fn rebuild(&mut self, scene: &Scene, sources: &[MomentSource]) -> Result<()> {
        if sources.len() != scene.len() {
            return Err(Error::Consistency(alloc::format!("{} moment sources for {} gaussians", sources.len(), scene.len())));
        }
        let mut m = Vec::with_capacity(sources.len());
        let mut v = Vec::with_capacity(sources.len());
        for s in sources {
            match *s {
                MomentSource::Keep(k) if k < self.len() => {
                    m.push(self.m[k]);
                    v.push(self.v[k]);
                }
                MomentSource::Keep(k) => return Err(Error::Consistency(alloc::format!("moment source {k} out of range"))),
                MomentSource::Fresh => {
                    m.push([0.0; PARAM_COUNT]);
                    v.push([0.0; PARAM_COUNT]);
                }
            }
        }
        self.m = m;
        self.v = v;
        self.ids = scene.ids().collect();
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|p| p.iter().all(|x| x.is_finite()))
    }
}

/// One bias-corrected Adam step on every Gaussian. `progress` in `[0, 1]`
/// drives the position learning-rate decay. Rotations are renormalized and
/// colors clamped to `[0, 1]` afterwards.
pub fn adam_step(scene: &mut Scene, grads: &GaussianGrads, adam: &mut AdamState, progress: f64) -> Result<()> {
    if grads.len() != scene.len() || adam.len() != scene.len() {
        return Err(Error::Consistency(alloc::format!(
            "scene has {} gaussians, gradients {}, optimizer {}",
            scene.len(),
            grads.len(),
            adam.len()
        )));
    }
    for (k, g) in scene.gaussians.iter().enumerate() {
        if grads.ids[k] != g.id || adam.ids[k] != g.id {
            return Err(Error::Consistency(alloc::format!("id mismatch at position {k}")));
        }
    }
    adam.step += 1;
    let cfg = adam.config;
    let bc1 = 1.0 - libm::pow(cfg.beta1, adam.step as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, adam.step as f64);
    let lr = adam.rates.per_param(scene.extent, progress);
    for (k, g) in scene.gaussians.iter_mut().enumerate() {
        let mut p = params_of(g);
        let (m, v) = (&mut adam.m[k], &mut adam.v[k]);
        for j in 0..PARAM_COUNT {
            update(&mut p[j], grads.params[k][j], &mut m[j], &mut v[j], lr[j], bc1, bc2, &cfg);
        }
        set_params(g, &p);
        g.rotation = normalize_quat(g.rotation);
        g.color = g.color.map(|c| c.clamp(0.0, 1.0));
    }
    Ok(())
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatAdam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl FlatAdam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Consistency(alloc::format!(
                "optimizer sized {} given {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let cfg = self.config;
        let bc1 = 1.0 - libm::pow(cfg.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, self.step as f64);
        for i in 0..params.len() {
            update(&mut params[i], grads[i], &mut self.m[i], &mut self.v[i], lr, bc1, bc2, &cfg);
        }
        Ok(())
    }
}

impl Encode for AdamConfig {
    fn encode(&self, w: &mut Writer) {
        w.f64(self.beta1);
        w.f64(self.beta2);
        w.f64(self.eps);
    }
}

impl Decode for AdamConfig {
    fn decode(r: &mut Reader) -> Result<Self> {
        Ok(Self { beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? })
    }
}

impl Encode for LearningRates {
    fn encode(&self, w: &mut Writer) {
        for v in [self.position, self.position_final_ratio, self.rotation, self.scale, self.opacity, self.color] {
            w.f64(v);
        }
    }
}

impl Decode for LearningRates {
    fn decode(r: &mut Reader) -> Result<Self> {
        Ok(Self {
            position: r.f64()?,
            position_final_ratio: r.f64()?,
            rotation: r.f64()?,
            scale: r.f64()?,
            opacity: r.f64()?,
            color: r.f64()?,
        })
    }
}

fn encode_params(w: &mut Writer, ps: &[Params]) {
    w.usize(ps.len());
    for p in ps {
        for &x in p {
            w.f64(x);
        }
    }
}

fn decode_params(r: &mut Reader) -> Result<Vec<Params>> {
    let n = r.len(8 * PARAM_COUNT)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = [0.0; PARAM_COUNT];
        for x in p.iter_mut() {
            *x = r.f64()?;
        }
        out.push(p);
    }
    Ok(out)
}

impl Encode for AdamState {
    fn encode(&self, w: &mut Writer) {
        self.config.encode(w);
        self.rates.encode(w);
        w.usize(self.ids.len());
        for id in &self.ids {
            w.u64(id.0);
        }
        encode_params(w, &self.m);
        encode_params(w, &self.v);
        w.u64(self.step);
    }
}

impl Decode for AdamState {
    fn decode(r: &mut Reader) -> Result<Self> {
        let config = AdamConfig::decode(r)?;
        let rates = LearningRates::decode(r)?;
        let n = r.len(8)?;
        let ids = (0..n).map(|_| r.u64().map(GaussianId)).collect::<Result<Vec<_>>>()?;
        let m = decode_params(r)?;
        let v = decode_params(r)?;
        let step = r.u64()?;
        if m.len() != n || v.len() != n {
            return Err(Error::Decode("optimizer moment count does not match ids".into()));
        }
        Ok(Self { config, rates, ids, m, v, step })
    }
}

impl Encode for FlatAdam {
    fn encode(&self, w: &mut Writer) {
        self.config.encode(w);
        w.f64s(&self.m);
        w.f64s(&self.v);
        w.u64(self.step);
    }
}

impl Decode for FlatAdam {
    fn decode(r: &mut Reader) -> Result<Self> {
        let config = AdamConfig::decode(r)?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        let step = r.u64()?;
        if m.len() != v.len() {
            return Err(Error::Decode("moment vectors differ in length".into()));
        }
        Ok(Self { config, m, v, step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian;
    use nalgebra::{Vector3, Vector4};

    fn scene(n: usize) -> Scene {
        let gs = (0..n)
            .map(|i| {
                Gaussian::new(
                    Vector3::new(i as f64, 0.0, 0.0),
                    Vector4::new(1.0, 0.0, 0.0, 0.0),
                    Vector3::new(0.1, 0.1, 0.1),
                    0.5,
                    Vector3::new(0.5, 0.5, 0.5),
                )
            })
            .collect();
        Scene::new(gs, Some(1.0), [0.0; 3]).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = FlatAdam::new(1, AdamConfig::default());
        let mut p = [0.0];
        adam.step(&mut p, &[1.0], 1e-3).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10);
        let mut q = [2.0];
        let mut adam = FlatAdam::new(1, AdamConfig::default());
        adam.step(&mut q, &[-3.0], 1e-3).unwrap();
        assert!((q[0] - 2.001).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_counts_the_step() {
        let mut s = scene(2);
        let before = s.clone();
        let mut adam = AdamState::new(&s, AdamConfig::default(), LearningRates::default());
        let grads = GaussianGrads::zeros(&s);
        adam_step(&mut s, &grads, &mut adam, 0.0).unwrap();
        assert_eq!(s, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn opacity_logit_first_step() {
        let mut s = scene(1);
        let mut adam = AdamState::new(&s, AdamConfig::default(), LearningRates::default());
        let mut grads = GaussianGrads::zeros(&s);
        grads.params[0][layout::OPACITY] = 1.0;
        let before = s.gaussians[0].opacity_logit;
        adam_step(&mut s, &grads, &mut adam, 0.0).unwrap();
        assert!((before - s.gaussians[0].opacity_logit - 0.05).abs() < 1e-9);
    }

    #[test]
    fn position_rate_decays_to_final_ratio() {
        let r = LearningRates::default();
        assert!((r.per_param(2.0, 0.0)[0] - 3.2e-4).abs() < 1e-18);
        assert!((r.per_param(2.0, 1.0)[0] - 3.2e-6).abs() < 1e-18);
        assert!((r.per_param(2.0, 0.5)[0] - 3.2e-5).abs() < 1e-17);
    }

    #[test]
    fn id_mismatch_is_reported() {
        let mut s = scene(2);
        let mut adam = AdamState::new(&s, AdamConfig::default(), LearningRates::default());
        let mut grads = GaussianGrads::zeros(&s);
        grads.ids[1] = GaussianId(99);
        assert!(matches!(adam_step(&mut s, &grads, &mut adam, 0.0), Err(Error::Consistency(_))));
    }

    #[test]
    fn rebuild_zeroes_fresh_entries() {
        let mut s = scene(2);
        let mut adam = AdamState::new(&s, AdamConfig::default(), LearningRates::default());
        let mut grads = GaussianGrads::zeros(&s);
        grads.params[0] = [0.5; PARAM_COUNT];
        grads.params[1] = [0.25; PARAM_COUNT];
        adam_step(&mut s, &grads, &mut adam, 0.0).unwrap();
        let parent = adam.m[0];
        let mut child = s.gaussians[0].clone();
        child.id = s.fresh_id();
        s.gaussians.insert(1, child);
        adam.rebuild(&s, &[MomentSource::Keep(0), MomentSource::Fresh, MomentSource::Keep(1)]).unwrap();
        assert_eq!(adam.m[0], parent);
        assert_eq!(adam.m[1], [0.0; PARAM_COUNT]);
        assert_eq!(adam.v[1], [0.0; PARAM_COUNT]);
        assert_eq!(adam.ids, s.ids().collect::<Vec<_>>());
    }

    #[test]
    fn state_round_trips() {
        let mut s = scene(3);
        let mut adam = AdamState::new(&s, AdamConfig::default(), LearningRates::default());
        let mut grads = GaussianGrads::zeros(&s);
        grads.params[2][5] = 0.3;
        adam_step(&mut s, &grads, &mut adam, 0.2).unwrap();
        let mut w = Writer::new();
        adam.encode(&mut w);
        let bytes = w.into_bytes();
        let back = AdamState::decode(&mut Reader::new(&bytes)).unwrap();
        assert_eq!(back, adam);
    }
}
