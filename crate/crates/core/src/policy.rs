//! Density-control policy: per-Gaussian features, a SwiGLU MLP with a
//! three-way densification head and a pruning gate, and its manual backward
//! pass.
//!
//! Parameters live in one flat vector. Layout, for each block `b` in order:
//! `W1 (hidden x in)`, `b1`, `W3 (hidden x in)`, `b3`, `W2 (hidden x hidden)`,
//! `b2`; then the densification head `Wd (3 x hidden)`, `bd`, then the
//! pruning head `Wp (1 x hidden)`, `bp`. Matrices are row-major.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backward::{layout, GaussianGrads};
use crate::codec::{Decode, Encode, Reader, Writer};
use crate::density::Action;
use crate::error::{Error, Result};
use crate::scene::{logit, sigmoid};
use crate::sensitivity::SensitivityRecord;

pub const FEATURE_DIM: usize = 12;
pub const HIDDEN: usize = 64;
pub const BLOCKS: usize = 3;

/// Number of gradient features that go through the signed-log transform.
const GRAD_FEATURES: usize = 11;

/// Initial probabilities `(maintain, clone, split, prune)`.
pub const INITIAL_POLICY: [f64; 4] = [0.97, 0.01, 0.01, 0.01];

/// Builds raw features from K-view averaged gradients and a sensitivity
/// record of the same scene: `|∇μ|, ∇μ (3), ∇σ, ∇S (3), ∇c (3), Sen/pixels`.
pub fn raw_features(grads: &GaussianGrads, record: &SensitivityRecord) -> Result<Vec<[f64; FEATURE_DIM]>> {
    if grads.ids != record.ids {
        return Err(Error::Consistency("gradient and sensitivity records describe different scenes".into()));
    }
    Ok(grads
        .params
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut f = [0.0; FEATURE_DIM];
            let pos = &p[layout::POSITION];
            f[0] = libm::sqrt(pos.iter().map(|v| v * v).sum());
            f[1..4].copy_from_slice(pos);
            f[4] = p[layout::OPACITY];
            f[5..8].copy_from_slice(&p[layout::LOG_SCALE]);
            f[8..11].copy_from_slice(&p[layout::COLOR]);
            f[11] = if record.pixels[k] == 0 { 0.0 } else { record.sen[k] / record.pixels[k] as f64 };
            f
        })
        .collect())
}

/// Running per-feature scale for the signed-log transform
/// `sign(x) ln(1 + |x| / s)`, with `s` the mean `|x|` seen so far.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureNormalizer {
    pub abs_sum: [f64; GRAD_FEATURES],
    pub count: u64,
}

impl FeatureNormalizer {
    pub fn scales(&self) -> [f64; GRAD_FEATURES] {
        core::array::from_fn(|j| if self.count == 0 { 1.0 } else { (self.abs_sum[j] / self.count as f64).max(1e-30) })
    }

    pub fn observe(&mut self, raw: &[[f64; FEATURE_DIM]]) {
        for f in raw {
            for j in 0..GRAD_FEATURES {
                self.abs_sum[j] += f[j].abs();
            }
        }
        self.count += raw.len() as u64;
    }

    pub fn apply(&self, raw: &[[f64; FEATURE_DIM]]) -> Vec<[f64; FEATURE_DIM]> {
        let s = self.scales();
        raw.iter()
            .map(|f| {
                let mut out = *f;
                for j in 0..GRAD_FEATURES {
                    out[j] = libm::copysign(libm::log1p(f[j].abs() / s[j]), f[j]);
                }
                out
            })
            .collect()
    }
}

impl Encode for FeatureNormalizer {
    fn encode(&self, w: &mut Writer) {
        w.f64s(&self.abs_sum);
        w.u64(self.count);
    }
}

impl Decode for FeatureNormalizer {
    fn decode(r: &mut Reader) -> Result<Self> {
        let v = r.f64s()?;
        let abs_sum = v.try_into().map_err(|_| Error::Decode("normalizer has the wrong feature count".into()))?;
        Ok(Self { abs_sum, count: r.u64()? })
    }
}

/// Composed four-way distribution: `p(prune) = q = sigmoid(z_p)`, the rest
/// `(1 - q) softmax(z_d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDist {
    /// `(z_maintain, z_clone, z_split, z_prune)`.
    pub logits: [f64; 4],
    pub probs: [f64; 4],
    log_softmax: [f64; 3],
    log_q: f64,
    log_not_q: f64,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

impl ActionDist {
    pub fn from_logits(z: [f64; 4]) -> Self {
        let m = z[0].max(z[1]).max(z[2]);
        let lse = m + libm::log(libm::exp(z[0] - m) + libm::exp(z[1] - m) + libm::exp(z[2] - m));
        let log_softmax = [z[0] - lse, z[1] - lse, z[2] - lse];
        let log_q = -softplus(-z[3]);
        let log_not_q = -softplus(z[3]);
        let q = sigmoid(z[3]);
        let nq = 1.0 - q;
        let probs = [
            nq * libm::exp(log_softmax[0]),
            nq * libm::exp(log_softmax[1]),
            nq * libm::exp(log_softmax[2]),
            q,
        ];
        Self { logits: z, probs, log_softmax, log_q, log_not_q }
    }

    pub fn log_prob(&self, a: Action) -> f64 {
        match a {
            Action::Prune => self.log_q,
            _ => self.log_not_q + self.log_softmax[a.index()],
        }
    }

    fn softmax(&self) -> [f64; 3] {
        self.log_softmax.map(libm::exp)
    }

    fn softmax_entropy(&self) -> f64 {
        let s = self.softmax();
        -(0..3).map(|k| s[k] * self.log_softmax[k]).sum::<f64>()
    }

    pub fn entropy(&self) -> f64 {
        let q = self.probs[3];
        -(q * self.log_q + (1.0 - q) * self.log_not_q) + (1.0 - q) * self.softmax_entropy()
    }

    /// Gradient of `log p(a)` with respect to the four logits.
    pub fn log_prob_grad(&self, a: Action) -> [f64; 4] {
        let q = self.probs[3];
        match a {
            Action::Prune => [0.0, 0.0, 0.0, 1.0 - q],
            _ => {
                let s = self.softmax();
                let mut g = [-s[0], -s[1], -s[2], -q];
                g[a.index()] += 1.0;
                g
            }
        }
    }

    /// Gradient of the entropy with respect to the four logits.
    pub fn entropy_grad(&self) -> [f64; 4] {
        let q = self.probs[3];
        let hs = self.softmax_entropy();
        let s = self.softmax();
        let mut g = [0.0; 4];
        for k in 0..3 {
            g[k] = -(1.0 - q) * s[k] * (self.log_softmax[k] + hs);
        }
        g[3] = q * (1.0 - q) * (self.log_not_q - self.log_q - hs);
        g
    }
}

/// Draws one action per distribution by inverse CDF on a uniform draw.
pub fn sample_actions<R: Rng + ?Sized>(dists: &[ActionDist], rng: &mut R) -> (Vec<Action>, Vec<f64>) {
    let mut actions = Vec::with_capacity(dists.len());
    let mut logps = Vec::with_capacity(dists.len());
    for d in dists {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for a in Action::ALL {
            let p = d.probs[a.index()];
            acc += p;
            if u < acc && p > 0.0 {
                pick = Some(a);
                break;
            }
        }
        // rounding can leave the cumulative sum just under u
        let a = pick.unwrap_or_else(|| *Action::ALL.iter().rev().find(|a| d.probs[a.index()] > 0.0).unwrap_or(&Action::Maintain));
        actions.push(a);
        logps.push(d.log_prob(a));
    }
    (actions, logps)
}

/// Most probable action of each distribution (ties go to the earlier action).
pub fn greedy_actions(dists: &[ActionDist]) -> Vec<Action> {
    dists
        .iter()
        .map(|d| {
            let mut best = Action::Maintain;
            for a in Action::ALL {
                if d.probs[a.index()] > d.probs[best.index()] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    input: usize,
    w1: usize,
    b1: usize,
    w3: usize,
    b3: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub input: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub params: Vec<f64>,
}

struct BlockCache {
    x: Vec<f64>,
    a1: Vec<f64>,
    a3: Vec<f64>,
}

struct Cache {
    blocks: Vec<BlockCache>,
    top: Vec<f64>,
}

#[inline]
fn swish(a: f64) -> f64 {
    a * sigmoid(a)
}

#[inline]
fn swish_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

/// `out[b, o] = bias[o] + Σ_i w[o, i] x[b, i]`
fn affine(x: &[f64], batch: usize, inp: usize, w: &[f64], bias: &[f64], out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * out_dim];
    for b in 0..batch {
        let xr = &x[b * inp..(b + 1) * inp];
        let or = &mut out[b * out_dim..(b + 1) * out_dim];
        for o in 0..out_dim {
            let wr = &w[o * inp..(o + 1) * inp];
            let mut acc = bias[o];
            for i in 0..inp {
                acc += wr[i] * xr[i];
            }
            or[o] = acc;
        }
    }
    out
}

/// Accumulates weight/bias gradients of an affine map and returns the
/// gradient with respect to its input.
#[allow(clippy::too_many_arguments)]
fn affine_backward(
    x: &[f64],
    batch: usize,
    inp: usize,
    w: &[f64],
    out_dim: usize,
    dout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; batch * inp];
    for b in 0..batch {
        let xr = &x[b * inp..(b + 1) * inp];
        let dr = &dout[b * out_dim..(b + 1) * out_dim];
        let dxr = &mut dx[b * inp..(b + 1) * inp];
        for o in 0..out_dim {
            let d = dr[o];
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let wr = &w[o * inp..(o + 1) * inp];
            let gwr = &mut gw[o * inp..(o + 1) * inp];
            for i in 0..inp {
                gwr[i] += d * xr[i];
                dxr[i] += d * wr[i];
            }
        }
    }
    dx
}

impl PolicyNet {
    pub fn param_count_for(input: usize, hidden: usize, blocks: usize) -> usize {
        let mut n = 0;
        let mut inp = input;
        for _ in 0..blocks {
            n += 2 * (hidden * inp + hidden) + hidden * hidden + hidden;
            inp = hidden;
        }
        n + 3 * inp + 3 + inp + 1
    }

    pub fn zeros(input: usize, hidden: usize, blocks: usize) -> Self {
        Self { input, hidden, blocks, params: vec![0.0; Self::param_count_for(input, hidden, blocks)] }
    }

    /// Orthogonal encoder weights, near-zero head weights and head biases
    /// that start the policy at [`INITIAL_POLICY`].
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, blocks: usize, rng: &mut R) -> Self {
        let mut net = Self::zeros(input, hidden, blocks);
        for b in 0..blocks {
            let l = net.block_layout(b);
            for (off, rows, cols) in [(l.w1, hidden, l.input), (l.w3, hidden, l.input), (l.w2, hidden, hidden)] {
                let m = orthogonal(rows, cols, 1.0, rng);
                net.params[off..off + rows * cols].copy_from_slice(&m);
            }
        }
        let (wd, bd, wp, bp) = net.head_layout();
        let m = orthogonal(3, hidden, 0.01, rng);
        net.params[wd..wd + 3 * hidden].copy_from_slice(&m);
        let m = orthogonal(1, hidden, 0.01, rng);
        net.params[wp..wp + hidden].copy_from_slice(&m);
        let [pm, pc, ps, pp] = INITIAL_POLICY;
        net.params[bd] = libm::log(pm / pc);
        net.params[bd + 1] = 0.0;
        net.params[bd + 2] = libm::log(ps / pc);
        net.params[bp] = logit(pp);
        net
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn block_layout(&self, b: usize) -> BlockLayout {
        let h = self.hidden;
        let mut off = 0;
        let mut inp = self.input;
        for _ in 0..b {
            off += 2 * (h * inp + h) + h * h + h;
            inp = h;
        }
        let w1 = off;
        let b1 = w1 + h * inp;
        let w3 = b1 + h;
        let b3 = w3 + h * inp;
        let w2 = b3 + h;
        let b2 = w2 + h * h;
        BlockLayout { input: inp, w1, b1, w3, b3, w2, b2 }
    }

    /// Offsets of `(Wd, bd, Wp, bp)`.
    fn head_layout(&self) -> (usize, usize, usize, usize) {
        let h = self.hidden;
        let wd = if self.blocks == 0 {
            0
        } else {
            let l = self.block_layout(self.blocks - 1);
            l.b2 + h
        };
        let top = if self.blocks == 0 { self.input } else { h };
        let bd = wd + 3 * top;
        let wp = bd + 3;
        let bp = wp + top;
        (wd, bd, wp, bp)
    }

    fn top_dim(&self) -> usize {
        if self.blocks == 0 {
            self.input
        } else {
            self.hidden
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<usize> {
        if x.len() % self.input != 0 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "feature buffer of length {} is not a multiple of {}",
                x.len(),
                self.input
            )));
        }
        Ok(x.len() / self.input)
    }

    fn run(&self, x: &[f64], batch: usize) -> (Vec<[f64; 4]>, Cache) {
        let h = self.hidden;
        let p = &self.params;
        let mut cur = x.to_vec();
        let mut caches = Vec::with_capacity(self.blocks);
        for b in 0..self.blocks {
            let l = self.block_layout(b);
            let a1 = affine(&cur, batch, l.input, &p[l.w1..l.b1], &p[l.b1..l.w3], h);
            let a3 = affine(&cur, batch, l.input, &p[l.w3..l.b3], &p[l.b3..l.w2], h);
            let g: Vec<f64> = a1.iter().zip(&a3).map(|(&u, &v)| swish(u) * v).collect();
            let out = affine(&g, batch, h, &p[l.w2..l.b2], &p[l.b2..l.b2 + h], h);
            caches.push(BlockCache { x: cur, a1, a3 });
            cur = out;
        }
        let top = self.top_dim();
        let (wd, bd, wp, bp) = self.head_layout();
        let zd = affine(&cur, batch, top, &p[wd..bd], &p[bd..wp], 3);
        let zp = affine(&cur, batch, top, &p[wp..bp], &p[bp..bp + 1], 1);
        let logits = (0..batch).map(|b| [zd[3 * b], zd[3 * b + 1], zd[3 * b + 2], zp[b]]).collect();
        (logits, Cache { blocks: caches, top: cur })
    }

    /// Logits `(z_maintain, z_clone, z_split, z_prune)` for a row-major
    /// feature batch.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<[f64; 4]>> {
        let batch = self.check_input(x)?;
        Ok(self.run(x, batch).0)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<ActionDist>> {
        Ok(self.logits(x)?.into_iter().map(ActionDist::from_logits).collect())
    }

    /// Gradient of `Σ_b dlogits[b] · logits(x_b)` with respect to the
    /// parameters.
    pub fn backward(&self, x: &[f64], dlogits: &[[f64; 4]]) -> Result<Vec<f64>> {
        let batch = self.check_input(x)?;
        if dlogits.len() != batch {
            return Err(Error::ShapeMismatch(alloc::format!("{} logit gradients for batch {}", dlogits.len(), batch)));
        }
        let (_, cache) = self.run(x, batch);
        let h = self.hidden;
        let top = self.top_dim();
        let p = &self.params;
        let mut grad = vec![0.0; p.len()];
        let (wd, bd, wp, bp) = self.head_layout();
        let dzd: Vec<f64> = dlogits.iter().flat_map(|d| [d[0], d[1], d[2]]).collect();
        let dzp: Vec<f64> = dlogits.iter().map(|d| d[3]).collect();
        let mut dcur = {
            let (gw, rest) = grad[wd..].split_at_mut(bd - wd);
            affine_backward(&cache.top, batch, top, &p[wd..bd], 3, &dzd, gw, &mut rest[..3])
        };
        let dp = {
            let (gw, rest) = grad[wp..].split_at_mut(bp - wp);
            affine_backward(&cache.top, batch, top, &p[wp..bp], 1, &dzp, gw, &mut rest[..1])
        };
        for (a, b) in dcur.iter_mut().zip(&dp) {
            *a += b;
        }
        for b in (0..self.blocks).rev() {
            let l = self.block_layout(b);
            let c = &cache.blocks[b];
            let g: Vec<f64> = c.a1.iter().zip(&c.a3).map(|(&u, &v)| swish(u) * v).collect();
            let dg = {
                let (gw, rest) = grad[l.w2..].split_at_mut(l.b2 - l.w2);
                affine_backward(&g, batch, h, &p[l.w2..l.b2], h, &dcur, gw, &mut rest[..h])
            };
            let da1: Vec<f64> = (0..dg.len()).map(|i| dg[i] * c.a3[i] * swish_grad(c.a1[i])).collect();
            let da3: Vec<f64> = (0..dg.len()).map(|i| dg[i] * swish(c.a1[i])).collect();
            let dx1 = {
                let (gw, rest) = grad[l.w1..].split_at_mut(l.b1 - l.w1);
                affine_backward(&c.x, batch, l.input, &p[l.w1..l.b1], h, &da1, gw, &mut rest[..h])
            };
            let dx3 = {
                let (gw, rest) = grad[l.w3..].split_at_mut(l.b3 - l.w3);
                affine_backward(&c.x, batch, l.input, &p[l.w3..l.b3], h, &da3, gw, &mut rest[..h])
            };
            dcur = dx1.iter().zip(&dx3).map(|(a, b)| a + b).collect();
        }
        Ok(grad)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

/// `rows x cols` matrix with orthonormal rows (or columns, when taller than
/// wide), scaled by `gain`, by Gram-Schmidt on Gaussian draws.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (n, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= d * b;
            }
        }
        let norm = libm::sqrt(v.iter().map(|a| a * a).sum());
        if norm > 1e-8 {
            vecs.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows <= cols { vecs[r][c] } else { vecs[c][r] };
        }
    }
    out
}

const BLOB_MAGIC: &[u8; 4] = b"SPLP";
const BLOB_VERSION: u32 = 1;

impl Encode for PolicyNet {
    fn encode(&self, w: &mut Writer) {
        w.bytes(BLOB_MAGIC);
        w.u32(BLOB_VERSION);
        w.usize(self.input);
        w.usize(self.hidden);
        w.usize(self.blocks);
        w.f64s(&self.params);
    }
}

impl Decode for PolicyNet {
    fn decode(r: &mut Reader) -> Result<Self> {
        if r.bytes()? != BLOB_MAGIC {
            return Err(Error::Decode("not a policy blob".into()));
        }
        let version = r.u32()?;
        if version != BLOB_VERSION {
            return Err(Error::Decode(alloc::format!("unsupported policy blob version {version}")));
        }
        let (input, hidden, blocks) = (r.usize()?, r.usize()?, r.usize()?);
        let params = r.f64s()?;
        if params.len() != Self::param_count_for(input, hidden, blocks) {
            return Err(Error::Decode("policy parameter count does not match its dimensions".into()));
        }
        Ok(Self { input, hidden, blocks, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_gives_half_prune() {
        let net = PolicyNet::zeros(FEATURE_DIM, 8, 2);
        let d = net.forward(&[0.3; FEATURE_DIM]).unwrap()[0];
        for k in 0..3 {
            assert!((d.probs[k] - 0.5 / 3.0).abs() < 1e-15);
        }
        assert_eq!(d.probs[3], 0.5);
    }

    #[test]
    fn initial_policy_is_mostly_maintain() {
        let net = PolicyNet::new(FEATURE_DIM, HIDDEN, BLOCKS, &mut ChaCha8Rng::seed_from_u64(0));
        let x = [0.0; FEATURE_DIM];
        let d = net.forward(&x).unwrap()[0];
        for k in 0..4 {
            assert!((d.probs[k] - INITIAL_POLICY[k]).abs() < 1e-12, "{:?}", d.probs);
        }
        let x: Vec<f64> = (0..FEATURE_DIM).map(|i| (i as f64 - 6.0) * 0.4).collect();
        let d = net.forward(&x).unwrap()[0];
        assert!((d.probs[0] - 0.97).abs() < 0.01);
    }

    #[test]
    fn saturated_prune_logit() {
        let d = ActionDist::from_logits([0.0, 0.0, 0.0, 20.0]);
        assert!(d.probs[3] >= 1.0 - 1e-6);
        assert!(d.log_prob(Action::Prune) <= 0.0);
    }

    #[test]
    fn certain_maintain_always_sampled() {
        let d = ActionDist::from_logits([800.0, 0.0, 0.0, -800.0]);
        let (a, lp) = sample_actions(&[d; 50], &mut ChaCha8Rng::seed_from_u64(3));
        assert!(a.iter().all(|&x| x == Action::Maintain));
        assert!(lp.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn orthogonal_rows() {
        let m = orthogonal(4, 6, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = (0..6).map(|k| m[i * 6 + k] * m[j * 6 + k]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let t = orthogonal(6, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        for i in 0..4 {
            let d: f64 = (0..6).map(|k| t[k * 4 + i] * t[k * 4 + i]).sum();
            assert!((d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_round_trips_and_is_odd() {
        let mut n = FeatureNormalizer::default();
        let raw = vec![[1e-6; FEATURE_DIM], [-3e-6; FEATURE_DIM]];
        n.observe(&raw);
        let out = n.apply(&raw);
        assert!((out[0][0] - libm::log1p(0.5)).abs() < 1e-12);
        assert!((out[1][0] + libm::log1p(1.5)).abs() < 1e-12);
        assert_eq!(out[1][11], -3e-6);
        let mut w = Writer::new();
        n.encode(&mut w);
        let b = w.into_bytes();
        assert_eq!(FeatureNormalizer::decode(&mut Reader::new(&b)).unwrap(), n);
    }

    #[test]
    fn blob_round_trip_and_rejects_garbage() {
        let net = PolicyNet::new(FEATURE_DIM, 8, 2, &mut ChaCha8Rng::seed_from_u64(5));
        let mut w = Writer::new();
        net.encode(&mut w);
        let b = w.into_bytes();
        assert_eq!(PolicyNet::decode(&mut Reader::new(&b)).unwrap(), net);
        let mut bad = b.clone();
        bad[8] = b'X';
        assert!(PolicyNet::decode(&mut Reader::new(&bad)).is_err());
    }
}
