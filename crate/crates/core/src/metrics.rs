//! Image metrics and the photometric training loss
//! `(1 - λ) · L1 + λ · (1 - SSIM)`.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) over valid window positions
//! only, computed per channel and averaged. The analytic gradient of the
//! SSIM term is provided for the backward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the `1 - SSIM` term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.2 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Validation(alloc::format!("loss lambda must be in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = (a.pixel_count() * 3) as f64;
    let s: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>()).sum();
    Ok(s / n)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = (a.pixel_count() * 3) as f64;
    let s: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (0..3).map(|c| { let d = p[c] - q[c]; d * d }).sum::<f64>()).sum();
    Ok(s / n)
}

/// `10 log10(1 / MSE)` on the `[0, 1]` range; [`PSNR_CAP`] for identical
/// images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        PSNR_CAP
    } else {
        10.0 * libm::log10(1.0 / m)
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode correlation: `h x w` in, `(h-10) x (w-10)` out.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for (row, t) in src.chunks_exact(w).zip(tmp.chunks_exact_mut(ow)) {
        for (i, &kv) in k.iter().enumerate() {
            t.iter_mut().zip(&row[i..i + ow]).for_each(|(t, r)| *t += kv * r);
        }
    }
    let mut out = vec![0.0; ow * oh];
    for (y, o) in out.chunks_exact_mut(ow).enumerate() {
        for (i, &kv) in k.iter().enumerate() {
            let t = &tmp[(y + i) * ow..(y + i + 1) * ow];
            o.iter_mut().zip(t).for_each(|(o, t)| *o += kv * t);
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a `(h-10) x (w-10)` map back to
/// `h x w`.
fn filter_valid_adjoint(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ow * h];
    for (y, s) in src.chunks_exact(ow).enumerate() {
        for (i, &kv) in k.iter().enumerate() {
            let t = &mut tmp[(y + i) * ow..(y + i + 1) * ow];
            t.iter_mut().zip(s).for_each(|(t, s)| *t += kv * s);
        }
    }
    let mut out = vec![0.0; w * h];
    for (t, o) in tmp.chunks_exact(ow).zip(out.chunks_exact_mut(w)) {
        for (i, &kv) in k.iter().enumerate() {
            o[i..i + ow].iter_mut().zip(t).for_each(|(o, t)| *o += kv * t);
        }
    }
    out
}

fn check_ssim_shape(a: &Image, b: &Image) -> Result<()> {
    a.same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width: a.width, height: a.height, min: SSIM_WINDOW });
    }
    Ok(())
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_ssim_shape(a, b)?;
    Ok(ssim_impl(a, b, false).0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check_ssim_shape(a, b)?;
    let (v, g) = ssim_impl(a, b, true);
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Image>) {
    let (w, h) = (a.width, a.height);
    let k = gaussian_window();
    let npos = ((w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1)) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    for c in 0..3 {
        let x = a.channel(c);
        let y = b.channel(c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let exx = filter_valid(&xx, w, h, &k);
        let eyy = filter_valid(&yy, w, h, &k);
        let exy = filter_valid(&xy, w, h, &k);
        let n = mx.len();
        let (mut g_mu, mut g_xx, mut g_xy) = if want_grad {
            (vec![0.0; n], vec![0.0; n], vec![0.0; n])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        let scale = 1.0 / (3.0 * npos);
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * (exy[i] - ux * uy) + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + SSIM_C2;
            let num = a1 * a2;
            let den = b1 * b2;
            total += num / den;
            if want_grad {
                let d2 = den * den;
                let dn_mu = 2.0 * uy * a2 - 2.0 * uy * a1;
                let dd_mu = 2.0 * ux * b2 - 2.0 * ux * b1;
                g_mu[i] = scale * (dn_mu * den - num * dd_mu) / d2;
                g_xx[i] = scale * (-num * b1) / d2;
                g_xy[i] = scale * (2.0 * a1 * den) / d2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_mu = filter_valid_adjoint(&g_mu, w, h, &k);
            let t_xx = filter_valid_adjoint(&g_xx, w, h, &k);
            let t_xy = filter_valid_adjoint(&g_xy, w, h, &k);
            for q in 0..w * h {
                g.data[q][c] = t_mu[q] + 2.0 * x[q] * t_xx[q] + y[q] * t_xy[q];
            }
        }
    }
    (total / (3.0 * npos), grad)
}

/// Literal training loss `(1 - λ) · L1 + λ · (1 - SSIM)`.
pub fn training_loss(render: &Image, target: &Image, cfg: &LossConfig) -> Result<f64> {
    let l = l1(render, target)?;
    if cfg.lambda == 0.0 {
        return Ok(l);
    }
    let s = ssim(render, target)?;
    Ok((1.0 - cfg.lambda) * l + cfg.lambda * (1.0 - s))
}

/// Training loss and its gradient with respect to every rendered channel.
pub fn training_loss_with_grad(render: &Image, target: &Image, cfg: &LossConfig) -> Result<(f64, Image)> {
    render.same_shape(target)?;
    let n = (render.pixel_count() * 3) as f64;
    let w_l1 = (1.0 - cfg.lambda) / n;
    let mut grad = Image::new(render.width, render.height);
    let mut l = 0.0;
    for ((g, p), q) in grad.data.iter_mut().zip(&render.data).zip(&target.data) {
        for c in 0..3 {
            let d = p[c] - q[c];
            l += d.abs();
            g[c] = if d > 0.0 {
                w_l1
            } else if d < 0.0 {
                -w_l1
            } else {
                0.0
            };
        }
    }
    l /= n;
    if cfg.lambda == 0.0 {
        return Ok((l, grad));
    }
    let (s, sg) = ssim_with_grad(render, target)?;
    for (g, d) in grad.data.iter_mut().zip(&sg.data) {
        for c in 0..3 {
            g[c] -= cfg.lambda * d[c];
        }
    }
    Ok(((1.0 - cfg.lambda) * l + cfg.lambda * (1.0 - s), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn l1_basics() {
        let a = Image::new(4, 4);
        let b = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(l1(&a, &b).unwrap(), 1.0);
        assert!(l1(&a, &Image::new(5, 4)).is_err());
    }

    #[test]
    fn l1_matches_brute_force() {
        let (a, b) = (random(13, 7, 1), random(13, 7, 2));
        let mut s = 0.0;
        for y in 0..7 {
            for x in 0..13 {
                for c in 0..3 {
                    s += (a.get(x, y)[c] - b.get(x, y)[c]).abs();
                }
            }
        }
        assert!((l1(&a, &b).unwrap() - s / (13.0 * 7.0 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn ssim_identity_and_negative() {
        let a = random(24, 20, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|p| [1.0 - p[0], 1.0 - p[1], 1.0 - p[2]]);
        assert!(ssim(&a, &neg).unwrap() < 0.0);
    }

    #[test]
    fn ssim_near_constant() {
        let a = Image::filled(32, 32, [0.5; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = a.map(|p| {
            let mut q = p;
            for v in q.iter_mut() {
                *v += rng.random_range(-1e-3..1e-3);
            }
            q
        });
        assert!(ssim(&a, &b).unwrap() >= 0.99);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::new(10, 30);
        assert!(matches!(ssim(&a, &a), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn ssim_is_symmetric() {
        let (a, b) = (random(20, 17, 4), random(20, 17, 5));
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn psnr_values() {
        let a = Image::new(4, 4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 4, [0.1; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Image::filled(4, 4, [1.0; 3]);
        assert!(psnr(&a, &c).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let (a, b) = (random(14, 13, 6), random(14, 13, 7));
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for &(x, y, c) in &[(0, 0, 0), (5, 6, 1), (13, 12, 2), (7, 3, 0)] {
            let mut ap = a.clone();
            let mut am = a.clone();
            let mut p = ap.get(x, y);
            p[c] += h;
            ap.set(x, y, p);
            let mut m = am.get(x, y);
            m[c] -= h;
            am.set(x, y, m);
            let fd = (ssim(&ap, &b).unwrap() - ssim(&am, &b).unwrap()) / (2.0 * h);
            let an = g.get(x, y)[c];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "({x},{y},{c}) fd {fd} analytic {an}");
        }
    }

    #[test]
    fn ssim_gradient_vanishes_at_identity() {
        let a = random(16, 16, 8);
        let (_, g) = ssim_with_grad(&a, &a).unwrap();
        assert!(g.data.iter().all(|p| p.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn loss_components() {
        let (a, b) = (random(16, 16, 10), random(16, 16, 11));
        let cfg = LossConfig { lambda: 0.2 };
        let expect = 0.8 * l1(&a, &b).unwrap() + 0.2 * (1.0 - ssim(&a, &b).unwrap());
        assert!((training_loss(&a, &b, &cfg).unwrap() - expect).abs() < 1e-12);
        let (lg, _) = training_loss_with_grad(&a, &b, &cfg).unwrap();
        assert!((lg - expect).abs() < 1e-12);
        assert_eq!(training_loss(&a, &b, &LossConfig { lambda: 0.0 }).unwrap(), l1(&a, &b).unwrap());
        assert_eq!(training_loss(&a, &a, &cfg).unwrap(), 0.0);
    }
}
