//! Tile-based front-to-back alpha compositing.
//!
//! Each pixel blends the splats that reach its tile in `(depth, id)` order:
//! `C = Σ_k T_k α_k c_k + T_final · background`. With state recording on,
//! every pixel keeps its contribution list `(splat, α_k, T_k, Σ_k)` where
//! `Σ_k` is the color accumulated up to and including splat `k`. The
//! backward pass and the leave-one-out sensitivity pass both read it.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector2;

use crate::image::Image;
use crate::projection::{ProjectedSplat, ALPHA_MIN};
use crate::scene::{GaussianId, Rgb, MAX_OPACITY};

pub const TILE_SIZE: usize = 16;

/// Per-pixel blending stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;

#[inline]
pub fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Gaussian falloff exponent `-½ dᵀ Σ⁻¹ d` at `p`.
#[inline]
pub fn falloff_power(s: &ProjectedSplat, p: &Vector2<f64>) -> f64 {
    let dx = p.x - s.mean.x;
    let dy = p.y - s.mean.y;
    -0.5 * (s.conic[(0, 0)] * dx * dx + 2.0 * s.conic[(0, 1)] * dx * dy + s.conic[(1, 1)] * dy * dy)
}

/// `opacity · exp(-½ dᵀ Σ⁻¹ d)`, clamped to `MAX_OPACITY`, and zero below
/// `ALPHA_MIN`.
#[inline]
pub fn evaluate_alpha(s: &ProjectedSplat, p: &Vector2<f64>) -> f64 {
    alpha_from_power(s, falloff_power(s, p))
}

#[inline]
fn alpha_from_power(s: &ProjectedSplat, power: f64) -> f64 {
    if power > 0.0 {
        return 0.0;
    }
    let a = (s.opacity * libm::exp(power)).min(MAX_OPACITY);
    if a < ALPHA_MIN {
        0.0
    } else {
        a
    }
}

/// One entry of a pixel's contribution list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Index into the sorted splat slice passed to [`render`].
    pub splat: u32,
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
    /// Accumulated color including this splat.
    pub prefix: Rgb,
}

/// Blend state of one pixel.
#[derive(Debug, Clone, Copy)]
pub struct PixelBlendState<'a> {
    pub color: Rgb,
    pub final_transmittance: f64,
    pub contributions: &'a [Contribution],
}

impl PixelBlendState<'_> {
    /// `Σ_N`, the color accumulated over every contributor.
    pub fn accumulated(&self) -> Rgb {
        self.contributions.last().map_or([0.0; 3], |c| c.prefix)
    }
}

/// Contribution lists for a whole image, stored flat in tile order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlendStates {
    /// Per pixel: start of its list in `entries` and its length.
    spans: Vec<(usize, u32)>,
    entries: Vec<Contribution>,
}

impl BlendStates {
    pub fn pixel(&self, i: usize) -> &[Contribution] {
        let (start, len) = self.spans[i];
        &self.entries[start..start + len as usize]
    }

    pub fn total_contributions(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    pub final_transmittance: Vec<f64>,
    pub states: Option<BlendStates>,
    /// Ids of the rendered splats, in the order they were given.
    pub ids: Vec<GaussianId>,
    /// Number of pixels each splat contributes to (same order as `ids`).
    pub coverage_counts: Vec<u32>,
    pub background: Rgb,
}

impl RenderOutput {
    pub fn pixel_state(&self, i: usize) -> Option<PixelBlendState<'_>> {
        let states = self.states.as_ref()?;
        Some(PixelBlendState {
            color: self.image.data[i],
            final_transmittance: self.final_transmittance[i],
            contributions: states.pixel(i),
        })
    }

    pub fn splat_index(&self, id: GaussianId) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    pub tile_size: usize,
    pub record_state: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { tile_size: TILE_SIZE, record_state: false }
    }
}

impl RenderOptions {
    pub fn recording() -> Self {
        Self { record_state: true, ..Self::default() }
    }
}

struct TileResult {
    colors: Vec<Rgb>,
    final_t: Vec<f64>,
    lens: Vec<usize>,
    entries: Vec<Contribution>,
    /// Covered pixels per bin entry, when the state is not recorded.
    cover: Vec<u32>,
}

/// Composites `splats`, which must already be sorted by `(depth, id)`.
pub fn render(
    splats: &[ProjectedSplat],
    width: usize,
    height: usize,
    background: Rgb,
    opts: RenderOptions,
) -> RenderOutput {
    let ts = opts.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let bins = bin_splats(splats, width, height, ts, tiles_x, tiles_y);

    let run_tile = |t: usize| -> TileResult {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        render_tile(splats, &bins[t], tx * ts, ty * ts, (tx * ts + ts).min(width), (ty * ts + ts).min(height), background, opts.record_state)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<TileResult> = {
        use rayon::prelude::*;
        (0..tiles_x * tiles_y).into_par_iter().map(run_tile).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<TileResult> = (0..tiles_x * tiles_y).map(run_tile).collect();

    let npix = width * height;
    let mut image = Image::new(width, height);
    let mut final_t = vec![1.0; npix];
    let mut spans = vec![(0usize, 0u32); if opts.record_state { npix } else { 0 }];
    let mut entries = Vec::with_capacity(if opts.record_state { results.iter().map(|r| r.entries.len()).sum() } else { 0 });
    let mut coverage_counts = vec![0u32; splats.len()];
    for (t, r) in results.into_iter().enumerate() {
        let (x0, y0) = ((t % tiles_x) * ts, (t / tiles_x) * ts);
        let tw = (x0 + ts).min(width) - x0;
        let mut start = entries.len();
        for (k, (&c, &tr)) in r.colors.iter().zip(&r.final_t).enumerate() {
            let i = (y0 + k / tw) * width + x0 + k % tw;
            image.data[i] = c;
            final_t[i] = tr;
            if opts.record_state {
                spans[i] = (start, r.lens[k] as u32);
                start += r.lens[k];
            }
        }
        if opts.record_state {
            for e in &r.entries {
                coverage_counts[e.splat as usize] += 1;
            }
            entries.extend_from_slice(&r.entries);
        } else {
            for (&k, &c) in bins[t].iter().zip(&r.cover) {
                coverage_counts[k as usize] += c;
            }
        }
    }
    let states = opts.record_state.then_some(BlendStates { spans, entries });

    RenderOutput {
        image,
        final_transmittance: final_t,
        states,
        ids: splats.iter().map(|s| s.id).collect(),
        coverage_counts,
        background,
    }
}

fn bin_splats(
    splats: &[ProjectedSplat],
    width: usize,
    height: usize,
    ts: usize,
    tiles_x: usize,
    tiles_y: usize,
) -> Vec<Vec<u32>> {
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        if s.half_extent.x <= 0.0 {
            continue;
        }
        // pixel centers x + 0.5 inside [mean - h, mean + h]
        let lo_x = libm::ceil(s.mean.x - s.half_extent.x - 0.5).max(0.0);
        let hi_x = libm::floor(s.mean.x + s.half_extent.x - 0.5).min(width as f64 - 1.0);
        let lo_y = libm::ceil(s.mean.y - s.half_extent.y - 0.5).max(0.0);
        let hi_y = libm::floor(s.mean.y + s.half_extent.y - 0.5).min(height as f64 - 1.0);
        if lo_x > hi_x || lo_y > hi_y {
            continue;
        }
        let (tx0, tx1) = (lo_x as usize / ts, hi_x as usize / ts);
        let (ty0, ty1) = (lo_y as usize / ts, hi_y as usize / ts);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    bins
}

struct Cull {
    lo_x: f64,
    hi_x: f64,
    lo_y: f64,
    hi_y: f64,
    min_power: f64,
}

#[allow(clippy::too_many_arguments)]
fn render_tile(
    splats: &[ProjectedSplat],
    bin: &[u32],
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    background: Rgb,
    record: bool,
) -> TileResult {
    let n = (x1 - x0) * (y1 - y0);
    let mut out = TileResult {
        colors: Vec::with_capacity(n),
        final_t: Vec::with_capacity(n),
        lens: Vec::with_capacity(if record { n } else { 0 }),
        entries: Vec::with_capacity(if record { 4 * n } else { 0 }),
        cover: vec![0; if record { 0 } else { bin.len() }],
    };
    // Pixels outside a splat's cutoff box, or whose falloff is clearly
    // below the cutoff, are skipped without evaluating the exponential.
    let culls: Vec<Cull> = bin
        .iter()
        .map(|&k| {
            let s = &splats[k as usize];
            Cull {
                lo_x: libm::ceil(s.mean.x - s.half_extent.x - 0.5),
                hi_x: libm::floor(s.mean.x + s.half_extent.x - 0.5),
                lo_y: libm::ceil(s.mean.y - s.half_extent.y - 0.5),
                hi_y: libm::floor(s.mean.y + s.half_extent.y - 0.5),
                min_power: libm::log(ALPHA_MIN / s.opacity.min(MAX_OPACITY)) - 1e-9,
            }
        })
        .collect();
    let mut row: Vec<usize> = Vec::with_capacity(bin.len());
    for y in y0..y1 {
        let fy = y as f64;
        row.clear();
        row.extend((0..bin.len()).filter(|&j| fy >= culls[j].lo_y && fy <= culls[j].hi_y));
        for x in x0..x1 {
            let p = pixel_center(x, y);
            let fx = x as f64;
            let mut t = 1.0;
            let mut acc = [0.0; 3];
            let start = out.entries.len();
            for &j in &row {
                let c = &culls[j];
                if fx < c.lo_x || fx > c.hi_x {
                    continue;
                }
                let k = bin[j];
                let s = &splats[k as usize];
                let power = falloff_power(s, &p);
                if power < c.min_power {
                    continue;
                }
                let a = alpha_from_power(s, power);
                if a == 0.0 {
                    continue;
                }
                if t < T_MIN {
                    break;
                }
                let w = t * a;
                for c in 0..3 {
                    acc[c] += w * s.color[c];
                }
                if record {
                    out.entries.push(Contribution { splat: k, alpha: a, transmittance: t, prefix: acc });
                } else {
                    out.cover[j] += 1;
                }
                t *= 1.0 - a;
            }
            if record {
                out.lens.push(out.entries.len() - start);
            }
            out.colors.push([acc[0] + t * background[0], acc[1] + t * background[1], acc[2] + t * background[2]]);
            out.final_t.push(t);
        }
    }
    out
}

/// Pixels (row-major indices) where splat `id` is a recorded contributor.
/// Empty when the id did not render or state was not recorded.
pub fn coverage(output: &RenderOutput, id: GaussianId) -> Vec<usize> {
    let (Some(states), Some(k)) = (output.states.as_ref(), output.splat_index(id)) else {
        return Vec::new();
    };
    let k = k as u32;
    (0..output.image.pixel_count())
        .filter(|&i| states.pixel(i).iter().any(|c| c.splat == k))
        .collect()
}
