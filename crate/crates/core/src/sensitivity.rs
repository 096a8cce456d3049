//! Sensitivity scores: how much each Gaussian lowers the reconstruction
//! error, measured by removing it. The fast path reads the removed color off
//! each pixel's contribution list; [`naive_leave_one_out`] re-composites from
//! scratch and serves as the reference.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::density::{Action, Lineage};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::projection::{project, ProjectedSplat};
use crate::raster::{evaluate_alpha, pixel_center, render, PixelBlendState, RenderOptions, RenderOutput, T_MIN};
use crate::scene::{Camera, GaussianId, Rgb, Scene};

/// A training view: camera plus ground-truth image.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub target: Image,
}

/// Pixel color with contributor `splat` (index into the sorted splats)
/// removed. Returns the unchanged color when `splat` does not contribute.
pub fn leave_one_out_color(state: &PixelBlendState<'_>, splat: u32, background: Rgb) -> Rgb {
    let cs = state.contributions;
    let Some(j) = cs.iter().position(|c| c.splat == splat) else {
        return state.color;
    };
    let prev = if j == 0 { [0.0; 3] } else { cs[j - 1].prefix };
    removed_color(&prev, &cs[j].prefix, cs[j].alpha, &state.accumulated(), state.final_transmittance, &background)
}

/// `Σ_{i-1} + (Σ_N - Σ_i) / (1 - α_i) + T_final / (1 - α_i) · bg`
#[inline]
fn removed_color(prev: &Rgb, prefix: &Rgb, alpha: f64, total: &Rgb, final_t: f64, bg: &Rgb) -> Rgb {
    let inv = 1.0 / (1.0 - alpha);
    core::array::from_fn(|ch| prev[ch] + (total[ch] - prefix[ch]) * inv + final_t * inv * bg[ch])
}

/// Brute-force per-pixel compositing used by the reference paths.
struct NaivePixel {
    alphas: Vec<f64>,
    /// Splats from this index on are past the termination point.
    cut: usize,
}

impl NaivePixel {
    fn new(splats: &[ProjectedSplat], x: usize, y: usize) -> Self {
        let p = pixel_center(x, y);
        let alphas: Vec<f64> = splats.iter().map(|s| evaluate_alpha(s, &p)).collect();
        let mut t = 1.0;
        let mut cut = splats.len();
        for (k, &a) in alphas.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            if t < T_MIN {
                cut = k;
                break;
            }
            t *= 1.0 - a;
        }
        Self { alphas, cut }
    }

    fn contributes(&self, k: usize) -> bool {
        k < self.cut && self.alphas[k] != 0.0
    }

    fn composite(&self, splats: &[ProjectedSplat], skip: Option<usize>, background: &Rgb) -> Rgb {
        let mut acc = [0.0; 3];
        let mut t = 1.0;
        for k in 0..self.cut {
            let a = self.alphas[k];
            if Some(k) == skip || a == 0.0 {
                continue;
            }
            for ch in 0..3 {
                acc[ch] += t * a * splats[k].color[ch];
            }
            t *= 1.0 - a;
        }
        core::array::from_fn(|ch| acc[ch] + t * background[ch])
    }
}

/// Re-composites every pixel with splat `id` deleted. Splats past the point
/// where the full composite terminates stay excluded. `splats` must be
/// sorted by `(depth, id)`.
pub fn naive_leave_one_out(splats: &[ProjectedSplat], width: usize, height: usize, background: Rgb, id: GaussianId) -> Image {
    let skip = splats.iter().position(|s| s.id == id);
    Image::from_fn(width, height, |x, y| NaivePixel::new(splats, x, y).composite(splats, skip, &background))
}

/// Sensitivity per Gaussian, summed over a set of views.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRecord {
    /// Scene order at the time of scoring.
    pub ids: Vec<GaussianId>,
    pub sen: Vec<f64>,
    /// Covered pixels summed over the views.
    pub pixels: Vec<u64>,
    /// Indices of the views scored.
    pub views: Vec<usize>,
}

impl SensitivityRecord {
    pub fn get(&self, id: GaussianId) -> Option<(f64, u64)> {
        self.ids.iter().position(|&i| i == id).map(|k| (self.sen[k], self.pixels[k]))
    }

    fn by_id(&self) -> BTreeMap<GaussianId, f64> {
        self.ids.iter().copied().zip(self.sen.iter().copied()).collect()
    }
}

/// Scores of one view, aligned with scene order.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewScores {
    pub sen: Vec<f64>,
    pub pixels: Vec<u64>,
}

#[inline]
fn l1(a: &Rgb, b: &Rgb) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Scores one recorded render against its target. `scene_len` sizes the
/// output; splat `k` accumulates into `splats[k].index`.
pub fn score_view(scene_len: usize, splats: &[ProjectedSplat], output: &RenderOutput, target: &Image) -> Result<ViewScores> {
    output.image.same_shape(target)?;
    let states = output
        .states
        .as_ref()
        .ok_or_else(|| Error::Consistency("sensitivity needs a render with recorded blend state".into()))?;
    let npix = output.image.pixel_count();
    let mut sen = vec![0.0; splats.len()];
    let mut pixels = vec![0u64; splats.len()];
    let bg = output.background;
    for i in 0..npix {
        let contributions = states.pixel(i);
        if contributions.is_empty() {
            continue;
        }
        let state = PixelBlendState { color: output.image.data[i], final_transmittance: output.final_transmittance[i], contributions };
        let gt = &target.data[i];
        let base = l1(&state.color, gt);
        let total = state.accumulated();
        let mut prev = [0.0; 3];
        for c in contributions {
            let removed = removed_color(&prev, &c.prefix, c.alpha, &total, state.final_transmittance, &bg);
            sen[c.splat as usize] += l1(&removed, gt) - base;
            pixels[c.splat as usize] += 1;
            prev = c.prefix;
        }
    }
    let mut out = ViewScores { sen: vec![0.0; scene_len], pixels: vec![0; scene_len] };
    for (k, s) in splats.iter().enumerate() {
        out.sen[s.index] = sen[k];
        out.pixels[s.index] = pixels[k];
    }
    Ok(out)
}

/// Sums per-view scores in view order.
pub fn combine_views(scene: &Scene, per_view: &[ViewScores], views: &[usize]) -> SensitivityRecord {
    let n = scene.len();
    let mut sen = vec![0.0; n];
    let mut pixels = vec![0u64; n];
    for v in per_view {
        for k in 0..n {
            sen[k] += v.sen[k];
            pixels[k] += v.pixels[k];
        }
    }
    SensitivityRecord { ids: scene.ids().collect(), sen, pixels, views: views.to_vec() }
}

/// Sensitivity over the selected views using the closed-form removal.
pub fn sensitivity_scores(scene: &Scene, views: &[View], selection: &[usize]) -> Result<SensitivityRecord> {
    if selection.is_empty() {
        return Err(Error::Validation("sensitivity needs at least one view".into()));
    }
    let mut per_view = Vec::with_capacity(selection.len());
    for &v in selection {
        let view = views.get(v).ok_or_else(|| Error::Validation(format!("view {v} out of range")))?;
        let splats = project(scene, &view.camera);
        let out = render(&splats, view.camera.width, view.camera.height, scene.background, RenderOptions::recording());
        per_view.push(score_view(scene.len(), &splats, &out, &view.target)?);
    }
    Ok(combine_views(scene, &per_view, selection))
}

/// Reference sensitivity: every pixel is re-composited once per
/// contributor, with no use of the recorded blend state.
pub fn naive_sensitivity_scores(scene: &Scene, views: &[View], selection: &[usize]) -> Result<SensitivityRecord> {
    if selection.is_empty() {
        return Err(Error::Validation("sensitivity needs at least one view".into()));
    }
    let n = scene.len();
    let mut per_view = Vec::with_capacity(selection.len());
    for &v in selection {
        let view = views.get(v).ok_or_else(|| Error::Validation(format!("view {v} out of range")))?;
        let (w, h) = (view.camera.width, view.camera.height);
        view.target.same_shape(&Image::new(w, h))?;
        let splats = project(scene, &view.camera);
        let mut sen = vec![0.0; splats.len()];
        let mut pixels = vec![0u64; splats.len()];
        for y in 0..h {
            for x in 0..w {
                let px = NaivePixel::new(&splats, x, y);
                let gt = view.target.get(x, y);
                let base = l1(&px.composite(&splats, None, &scene.background), &gt);
                for k in (0..splats.len()).filter(|&k| px.contributes(k)) {
                    sen[k] += l1(&px.composite(&splats, Some(k), &scene.background), &gt) - base;
                    pixels[k] += 1;
                }
            }
        }
        let mut scores = ViewScores { sen: vec![0.0; n], pixels: vec![0; n] };
        for (k, s) in splats.iter().enumerate() {
            scores.sen[s.index] = sen[k];
            scores.pixels[s.index] = pixels[k];
        }
        per_view.push(scores);
    }
    Ok(combine_views(scene, &per_view, selection))
}

/// Reward per parent: offspring sensitivity after the step minus the
/// parent's before it. Pruned parents have no offspring, so their reward is
/// the negated prior score. Returned in lineage order.
pub fn sensitivity_reward(before: &SensitivityRecord, after: &SensitivityRecord, lineage: &Lineage) -> Result<Vec<(GaussianId, f64)>> {
    if before.views != after.views {
        return Err(Error::Consistency("paired records were scored on different views".into()));
    }
    lineage.validate(&before.ids, &after.ids)?;
    let pre = before.by_id();
    let post = after.by_id();
    let mut out = Vec::with_capacity(lineage.entries.len());
    for e in &lineage.entries {
        let parent = pre[&e.parent];
        let children: f64 = match e.action {
            Action::Prune => 0.0,
            _ => e.offspring.iter().map(|id| post[id]).sum(),
        };
        out.push((e.parent, children - parent));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{project_2d, FlatScene, Gaussian2d};
    use crate::raster::Contribution;
    use crate::scene::logit;
    use nalgebra::Vector2;

    fn stack(alpha_color: &[(f64, f64)], bg: f64) -> (Vec<Contribution>, Rgb, f64) {
        let mut t = 1.0;
        let mut acc = 0.0;
        let mut out = Vec::new();
        for (k, &(a, c)) in alpha_color.iter().enumerate() {
            acc += t * a * c;
            out.push(Contribution { splat: k as u32, alpha: a, transmittance: t, prefix: [acc; 3] });
            t *= 1.0 - a;
        }
        (out, [acc + t * bg; 3], t)
    }

    #[test]
    fn single_splat_removal_leaves_background() {
        let (c, color, t) = stack(&[(0.5, 1.0)], 0.0);
        let s = PixelBlendState { color, final_transmittance: t, contributions: &c };
        assert_eq!(s.color, [0.5; 3]);
        assert_eq!(leave_one_out_color(&s, 0, [0.0; 3]), [0.0; 3]);
    }

    #[test]
    fn two_splat_pixel_by_hand() {
        let (c, color, t) = stack(&[(0.5, 1.0), (0.5, 0.0)], 0.0);
        let s = PixelBlendState { color, final_transmittance: t, contributions: &c };
        assert_eq!(leave_one_out_color(&s, 0, [0.0; 3]), [0.0; 3]);
        assert_eq!(leave_one_out_color(&s, 1, [0.0; 3]), [0.5; 3]);
        assert_eq!(leave_one_out_color(&s, 7, [0.0; 3]), color);
    }

    #[test]
    fn background_is_rescaled_too() {
        let (c, color, t) = stack(&[(0.5, 1.0), (0.25, 0.2)], 0.6);
        let s = PixelBlendState { color, final_transmittance: t, contributions: &c };
        // without the front splat: 0.25*0.2 + 0.75*0.6
        let r = leave_one_out_color(&s, 0, [0.6; 3]);
        assert!((r[0] - (0.05 + 0.45)).abs() < 1e-15);
    }

    fn flat(id: u64, x: f64, sigma: f64, opacity: f64, color: f64, depth: f64) -> Gaussian2d {
        Gaussian2d {
            id: GaussianId(id),
            mean: Vector2::new(x, 8.0),
            log_scale: Vector2::new(libm::log(sigma), libm::log(sigma)),
            angle: 0.0,
            opacity_logit: logit(opacity),
            color: [color; 3],
            depth,
        }
    }

    fn scores(fs: &FlatScene, target: &Image) -> Vec<f64> {
        let splats = project_2d(fs, 16, 16);
        let out = render(&splats, 16, 16, fs.background, RenderOptions::recording());
        score_view(fs.splats.len(), &splats, &out, target).unwrap().sen
    }

    #[test]
    fn perfect_fit_gives_nonnegative_scores() {
        let fs = FlatScene {
            splats: vec![flat(0, 6.0, 2.0, 0.7, 0.9, 1.0), flat(1, 9.0, 3.0, 0.5, 0.2, 2.0)],
            background: [0.1; 3],
        };
        let splats = project_2d(&fs, 16, 16);
        let target = render(&splats, 16, 16, fs.background, RenderOptions::default()).image;
        assert!(scores(&fs, &target).iter().all(|&s| s > 0.0));
    }

    #[test]
    fn artifact_splat_scores_negative() {
        // background already matches the target; an opaque red blob only hurts
        let fs = FlatScene { splats: vec![flat(0, 8.0, 2.0, 0.9, 1.0, 1.0)], background: [0.0; 3] };
        let target = Image::new(16, 16);
        let s = scores(&fs, &target);
        assert!(s[0] < 0.0);
        let splats = project_2d(&fs, 16, 16);
        let without = naive_leave_one_out(&splats, 16, 16, fs.background, GaussianId(0));
        let full = naive_leave_one_out(&splats, 16, 16, fs.background, GaussianId(99));
        let naive: f64 = (0..256).map(|i| l1(&without.data[i], &target.data[i]) - l1(&full.data[i], &target.data[i])).sum();
        assert!((s[0] - naive).abs() < 1e-9);
    }

    #[test]
    fn deleting_only_splat_gives_background() {
        let fs = FlatScene { splats: vec![flat(0, 8.0, 2.0, 0.9, 1.0, 1.0)], background: [0.3, 0.2, 0.1] };
        let splats = project_2d(&fs, 16, 16);
        let img = naive_leave_one_out(&splats, 16, 16, fs.background, GaussianId(0));
        assert!(img.data.iter().all(|p| *p == [0.3, 0.2, 0.1]));
    }
}
