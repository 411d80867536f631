//! Supervision terms and the weighted training objective.
//!
//! Image-space terms return gradients with respect to the rendered image,
//! depth and alpha maps; [`backpropagate`] pushes those through the
//! rasterizer into parameter gradients.

use serde::{Deserialize, Serialize};

use crate::deformation::{FieldGradients, HexPlaneField};
use crate::error::{Error, Result};
use crate::gaussians::CloudGradients;
use crate::image::Image;
use crate::rasterizer::{render_backward, SavedState};
use crate::shf::ShfWeights;
use crate::thf::ThfOutput;

pub const DEFAULT_HUBER_DELTA: f64 = 0.2;
pub const DEFAULT_DEPTH_PERCENTILE: f64 = 0.95;
pub const DEFAULT_DEPTH_MIN_ALPHA: f64 = 0.5;

#[inline]
fn unmasked(mask: Option<&Image>, p: usize) -> bool {
    mask.is_none_or(|m| m.data[p * m.channels] < 0.5)
}

fn check_mask(mask: Option<&Image>, w: usize, h: usize) -> Result<()> {
    match mask {
        Some(m) if (m.width, m.height) != (w, h) => Err(Error::Contract(format!(
            "mask is {}x{}, expected {w}x{h}",
            m.width, m.height
        ))),
        _ => Ok(()),
    }
}

/// `Σ (1 − M)·|Î − I|` over pixels and channels, with its gradient in `Î`.
pub fn masked_l1(gt: &Image, rendered: &Image, mask: Option<&Image>) -> Result<(f64, Image)> {
    gt.ensure_same_shape(rendered, "rendered image")?;
    check_mask(mask, gt.width, gt.height)?;
    let ch = gt.channels;
    let mut grad = Image::new(gt.width, gt.height, ch);
    let mut loss = 0.0;
    for p in 0..gt.pixel_count() {
        if !unmasked(mask, p) {
            continue;
        }
        for c in 0..ch {
            let i = p * ch + c;
            let r = rendered.data[i] - gt.data[i];
            loss += r.abs();
            grad.data[i] = if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
    }
    Ok((loss, grad))
}

/// Huber value and derivative: `½r²/δ` inside `[−δ, δ]`, `|r| − δ/2` outside.
#[inline]
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r / delta, r / delta)
    } else {
        (r.abs() - 0.5 * delta, r.signum())
    }
}

/// Mean Huber residual over unmasked pixels of already normalized depths.
pub fn depth_huber(gt: &Image, rendered: &Image, mask: Option<&Image>, delta: f64) -> Result<(f64, Image)> {
    depth_loss(
        gt,
        rendered,
        None,
        mask,
        &DepthLossConfig {
            scale: 1.0,
            delta,
            min_alpha: 0.0,
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthLossConfig {
    /// Depths are divided by this before the Huber penalty.
    pub scale: f64,
    pub delta: f64,
    /// Pixels with rendered alpha below this are skipped.
    pub min_alpha: f64,
}

impl Default for DepthLossConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            delta: DEFAULT_HUBER_DELTA,
            min_alpha: DEFAULT_DEPTH_MIN_ALPHA,
        }
    }
}

/// Depth Huber on `depth / scale`, skipping masked pixels, pixels without a
/// valid ground-truth depth and, when `alpha` is given, pixels whose rendered
/// alpha is below `min_alpha`. Gradient is with respect to the raw rendered
/// depth.
pub fn depth_loss(
    gt: &Image,
    rendered: &Image,
    alpha: Option<&Image>,
    mask: Option<&Image>,
    cfg: &DepthLossConfig,
) -> Result<(f64, Image)> {
    gt.ensure_same_shape(rendered, "rendered depth")?;
    check_mask(mask, gt.width, gt.height)?;
    if let Some(a) = alpha {
        gt.ensure_same_shape(a, "rendered alpha")?;
    }
    if !(cfg.delta > 0.0) || !(cfg.scale > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "depth loss needs positive delta and scale, got {} and {}",
            cfg.delta, cfg.scale
        )));
    }
    let mut grad = Image::new(gt.width, gt.height, 1);
    let mut sum = 0.0;
    let mut active = Vec::new();
    for p in 0..gt.pixel_count() {
        let d = gt.data[p];
        if !unmasked(mask, p) || !(d.is_finite() && d > 0.0) {
            continue;
        }
        if alpha.is_some_and(|a| a.data[p] < cfg.min_alpha) {
            continue;
        }
        let (v, dv) = huber((rendered.data[p] - d) / cfg.scale, cfg.delta);
        sum += v;
        active.push((p, dv / cfg.scale));
    }
    if active.is_empty() {
        return Ok((0.0, grad));
    }
    let n = active.len() as f64;
    for (p, g) in active {
        grad.data[p] = g / n;
    }
    Ok((sum / n, grad))
}

/// Depth value at the given quantile over valid pixels of all maps.
pub fn depth_percentile<'a>(depths: impl IntoIterator<Item = &'a Image>, q: f64) -> Option<f64> {
    let mut values: Vec<f64> = depths
        .into_iter()
        .flat_map(|d| d.data.iter().copied())
        .filter(|v| v.is_finite() && *v > 0.0)
        .collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let idx = ((values.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    Some(values[idx])
}

/// Sum over planes and levels of the mean squared difference between
/// neighboring nodes along each plane axis. Returns the plane gradient.
pub fn tv_loss(field: &HexPlaneField) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; field.plane_params.len()];
    let params = &field.plane_params;
    let mut loss = 0.0;
    for l in &field.planes {
        let (n1, n2, h) = (l.n1, l.n2, l.h);
        if n1 > 1 {
            let count = ((n1 - 1) * n2 * h) as f64;
            for i in 0..n1 - 1 {
                for j in 0..n2 {
                    let (a, b) = (l.node(i, j), l.node(i + 1, j));
                    for k in 0..h {
                        let d = params[b + k] - params[a + k];
                        loss += d * d / count;
                        grad[b + k] += 2.0 * d / count;
                        grad[a + k] -= 2.0 * d / count;
                    }
                }
            }
        }
        if n2 > 1 {
            let count = (n1 * (n2 - 1) * h) as f64;
            for i in 0..n1 {
                for j in 0..n2 - 1 {
                    let (a, b) = (l.node(i, j), l.node(i, j + 1));
                    for k in 0..h {
                        let d = params[b + k] - params[a + k];
                        loss += d * d / count;
                        grad[b + k] += 2.0 * d / count;
                        grad[a + k] -= 2.0 * d / count;
                    }
                }
            }
        }
    }
    (loss, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_tv: f64,
    pub lambda_shf: f64,
    pub lambda_thf: f64,
    /// Recorded for completeness; the surface term is not implemented.
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 0.5,
            lambda_tv: 0.1,
            lambda_shf: 1.0,
            lambda_thf: 10.0,
            lambda_s: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_tv", self.lambda_tv),
            ("lambda_shf", self.lambda_shf),
            ("lambda_thf", self.lambda_thf),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// Weighted sum of term values.
    pub fn combine(&self, l1: f64, depth: f64, tv: f64, shf: f64, thf: f64) -> f64 {
        l1 + self.lambda_d * depth + self.lambda_tv * tv + self.lambda_shf * shf + self.lambda_thf * thf
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Static,
    Deformed,
}

/// One record per iteration; `total` is the weighted sum of the terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub stage: Stage,
    pub frame: usize,
    pub l1: f64,
    pub depth: f64,
    pub tv: f64,
    pub shf: f64,
    pub thf: f64,
    pub total: f64,
}

/// Ground truth for one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameTargets<'a> {
    pub image: &'a Image,
    pub depth: Option<&'a Image>,
    pub mask: Option<&'a Image>,
    /// SHF weight map for this frame, already masked; the SHF term is 0
    /// when absent.
    pub shf: Option<&'a ShfWeights>,
}

/// Rendered maps of one frame.
#[derive(Clone, Copy, Debug)]
pub struct RenderedMaps<'a> {
    pub image: &'a Image,
    pub depth: &'a Image,
    pub alpha: &'a Image,
}

/// Which optional terms are evaluated.
#[derive(Clone, Copy, Debug)]
pub struct ActiveTerms<'a> {
    pub depth: bool,
    pub shf: bool,
    /// Field to regularize with TV.
    pub tv: Option<&'a HexPlaneField>,
    /// Precomputed temporal loss for this frame and its neighbor.
    pub thf: Option<&'a ThfOutput>,
}

#[derive(Clone, Debug)]
pub struct ObjectiveGradients {
    pub image: Image,
    pub depth: Image,
    pub alpha: Image,
    /// Gradient for the neighbor frame's rendered image (temporal term).
    pub previous_image: Option<Image>,
    /// Plane gradient from the TV term.
    pub planes: Option<Vec<f64>>,
}

/// Per-term values of one frame before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermValues {
    pub l1: f64,
    pub depth: f64,
    pub tv: f64,
    pub shf: f64,
    pub thf: f64,
}

fn add_scaled(dst: &mut Image, src: &Image, s: f64) {
    for (d, v) in dst.data.iter_mut().zip(&src.data) {
        *d += s * v;
    }
}

/// Evaluates every active term and returns the weighted gradients.
/// A term with zero weight contributes no gradient.
pub fn total_loss(
    targets: &FrameTargets,
    rendered: &RenderedMaps,
    terms: &ActiveTerms,
    weights: &LossWeights,
    depth_cfg: &DepthLossConfig,
) -> Result<(TermValues, f64, ObjectiveGradients)> {
    let (w, h) = (targets.image.width, targets.image.height);
    let (l1, mut g_image) = masked_l1(targets.image, rendered.image, targets.mask)?;
    let mut g_depth = Image::new(w, h, 1);
    let mut values = TermValues {
        l1,
        ..TermValues::default()
    };

    if terms.depth {
        if let Some(gt_depth) = targets.depth {
            let (v, g) = depth_loss(gt_depth, rendered.depth, Some(rendered.alpha), targets.mask, depth_cfg)?;
            values.depth = v;
            if weights.lambda_d > 0.0 {
                add_scaled(&mut g_depth, &g, weights.lambda_d);
            }
        }
    }
    if terms.shf {
        if let Some(shf) = targets.shf {
            let (v, g) = shf.loss(targets.image, rendered.image)?;
            values.shf = v;
            if weights.lambda_shf > 0.0 {
                add_scaled(&mut g_image, &g, weights.lambda_shf);
            }
        }
    }
    let mut planes = None;
    if let Some(field) = terms.tv {
        let (v, g) = tv_loss(field);
        values.tv = v;
        if weights.lambda_tv > 0.0 {
            planes = Some(g.into_iter().map(|x| x * weights.lambda_tv).collect());
        }
    }
    let mut previous_image = None;
    if let Some(thf) = terms.thf {
        values.thf = thf.loss;
        if weights.lambda_thf > 0.0 {
            add_scaled(&mut g_image, &thf.grad_current, weights.lambda_thf);
            let mut gp = Image::new(w, h, thf.grad_previous.channels);
            add_scaled(&mut gp, &thf.grad_previous, weights.lambda_thf);
            previous_image = Some(gp);
        }
    }
    let total = weights.combine(values.l1, values.depth, values.tv, values.shf, values.thf);
    if !total.is_finite() {
        return Err(Error::NonFinite {
            what: "total loss",
            index: 0,
        });
    }
    Ok((
        values,
        total,
        ObjectiveGradients {
            image: g_image,
            depth: g_depth,
            alpha: Image::new(w, h, 1),
            previous_image,
            planes,
        },
    ))
}

/// Parameter gradients accumulated over one or two renders.
#[derive(Clone, Debug)]
pub struct ParameterGradients {
    pub cloud: CloudGradients,
    pub field: Option<FieldGradients>,
    /// Screen-space positional gradient per Gaussian from the main render.
    pub screen: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

/// Runs the rasterizer backward for the frame render and, if a temporal
/// gradient exists, for the neighbor render, then adds the TV plane gradient.
pub fn backpropagate(
    grads: &ObjectiveGradients,
    saved: &SavedState,
    previous: Option<&SavedState>,
) -> Result<ParameterGradients> {
    let main = render_backward(&grads.image, &grads.depth, &grads.alpha, saved)?;
    let mut cloud = main.cloud;
    let mut field = main.field;
    if let (Some(gp), Some(prev)) = (&grads.previous_image, previous) {
        let zero = Image::new(prev.width, prev.height, 1);
        let other = render_backward(gp, &zero, &zero, prev)?;
        cloud.add_scaled(&other.cloud, 1.0);
        match (&mut field, &other.field) {
            (Some(f), Some(o)) => f.add_scaled(o, 1.0),
            (None, Some(o)) => field = Some(o.clone()),
            _ => {}
        }
    }
    if let Some(pg) = &grads.planes {
        let f = field.get_or_insert_with(|| FieldGradients {
            planes: vec![0.0; pg.len()],
            mlp: Vec::new(),
        });
        for (d, g) in f.planes.iter_mut().zip(pg) {
            *d += g;
        }
    }
    Ok(ParameterGradients {
        cloud,
        field,
        screen: main.screen,
        visible: main.visible,
    })
}
