//! Tiled front-to-back Gaussian splatting with an analytic backward pass.
//!
//! Per pixel, visible Gaussians are composited in ascending camera depth
//! (ties by index): `C = Σ cᵢ αᵢ Tᵢ`, `Tᵢ = Π_{j<i} (1 − αⱼ)`, with
//! `αᵢ = min(σᵢ · exp(−½ dᵀ Σ'⁻¹ d), 0.99)`. Depth uses the same weights and
//! is not normalized by accumulated alpha.
//!
//! With cutoffs enabled a Gaussian only touches pixels inside its 3σ ellipse
//! and compositing stops once transmittance falls below 1e-4. Disabling the
//! cutoffs makes the image a smooth function of every parameter, which the
//! finite-difference checks rely on.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;

use crate::deformation::{deform_backward, deform_cloud_recorded, DeformTape, FieldGradients, HexPlaneField};
use crate::error::{Error, Result};
use crate::gaussians::{
    project_backward, project_parameters, sh_to_color, sh_to_color_backward, sigmoid, view_direction,
    view_direction_backward, Camera, CloudGradients, GaussianCloud, ProjectedGrad,
};
use crate::image::Image;

pub const ALPHA_MAX: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Mahalanobis radius of the screen-space footprint.
pub const SIGMA_EXTENT: f64 = 3.0;

static RENDER_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// 3σ footprint and early termination. Off for gradient checking.
    pub cutoffs: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            cutoffs: true,
        }
    }
}

impl RenderSettings {
    pub fn gradient_check() -> Self {
        Self {
            tile_size: 16,
            cutoffs: false,
        }
    }
}

/// One Gaussian after projection and color evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Splat {
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Projects and shades every Gaussian. Culled Gaussians map to `None`.
pub fn preprocess(cloud: &GaussianCloud, camera: &Camera) -> Result<Vec<Option<Splat>>> {
    cloud.validate()?;
    let center = camera.center();
    let mut out = Vec::with_capacity(cloud.count());
    for i in 0..cloud.count() {
        let Some(p) = project_parameters(&cloud.positions[i], &cloud.rotations[i], &cloud.log_scales[i], camera)
        else {
            out.push(None);
            continue;
        };
        let det = p.det();
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::NonFinite {
                what: "screen-space covariance",
                index: i,
            });
        }
        let dir = view_direction(&cloud.positions[i], &center);
        out.push(Some(Splat {
            mean2d: p.mean2d,
            cov2d: p.cov2d,
            conic: p.conic(),
            depth: p.depth,
            opacity: sigmoid(cloud.opacity_logits[i]),
            color: sh_to_color(cloud.sh_of(i), cloud.sh_degree, &dir),
        }));
    }
    Ok(out)
}

/// Per-tile Gaussian lists in compositing order.
#[derive(Clone, Debug, PartialEq)]
pub struct TileBins {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileBins {
    pub fn tile_rect(&self, tx: usize, ty: usize, width: usize, height: usize) -> [f64; 4] {
        tile_rect(tx, ty, self.tile_size, width, height)
    }
}

/// Pixel-space rectangle `[x0, y0, x1, y1]` covered by a tile.
pub fn tile_rect(tx: usize, ty: usize, tile_size: usize, width: usize, height: usize) -> [f64; 4] {
    [
        (tx * tile_size) as f64,
        (ty * tile_size) as f64,
        ((tx + 1) * tile_size).min(width) as f64,
        ((ty + 1) * tile_size).min(height) as f64,
    ]
}

/// Minimum of `dᵀ Q d` over `d = p − mean`, `p` in the rectangle.
fn min_quadratic_over_rect(mean: [f64; 2], q: &Matrix2<f64>, rect: [f64; 4]) -> f64 {
    let [x0, y0, x1, y1] = rect;
    if mean[0] >= x0 && mean[0] <= x1 && mean[1] >= y0 && mean[1] <= y1 {
        return 0.0;
    }
    let (a, b, c) = (q[(0, 0)], q[(0, 1)], q[(1, 1)]);
    let eval = |dx: f64, dy: f64| a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    let mut best = f64::INFINITY;
    for x in [x0, x1] {
        let dx = x - mean[0];
        let dy = (-b * dx / c).clamp(y0 - mean[1], y1 - mean[1]);
        best = best.min(eval(dx, dy));
    }
    for y in [y0, y1] {
        let dy = y - mean[1];
        let dx = (-b * dy / a).clamp(x0 - mean[0], x1 - mean[0]);
        best = best.min(eval(dx, dy));
    }
    best
}

/// Assigns visible splats to the tiles their 3σ ellipse intersects and
/// sorts each list by depth, then index. Without cutoffs every visible
/// splat lands in every tile.
pub fn cull_and_bin(splats: &[Option<Splat>], width: usize, height: usize, tile_size: usize, cutoffs: bool) -> TileBins {
    let tile_size = tile_size.max(1);
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    let r2 = SIGMA_EXTENT * SIGMA_EXTENT;
    for (i, s) in splats.iter().enumerate() {
        let Some(s) = s else { continue };
        if !cutoffs {
            for l in lists.iter_mut() {
                l.push(i as u32);
            }
            continue;
        }
        let rx = SIGMA_EXTENT * s.cov2d[(0, 0)].sqrt();
        let ry = SIGMA_EXTENT * s.cov2d[(1, 1)].sqrt();
        let (lo_x, hi_x) = (s.mean2d[0] - rx, s.mean2d[0] + rx);
        let (lo_y, hi_y) = (s.mean2d[1] - ry, s.mean2d[1] + ry);
        if hi_x < 0.0 || hi_y < 0.0 || lo_x > width as f64 || lo_y > height as f64 {
            continue;
        }
        let tx0 = (lo_x.max(0.0) / tile_size as f64).floor() as usize;
        let ty0 = (lo_y.max(0.0) / tile_size as f64).floor() as usize;
        let tx1 = ((hi_x / tile_size as f64).floor() as usize).min(tiles_x - 1);
        let ty1 = ((hi_y / tile_size as f64).floor() as usize).min(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                let rect = tile_rect(tx, ty, tile_size, width, height);
                if min_quadratic_over_rect(s.mean2d, &s.conic, rect) <= r2 {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
    }
    for l in lists.iter_mut() {
        l.sort_by(|&a, &b| {
            let (da, db) = (splats[a as usize].unwrap().depth, splats[b as usize].unwrap().depth);
            da.total_cmp(&db).then(a.cmp(&b))
        });
    }
    TileBins {
        tile_size,
        tiles_x,
        tiles_y,
        lists,
    }
}

/// One Gaussian's contribution to one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub gaussian: u32,
    pub alpha: f64,
    /// Transmittance before this Gaussian was composited.
    pub transmittance: f64,
}

/// Alpha of a splat at a pixel center, or `None` when outside the footprint.
#[inline]
fn splat_alpha(s: &Splat, px: f64, py: f64, cutoffs: bool) -> Option<f64> {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let q = &s.conic;
    let power = q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy;
    if cutoffs && power > SIGMA_EXTENT * SIGMA_EXTENT {
        return None;
    }
    Some((s.opacity * (-0.5 * power).exp()).min(ALPHA_MAX))
}

/// Blending records kept from a forward pass.
#[derive(Clone, Debug)]
pub struct SavedState {
    pub render_id: u64,
    pub width: usize,
    pub height: usize,
    pub settings: RenderSettings,
    pub camera: Camera,
    /// The cloud actually rasterized (deformed when a deformer was used).
    pub cloud: GaussianCloud,
    pub splats: Vec<Option<Splat>>,
    pub bins: TileBins,
    /// `pixel_offsets[p]..pixel_offsets[p + 1]` indexes `contributions`.
    pub pixel_offsets: Vec<usize>,
    pub contributions: Vec<Contribution>,
    pub deform: Option<DeformTape>,
}

impl SavedState {
    pub fn pixel_contributions(&self, x: usize, y: usize) -> &[Contribution] {
        let p = y * self.width + x;
        &self.contributions[self.pixel_offsets[p]..self.pixel_offsets[p + 1]]
    }

    /// Blending weights `αᵢ Tᵢ` per contributing Gaussian at a pixel.
    pub fn pixel_weights(&self, x: usize, y: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pixel_contributions(x, y)
            .iter()
            .map(|c| (c.gaussian as usize, c.alpha * c.transmittance))
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Image,
    pub depth: Image,
    pub alpha: Image,
    pub saved: SavedState,
}

/// Evaluation time and field for a deformed render.
#[derive(Clone, Copy, Debug)]
pub struct TimeDeformer<'a> {
    pub field: &'a HexPlaneField,
    pub time: f64,
}

struct TileOutput {
    pixels: Vec<(usize, [f64; 3], f64, f64)>,
    contributions: Vec<Vec<Contribution>>,
}

fn render_tile(splats: &[Option<Splat>], list: &[u32], rect: [usize; 4], cutoffs: bool) -> TileOutput {
    let [x0, y0, x1, y1] = rect;
    let mut out = TileOutput {
        pixels: Vec::with_capacity((x1 - x0) * (y1 - y0)),
        contributions: Vec::with_capacity((x1 - x0) * (y1 - y0)),
    };
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut rgb = [0.0; 3];
            let mut depth = 0.0;
            let mut contribs = Vec::new();
            for &gi in list {
                let s = splats[gi as usize].as_ref().unwrap();
                let Some(alpha) = splat_alpha(s, px, py, cutoffs) else {
                    continue;
                };
                let w = alpha * t;
                for c in 0..3 {
                    rgb[c] += s.color[c] * w;
                }
                depth += s.depth * w;
                contribs.push(Contribution {
                    gaussian: gi,
                    alpha,
                    transmittance: t,
                });
                t *= 1.0 - alpha;
                if cutoffs && t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            out.pixels.push((x, rgb, depth, 1.0 - t));
            out.contributions.push(contribs);
        }
    }
    out
}

/// Rasterizes an already-preprocessed cloud.
fn rasterize(
    cloud: GaussianCloud,
    camera: &Camera,
    settings: RenderSettings,
    deform: Option<DeformTape>,
) -> Result<RenderOutput> {
    let (w, h) = (camera.width, camera.height);
    let splats = preprocess(&cloud, camera)?;
    let bins = cull_and_bin(&splats, w, h, settings.tile_size, settings.cutoffs);
    let ts = bins.tile_size;
    let tiles: Vec<TileOutput> = (0..bins.lists.len())
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % bins.tiles_x, t / bins.tiles_x);
            let rect = [tx * ts, ty * ts, ((tx + 1) * ts).min(w), ((ty + 1) * ts).min(h)];
            render_tile(&splats, &bins.lists[t], rect, settings.cutoffs)
        })
        .collect();

    let mut image = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut alpha = Image::new(w, h, 1);
    let mut per_pixel: Vec<Vec<Contribution>> = vec![Vec::new(); w * h];
    for (t, tile) in tiles.into_iter().enumerate() {
        let ty = t / bins.tiles_x;
        let y0 = ty * ts;
        let x_count = {
            let tx = t % bins.tiles_x;
            ((tx + 1) * ts).min(w) - tx * ts
        };
        for (k, ((x, rgb, d, a), contribs)) in tile.pixels.into_iter().zip(tile.contributions).enumerate() {
            let y = y0 + k / x_count;
            for c in 0..3 {
                image.set(x, y, c, rgb[c]);
            }
            depth.set(x, y, 0, d);
            alpha.set(x, y, 0, a);
            per_pixel[y * w + x] = contribs;
        }
    }
    let mut pixel_offsets = Vec::with_capacity(w * h + 1);
    let mut contributions = Vec::new();
    pixel_offsets.push(0);
    for c in per_pixel {
        contributions.extend(c);
        pixel_offsets.push(contributions.len());
    }
    Ok(RenderOutput {
        image,
        depth,
        alpha,
        saved: SavedState {
            render_id: RENDER_ID.fetch_add(1, Ordering::Relaxed),
            width: w,
            height: h,
            settings,
            camera: camera.clone(),
            cloud,
            splats,
            bins,
            pixel_offsets,
            contributions,
            deform,
        },
    })
}

/// Renders `cloud` from `camera`, optionally deforming it to time `t` first.
pub fn render(
    cloud: &GaussianCloud,
    camera: &Camera,
    deformer: Option<TimeDeformer<'_>>,
    settings: RenderSettings,
) -> Result<RenderOutput> {
    camera.validate()?;
    match deformer {
        None => rasterize(cloud.clone(), camera, settings, None),
        Some(d) => {
            let (deformed, tape) = deform_cloud_recorded(cloud, d.time, d.field)?;
            rasterize(deformed, camera, settings, Some(tape))
        }
    }
}

/// Gradients produced by [`render_backward`].
#[derive(Clone, Debug)]
pub struct RenderGradients {
    /// Gradients for the static (undeformed) cloud.
    pub cloud: CloudGradients,
    /// Field gradients when the render used a deformer.
    pub field: Option<FieldGradients>,
    /// `dL/d(mean2d)` per Gaussian in pixels; zero for culled Gaussians.
    pub screen: Vec<[f64; 2]>,
    /// Whether each Gaussian was in front of the camera.
    pub visible: Vec<bool>,
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    color: [f64; 3],
    opacity: f64,
    mean2d: [f64; 2],
    conic: [f64; 4],
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for c in 0..3 {
            self.color[c] += o.color[c];
        }
        self.opacity += o.opacity;
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        for c in 0..4 {
            self.conic[c] += o.conic[c];
        }
        self.depth += o.depth;
    }
}

fn check_grad_shape(img: &Image, w: usize, h: usize, ch: usize, what: &str) -> Result<()> {
    if img.width != w || img.height != h || img.channels != ch {
        return Err(Error::Contract(format!(
            "{what} gradient is {}x{}x{}, render was {w}x{h}x{ch}",
            img.width, img.height, img.channels
        )));
    }
    Ok(())
}

/// Reverse-mode pass of [`render`].
pub fn render_backward(
    grad_image: &Image,
    grad_depth: &Image,
    grad_alpha: &Image,
    saved: &SavedState,
) -> Result<RenderGradients> {
    let (w, h) = (saved.width, saved.height);
    check_grad_shape(grad_image, w, h, 3, "image")?;
    check_grad_shape(grad_depth, w, h, 1, "depth")?;
    check_grad_shape(grad_alpha, w, h, 1, "alpha")?;
    if saved.pixel_offsets.len() != w * h + 1 || saved.splats.len() != saved.cloud.count() {
        return Err(Error::Contract("saved render state is inconsistent".into()));
    }
    let bins = &saved.bins;
    let ts = bins.tile_size;

    // Per-tile accumulation keyed by slot in the tile list, reduced in tile
    // order so results do not depend on the thread count.
    let tile_grads: Vec<Vec<SplatGrad>> = (0..bins.lists.len())
        .into_par_iter()
        .map(|t| {
            let list = &bins.lists[t];
            let mut slot_of = std::collections::HashMap::with_capacity(list.len());
            for (k, &g) in list.iter().enumerate() {
                slot_of.insert(g, k);
            }
            let mut acc = vec![SplatGrad::default(); list.len()];
            let (tx, ty) = (t % bins.tiles_x, t / bins.tiles_x);
            for y in ty * ts..((ty + 1) * ts).min(h) {
                for x in tx * ts..((tx + 1) * ts).min(w) {
                    let contribs = saved.pixel_contributions(x, y);
                    if contribs.is_empty() {
                        continue;
                    }
                    let dc = [grad_image.get(x, y, 0), grad_image.get(x, y, 1), grad_image.get(x, y, 2)];
                    let dd = grad_depth.get(x, y, 0);
                    let da = grad_alpha.get(x, y, 0);
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut after = 0.0;
                    for c in contribs.iter().rev() {
                        let s = saved.splats[c.gaussian as usize].as_ref().unwrap();
                        let g = &mut acc[slot_of[&c.gaussian]];
                        let weight = c.alpha * c.transmittance;
                        let gi = s.color[0] * dc[0] + s.color[1] * dc[1] + s.color[2] * dc[2] + s.depth * dd + da;
                        for k in 0..3 {
                            g.color[k] += weight * dc[k];
                        }
                        g.depth += weight * dd;
                        let dalpha = c.transmittance * gi - after / (1.0 - c.alpha);
                        after += gi * weight;

                        let dx = px - s.mean2d[0];
                        let dy = py - s.mean2d[1];
                        let q = &s.conic;
                        let power = q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy;
                        let gauss = (-0.5 * power).exp();
                        if s.opacity * gauss >= ALPHA_MAX {
                            continue;
                        }
                        g.opacity += dalpha * gauss;
                        let dpower = dalpha * s.opacity * gauss * -0.5;
                        g.conic[0] += dpower * dx * dx;
                        g.conic[1] += dpower * dx * dy;
                        g.conic[2] += dpower * dy * dx;
                        g.conic[3] += dpower * dy * dy;
                        // d(power)/d(mean) = -2 Q d
                        g.mean2d[0] += dpower * -2.0 * (q[(0, 0)] * dx + q[(0, 1)] * dy);
                        g.mean2d[1] += dpower * -2.0 * (q[(1, 0)] * dx + q[(1, 1)] * dy);
                    }
                }
            }
            acc
        })
        .collect();

    let n = saved.cloud.count();
    let mut splat_grads = vec![SplatGrad::default(); n];
    for (t, acc) in tile_grads.iter().enumerate() {
        for (k, g) in acc.iter().enumerate() {
            splat_grads[bins.lists[t][k] as usize].add(g);
        }
    }

    let cloud = &saved.cloud;
    let center = saved.camera.center();
    let mut grads = cloud.zeros_like();
    let mut screen = vec![[0.0; 2]; n];
    let mut visible = vec![false; n];
    for i in 0..n {
        let Some(s) = saved.splats[i].as_ref() else { continue };
        visible[i] = true;
        let g = &splat_grads[i];
        screen[i] = g.mean2d;
        let dq = Matrix2::new(g.conic[0], g.conic[1], g.conic[2], g.conic[3]);
        let dcov = -(s.conic * dq * s.conic);
        let pg = ProjectedGrad {
            mean2d: g.mean2d,
            cov2d: dcov,
            depth: g.depth,
        };
        let (dpos, drot, dls) =
            project_backward(&cloud.positions[i], &cloud.rotations[i], &cloud.log_scales[i], &saved.camera, &pg);
        let dir = view_direction(&cloud.positions[i], &center);
        let (dsh, ddir) = sh_to_color_backward(cloud.sh_of(i), cloud.sh_degree, &dir, &g.color);
        let dpos_dir: Vector3<f64> = if cloud.sh_degree > 0 {
            view_direction_backward(&cloud.positions[i], &center, &ddir)
        } else {
            Vector3::zeros()
        };
        for a in 0..3 {
            grads.positions[i][a] = dpos[a] + dpos_dir[a];
            grads.log_scales[i][a] = dls[a];
        }
        grads.rotations[i] = drot;
        grads.sh_of_mut(i).copy_from_slice(&dsh);
        grads.opacity_logits[i] = g.opacity * s.opacity * (1.0 - s.opacity);
    }

    match &saved.deform {
        None => Ok(RenderGradients {
            cloud: grads,
            field: None,
            screen,
            visible,
        }),
        Some(tape) => {
            let (static_grads, field_grads) = deform_backward(tape, &grads);
            Ok(RenderGradients {
                cloud: static_grads,
                field: Some(field_grads),
                screen,
                visible,
            })
        }
    }
}

/// Untiled reference renderer: every pixel walks all visible Gaussians in
/// global depth order. Shares the per-pixel compositing rule with [`render`].
pub fn render_naive(cloud: &GaussianCloud, camera: &Camera, cutoffs: bool) -> Result<(Image, Image, Image)> {
    camera.validate()?;
    let splats = preprocess(cloud, camera)?;
    let mut order: Vec<usize> = (0..splats.len()).filter(|&i| splats[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .unwrap()
            .depth
            .total_cmp(&splats[b].unwrap().depth)
            .then(a.cmp(&b))
    });
    let (w, h) = (camera.width, camera.height);
    let mut image = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut alpha = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            for &i in &order {
                let s = splats[i].as_ref().unwrap();
                let dx = px - s.mean2d[0];
                let dy = py - s.mean2d[1];
                let q = &s.conic;
                let power = q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy;
                if cutoffs && power > SIGMA_EXTENT * SIGMA_EXTENT {
                    continue;
                }
                let a = (s.opacity * (-0.5 * power).exp()).min(ALPHA_MAX);
                for c in 0..3 {
                    let v = image.get(x, y, c) + s.color[c] * a * t;
                    image.set(x, y, c, v);
                }
                depth.set(x, y, 0, depth.get(x, y, 0) + s.depth * a * t);
                t *= 1.0 - a;
                if cutoffs && t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            alpha.set(x, y, 0, 1.0 - t);
        }
    }
    Ok((image, depth, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::logit;

    fn cam(w: usize, h: usize) -> Camera {
        Camera::identity_pose(w, h, 32.0, 32.0, 0.1, 100.0)
    }

    #[test]
    fn empty_cloud_renders_black() {
        let out = render(&GaussianCloud::empty(0), &cam(16, 16), None, RenderSettings::default()).unwrap();
        assert!(out.image.data.iter().all(|&v| v == 0.0));
        assert!(out.alpha.data.iter().all(|&v| v == 0.0));
        assert!(out.saved.bins.lists.iter().all(|l| l.is_empty()));
    }

    #[test]
    fn saturated_single_gaussian() {
        let c = cam(16, 16);
        let mut cloud = GaussianCloud::empty(0);
        // center of pixel (8, 8) at depth 2
        let x = (8.5 - c.cx) / c.fx * 2.0;
        let y = (8.5 - c.cy) / c.fy * 2.0;
        cloud.push_colored([x, y, 2.0], [1.0, 0.0, 0.0, 0.0], [3.0; 3], 10.0, [0.2, 0.6, 0.8]);
        let out = render(&cloud, &c, None, RenderSettings::default()).unwrap();
        for (ch, v) in [0.2, 0.6, 0.8].iter().enumerate() {
            assert!((out.image.get(8, 8, ch) - 0.99 * v).abs() < 1e-9);
        }
        assert!((out.alpha.get(8, 8, 0) - 0.99).abs() < 1e-9);
        assert!((out.depth.get(8, 8, 0) - 0.99 * 2.0).abs() < 1e-9);
    }

    #[test]
    fn front_gaussian_attenuates_back_one() {
        let c = cam(8, 8);
        let mut cloud = GaussianCloud::empty(0);
        cloud.push_colored([0.0, 0.0, 3.0], [1.0, 0.0, 0.0, 0.0], [3.0; 3], logit(0.5), [1.0, 0.0, 0.0]);
        cloud.push_colored([0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0], [3.0; 3], 12.0, [0.0, 1.0, 0.0]);
        let out = render(&cloud, &c, None, RenderSettings::default()).unwrap();
        let contribs = out.saved.pixel_contributions(4, 4);
        assert_eq!(contribs[0].gaussian, 1);
        let back = contribs[1];
        assert!((back.transmittance - 0.01).abs() < 1e-9);
        assert!((out.image.get(4, 4, 0) - 0.01 * back.alpha).abs() < 1e-12);
    }

    #[test]
    fn depth_is_zero_where_alpha_is_zero() {
        let c = cam(32, 32);
        let mut cloud = GaussianCloud::empty(0);
        cloud.push_colored([0.0, 0.0, 2.0], [1.0, 0.0, 0.0, 0.0], [-3.0; 3], 2.0, [0.5; 3]);
        let out = render(&cloud, &c, None, RenderSettings::default()).unwrap();
        for p in 0..32 * 32 {
            if out.alpha.data[p] == 0.0 {
                assert_eq!(out.depth.data[p], 0.0);
            }
        }
        assert_eq!(out.alpha.get(0, 0, 0), 0.0);
    }

    #[test]
    fn nonfinite_parameter_names_index() {
        let mut cloud = GaussianCloud::empty(0);
        cloud.push_colored([0.0, 0.0, 2.0], [1.0, 0.0, 0.0, 0.0], [-3.0; 3], 2.0, [0.5; 3]);
        cloud.push_colored([0.0, f64::NAN, 2.0], [1.0, 0.0, 0.0, 0.0], [-3.0; 3], 2.0, [0.5; 3]);
        let err = render(&cloud, &cam(8, 8), None, RenderSettings::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
    }

    #[test]
    fn backward_rejects_mismatched_gradients() {
        let out = render(&GaussianCloud::empty(0), &cam(8, 8), None, RenderSettings::default()).unwrap();
        let bad = Image::new(4, 4, 3);
        let d = Image::new(8, 8, 1);
        assert!(render_backward(&bad, &d, &d, &out.saved).is_err());
    }

    #[test]
    fn rect_minimum_matches_dense_sampling() {
        let q = Matrix2::new(0.5, 0.2, 0.2, 0.3);
        let mean = [-3.0, 7.0];
        let rect = [0.0, 0.0, 16.0, 16.0];
        let got = min_quadratic_over_rect(mean, &q, rect);
        let mut best = f64::INFINITY;
        for i in 0..=1600 {
            for j in 0..=1600 {
                let x = i as f64 / 100.0;
                let y = j as f64 / 100.0;
                let (dx, dy) = (x - mean[0], y - mean[1]);
                best = best.min(q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy);
            }
        }
        assert!(got <= best + 1e-12 && best - got < 1e-2, "{got} vs {best}");
    }
}
