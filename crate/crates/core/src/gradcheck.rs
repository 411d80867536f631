//! Central finite-difference verification of every backward pass.
//!
//! Each check perturbs sampled entries of one parameter group by `±h` and
//! compares `(f(x+h) − f(x−h)) / 2h` with the analytic gradient. The error
//! of an entry is `|a − n| / max(|a|, |n|, floor)`, where `floor` is 1% of
//! the group's largest magnitude so entries that are numerically zero do
//! not dominate.

use std::fmt;

use nalgebra::Matrix2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deformation::{deform_backward, deform_cloud, deform_cloud_recorded, FieldConfig, HexPlaneField};
use crate::error::{Error, Result};
use crate::gaussians::{logit, project_backward, project_parameters, Camera, CloudGroup, GaussianCloud, ProjectedGrad};
use crate::image::Image;
use crate::objective::{backpropagate, total_loss, ActiveTerms, DepthLossConfig, FrameTargets, LossWeights, RenderedMaps};
use crate::rasterizer::{render, render_backward, RenderSettings, TimeDeformer};
use crate::shf::ShfWeights;
use crate::thf::tape::Tape;
use crate::thf::{gray_on_tape, lk_on_tape, FramePair, LkConfig, Thf, ThfConfig, ThfInputs};

pub const PROJECTION_STEP: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-6;
pub const TIGHT_TOLERANCE: f64 = 1e-4;
pub const LOOSE_TOLERANCE: f64 = 1e-3;
const FLOOR_FRACTION: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Module {
    Projection,
    Rasterizer,
    Deformation,
    Shf,
    Thf,
    Objective,
}

impl Module {
    pub const ALL: [Module; 6] = [
        Module::Projection,
        Module::Rasterizer,
        Module::Deformation,
        Module::Shf,
        Module::Thf,
        Module::Objective,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Projection => "projection",
            Module::Rasterizer => "rasterizer",
            Module::Deformation => "deformation",
            Module::Shf => "shf",
            Module::Thf => "thf",
            Module::Objective => "objective",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown module '{name}', expected one of: {}", names.join(", ")))
        })
    }
}

/// Flips the sign of one analytic gradient group, to prove the checks can
/// fail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignInjection {
    pub module: Module,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckSpec {
    pub seed: u64,
    /// At most 10.
    pub gaussians: usize,
    /// Square image side, 8 to 16.
    pub size: usize,
    /// Entries checked per group.
    pub samples: usize,
    pub modules: Vec<Module>,
    pub inject: Option<SignInjection>,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            gaussians: 10,
            size: 16,
            samples: 24,
            modules: Module::ALL.to_vec(),
            inject: None,
        }
    }
}

impl GradcheckSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=10).contains(&self.gaussians) {
            return Err(Error::Config(format!("gaussians must be 1..=10, got {}", self.gaussians)));
        }
        if !(8..=16).contains(&self.size) {
            return Err(Error::Config(format!("size must be 8..=16, got {}", self.size)));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub module: Module,
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GroupCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for GroupCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: max rel error {:.2e} (tol {:.0e}, {} entries)",
            if self.passed() { "PASS" } else { "FAIL" },
            self.module.name(),
            self.group,
            self.max_rel_error,
            self.tolerance,
            self.checked
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<GroupCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(GroupCheck::passed)
    }

    pub fn failures(&self) -> Vec<&GroupCheck> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Maximum elementwise relative error between two gradient vectors.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let floor = FLOOR_FRACTION * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

struct Checker {
    rng: ChaCha8Rng,
    samples: usize,
    inject: Option<SignInjection>,
    checks: Vec<GroupCheck>,
}

impl Checker {
    /// Half the sampled entries have the largest analytic magnitude, the
    /// rest are drawn at random.
    fn pick(&mut self, analytic: &[f64]) -> Vec<usize> {
        let n = analytic.len();
        if n <= self.samples {
            return (0..n).collect();
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
        let mut picked: Vec<usize> = order[..self.samples / 2].to_vec();
        let mut rest = order[self.samples / 2..].to_vec();
        rest.shuffle(&mut self.rng);
        picked.extend_from_slice(&rest[..self.samples - picked.len()]);
        picked.sort_unstable();
        picked
    }

    fn compare(
        &mut self,
        module: Module,
        group: &str,
        analytic: &[f64],
        h: f64,
        tolerance: f64,
        mut eval: impl FnMut(usize, f64) -> Result<f64>,
    ) -> Result<()> {
        let flip = self
            .inject
            .as_ref()
            .is_some_and(|s| s.module == module && s.group == group);
        let idx = self.pick(analytic);
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        for &i in &idx {
            let plus = eval(i, h)?;
            let minus = eval(i, -h)?;
            n.push((plus - minus) / (2.0 * h));
            a.push(if flip { -analytic[i] } else { analytic[i] });
        }
        self.checks.push(GroupCheck {
            module,
            group: group.to_string(),
            checked: idx.len(),
            max_rel_error: max_relative_error(&a, &n),
            tolerance,
        });
        Ok(())
    }
}

fn camera(size: usize) -> Camera {
    let mut cam = Camera::identity_pose(size, size, size as f64, size as f64, 0.05, 100.0);
    let (s, c) = (0.08f64.sin(), 0.08f64.cos());
    cam.world_to_camera = [[c, 0.0, s, 0.05], [0.0, 1.0, 0.0, -0.03], [-s, 0.0, c, 0.1], [0.0, 0.0, 0.0, 1.0]];
    cam
}

/// Random Gaussians whose footprints fall inside a `size` × `size` view of
/// [`camera`], with opacities low enough that the alpha clamp never binds.
pub fn random_scene(rng: &mut impl Rng, n: usize, size: usize, sh_degree: usize) -> (GaussianCloud, Camera) {
    let cam = camera(size);
    let f = size as f64;
    let mut cloud = GaussianCloud::empty(sh_degree);
    for _ in 0..n {
        let z = rng.random_range(1.5..3.0);
        let px = rng.random_range(0.25 * f..0.75 * f);
        let py = rng.random_range(0.25 * f..0.75 * f);
        let pc = nalgebra::Vector3::new((px - cam.cx) / cam.fx * z, (py - cam.cy) / cam.fy * z, z);
        let p = cam.cam_to_world(&pc);
        let sigma_px: f64 = rng.random_range(1.5..3.0);
        let base = (sigma_px * z / f).ln();
        let log_scale = [0, 1, 2].map(|_| base + rng.random_range(-0.3..0.3));
        let q = [0, 1, 2, 3].map(|_| rng.random_range(-1.0..1.0));
        let q = if q.iter().map(|v| v * v).sum::<f64>() < 0.1 { [1.0, 0.0, 0.0, 0.0] } else { q };
        let sh: Vec<f64> = (0..cloud.sh_stride()).map(|_| rng.random_range(-0.5..0.5)).collect();
        cloud.push([p.x, p.y, p.z], q, log_scale, logit(rng.random_range(0.3..0.8)), &sh);
    }
    (cloud, cam)
}

fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Image {
    Image::from_fn(w, h, c, |_, _, _| rng.random_range(0.0..1.0))
}

/// Smooth texture so LK sees well-conditioned structure tensors.
fn texture(w: usize, h: usize, shift: f64, phase: f64) -> Image {
    Image::from_fn(w, h, 3, |x, y, c| {
        let (x, y) = (x as f64 - shift, y as f64);
        0.5 + 0.2 * (0.7 * x + 0.3 * y + phase + c as f64).sin() + 0.15 * (0.4 * y - 0.5 * x + 2.0 * phase).cos()
    })
}

fn small_field(cloud: &GaussianCloud, rng: &mut impl Rng, seed: u64) -> Result<HexPlaneField> {
    let cfg = FieldConfig {
        levels: 2,
        base_resolution: 4,
        time_resolution: 4,
        upsample: 2,
        feature_dim: 4,
        hidden_width: 8,
        hidden_layers: 1,
        spatial_init_range: 0.5,
        temporal_init_value: 1.0,
    };
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a] - 0.3);
            hi[a] = hi[a].max(p[a] + 0.3);
        }
    }
    let mut field = HexPlaneField::new(cfg, lo, hi, cloud.sh_degree, seed)?;
    for v in field.plane_params.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let (head, _) = field.output_weights_mut();
    for v in head.iter_mut() {
        *v = rng.random_range(-0.05..0.05);
    }
    Ok(field)
}

fn check_projection(ck: &mut Checker, cloud: &GaussianCloud, cam: &Camera) -> Result<()> {
    let n = cloud.count();
    let upstream: Vec<ProjectedGrad> = (0..n)
        .map(|_| {
            let mut g = ProjectedGrad::default();
            g.mean2d = [ck.rng.random_range(-1.0..1.0), ck.rng.random_range(-1.0..1.0)];
            let off = ck.rng.random_range(-1.0..1.0);
            g.cov2d = Matrix2::new(ck.rng.random_range(-1.0..1.0), off, off, ck.rng.random_range(-1.0..1.0));
            g.depth = ck.rng.random_range(-1.0..1.0);
            g
        })
        .collect();
    let objective = |c: &GaussianCloud| -> Result<f64> {
        let mut s = 0.0;
        for i in 0..n {
            let p = project_parameters(&c.positions[i], &c.rotations[i], &c.log_scales[i], cam)
                .ok_or_else(|| Error::Contract("gradcheck gaussian was culled".into()))?;
            let g = &upstream[i];
            s += g.mean2d[0] * p.mean2d[0] + g.mean2d[1] * p.mean2d[1] + g.depth * p.depth;
            for r in 0..2 {
                for c in 0..2 {
                    s += g.cov2d[(r, c)] * p.cov2d[(r, c)];
                }
            }
        }
        Ok(s)
    };
    let mut grads = cloud.zeros_like();
    for i in 0..n {
        let (gp, gq, gs) = project_backward(&cloud.positions[i], &cloud.rotations[i], &cloud.log_scales[i], cam, &upstream[i]);
        grads.positions[i] = gp;
        grads.rotations[i] = gq;
        grads.log_scales[i] = gs;
    }
    for g in [CloudGroup::Positions, CloudGroup::Rotations, CloudGroup::LogScales] {
        ck.compare(Module::Projection, g.name(), grads.group(g), PROJECTION_STEP, TIGHT_TOLERANCE, |i, d| {
            let mut c = cloud.clone();
            c.group_mut(g)[i] += d;
            objective(&c)
        })?;
    }
    Ok(())
}

fn check_render(ck: &mut Checker, cloud: &GaussianCloud, cam: &Camera, label: &str, tol: f64, one_pixel: bool) -> Result<()> {
    let settings = RenderSettings::gradient_check();
    let (w, h) = (cam.width, cam.height);
    let (gi, gd, ga) = if one_pixel {
        let mut gi = Image::new(w, h, 3);
        let (x, y) = (w / 2, h / 2);
        for c in 0..3 {
            gi.set(x, y, c, 1.0 + c as f64 * 0.5);
        }
        let mut gd = Image::new(w, h, 1);
        gd.set(x, y, 0, 0.3);
        let mut ga = Image::new(w, h, 1);
        ga.set(x, y, 0, -0.7);
        (gi, gd, ga)
    } else {
        (
            random_image(&mut ck.rng, w, h, 3),
            random_image(&mut ck.rng, w, h, 1),
            random_image(&mut ck.rng, w, h, 1),
        )
    };
    let objective = |c: &GaussianCloud| -> Result<f64> {
        let out = render(c, cam, None, settings)?;
        let dot = |a: &Image, b: &Image| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
        Ok(dot(&out.image, &gi) + dot(&out.depth, &gd) + dot(&out.alpha, &ga))
    };
    let out = render(cloud, cam, None, settings)?;
    let grads = render_backward(&gi, &gd, &ga, &out.saved)?;
    for g in CloudGroup::ALL {
        ck.compare(Module::Rasterizer, &format!("{label}{}", g.name()), grads.cloud.group(g), DEFAULT_STEP, tol, |i, d| {
            let mut c = cloud.clone();
            c.group_mut(g)[i] += d;
            objective(&c)
        })?;
    }
    Ok(())
}

fn check_deformation(ck: &mut Checker, cloud: &GaussianCloud, seed: u64) -> Result<()> {
    let field = small_field(cloud, &mut ck.rng, seed)?;
    let t = 0.37;
    let mut weights = cloud.zeros_like();
    for g in CloudGroup::ALL {
        for v in weights.group_mut(g) {
            *v = ck.rng.random_range(-1.0..1.0);
        }
    }
    let objective = |c: &GaussianCloud, f: &HexPlaneField| -> Result<f64> {
        let d = deform_cloud(c, t, f)?;
        Ok(CloudGroup::ALL
            .iter()
            .map(|&g| d.group(g).iter().zip(weights.group(g)).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };
    let (_, tape) = deform_cloud_recorded(cloud, t, &field)?;
    let (gc, gf) = deform_backward(&tape, &weights);
    ck.compare(Module::Deformation, "field_planes", &gf.planes, DEFAULT_STEP, TIGHT_TOLERANCE, |i, d| {
        let mut f = field.clone();
        f.plane_params[i] += d;
        objective(cloud, &f)
    })?;
    ck.compare(Module::Deformation, "field_mlp", &gf.mlp, DEFAULT_STEP, TIGHT_TOLERANCE, |i, d| {
        let mut f = field.clone();
        f.mlp_params[i] += d;
        objective(cloud, &f)
    })?;
    for g in CloudGroup::ALL {
        ck.compare(Module::Deformation, g.name(), gc.group(g), DEFAULT_STEP, TIGHT_TOLERANCE, |i, d| {
            let mut c = cloud.clone();
            c.group_mut(g)[i] += d;
            objective(&c, &field)
        })?;
    }
    Ok(())
}

fn check_shf(ck: &mut Checker, size: usize) -> Result<()> {
    let gt = random_image(&mut ck.rng, size, size, 3);
    let rendered = random_image(&mut ck.rng, size, size, 3);
    let weights = ShfWeights::from_ground_truth(&gt, crate::shf::DEFAULT_RADIUS_RATIO)?;
    let (_, grad) = weights.loss(&gt, &rendered)?;
    ck.compare(Module::Shf, "rendered_image", &grad.data, DEFAULT_STEP, LOOSE_TOLERANCE, |i, d| {
        let mut r = rendered.clone();
        r.data[i] += d;
        Ok(weights.loss(&gt, &r)?.0)
    })
}

fn gradcheck_lk() -> LkConfig {
    LkConfig {
        levels: 2,
        window: 5,
        ..LkConfig::default()
    }
}

fn check_thf(ck: &mut Checker, size: usize) -> Result<()> {
    let lk = gradcheck_lk();
    let a = texture(size, size, 0.0, 0.3);
    let b = texture(size, size, 0.6, 0.3);
    let wu = random_image(&mut ck.rng, size, size, 1);
    let wv = random_image(&mut ck.rng, size, size, 1);
    let flow_scalar = |b: &Image| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let (ga, _) = gray_on_tape(&mut tape, &a);
        let (gb, leaves) = gray_on_tape(&mut tape, b);
        let (u, v) = lk_on_tape(&mut tape, ga, gb, &lk);
        let cu = tape.leaf(size, size, wu.data.clone());
        let cv = tape.leaf(size, size, wv.data.clone());
        let pu = tape.mul(u, cu);
        let pv = tape.mul(v, cv);
        let s = tape.add(pu, pv);
        let out = tape.sum(s);
        let value = tape.value(out)[0];
        let grads = tape.backward(out);
        let mut g = vec![0.0; size * size * 3];
        for (c, &leaf) in leaves.iter().enumerate() {
            for (p, v) in grads.get_or_zeros(leaf, size * size).into_iter().enumerate() {
                g[p * 3 + c] = v;
            }
        }
        (value, g)
    };
    let (_, g) = flow_scalar(&b);
    ck.compare(Module::Thf, "lk_flow", &g, DEFAULT_STEP, LOOSE_TOLERANCE, |i, d| {
        let mut bb = b.clone();
        bb.data[i] += d;
        Ok(flow_scalar(&bb).0)
    })?;

    let thf = Thf::lucas_kanade(ThfConfig::default(), lk)?;
    let gt_prev = texture(size, size, 0.0, 1.1);
    let gt_cur = texture(size, size, 0.8, 1.1);
    let noise = |img: &Image, rng: &mut ChaCha8Rng| {
        let mut out = img.clone();
        out.data.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        out
    };
    let r_prev = noise(&gt_prev, &mut ck.rng);
    let r_cur = noise(&texture(size, size, 0.5, 1.1), &mut ck.rng);
    let loss = |cur: &Image, prev: &Image| {
        thf.loss(&ThfInputs {
            rendered_current: cur,
            rendered_previous: prev,
            gt_current: &gt_cur,
            gt_previous: &gt_prev,
            mask_current: None,
            mask_previous: None,
            pair: FramePair { index: 1 },
            gt_flow: None,
        })
    };
    let out = loss(&r_cur, &r_prev)?;
    ck.compare(Module::Thf, "rendered_current", &out.grad_current.data, DEFAULT_STEP, LOOSE_TOLERANCE, |i, d| {
        let mut c = r_cur.clone();
        c.data[i] += d;
        Ok(loss(&c, &r_prev)?.loss)
    })?;
    ck.compare(Module::Thf, "rendered_previous", &out.grad_previous.data, DEFAULT_STEP, LOOSE_TOLERANCE, |i, d| {
        let mut p = r_prev.clone();
        p.data[i] += d;
        Ok(loss(&r_cur, &p)?.loss)
    })
}

/// Full objective on a two-frame pair: every term active, gradients carried
/// through both renders and the deformation field.
fn check_objective(ck: &mut Checker, cloud: &GaussianCloud, cam: &Camera, seed: u64) -> Result<()> {
    let field = small_field(cloud, &mut ck.rng, seed ^ 1)?;
    let (w, h) = (cam.width, cam.height);
    let settings = RenderSettings::gradient_check();
    let gt_cur = texture(w, h, 0.7, 0.2);
    let gt_prev = texture(w, h, 0.0, 0.2);
    let gt_depth = Image::from_fn(w, h, 1, |x, y, _| 2.0 + 0.02 * x as f64 - 0.01 * y as f64);
    let mut mask = Image::new(w, h, 1);
    for p in 0..w * h {
        if ck.rng.random_range(0.0..1.0) < 0.1 {
            mask.data[p] = 1.0;
        }
    }
    let shf = ShfWeights::from_ground_truth(&gt_cur, crate::shf::DEFAULT_RADIUS_RATIO)?.with_mask(&mask)?;
    let thf = Thf::lucas_kanade(ThfConfig::default(), gradcheck_lk())?;
    let weights = LossWeights::default();
    let depth_cfg = DepthLossConfig {
        scale: 2.5,
        min_alpha: 0.0,
        ..DepthLossConfig::default()
    };
    let (t_prev, t_cur) = (0.2, 0.45);

    let run = |c: &GaussianCloud, f: &HexPlaneField, backward: bool| -> Result<(f64, Option<(GaussianCloud, Vec<f64>, Vec<f64>)>)> {
        let cur = render(c, cam, Some(TimeDeformer { field: f, time: t_cur }), settings)?;
        let prev = render(c, cam, Some(TimeDeformer { field: f, time: t_prev }), settings)?;
        let thf_out = thf.loss(&ThfInputs {
            rendered_current: &cur.image,
            rendered_previous: &prev.image,
            gt_current: &gt_cur,
            gt_previous: &gt_prev,
            mask_current: Some(&mask),
            mask_previous: None,
            pair: FramePair { index: 1 },
            gt_flow: None,
        })?;
        let (_, total, grads) = total_loss(
            &FrameTargets {
                image: &gt_cur,
                depth: Some(&gt_depth),
                mask: Some(&mask),
                shf: Some(&shf),
            },
            &RenderedMaps {
                image: &cur.image,
                depth: &cur.depth,
                alpha: &cur.alpha,
            },
            &ActiveTerms {
                depth: true,
                shf: true,
                tv: Some(f),
                thf: Some(&thf_out),
            },
            &weights,
            &depth_cfg,
        )?;
        if !backward {
            return Ok((total, None));
        }
        let pg = backpropagate(&grads, &cur.saved, Some(&prev.saved))?;
        let fg = pg.field.ok_or_else(|| Error::Contract("objective produced no field gradient".into()))?;
        Ok((total, Some((pg.cloud, fg.planes, fg.mlp))))
    };
    let (_, grads) = run(cloud, &field, true)?;
    let (gc, gp, gm) = grads.expect("backward requested");
    for g in CloudGroup::ALL {
        ck.compare(Module::Objective, g.name(), gc.group(g), DEFAULT_STEP, LOOSE_TOLERANCE, |i, d| {
            let mut c = cloud.clone();
            c.group_mut(g)[i] += d;
            Ok(run(&c, &field, false)?.0)
        })?;
    }
    ck.compare(Module::Objective, "field_planes", &gp, DEFAULT_STEP, LOOSE_TOLERANCE, |i, d| {
        let mut f = field.clone();
        f.plane_params[i] += d;
        Ok(run(cloud, &f, false)?.0)
    })?;
    ck.compare(Module::Objective, "field_mlp", &gm, DEFAULT_STEP, LOOSE_TOLERANCE, |i, d| {
        let mut f = field.clone();
        f.mlp_params[i] += d;
        Ok(run(cloud, &f, false)?.0)
    })
}

/// Runs the selected module checks on a randomized scene.
pub fn run_gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    spec.validate()?;
    let mut ck = Checker {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        samples: spec.samples,
        inject: spec.inject.clone(),
        checks: Vec::new(),
    };
    let mut scene_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let (cloud, cam) = random_scene(&mut scene_rng, spec.gaussians, spec.size, 1);
    let (single, _) = random_scene(&mut scene_rng, 1, spec.size, 1);
    let deform_cloud = {
        let mut c = cloud.clone();
        let keep: Vec<bool> = (0..c.count()).map(|i| i < 8).collect();
        c.retain_mask(&keep);
        c
    };
    for &m in &spec.modules {
        match m {
            Module::Projection => check_projection(&mut ck, &cloud, &cam)?,
            Module::Rasterizer => {
                check_render(&mut ck, &single, &cam, "single.", TIGHT_TOLERANCE, true)?;
                check_render(&mut ck, &cloud, &cam, "", LOOSE_TOLERANCE, false)?;
            }
            Module::Deformation => check_deformation(&mut ck, &deform_cloud, spec.seed)?,
            Module::Shf => check_shf(&mut ck, spec.size)?,
            Module::Thf => check_thf(&mut ck, spec.size)?,
            Module::Objective => check_objective(&mut ck, &cloud, &cam, spec.seed)?,
        }
    }
    Ok(GradcheckReport { checks: ck.checks })
}
