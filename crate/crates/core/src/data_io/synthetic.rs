//! Built-in synthetic scenes with known geometry, motion and flow.
//!
//! Every Gaussian follows `position(t) = base + direction · s(t)` for a
//! scene-wide schedule `s`. Frames are rendered with the reference
//! renderer. Ground-truth flow for the pair `(i − 1, i)` is the blend-weighted
//! mean of the projected displacement of the Gaussians seen at each pixel of
//! frame `i − 1`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{frame_time, Dataset, FrameRecord, DEFAULT_DEPTH_SCALE};
use crate::error::{Error, Result};
use crate::gaussians::{logit, Camera, GaussianCloud};
use crate::image::Image;
use crate::rasterizer::{render, render_naive, RenderSettings};
use crate::thf::FlowField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    StaticTexture,
    TranslatingBlob,
    PulsatingSheet,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [
        SceneKind::StaticTexture,
        SceneKind::TranslatingBlob,
        SceneKind::PulsatingSheet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::StaticTexture => "static_texture",
            SceneKind::TranslatingBlob => "translating_blob",
            SceneKind::PulsatingSheet => "pulsating_sheet",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::InvalidParameter(format!("unknown scene '{name}', valid scenes: {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Screen-space blob velocity in pixels per frame.
    pub velocity: [f64; 2],
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, seed: u64) -> Self {
        Self {
            kind,
            width: 64,
            height: 64,
            frames: if kind == SceneKind::StaticTexture { 1 } else { 8 },
            velocity: [2.0, 0.0],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidParameter("synthetic scenes need at least 16x16 pixels".into()));
        }
        if self.frames == 0 {
            return Err(Error::InvalidParameter("synthetic scenes need at least one frame".into()));
        }
        if self.velocity.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("velocity must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Static,
    /// `s(t) = t · frames`, so directions are displacements per frame.
    Linear { frames: usize },
    /// `s(t) = sin(2πt)`.
    Sine,
}

impl Schedule {
    pub fn value(self, t: f64) -> f64 {
        match self {
            Schedule::Static => 0.0,
            Schedule::Linear { frames } => t * frames as f64,
            Schedule::Sine => (2.0 * std::f64::consts::PI * t).sin(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub directions: Vec<[f64; 3]>,
    pub schedule: Schedule,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub camera: Camera,
    /// Cloud at `s(t) = 0`.
    pub cloud: GaussianCloud,
    pub trajectory: Trajectory,
    pub frames: Vec<FrameRecord>,
    /// `flows[i]` maps frame `i − 1` to `i`; `flows[0]` is zero.
    pub flows: Vec<FlowField>,
    /// Per-pair evaluation region on the pixels of frame `i − 1` (frame 0
    /// for index 0): the texture patch, the blob interior or the covered
    /// sheet depending on the scene.
    pub regions: Vec<Vec<bool>>,
}

impl SyntheticScene {
    pub fn cloud_at(&self, t: f64) -> GaussianCloud {
        let s = self.trajectory.schedule.value(t);
        let mut c = self.cloud.clone();
        for (p, d) in c.positions.iter_mut().zip(&self.trajectory.directions) {
            for k in 0..3 {
                p[k] += d[k] * s;
            }
        }
        c
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            cameras: vec![self.camera.clone(); self.frames.len()],
            frames: self.frames.clone(),
            gt_flows: Some(self.flows.clone()),
            depth_scale: DEFAULT_DEPTH_SCALE,
        }
    }
}

struct Builder<'a> {
    cam: &'a Camera,
    cloud: GaussianCloud,
    directions: Vec<[f64; 3]>,
}

impl Builder<'_> {
    /// Isotropic Gaussian centered on pixel position `(px, py)` at depth `z`.
    fn add(&mut self, px: f64, py: f64, z: f64, sigma_px: f64, opacity: f64, rgb: [f64; 3], dir: [f64; 3]) {
        let x = (px - self.cam.cx) * z / self.cam.fx;
        let y = (py - self.cam.cy) * z / self.cam.fy;
        let ls = (sigma_px * z / self.cam.fx).ln();
        let rgb = rgb.map(|c| c.clamp(0.02, 0.98));
        self.cloud
            .push_colored([x, y, z], [1.0, 0.0, 0.0, 0.0], [ls; 3], logit(opacity), rgb);
        self.directions.push(dir);
    }
}

fn grid(lo: f64, hi: f64, step: f64) -> impl Iterator<Item = f64> {
    let n = ((hi - lo) / step).floor() as usize;
    (0..=n).map(move |i| lo + i as f64 * step)
}

const TAU: f64 = 2.0 * std::f64::consts::PI;

pub fn synth_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let camera = Camera::identity_pose(spec.width, spec.height, w, w, 0.05, 100.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut b = Builder {
        cam: &camera,
        cloud: GaussianCloud::empty(0),
        directions: Vec::new(),
    };
    let mut jitter = |amp: f64| rng.random_range(-amp..amp);
    let mut blob_members = Vec::new();
    let schedule = match spec.kind {
        SceneKind::StaticTexture => {
            for py in grid(-3.0, h + 3.0, 6.0) {
                for px in grid(-3.0, w + 3.0, 6.0) {
                    let rgb = [0.25 + 0.35 * px / w, 0.3 + 0.3 * py / h, 0.55 - 0.2 * px / w];
                    b.add(px, py, 3.0, 4.0, 0.99, rgb, [0.0; 3]);
                }
            }
            let (lo_x, hi_x, lo_y, hi_y) = (w / 4.0, 3.0 * w / 4.0, h / 4.0, 3.0 * h / 4.0);
            for (j, py) in grid(lo_y + 1.0, hi_y - 1.0, 2.0).enumerate() {
                for (i, px) in grid(lo_x + 1.0, hi_x - 1.0, 2.0).enumerate() {
                    let v = if (i + j) % 2 == 0 { 0.3 } else { -0.3 };
                    let rgb = [0.5 + v + jitter(0.05), 0.45 + 0.8 * v + jitter(0.05), 0.4 - 0.6 * v + jitter(0.05)];
                    b.add(px, py, 2.0, 1.1, 0.95, rgb, [0.0; 3]);
                }
            }
            Schedule::Static
        }
        SceneKind::TranslatingBlob => {
            for py in grid(-2.0, h + 2.0, 4.0) {
                for px in grid(-2.0, w + 2.0, 4.0) {
                    let rgb = [
                        0.45 + 0.2 * (TAU * px / 16.0).sin() * (TAU * py / 20.0).cos(),
                        0.5 + 0.2 * (TAU * (px + py) / 24.0).sin(),
                        0.55 + 0.15 * (TAU * py / 14.0).cos(),
                    ];
                    b.add(px, py, 3.0, 2.5, 0.99, rgb, [0.0; 3]);
                }
            }
            let (cx, cy, r, z) = (0.3 * w, 0.5 * h, 9.0, 2.0);
            let dir = [spec.velocity[0] * z / camera.fx, spec.velocity[1] * z / camera.fy, 0.0];
            for py in grid(cy - r, cy + r, 2.0) {
                for px in grid(cx - r, cx + r, 2.0) {
                    if (px - cx).hypot(py - cy) > r {
                        continue;
                    }
                    let rgb = [
                        0.85 + 0.1 * (TAU * px / 6.0).sin(),
                        0.25 + 0.15 * (TAU * py / 6.0).cos(),
                        0.2 + jitter(0.05),
                    ];
                    blob_members.push(b.cloud.count());
                    b.add(px, py, z, 1.5, 0.97, rgb, dir);
                }
            }
            Schedule::Linear { frames: spec.frames }
        }
        SceneKind::PulsatingSheet => {
            let (amp, spread, z) = (0.2, 0.4, 2.5);
            for py in grid(-3.0, h + 3.0, 3.0) {
                for px in grid(-3.0, w + 3.0, 3.0) {
                    let rgb = [
                        0.5 + 0.25 * (TAU * px / 12.0).sin(),
                        0.45 + 0.2 * (TAU * py / 10.0).cos(),
                        0.4 + 0.15 * (TAU * (px - py) / 18.0).sin() + jitter(0.03),
                    ];
                    let x = (px - camera.cx) * z / camera.fx;
                    let y = (py - camera.cy) * z / camera.fy;
                    let bump = (-(x * x + y * y) / (2.0 * spread * spread)).exp();
                    // the resting dome keeps depth order fixed over the cycle
                    b.add(px, py, z - 1.5 * amp * bump, 2.0, 0.99, rgb, [0.0, 0.0, -amp * bump]);
                }
            }
            Schedule::Sine
        }
    };
    let Builder { cloud, directions, .. } = b;
    let mut scene = SyntheticScene {
        spec: spec.clone(),
        camera,
        cloud,
        trajectory: Trajectory { directions, schedule },
        frames: Vec::new(),
        flows: Vec::new(),
        regions: Vec::new(),
    };
    render_frames(&mut scene, &blob_members)?;
    Ok(scene)
}

fn project(cam: &Camera, p: &[f64; 3]) -> [f64; 2] {
    let c = cam.world_to_cam(&Vector3::new(p[0], p[1], p[2]));
    [cam.fx * c.x / c.z + cam.cx, cam.fy * c.y / c.z + cam.cy]
}

fn render_frames(scene: &mut SyntheticScene, blob_members: &[usize]) -> Result<()> {
    let (w, h) = (scene.spec.width, scene.spec.height);
    let n = scene.spec.frames;
    let cam = scene.camera.clone();
    let mut in_blob = vec![false; scene.cloud.count()];
    blob_members.iter().for_each(|&i| in_blob[i] = true);
    let mut prev: Option<(GaussianCloud, crate::rasterizer::SavedState, Image)> = None;
    for i in 0..n {
        let t = frame_time(i, n);
        let cloud = scene.cloud_at(t);
        let (image, depth, alpha) = render_naive(&cloud, &cam, true)?;
        let out = render(&cloud, &cam, None, RenderSettings::default())?;
        let expected = Image::from_fn(w, h, 1, |x, y, _| {
            let a = alpha.get(x, y, 0);
            if a >= 0.5 {
                depth.get(x, y, 0) / a
            } else {
                0.0
            }
        });
        let (ref_cloud, ref_saved, ref_alpha) = match &prev {
            Some((c, s, a)) => (c, s, a),
            None => (&cloud, &out.saved, &alpha),
        };
        let mut flow = FlowField::zeros(w, h);
        let mut region = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (mut sw, mut su, mut sv, mut blob_w) = (0.0, 0.0, 0.0, 0.0);
                for (g, wt) in ref_saved.pixel_weights(x, y) {
                    let a = project(&cam, &ref_cloud.positions[g]);
                    let b = project(&cam, &cloud.positions[g]);
                    sw += wt;
                    su += wt * (b[0] - a[0]);
                    sv += wt * (b[1] - a[1]);
                    if in_blob[g] {
                        blob_w += wt;
                    }
                }
                if sw > 1e-12 {
                    flow.u[p] = su / sw;
                    flow.v[p] = sv / sw;
                }
                let covered = ref_alpha.data[p] >= 0.5;
                region[p] = match scene.spec.kind {
                    SceneKind::StaticTexture => {
                        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                        (w as f64 / 4.0..3.0 * w as f64 / 4.0).contains(&fx)
                            && (h as f64 / 4.0..3.0 * h as f64 / 4.0).contains(&fy)
                    }
                    SceneKind::TranslatingBlob => covered && blob_w >= 0.995 * sw,
                    SceneKind::PulsatingSheet => covered,
                };
            }
        }
        if i == 0 {
            flow = FlowField::zeros(w, h);
        }
        scene.frames.push(FrameRecord {
            image,
            depth: Some(expected),
            mask: Image::new(w, h, 1),
            time: t,
        });
        scene.flows.push(flow);
        scene.regions.push(region);
        prev = Some((cloud, out.saved, alpha));
    }
    Ok(())
}
