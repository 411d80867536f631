//! Two-stage optimization.
//!
//! Stage 1 fits a static cloud with L1, depth and SHF. Stage 2 adds the
//! deformation field, the temporal loss on a pair of neighboring frames
//! (two renders per iteration) and plane TV. Densification runs through
//! stage 1 and the first half of stage 2.
//!
//! Each iteration draws its randomness from a ChaCha stream keyed by
//! `(seed, iteration)`, so a resumed run replays the same frames.

pub mod checkpoint;
pub mod config;
pub mod densify;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;
pub use config::{FlowSource, LearningRates, TrainConfig};
pub use densify::{densify_and_prune, DensifyConfig, DensifyOutcome, DensifyStats};

use crate::data_io::{psnr, Dataset, FrameRecord};
use crate::deformation::HexPlaneField;
use crate::error::{Error, Result};
use crate::gaussians::{logit, Camera, CloudGroup, GaussianCloud};
use crate::image::Image;
use crate::objective::{
    backpropagate, depth_percentile, total_loss, ActiveTerms, DepthLossConfig, FrameTargets, LossReport,
    ParameterGradients, RenderedMaps, Stage,
};
use crate::optim::{adam_step, AdamState, CloudOptimizer, StepOutcome};
use crate::rasterizer::{render, RenderOutput, RenderSettings, TimeDeformer};
use crate::shf::ShfWeights;
use crate::thf::{FlowField, FramePair, GroundTruthFlowPredictor, LkPredictor, Thf, ThfInputs};

pub const INIT_OPACITY: f64 = 0.1;
const FIELD_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Adam moments of the deformation field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldOptimizer {
    pub planes: AdamState,
    pub mlp: AdamState,
}

impl FieldOptimizer {
    pub fn new(field: &HexPlaneField) -> Self {
        Self {
            planes: AdamState::new(field.plane_params.len()),
            mlp: AdamState::new(field.mlp_params.len()),
        }
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: u64,
    /// Half-diagonal of the initial cloud's bounding box.
    pub scene_extent: f64,
    /// `[width, height]` of the training frames.
    pub image_size: [usize; 2],
    pub cloud: GaussianCloud,
    pub cloud_opt: CloudOptimizer,
    pub field: Option<HexPlaneField>,
    pub field_opt: Option<FieldOptimizer>,
    pub stats: DensifyStats,
}

impl TrainState {
    pub fn new(cloud: GaussianCloud, config: &TrainConfig, image_size: [usize; 2]) -> Self {
        let scene_extent = scene_extent(&cloud);
        Self {
            iteration: 0,
            scene_extent,
            image_size,
            cloud_opt: CloudOptimizer::new(&cloud, config.adam),
            stats: DensifyStats::new(cloud.count()),
            cloud,
            field: None,
            field_opt: None,
        }
    }
}

fn bounding_box(cloud: &GaussianCloud) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

fn scene_extent(cloud: &GaussianCloud) -> f64 {
    if cloud.is_empty() {
        return 1.0;
    }
    let (lo, hi) = bounding_box(cloud);
    let d: f64 = (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt() * 0.5;
    if d > 0.0 {
        d
    } else {
        1.0
    }
}

/// Back-projects every `stride`-th unmasked pixel with a valid depth.
///
/// Colors come from the pixel, opacity is `INIT_OPACITY`, and the isotropic
/// scale is the mean distance to the back-projected grid neighbors.
pub fn init_from_depth(frame: &FrameRecord, camera: &Camera, stride: usize, sh_degree: usize) -> Result<GaussianCloud> {
    if stride == 0 {
        return Err(Error::InvalidParameter("init stride must be at least 1".into()));
    }
    let depth = frame
        .depth
        .as_ref()
        .ok_or_else(|| Error::Data("initialization needs a depth map for the first frame".into()))?;
    let (w, h) = (frame.image.width, frame.image.height);
    let (gw, gh) = (w.div_ceil(stride), h.div_ceil(stride));
    let mut grid: Vec<Option<Vector3<f64>>> = vec![None; gw * gh];
    for gy in 0..gh {
        for gx in 0..gw {
            let (x, y) = (gx * stride, gy * stride);
            let z = depth.get(x, y, 0);
            if frame.mask.get(x, y, 0) >= 0.5 || !(z.is_finite() && z > 0.0) {
                continue;
            }
            let pc = Vector3::new(
                (x as f64 + 0.5 - camera.cx) / camera.fx * z,
                (y as f64 + 0.5 - camera.cy) / camera.fy * z,
                z,
            );
            grid[gy * gw + gx] = Some(camera.cam_to_world(&pc));
        }
    }
    let mut cloud = GaussianCloud::empty(sh_degree);
    for gy in 0..gh {
        for gx in 0..gw {
            let Some(p) = grid[gy * gw + gx] else { continue };
            let mut dist = 0.0;
            let mut count = 0;
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (gx as i64 + dx, gy as i64 + dy);
                if nx < 0 || ny < 0 || nx >= gw as i64 || ny >= gh as i64 {
                    continue;
                }
                if let Some(q) = grid[ny as usize * gw + nx as usize] {
                    dist += (q - p).norm();
                    count += 1;
                }
            }
            let spacing = if count > 0 {
                dist / count as f64
            } else {
                let z = camera.world_to_cam(&p).z;
                stride as f64 * z / camera.fx
            };
            let (x, y) = (gx * stride, gy * stride);
            let rgb = [0, 1, 2].map(|c| frame.image.get(x, y, c));
            cloud.push_colored(
                [p.x, p.y, p.z],
                [1.0, 0.0, 0.0, 0.0],
                [spacing.max(1e-9).ln(); 3],
                logit(INIT_OPACITY),
                rgb,
            );
        }
    }
    if cloud.is_empty() {
        return Err(Error::Data("the first frame has no unmasked pixel with a valid depth".into()));
    }
    Ok(cloud)
}

/// Per-dataset data derived once before optimization.
pub struct Trainer<'a> {
    pub dataset: &'a Dataset,
    pub config: TrainConfig,
    shf: Vec<ShfWeights>,
    depth_cfg: DepthLossConfig,
    thf: Option<Thf>,
    /// `gt_flows[p]` is the ground-truth-branch flow of pair `(p − 1, p)`.
    gt_flows: Vec<FlowField>,
}

/// Losses and gradients of one iteration, before the update.
pub struct Evaluation {
    pub report: LossReport,
    pub grads: ParameterGradients,
    pub width: usize,
    pub height: usize,
}

impl<'a> Trainer<'a> {
    /// Validates inputs and precomputes SHF weights, the depth scale and
    /// the ground-truth flows.
    pub fn new(dataset: &'a Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let shf = dataset
            .frames
            .iter()
            .map(|f| ShfWeights::from_ground_truth(&f.image, config.shf_radius_ratio)?.with_mask(&f.mask))
            .collect::<Result<Vec<_>>>()?;
        let scale = if dataset.has_depth() {
            depth_percentile(dataset.frames.iter().filter_map(|f| f.depth.as_ref()), config.depth_percentile)
                .ok_or_else(|| Error::Data("depth maps contain no valid depth".into()))?
        } else {
            log::warn!("dataset has no depth maps; the depth term is disabled");
            1.0
        };
        let depth_cfg = DepthLossConfig {
            scale,
            delta: config.depth_delta,
            min_alpha: config.depth_min_alpha,
        };
        let temporal = config.deform_iters > 0;
        let thf = if temporal {
            let ground_truth: Box<dyn crate::thf::FlowPredictor> = match config.flow_source {
                FlowSource::Lk => Box::new(LkPredictor { config: config.lk }),
                FlowSource::GroundTruth => {
                    let flows = dataset.gt_flows.clone().ok_or_else(|| {
                        Error::Config("flow_source = ground_truth but the dataset has no flow fields".into())
                    })?;
                    Box::new(GroundTruthFlowPredictor { flows })
                }
            };
            Some(Thf::new(config.thf, Box::new(LkPredictor { config: config.lk }), ground_truth)?)
        } else {
            None
        };
        let mut gt_flows = Vec::new();
        if let Some(thf) = &thf {
            let (w, h) = dataset.dims();
            gt_flows.push(FlowField::zeros(w, h));
            for p in 1..dataset.len() {
                let fr = &dataset.frames;
                gt_flows.push(thf.gt_flow(&fr[p].image, &fr[p - 1].image, FramePair { index: p })?);
            }
        }
        Ok(Self {
            dataset,
            config: config.clone(),
            shf,
            depth_cfg,
            thf,
            gt_flows,
        })
    }

    pub fn depth_config(&self) -> &DepthLossConfig {
        &self.depth_cfg
    }

    pub fn gt_flow(&self, pair: usize) -> Option<&FlowField> {
        self.gt_flows.get(pair)
    }

    /// Cloud from depth back-projection of frame 0.
    pub fn initial_state(&self) -> Result<TrainState> {
        let cloud = init_from_depth(
            &self.dataset.frames[0],
            &self.dataset.cameras[0],
            self.config.init_stride,
            self.config.sh_degree,
        )?;
        let (w, h) = self.dataset.dims();
        Ok(TrainState::new(cloud, &self.config, [w, h]))
    }

    pub fn stage_of(&self, k: u64) -> Stage {
        if k < self.config.static_iters {
            Stage::Static
        } else {
            Stage::Deformed
        }
    }

    fn rng(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(k);
        rng
    }

    /// Creates the zero-output deformation field around the current cloud.
    pub fn ensure_field(&self, state: &mut TrainState) -> Result<()> {
        if state.field.is_some() {
            return Ok(());
        }
        let (mut lo, mut hi) = bounding_box(&state.cloud);
        for a in 0..3 {
            let pad = self.config.field_margin * (hi[a] - lo[a]).max(state.scene_extent * 1e-2);
            lo[a] -= pad;
            hi[a] += pad;
        }
        let field = HexPlaneField::new(
            self.config.field.clone(),
            lo,
            hi,
            state.cloud.sh_degree,
            self.config.seed ^ FIELD_SEED_SALT,
        )?;
        state.field_opt = Some(FieldOptimizer::new(&field));
        state.field = Some(field);
        Ok(())
    }

    /// Renders frame `i` with the current cloud and, if present, field.
    pub fn render_frame(&self, state: &TrainState, i: usize) -> Result<RenderOutput> {
        render_state(state, &self.dataset.cameras[i], self.dataset.frames[i].time, self.config.tile_size)
    }

    /// Losses and gradients for iteration `k` on the current state. In
    /// stage 2 the field must exist (see [`Trainer::ensure_field`]).
    pub fn evaluate(&self, state: &TrainState, k: u64) -> Result<Evaluation> {
        let stage = self.stage_of(k);
        let n = self.dataset.len();
        let i = self.rng(k).random_range(0..n);
        let frame = &self.dataset.frames[i];
        let main = self.render_frame(state, i)?;
        let w = &self.config.weights;

        let mut neighbor = None;
        let mut thf_out = None;
        if stage == Stage::Deformed && w.lambda_thf > 0.0 {
            if let Some(thf) = &self.thf {
                let fr = &self.dataset.frames;
                if i == 0 {
                    // the first frame is its own predecessor
                    let mut out = thf.loss(&ThfInputs {
                        rendered_current: &main.image,
                        rendered_previous: &main.image,
                        gt_current: &fr[0].image,
                        gt_previous: &fr[0].image,
                        mask_current: Some(&fr[0].mask),
                        mask_previous: Some(&fr[0].mask),
                        pair: FramePair { index: 0 },
                        gt_flow: Some(&self.gt_flows[0]),
                    })?;
                    let prev = std::mem::replace(&mut out.grad_previous, Image::new(0, 0, 3));
                    for (g, p) in out.grad_current.data.iter_mut().zip(&prev.data) {
                        *g += p;
                    }
                    out.grad_previous = Image::new(prev.width, prev.height, prev.channels);
                    thf_out = Some(out);
                } else {
                    let other = self.render_frame(state, i - 1)?;
                    let out = thf.loss(&ThfInputs {
                        rendered_current: &main.image,
                        rendered_previous: &other.image,
                        gt_current: &fr[i].image,
                        gt_previous: &fr[i - 1].image,
                        mask_current: Some(&fr[i].mask),
                        mask_previous: Some(&fr[i - 1].mask),
                        pair: FramePair { index: i },
                        gt_flow: Some(&self.gt_flows[i]),
                    })?;
                    thf_out = Some(out);
                    neighbor = Some(other);
                }
            }
        }

        let targets = FrameTargets {
            image: &frame.image,
            depth: frame.depth.as_ref(),
            mask: Some(&frame.mask),
            shf: Some(&self.shf[i]),
        };
        let rendered = RenderedMaps {
            image: &main.image,
            depth: &main.depth,
            alpha: &main.alpha,
        };
        let terms = ActiveTerms {
            depth: self.dataset.has_depth() && w.lambda_d > 0.0,
            shf: w.lambda_shf > 0.0,
            tv: if stage == Stage::Deformed { state.field.as_ref() } else { None },
            thf: thf_out.as_ref(),
        };
        let (values, total, grads) = total_loss(&targets, &rendered, &terms, w, &self.depth_cfg)?;
        let grads = backpropagate(&grads, &main.saved, neighbor.as_ref().map(|o| &o.saved))?;
        Ok(Evaluation {
            report: LossReport {
                iteration: k + 1,
                stage,
                frame: i,
                l1: values.l1,
                depth: values.depth,
                tv: values.tv,
                shf: values.shf,
                thf: values.thf,
                total,
            },
            grads,
            width: main.image.width,
            height: main.image.height,
        })
    }

    /// One full iteration: evaluate, update, densify.
    pub fn step(&self, state: &mut TrainState) -> Result<LossReport> {
        let k = state.iteration;
        if self.stage_of(k) == Stage::Deformed {
            self.ensure_field(state)?;
        }
        let eval = self.evaluate(state, k)?;
        let cfg = &self.config;
        let densify = k < cfg.densify_until();
        if densify {
            state.stats.record(&eval.grads.screen, &eval.grads.visible, eval.width, eval.height);
        }

        let pos_lr = cfg.lr.position_at(k, cfg.total_iters()) * state.scene_extent;
        let lr = cfg.lr;
        let skipped = state.cloud_opt.step(&mut state.cloud, &eval.grads.cloud, |g| match g {
            CloudGroup::Positions => pos_lr,
            CloudGroup::Rotations => lr.rotation,
            CloudGroup::LogScales => lr.scale,
            CloudGroup::Opacity => lr.opacity,
            CloudGroup::Sh => lr.sh,
        });
        for g in skipped {
            log::warn!("iteration {}: non-finite gradient in {}, update skipped", k + 1, g.name());
        }
        if let (Some(field), Some(opt), Some(fg)) = (&mut state.field, &mut state.field_opt, &eval.grads.field) {
            let hp = &cfg.adam;
            if fg.planes.len() == field.plane_params.len()
                && adam_step(&mut field.plane_params, &fg.planes, &mut opt.planes, lr.planes, hp)
                    == StepOutcome::SkippedNonFinite
            {
                log::warn!("iteration {}: non-finite gradient in field planes, update skipped", k + 1);
            }
            if fg.mlp.len() == field.mlp_params.len()
                && adam_step(&mut field.mlp_params, &fg.mlp, &mut opt.mlp, lr.mlp, hp) == StepOutcome::SkippedNonFinite
            {
                log::warn!("iteration {}: non-finite gradient in field mlp, update skipped", k + 1);
            }
        }

        if densify && (k + 1) % cfg.densify_interval == 0 {
            let dcfg = DensifyConfig {
                grad_threshold: cfg.densify_grad_threshold,
                opacity_prune_threshold: cfg.opacity_prune_threshold,
                split_scale: cfg.scale_split_threshold * state.scene_extent,
                max_gaussians: cfg.max_gaussians,
            };
            let mut rng = self.rng(k);
            rng.set_word_pos(1 << 20);
            let out = densify_and_prune(&mut state.cloud, &mut state.stats, &mut state.cloud_opt, &dcfg, &mut rng);
            log::debug!(
                "iteration {}: cloned {}, split {}, pruned {}, {} gaussians",
                k + 1,
                out.cloned,
                out.split,
                out.pruned,
                state.cloud.count()
            );
        }
        state.iteration += 1;
        Ok(eval.report)
    }

    /// Per-frame PSNR of the current state against the dataset.
    pub fn frame_psnr(&self, state: &TrainState) -> Result<Vec<f64>> {
        (0..self.dataset.len())
            .map(|i| psnr(&self.render_frame(state, i)?.image.map(|v| v.clamp(0.0, 1.0)), &self.dataset.frames[i].image))
            .collect()
    }
}

/// Renders a trained state at `time`; the field, if any, is applied.
pub fn render_state(state: &TrainState, camera: &Camera, time: f64, tile_size: usize) -> Result<RenderOutput> {
    let deformer = state.field.as_ref().map(|field| TimeDeformer { field, time });
    let settings = RenderSettings {
        tile_size,
        ..RenderSettings::default()
    };
    render(&state.cloud, camera, deformer, settings)
}

/// Rejects a dataset whose frames differ in size from the trained state.
pub fn ensure_image_size(state: &TrainState, dataset: &Dataset) -> Result<()> {
    let (w, h) = dataset.dims();
    if state.image_size != [w, h] {
        return Err(Error::Data(format!(
            "dataset frames are {w}x{h} but the checkpoint was trained on {}x{}",
            state.image_size[0], state.image_size[1]
        )));
    }
    Ok(())
}

/// Optional hooks for [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Continue from this checkpoint; its config must hash equal.
    pub resume: Option<Checkpoint>,
    /// Start from this cloud instead of depth back-projection.
    pub initial_cloud: Option<GaussianCloud>,
    /// Where periodic and final checkpoints are written.
    pub checkpoint_path: Option<PathBuf>,
    /// Stop once this many iterations have completed.
    pub stop_after: Option<u64>,
    /// Checked between iterations; a set flag ends training early with a
    /// checkpoint.
    pub cancel: Option<&'a AtomicBool>,
    pub on_report: Option<&'a mut dyn FnMut(&LossReport)>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<LossReport>,
    /// Mean PSNR over all frames at the end of training.
    pub final_psnr: f64,
    pub interrupted: bool,
}

fn mean_finite(values: &[f64]) -> f64 {
    values.iter().map(|v| v.min(100.0)).sum::<f64>() / values.len() as f64
}

/// Runs (or resumes) two-stage training.
pub fn train(dataset: &Dataset, config: &TrainConfig, mut options: TrainOptions) -> Result<TrainOutcome> {
    let trainer = Trainer::new(dataset, config)?;
    let mut state = match options.resume.take() {
        Some(ck) => {
            ck.ensure_config(config)?;
            ensure_image_size(&ck.state, dataset)?;
            ck.state
        }
        None => match options.initial_cloud.take() {
            Some(cloud) => {
                cloud.validate()?;
                if cloud.sh_degree != config.sh_degree {
                    return Err(Error::Config(format!(
                        "initial cloud has sh degree {}, config asks for {}",
                        cloud.sh_degree, config.sh_degree
                    )));
                }
                let (w, h) = dataset.dims();
                TrainState::new(cloud, config, [w, h])
            }
            None => trainer.initial_state()?,
        },
    };
    let end = options.stop_after.unwrap_or(u64::MAX).min(config.total_iters());
    let mut writer = checkpoint::BackgroundWriter::default();
    let mut reports = Vec::new();
    let mut interrupted = false;
    while state.iteration < end {
        if options.cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            interrupted = true;
            break;
        }
        let report = trainer.step(&mut state)?;
        if let Some(cb) = options.on_report.as_mut() {
            cb(&report);
        }
        reports.push(report);
        if let Some(path) = &options.checkpoint_path {
            if config.checkpoint_interval > 0 && state.iteration % config.checkpoint_interval == 0 {
                writer.submit(path.clone(), config, &state)?;
            }
        }
    }
    writer.wait()?;
    if let Some(path) = &options.checkpoint_path {
        checkpoint::save(path, config, &state)?;
    }
    let final_psnr = mean_finite(&trainer.frame_psnr(&state)?);
    Ok(TrainOutcome {
        state,
        reports,
        final_psnr,
        interrupted,
    })
}

/// Renders every training frame of a dataset from a trained state.
pub fn render_dataset_frames(dataset: &Dataset, config: &TrainConfig, state: &TrainState) -> Result<Vec<Image>> {
    ensure_image_size(state, dataset)?;
    let trainer = Trainer::new(dataset, config)?;
    (0..dataset.len())
        .map(|i| Ok(trainer.render_frame(state, i)?.image.map(|v| v.clamp(0.0, 1.0))))
        .collect()
}
