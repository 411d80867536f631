//! Temporal high-frequency emphasis.
//!
//! Flow is predicted on the rendered pair and on the ground-truth pair.
//! The loss is the Charbonnier penalty on their difference plus a soft
//! census distance between the rendered and ground-truth current frames.
//! Both terms are evaluated on pixels unmasked in both frames of the pair.
//!
//! Flow follows the previous → current convention: `u(x, y)` is how far the
//! content at `(x, y)` in the previous frame moves to reach the current one.

pub mod tape;

use crate::error::{Error, Result};
use crate::image::Image;
use serde::{Deserialize, Serialize};
use tape::{Tape, Var};

pub const DEFAULT_LK_LEVELS: usize = 3;
pub const DEFAULT_LK_WINDOW: usize = 7;
pub const DEFAULT_LK_EPSILON: f64 = 1e-3;
pub const DEFAULT_LK_ITERATIONS: usize = 2;
pub const DEFAULT_CHARBONNIER_EPS: f64 = 1e-3;
pub const DEFAULT_CENSUS_WINDOW: usize = 7;
/// Squash constant for intensities in [0, 1].
pub const DEFAULT_CENSUS_TAU: f64 = 0.81 / 255.0;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            u: vec![0.0; n],
            v: vec![0.0; n],
            valid: vec![true; n],
        }
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            u: vec![u; n],
            v: vec![v; n],
            valid: vec![true; n],
        }
    }

    /// Marks pixels whose target `(x + u, y + v)` leaves the image invalid.
    pub fn with_bounds_validity(mut self) -> Self {
        for y in 0..self.height {
            for x in 0..self.width {
                let p = y * self.width + x;
                let tx = x as f64 + self.u[p];
                let ty = y as f64 + self.v[p];
                self.valid[p] = self.u[p].is_finite()
                    && self.v[p].is_finite()
                    && (0.0..=(self.width - 1) as f64).contains(&tx)
                    && (0.0..=(self.height - 1) as f64).contains(&ty);
            }
        }
        self
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u.iter().zip(&self.v).map(|(u, v)| u.hypot(*v)).fold(0.0, f64::max)
    }

    /// Mean `‖self − other‖` over pixels where `region` holds (all pixels if
    /// `None`). Returns 0 for an empty region.
    pub fn mean_endpoint_error(&self, other: &FlowField, region: Option<&[bool]>) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in 0..self.u.len() {
            if region.is_some_and(|r| !r[p]) {
                continue;
            }
            sum += (self.u[p] - other.u[p]).hypot(self.v[p] - other.v[p]);
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LkConfig {
    pub levels: usize,
    pub window: usize,
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for LkConfig {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LK_LEVELS,
            window: DEFAULT_LK_WINDOW,
            epsilon: DEFAULT_LK_EPSILON,
            iterations: DEFAULT_LK_ITERATIONS,
        }
    }
}

impl LkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidParameter("lk levels must be >= 1".into()));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "lk window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if !(self.epsilon > 0.0) || self.iterations == 0 {
            return Err(Error::InvalidParameter("lk epsilon and iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Pushes an image as per-channel leaves and returns its luma node with the
/// leaves.
pub fn gray_on_tape(tape: &mut Tape, img: &Image) -> (Var, Vec<Var>) {
    let (w, h) = (img.width, img.height);
    let leaves: Vec<Var> = (0..img.channels)
        .map(|c| tape.leaf(w, h, img.channel(c).data))
        .collect();
    let gray = match img.channels {
        3 => {
            let r = tape.scale(leaves[0], LUMA[0]);
            let g = tape.scale(leaves[1], LUMA[1]);
            let b = tape.scale(leaves[2], LUMA[2]);
            let rg = tape.add(r, g);
            tape.add(rg, b)
        }
        1 => leaves[0],
        n => {
            let mut acc = tape.scale(leaves[0], 1.0 / n as f64);
            for &l in &leaves[1..] {
                let s = tape.scale(l, 1.0 / n as f64);
                acc = tape.add(acc, s);
            }
            acc
        }
    };
    (gray, leaves)
}

fn gradient_x(tape: &mut Tape, a: Var) -> Var {
    let r = tape.shift(a, 1, 0);
    let l = tape.shift(a, -1, 0);
    let d = tape.sub(r, l);
    tape.scale(d, 0.5)
}

fn gradient_y(tape: &mut Tape, a: Var) -> Var {
    let r = tape.shift(a, 0, 1);
    let l = tape.shift(a, 0, -1);
    let d = tape.sub(r, l);
    tape.scale(d, 0.5)
}

/// Separable 5-tap binomial blur.
fn blur(tape: &mut Tape, a: Var) -> Var {
    const TAPS: [(isize, f64); 5] = [(-2, 1.0), (-1, 4.0), (0, 6.0), (1, 4.0), (2, 1.0)];
    let mut out = a;
    for axis in 0..2 {
        let src = out;
        let mut acc: Option<Var> = None;
        for (o, wgt) in TAPS {
            let s = if axis == 0 { tape.shift(src, o, 0) } else { tape.shift(src, 0, o) };
            let s = tape.scale(s, wgt / 16.0);
            acc = Some(match acc {
                None => s,
                Some(p) => tape.add(p, s),
            });
        }
        out = acc.unwrap();
    }
    out
}

/// Pyramidal Lucas–Kanade on the tape: flow that carries `a` onto `b`,
/// i.e. `b(x + f(x)) ≈ a(x)`.
pub fn lk_on_tape(tape: &mut Tape, a: Var, b: Var, cfg: &LkConfig) -> (Var, Var) {
    let radius = cfg.window / 2;
    let mut pyr_a = vec![a];
    let mut pyr_b = vec![b];
    for _ in 1..cfg.levels {
        let (la, lb) = (*pyr_a.last().unwrap(), *pyr_b.last().unwrap());
        let (w, h) = tape.dims(la);
        if w < 2 || h < 2 {
            break;
        }
        let (ba, bb) = (blur(tape, la), blur(tape, lb));
        pyr_a.push(tape.downsample(ba));
        pyr_b.push(tape.downsample(bb));
    }
    let mut flow: Option<(Var, Var)> = None;
    for level in (0..pyr_a.len()).rev() {
        let (la, lb) = (pyr_a[level], pyr_b[level]);
        let (w, h) = tape.dims(la);
        let (mut u, mut v) = match flow {
            None => (tape.constant(w, h, 0.0), tape.constant(w, h, 0.0)),
            Some((cu, cv)) => {
                let uu = tape.upsample(cu, w, h);
                let vv = tape.upsample(cv, w, h);
                (tape.scale(uu, 2.0), tape.scale(vv, 2.0))
            }
        };
        let ix = gradient_x(tape, la);
        let iy = gradient_y(tape, la);
        let ixx = tape.square(ix);
        let iyy = tape.square(iy);
        let ixy = tape.mul(ix, iy);
        let sxx = tape.box_sum(ixx, radius);
        let sxx = tape.offset(sxx, cfg.epsilon);
        let syy = tape.box_sum(iyy, radius);
        let syy = tape.offset(syy, cfg.epsilon);
        let sxy = tape.box_sum(ixy, radius);
        let d1 = tape.mul(sxx, syy);
        let d2 = tape.square(sxy);
        let det = tape.sub(d1, d2);
        for _ in 0..cfg.iterations {
            let bx = tape.windowed_residual(ix, la, lb, u, v, radius);
            let by = tape.windowed_residual(iy, la, lb, u, v, radius);
            // δ = −S⁻¹ b
            let t1 = tape.mul(syy, bx);
            let t2 = tape.mul(sxy, by);
            let nu = tape.sub(t2, t1);
            let du = tape.div(nu, det);
            let t3 = tape.mul(sxx, by);
            let t4 = tape.mul(sxy, bx);
            let nv = tape.sub(t4, t3);
            let dv = tape.div(nv, det);
            u = tape.add(u, du);
            v = tape.add(v, dv);
        }
        flow = Some((u, v));
    }
    flow.expect("at least one level")
}

/// Flow from `frame_a` to `frame_b` (previous → current convention when
/// `frame_a` is the earlier frame).
pub fn lk_flow(frame_a: &Image, frame_b: &Image, levels: usize, window: usize) -> Result<FlowField> {
    lk_flow_with(
        frame_a,
        frame_b,
        &LkConfig {
            levels,
            window,
            ..LkConfig::default()
        },
    )
}

pub fn lk_flow_with(frame_a: &Image, frame_b: &Image, cfg: &LkConfig) -> Result<FlowField> {
    cfg.validate()?;
    frame_a.ensure_same_shape(frame_b, "lk_flow frames")?;
    let mut tape = Tape::new();
    let (a, _) = gray_on_tape(&mut tape, frame_a);
    let (b, _) = gray_on_tape(&mut tape, frame_b);
    let (u, v) = lk_on_tape(&mut tape, a, b, cfg);
    Ok(FlowField {
        width: frame_a.width,
        height: frame_a.height,
        u: tape.value(u).to_vec(),
        v: tape.value(v).to_vec(),
        valid: vec![true; frame_a.pixel_count()],
    }
    .with_bounds_validity())
}

/// Identifies the frame pair `(index − 1, index)` being evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FramePair {
    pub index: usize,
}

/// Flow estimator between two luma frames already on a tape.
pub trait FlowPredictor: Send + Sync {
    fn name(&self) -> &str;

    /// Whether gradients propagate from the returned flow to the inputs.
    fn differentiable(&self) -> bool;

    /// Flow from `previous` to `current`.
    fn predict(&self, tape: &mut Tape, current: Var, previous: Var, pair: FramePair) -> Result<(Var, Var)>;
}

#[derive(Clone, Debug, Default)]
pub struct LkPredictor {
    pub config: LkConfig,
}

impl FlowPredictor for LkPredictor {
    fn name(&self) -> &str {
        "lucas-kanade"
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn predict(&self, tape: &mut Tape, current: Var, previous: Var, _pair: FramePair) -> Result<(Var, Var)> {
        self.config.validate()?;
        Ok(lk_on_tape(tape, previous, current, &self.config))
    }
}

/// Returns known flow for each pair; frame 0 gets zero flow.
#[derive(Clone, Debug)]
pub struct GroundTruthFlowPredictor {
    /// `flows[i]` is the flow from frame `i − 1` to frame `i`.
    pub flows: Vec<FlowField>,
}

impl FlowPredictor for GroundTruthFlowPredictor {
    fn name(&self) -> &str {
        "ground-truth"
    }

    fn differentiable(&self) -> bool {
        false
    }

    fn predict(&self, tape: &mut Tape, current: Var, _previous: Var, pair: FramePair) -> Result<(Var, Var)> {
        let (w, h) = tape.dims(current);
        if pair.index == 0 {
            return Ok((tape.constant(w, h, 0.0), tape.constant(w, h, 0.0)));
        }
        let f = self
            .flows
            .get(pair.index)
            .ok_or_else(|| Error::Data(format!("no ground-truth flow for frame {}", pair.index)))?;
        if (f.width, f.height) != (w, h) {
            return Err(Error::Data(format!(
                "ground-truth flow is {}x{}, frames are {w}x{h}",
                f.width, f.height
            )));
        }
        Ok((tape.leaf(w, h, f.u.clone()), tape.leaf(w, h, f.v.clone())))
    }
}

/// Mean of `sqrt(‖r‖² + ε²) − ε` over valid pixels of a residual field.
pub fn charbonnier(residual: &FlowField, eps: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..residual.u.len() {
        if residual.valid[p] {
            let r2 = residual.u[p] * residual.u[p] + residual.v[p] * residual.v[p];
            sum += (r2 + eps * eps).sqrt() - eps;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn charbonnier_on_tape(tape: &mut Tape, ru: Var, rv: Var, valid: Var, count: f64, eps: f64) -> Var {
    let a = tape.square(ru);
    let b = tape.square(rv);
    let s = tape.add(a, b);
    let s = tape.offset(s, eps * eps);
    let s = tape.sqrt(s);
    let s = tape.offset(s, -eps);
    let s = tape.mul(s, valid);
    let s = tape.sum(s);
    tape.scale(s, 1.0 / count)
}

fn masked_mean_on_tape(tape: &mut Tape, x: Var, valid: Var, count: f64) -> Var {
    let s = tape.mul(x, valid);
    let s = tape.sum(s);
    tape.scale(s, 1.0 / count)
}

/// Mean soft census distance between the luma of two images over all pixels.
pub fn census_loss(image_a: &Image, image_b: &Image, window: usize) -> Result<f64> {
    Ok(census_loss_masked(image_a, image_b, window, DEFAULT_CENSUS_TAU, None)?.0)
}

/// Census loss restricted to `valid` pixels, with gradients for both images.
pub fn census_loss_masked(
    image_a: &Image,
    image_b: &Image,
    window: usize,
    tau: f64,
    valid: Option<&[bool]>,
) -> Result<(f64, Image, Image)> {
    image_a.ensure_same_shape(image_b, "census images")?;
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidParameter(format!("census window must be odd and >= 3, got {window}")));
    }
    let (w, h) = (image_a.width, image_a.height);
    let mask: Vec<f64> = match valid {
        Some(v) => v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        None => vec![1.0; w * h],
    };
    let count = mask.iter().sum::<f64>();
    let zeros = || Image::new(w, h, image_a.channels);
    if count == 0.0 {
        return Ok((0.0, zeros(), zeros()));
    }
    let mut tape = Tape::new();
    let (ga, la) = gray_on_tape(&mut tape, image_a);
    let (gb, lb) = gray_on_tape(&mut tape, image_b);
    let c = tape.census(ga, gb, window / 2, tau);
    let m = tape.leaf(w, h, mask);
    let loss = masked_mean_on_tape(&mut tape, c, m, count);
    let grads = tape.backward(loss);
    Ok((
        tape.value(loss)[0],
        leaves_to_image(&grads, &la, w, h),
        leaves_to_image(&grads, &lb, w, h),
    ))
}

fn leaves_to_image(grads: &tape::Gradients, leaves: &[Var], w: usize, h: usize) -> Image {
    let mut img = Image::new(w, h, leaves.len());
    for (c, &l) in leaves.iter().enumerate() {
        if let Some(g) = grads.get(l) {
            for (p, &gv) in g.iter().enumerate() {
                img.data[p * leaves.len() + c] = gv;
            }
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThfConfig {
    pub charbonnier_eps: f64,
    pub census_window: usize,
    pub census_tau: f64,
}

impl Default for ThfConfig {
    fn default() -> Self {
        Self {
            charbonnier_eps: DEFAULT_CHARBONNIER_EPS,
            census_window: DEFAULT_CENSUS_WINDOW,
            census_tau: DEFAULT_CENSUS_TAU,
        }
    }
}

/// One temporal pair. Masks are single-channel with 1 marking excluded
/// (tool) pixels.
#[derive(Clone, Copy, Debug)]
pub struct ThfInputs<'a> {
    pub rendered_current: &'a Image,
    pub rendered_previous: &'a Image,
    pub gt_current: &'a Image,
    pub gt_previous: &'a Image,
    pub mask_current: Option<&'a Image>,
    pub mask_previous: Option<&'a Image>,
    pub pair: FramePair,
    /// Precomputed ground-truth branch flow, if cached by the caller.
    pub gt_flow: Option<&'a FlowField>,
}

#[derive(Clone, Debug)]
pub struct ThfOutput {
    pub loss: f64,
    pub charbonnier: f64,
    pub census: f64,
    pub rendered_flow: FlowField,
    pub gt_flow: FlowField,
    pub grad_current: Image,
    pub grad_previous: Image,
}

/// Loss evaluator holding the two flow predictors.
pub struct Thf {
    pub config: ThfConfig,
    rendered: Box<dyn FlowPredictor>,
    ground_truth: Box<dyn FlowPredictor>,
}

impl std::fmt::Debug for Thf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Thf")
            .field("config", &self.config)
            .field("rendered", &self.rendered.name())
            .field("ground_truth", &self.ground_truth.name())
            .finish()
    }
}

impl Thf {
    /// Fails with a configuration error if the rendered-branch predictor
    /// cannot carry gradients.
    pub fn new(
        config: ThfConfig,
        rendered: Box<dyn FlowPredictor>,
        ground_truth: Box<dyn FlowPredictor>,
    ) -> Result<Self> {
        if !rendered.differentiable() {
            return Err(Error::Config(format!(
                "flow predictor '{}' is not differentiable and cannot be used on rendered frames",
                rendered.name()
            )));
        }
        if !(config.charbonnier_eps > 0.0) || !(config.census_tau > 0.0) {
            return Err(Error::Config("charbonnier eps and census tau must be positive".into()));
        }
        if config.census_window < 3 || config.census_window % 2 == 0 {
            return Err(Error::Config(format!(
                "census window must be odd and >= 3, got {}",
                config.census_window
            )));
        }
        Ok(Self {
            config,
            rendered,
            ground_truth,
        })
    }

    /// LK on both branches.
    pub fn lucas_kanade(config: ThfConfig, lk: LkConfig) -> Result<Self> {
        lk.validate()?;
        Self::new(
            config,
            Box::new(LkPredictor { config: lk }),
            Box::new(LkPredictor { config: lk }),
        )
    }

    pub fn rendered_predictor(&self) -> &dyn FlowPredictor {
        self.rendered.as_ref()
    }

    pub fn ground_truth_predictor(&self) -> &dyn FlowPredictor {
        self.ground_truth.as_ref()
    }

    /// Flow of the ground-truth pair, detached.
    pub fn gt_flow(&self, gt_current: &Image, gt_previous: &Image, pair: FramePair) -> Result<FlowField> {
        gt_current.ensure_same_shape(gt_previous, "ground-truth pair")?;
        let mut tape = Tape::new();
        let (c, _) = gray_on_tape(&mut tape, gt_current);
        let (p, _) = gray_on_tape(&mut tape, gt_previous);
        let (u, v) = self.ground_truth.predict(&mut tape, c, p, pair)?;
        Ok(FlowField {
            width: gt_current.width,
            height: gt_current.height,
            u: tape.value(u).to_vec(),
            v: tape.value(v).to_vec(),
            valid: vec![true; gt_current.pixel_count()],
        })
    }

    pub fn loss(&self, inputs: &ThfInputs) -> Result<ThfOutput> {
        let rc = inputs.rendered_current;
        for (img, what) in [
            (inputs.rendered_previous, "rendered previous frame"),
            (inputs.gt_current, "ground-truth frame"),
            (inputs.gt_previous, "ground-truth previous frame"),
        ] {
            rc.ensure_same_shape(img, what)?;
        }
        let (w, h) = (rc.width, rc.height);
        let mut valid = vec![true; w * h];
        for m in [inputs.mask_current, inputs.mask_previous].into_iter().flatten() {
            if (m.width, m.height) != (w, h) {
                return Err(Error::Contract(format!(
                    "mask is {}x{}, frames are {w}x{h}",
                    m.width, m.height
                )));
            }
            for (p, v) in valid.iter_mut().enumerate() {
                if m.data[p * m.channels] >= 0.5 {
                    *v = false;
                }
            }
        }
        let gt_flow = match inputs.gt_flow {
            Some(f) => f.clone(),
            None => self.gt_flow(inputs.gt_current, inputs.gt_previous, inputs.pair)?,
        };
        let count = valid.iter().filter(|&&v| v).count() as f64;

        let mut tape = Tape::new();
        let (cur, cur_leaves) = gray_on_tape(&mut tape, rc);
        let (prev, prev_leaves) = gray_on_tape(&mut tape, inputs.rendered_previous);
        let (fu, fv) = self.rendered.predict(&mut tape, cur, prev, inputs.pair)?;
        let rendered_flow = FlowField {
            width: w,
            height: h,
            u: tape.value(fu).to_vec(),
            v: tape.value(fv).to_vec(),
            valid: valid.clone(),
        };
        if count == 0.0 {
            return Ok(ThfOutput {
                loss: 0.0,
                charbonnier: 0.0,
                census: 0.0,
                rendered_flow,
                gt_flow,
                grad_current: Image::new(w, h, rc.channels),
                grad_previous: Image::new(w, h, rc.channels),
            });
        }
        let gu = tape.leaf(w, h, gt_flow.u.clone());
        let gv = tape.leaf(w, h, gt_flow.v.clone());
        let mask = tape.leaf(w, h, valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
        let ru = tape.sub(fu, gu);
        let rv = tape.sub(fv, gv);
        let l_char = charbonnier_on_tape(&mut tape, ru, rv, mask, count, self.config.charbonnier_eps);

        let (gt_gray, _) = gray_on_tape(&mut tape, inputs.gt_current);
        let cen = tape.census(cur, gt_gray, self.config.census_window / 2, self.config.census_tau);
        let l_cen = masked_mean_on_tape(&mut tape, cen, mask, count);
        let total = tape.add(l_char, l_cen);
        let grads = tape.backward(total);
        let (charbonnier, census, loss) = (tape.value(l_char)[0], tape.value(l_cen)[0], tape.value(total)[0]);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "thf loss",
                index: inputs.pair.index,
            });
        }
        Ok(ThfOutput {
            loss,
            charbonnier,
            census,
            rendered_flow,
            gt_flow,
            grad_current: leaves_to_image(&grads, &cur_leaves, w, h),
            grad_previous: leaves_to_image(&grads, &prev_leaves, w, h),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize, shift: f64) -> Image {
        Image::from_fn(w, h, 3, |x, y, c| {
            let xf = x as f64 - shift;
            let yf = y as f64;
            0.5 + 0.2 * (0.4 * xf + 0.3 * c as f64).sin() * (0.5 * yf).cos() + 0.1 * (0.31 * xf + 0.23 * yf).sin()
        })
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = texture(20, 18, 0.0);
        let f = lk_flow(&a, &a, 3, 7).unwrap();
        assert!(f.max_magnitude() <= 1e-12);
    }

    #[test]
    fn constant_frames_give_zero_flow() {
        let a = Image::filled(16, 16, 3, 0.3);
        let b = Image::filled(16, 16, 3, 0.6);
        let f = lk_flow(&a, &b, 3, 7).unwrap();
        assert!(f.max_magnitude() <= 1e-12);
    }

    #[test]
    fn recovers_subpixel_translation() {
        let a = texture(48, 48, 0.0);
        let b = texture(48, 48, 0.6);
        let f = lk_flow(&a, &b, 3, 7).unwrap();
        let region: Vec<bool> = (0..48 * 48)
            .map(|p| {
                let (x, y) = (p % 48, p / 48);
                (8..40).contains(&x) && (8..40).contains(&y)
            })
            .collect();
        let epe = f.mean_endpoint_error(&FlowField::constant(48, 48, 0.6, 0.0), Some(&region));
        assert!(epe < 0.05, "epe {epe}");
    }

    #[test]
    fn invalid_window_is_rejected() {
        let a = texture(8, 8, 0.0);
        assert!(lk_flow(&a, &a, 1, 4).is_err());
        assert!(lk_flow(&a, &a, 0, 7).is_err());
        assert!(census_loss(&a, &a, 2).is_err());
    }

    #[test]
    fn charbonnier_zero_residual_is_zero() {
        let r = FlowField::zeros(4, 4);
        assert_eq!(charbonnier(&r, 1e-3), 0.0);
        let r = FlowField::constant(4, 4, 3.0, 4.0);
        let expect = (25.0f64 + 1e-6).sqrt() - 1e-3;
        assert!((charbonnier(&r, 1e-3) - expect).abs() < 1e-12);
    }

    #[test]
    fn census_is_symmetric_and_brightness_invariant() {
        let a = texture(16, 16, 0.0);
        let b = texture(16, 16, 1.3);
        let ab = census_loss(&a, &b, 7).unwrap();
        let ba = census_loss(&b, &a, 7).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let brighter = a.map(|v| v + 0.1);
        assert!(census_loss(&a, &brighter, 7).unwrap() <= 1e-3);
        assert_eq!(census_loss(&a, &a, 7).unwrap(), 0.0);
    }

    #[test]
    fn non_differentiable_rendered_predictor_is_a_config_error() {
        let gt = Box::new(GroundTruthFlowPredictor { flows: vec![] });
        let err = Thf::new(ThfConfig::default(), gt.clone(), gt).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn equal_rendered_and_gt_pairs_give_zero_loss() {
        let thf = Thf::lucas_kanade(ThfConfig::default(), LkConfig::default()).unwrap();
        let a = texture(16, 16, 0.0);
        let b = texture(16, 16, 1.0);
        let out = thf
            .loss(&ThfInputs {
                rendered_current: &b,
                rendered_previous: &a,
                gt_current: &b,
                gt_previous: &a,
                mask_current: None,
                mask_previous: None,
                pair: FramePair { index: 1 },
                gt_flow: None,
            })
            .unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn fully_masked_pair_gives_zero_loss() {
        let thf = Thf::lucas_kanade(ThfConfig::default(), LkConfig::default()).unwrap();
        let a = texture(8, 8, 0.0);
        let b = texture(8, 8, 2.0);
        let m = Image::filled(8, 8, 1, 1.0);
        let out = thf
            .loss(&ThfInputs {
                rendered_current: &a,
                rendered_previous: &b,
                gt_current: &b,
                gt_previous: &a,
                mask_current: Some(&m),
                mask_previous: None,
                pair: FramePair { index: 1 },
                gt_flow: None,
            })
            .unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_current.data.iter().all(|&g| g == 0.0));
    }
}
