//! Time-conditioned deformation of a Gaussian cloud.
//!
//! A multi-resolution HexPlane (three spatial planes XY/XZ/YZ and three
//! space-time planes XT/YT/ZT per level) is queried bilinearly at the
//! normalized Gaussian mean and time. The six lookups of a level are fused by
//! elementwise product, levels are concatenated, and one MLP decodes the
//! result into additive parameter deltas.
//!
//! All plane features live in one flat buffer and all MLP weights in another,
//! so the optimizer and checkpoint code see exactly two parameter groups.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{sh_basis_count, GaussianCloud};

const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub time_resolution: usize,
    /// Spatial resolution multiplier between consecutive levels.
    pub upsample: usize,
    pub feature_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Half-width of the uniform init range for spatial planes.
    pub spatial_init_range: f64,
    /// Constant init value for space-time planes.
    pub temporal_init_value: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            base_resolution: 32,
            time_resolution: 16,
            upsample: 2,
            feature_dim: 16,
            hidden_width: 64,
            hidden_layers: 2,
            spatial_init_range: 1e-2,
            temporal_init_value: 1.0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.feature_dim == 0 || self.hidden_width == 0 {
            return Err(Error::Config("field levels, feature_dim and hidden_width must be positive".into()));
        }
        if self.base_resolution < 2 || self.time_resolution < 2 {
            return Err(Error::Config("plane resolutions must be at least 2".into()));
        }
        if self.levels > 1 && self.upsample < 2 {
            return Err(Error::Config("upsample must be at least 2 for multi-level fields".into()));
        }
        Ok(())
    }

    pub fn spatial_resolution(&self, level: usize) -> usize {
        self.base_resolution * self.upsample.pow(level as u32)
    }
}

/// The six plane kinds, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaneKind {
    XY,
    XZ,
    YZ,
    XT,
    YT,
    ZT,
}

impl PlaneKind {
    pub const ALL: [PlaneKind; 6] = [
        PlaneKind::XY,
        PlaneKind::XZ,
        PlaneKind::YZ,
        PlaneKind::XT,
        PlaneKind::YT,
        PlaneKind::ZT,
    ];

    /// Indices into `(x, y, z, t)` of the plane's two axes.
    pub fn axes(self) -> (usize, usize) {
        match self {
            PlaneKind::XY => (0, 1),
            PlaneKind::XZ => (0, 2),
            PlaneKind::YZ => (1, 2),
            PlaneKind::XT => (0, 3),
            PlaneKind::YT => (1, 3),
            PlaneKind::ZT => (2, 3),
        }
    }

    pub fn is_temporal(self) -> bool {
        self.axes().1 == 3
    }
}

/// Location of one plane inside the flat feature buffer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneLayout {
    pub offset: usize,
    pub n1: usize,
    pub n2: usize,
    pub h: usize,
}

impl PlaneLayout {
    pub fn len(&self) -> usize {
        self.n1 * self.n2 * self.h
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        self.offset + (i * self.n2 + j) * self.h
    }
}

/// Borrowed view of one feature plane: `h` features at each of `n1 x n2` nodes.
#[derive(Clone, Copy, Debug)]
pub struct PlaneRef<'a> {
    pub n1: usize,
    pub n2: usize,
    pub h: usize,
    pub data: &'a [f64],
}

/// Bilinear cell lookup: corner node indices and weights for `(u, v)` in [0,1]².
#[derive(Clone, Copy, Debug)]
struct Cell {
    i0: usize,
    j0: usize,
    fu: f64,
    fv: f64,
}

impl Cell {
    fn locate(n1: usize, n2: usize, u: f64, v: f64) -> Self {
        let a = u.clamp(0.0, 1.0) * (n1 - 1) as f64;
        let b = v.clamp(0.0, 1.0) * (n2 - 1) as f64;
        let i0 = (a.floor() as usize).min(n1 - 2);
        let j0 = (b.floor() as usize).min(n2 - 2);
        Cell {
            i0,
            j0,
            fu: a - i0 as f64,
            fv: b - j0 as f64,
        }
    }

    fn corners(&self) -> [((usize, usize), f64); 4] {
        let (fu, fv) = (self.fu, self.fv);
        [
            ((self.i0, self.j0), (1.0 - fu) * (1.0 - fv)),
            ((self.i0 + 1, self.j0), fu * (1.0 - fv)),
            ((self.i0, self.j0 + 1), (1.0 - fu) * fv),
            ((self.i0 + 1, self.j0 + 1), fu * fv),
        ]
    }
}

impl<'a> PlaneRef<'a> {
    pub fn feature(&self, i: usize, j: usize) -> &'a [f64] {
        let o = (i * self.n2 + j) * self.h;
        &self.data[o..o + self.h]
    }

    /// Bilinear interpolation; `u` indexes the first axis, `v` the second.
    /// Inputs are clamped to [0, 1].
    pub fn interpolate(&self, u: f64, v: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.h];
        self.interpolate_into(u, v, &mut out);
        out
    }

    fn interpolate_into(&self, u: f64, v: f64, out: &mut [f64]) {
        let cell = Cell::locate(self.n1, self.n2, u, v);
        out.iter_mut().for_each(|o| *o = 0.0);
        for ((i, j), w) in cell.corners() {
            for (o, f) in out.iter_mut().zip(self.feature(i, j)) {
                *o += w * f;
            }
        }
    }
}

/// Free-function form of [`PlaneRef::interpolate`].
pub fn interpolate_plane(plane: PlaneRef<'_>, u: f64, v: f64) -> Vec<f64> {
    plane.interpolate(u, v)
}

/// Dense layer location in the flat MLP buffer: `weights[out][in]` then `bias[out]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayout {
    pub offset: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl DenseLayout {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let b = self.offset + self.inputs * self.outputs;
        b..b + self.outputs
    }

    fn len(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Widths of the output heads, in output order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadLayout {
    pub sh_stride: usize,
}

impl HeadLayout {
    pub const POSITION: usize = 0;
    pub const LOG_SCALE: usize = 3;
    pub const ROTATION: usize = 6;
    pub const SH: usize = 10;

    pub fn opacity(&self) -> usize {
        Self::SH + self.sh_stride
    }

    pub fn width(&self) -> usize {
        Self::SH + self.sh_stride + 1
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// HexPlane feature field plus decoder MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HexPlaneField {
    pub config: FieldConfig,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub sh_degree: usize,
    /// `levels * 6` planes, level-major, in [`PlaneKind::ALL`] order.
    pub planes: Vec<PlaneLayout>,
    pub layers: Vec<DenseLayout>,
    pub plane_params: Vec<f64>,
    pub mlp_params: Vec<f64>,
}

/// Gradient buffers matching [`HexPlaneField`]'s two parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradients {
    pub planes: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl FieldGradients {
    pub fn add_scaled(&mut self, other: &FieldGradients, factor: f64) {
        for (a, b) in self.planes.iter_mut().zip(&other.planes) {
            *a += b * factor;
        }
        for (a, b) in self.mlp.iter_mut().zip(&other.mlp) {
            *a += b * factor;
        }
    }
}

/// Per-Gaussian forward intermediates needed by the backward pass.
struct Forward {
    coords: [f64; 4],
    inside: [bool; 4],
    /// Interpolated plane vectors, `levels * 6 * h`.
    lookups: Vec<f64>,
    /// MLP input followed by each layer's pre-activation.
    pre: Vec<Vec<f64>>,
    /// Activations entering each layer (index 0 is the feature vector).
    acts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl HexPlaneField {
    /// Builds a field over `bounds` with seeded random plane features, a
    /// random trunk, and a zero output head.
    pub fn new(config: FieldConfig, bounds_min: [f64; 3], bounds_max: [f64; 3], sh_degree: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        for a in 0..3 {
            if !(bounds_max[a] > bounds_min[a]) {
                return Err(Error::InvalidParameter(format!("field bounds are empty along axis {a}")));
            }
        }
        let h = config.feature_dim;
        let mut planes = Vec::with_capacity(config.levels * 6);
        let mut offset = 0;
        for level in 0..config.levels {
            let ns = config.spatial_resolution(level);
            for kind in PlaneKind::ALL {
                let n2 = if kind.is_temporal() { config.time_resolution } else { ns };
                let layout = PlaneLayout { offset, n1: ns, n2, h };
                offset += layout.len();
                planes.push(layout);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plane_params = vec![0.0; offset];
        for (idx, layout) in planes.iter().enumerate() {
            let kind = PlaneKind::ALL[idx % 6];
            let slice = &mut plane_params[layout.offset..layout.offset + layout.len()];
            if kind.is_temporal() {
                slice.fill(config.temporal_init_value);
            } else {
                let r = config.spatial_init_range;
                for v in slice.iter_mut() {
                    *v = rng.random_range(-r..=r);
                }
            }
        }

        let head = HeadLayout {
            sh_stride: 3 * sh_basis_count(sh_degree),
        };
        let mut widths = vec![config.levels * h];
        widths.extend(std::iter::repeat_n(config.hidden_width, config.hidden_layers));
        widths.push(head.width());
        let mut layers = Vec::new();
        let mut offset = 0;
        for w in widths.windows(2) {
            let l = DenseLayout {
                offset,
                inputs: w[0],
                outputs: w[1],
            };
            offset += l.len();
            layers.push(l);
        }
        let mut mlp_params = vec![0.0; offset];
        let last = layers.len() - 1;
        for (li, l) in layers.iter().enumerate() {
            if li == last {
                continue;
            }
            let bound = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
            for v in &mut mlp_params[l.weights()] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(Self {
            config,
            bounds_min,
            bounds_max,
            sh_degree,
            planes,
            layers,
            plane_params,
            mlp_params,
        })
    }

    pub fn head(&self) -> HeadLayout {
        HeadLayout {
            sh_stride: 3 * sh_basis_count(self.sh_degree),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.config.levels * self.config.feature_dim
    }

    pub fn zero_gradients(&self) -> FieldGradients {
        FieldGradients {
            planes: vec![0.0; self.plane_params.len()],
            mlp: vec![0.0; self.mlp_params.len()],
        }
    }

    pub fn plane(&self, level: usize, kind: PlaneKind) -> PlaneRef<'_> {
        let idx = level * 6 + PlaneKind::ALL.iter().position(|&k| k == kind).unwrap();
        self.plane_at(idx)
    }

    fn plane_at(&self, idx: usize) -> PlaneRef<'_> {
        let l = self.planes[idx];
        PlaneRef {
            n1: l.n1,
            n2: l.n2,
            h: l.h,
            data: &self.plane_params[l.offset..l.offset + l.len()],
        }
    }

    /// Mutable feature storage of one plane.
    pub fn plane_data_mut(&mut self, level: usize, kind: PlaneKind) -> &mut [f64] {
        let idx = level * 6 + PlaneKind::ALL.iter().position(|&k| k == kind).unwrap();
        let l = self.planes[idx];
        &mut self.plane_params[l.offset..l.offset + l.len()]
    }

    /// Zeroes the output layer, making the field the identity deformation.
    pub fn zero_output_head(&mut self) {
        let l = *self.layers.last().unwrap();
        self.mlp_params[l.offset..l.offset + l.len()].fill(0.0);
    }

    pub fn output_layer(&self) -> DenseLayout {
        *self.layers.last().unwrap()
    }

    pub fn output_weights_mut(&mut self) -> (&mut [f64], DenseLayout) {
        let l = self.output_layer();
        (&mut self.mlp_params[l.offset..l.offset + l.len()], l)
    }

    /// Normalized `(x, y, z, t)` coordinates and whether each was inside [0, 1].
    fn normalize(&self, mean: &[f64; 3], t: f64) -> ([f64; 4], [bool; 4]) {
        let mut c = [0.0; 4];
        let mut inside = [true; 4];
        for a in 0..3 {
            let u = (mean[a] - self.bounds_min[a]) / (self.bounds_max[a] - self.bounds_min[a]);
            inside[a] = (0.0..=1.0).contains(&u);
            c[a] = u.clamp(0.0, 1.0);
        }
        inside[3] = (0.0..=1.0).contains(&t);
        c[3] = t.clamp(0.0, 1.0);
        (c, inside)
    }

    /// Level-concatenated voxel feature at `(mean, t)`.
    pub fn features(&self, mean: &[f64; 3], t: f64) -> Vec<f64> {
        let (c, _) = self.normalize(mean, t);
        let h = self.config.feature_dim;
        let mut out = vec![1.0; self.feature_width()];
        let mut tmp = vec![0.0; h];
        for level in 0..self.config.levels {
            let dst = &mut out[level * h..(level + 1) * h];
            for (p, kind) in PlaneKind::ALL.iter().enumerate() {
                let (a, b) = kind.axes();
                self.plane_at(level * 6 + p).interpolate_into(c[a], c[b], &mut tmp);
                for (d, s) in dst.iter_mut().zip(&tmp) {
                    *d *= s;
                }
            }
        }
        out
    }

    fn forward_one(&self, mean: &[f64; 3], t: f64) -> Forward {
        let (coords, inside) = self.normalize(mean, t);
        let h = self.config.feature_dim;
        let mut lookups = vec![0.0; self.config.levels * 6 * h];
        let mut feat = vec![1.0; self.feature_width()];
        for level in 0..self.config.levels {
            for (p, kind) in PlaneKind::ALL.iter().enumerate() {
                let (a, b) = kind.axes();
                let slot = (level * 6 + p) * h;
                let dst = &mut lookups[slot..slot + h];
                self.plane_at(level * 6 + p).interpolate_into(coords[a], coords[b], dst);
                for (f, s) in feat[level * h..(level + 1) * h].iter_mut().zip(dst.iter()) {
                    *f *= s;
                }
            }
        }
        let mut acts = vec![feat];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let w = &self.mlp_params[l.weights()];
            let b = &self.mlp_params[l.bias()];
            let z: Vec<f64> = (0..l.outputs)
                .map(|o| {
                    let row = &w[o * l.inputs..(o + 1) * l.inputs];
                    b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if li < last {
                acts.push(z.iter().map(|&v| silu(v)).collect());
            }
            pre.push(z);
        }
        let output = pre.last().unwrap().clone();
        Forward {
            coords,
            inside,
            lookups,
            pre,
            acts,
            output,
        }
    }

    /// Raw MLP output (parameter deltas) for one Gaussian mean at time `t`.
    pub fn deltas(&self, mean: &[f64; 3], t: f64) -> Vec<f64> {
        self.forward_one(mean, t).output
    }

    /// Backward of one Gaussian: accumulates MLP gradients into `grad_mlp`,
    /// pushes sparse plane gradients into `plane_grads`, returns `dL/dmean`
    /// through the feature lookup.
    fn backward_one(
        &self,
        fwd: &Forward,
        grad_out: &[f64],
        grad_mlp: &mut [f64],
        plane_grads: &mut Vec<(usize, f64)>,
    ) -> [f64; 3] {
        let mut delta = grad_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let x = &fwd.acts[li];
            let wr = l.weights();
            let br = l.bias();
            for o in 0..l.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad_mlp[br.start + o] += d;
                let row = &mut grad_mlp[wr.start + o * l.inputs..wr.start + (o + 1) * l.inputs];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
            let w = &self.mlp_params[wr];
            let mut dx = vec![0.0; l.inputs];
            for o in 0..l.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (dxi, wi) in dx.iter_mut().zip(&w[o * l.inputs..(o + 1) * l.inputs]) {
                    *dxi += d * wi;
                }
            }
            if li > 0 {
                let z = &fwd.pre[li - 1];
                for (d, zi) in dx.iter_mut().zip(z) {
                    *d *= silu_grad(*zi);
                }
            }
            delta = dx;
        }
        let grad_feat = delta;

        let h = self.config.feature_dim;
        let mut grad_coords = [0.0; 4];
        for level in 0..self.config.levels {
            let gf = &grad_feat[level * h..(level + 1) * h];
            for p in 0..6 {
                // product of the other five lookups
                let mut others = gf.to_vec();
                for q in 0..6 {
                    if q == p {
                        continue;
                    }
                    let slot = (level * 6 + q) * h;
                    for (o, v) in others.iter_mut().zip(&fwd.lookups[slot..slot + h]) {
                        *o *= v;
                    }
                }
                let layout = self.planes[level * 6 + p];
                let (a, b) = PlaneKind::ALL[p].axes();
                let cell = Cell::locate(layout.n1, layout.n2, fwd.coords[a], fwd.coords[b]);
                for ((i, j), w) in cell.corners() {
                    if w == 0.0 {
                        continue;
                    }
                    let base = layout.node(i, j);
                    for (c, g) in others.iter().enumerate() {
                        if *g != 0.0 {
                            plane_grads.push((base + c, w * g));
                        }
                    }
                }
                let plane = self.plane_at(level * 6 + p);
                let f00 = plane.feature(cell.i0, cell.j0);
                let f10 = plane.feature(cell.i0 + 1, cell.j0);
                let f01 = plane.feature(cell.i0, cell.j0 + 1);
                let f11 = plane.feature(cell.i0 + 1, cell.j0 + 1);
                let (fu, fv) = (cell.fu, cell.fv);
                let su = (layout.n1 - 1) as f64;
                let sv = (layout.n2 - 1) as f64;
                for c in 0..h {
                    let du = ((1.0 - fv) * (f10[c] - f00[c]) + fv * (f11[c] - f01[c])) * su;
                    let dv = ((1.0 - fu) * (f01[c] - f00[c]) + fu * (f11[c] - f10[c])) * sv;
                    grad_coords[a] += others[c] * du;
                    grad_coords[b] += others[c] * dv;
                }
            }
        }
        let mut grad_mean = [0.0; 3];
        for a in 0..3 {
            if fwd.inside[a] {
                grad_mean[a] = grad_coords[a] / (self.bounds_max[a] - self.bounds_min[a]);
            }
        }
        grad_mean
    }
}

/// Free-function form of [`HexPlaneField::features`].
pub fn hexplane_features(mean: &[f64; 3], t: f64, field: &HexPlaneField) -> Vec<f64> {
    field.features(mean, t)
}

/// Everything the backward pass of a deformation needs.
#[derive(Clone, Debug)]
pub struct DeformTape {
    pub field: HexPlaneField,
    pub time: f64,
    pub positions: Vec<[f64; 3]>,
}

fn apply_deltas(cloud: &GaussianCloud, field: &HexPlaneField, t: f64) -> Result<GaussianCloud> {
    if field.sh_degree != cloud.sh_degree {
        return Err(Error::Contract(format!(
            "field decodes sh degree {} but cloud has degree {}",
            field.sh_degree, cloud.sh_degree
        )));
    }
    let head = field.head();
    let deltas: Vec<Vec<f64>> = cloud
        .positions
        .par_chunks(CHUNK)
        .flat_map_iter(|chunk| chunk.iter().map(|p| field.deltas(p, t)).collect::<Vec<_>>())
        .collect();
    let mut out = cloud.clone();
    let k = cloud.sh_stride();
    for (i, d) in deltas.iter().enumerate() {
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "deformation output",
                index: i,
            });
        }
        for a in 0..3 {
            out.positions[i][a] += d[HeadLayout::POSITION + a];
            out.log_scales[i][a] += d[HeadLayout::LOG_SCALE + a];
        }
        for a in 0..4 {
            out.rotations[i][a] += d[HeadLayout::ROTATION + a];
        }
        for (s, dv) in out.sh_of_mut(i).iter_mut().zip(&d[HeadLayout::SH..HeadLayout::SH + k]) {
            *s += dv;
        }
        out.opacity_logits[i] += d[head.opacity()];
    }
    Ok(out)
}

/// Deformed copy of `cloud` at time `t`; the input is untouched.
///
/// The rotation delta is added to the raw quaternion; normalization happens
/// where every quaternion is consumed (covariance construction).
pub fn deform_cloud(cloud: &GaussianCloud, t: f64, field: &HexPlaneField) -> Result<GaussianCloud> {
    apply_deltas(cloud, field, t)
}

/// Like [`deform_cloud`] but also returns the tape for [`deform_backward`].
pub fn deform_cloud_recorded(
    cloud: &GaussianCloud,
    t: f64,
    field: &HexPlaneField,
) -> Result<(GaussianCloud, DeformTape)> {
    let out = apply_deltas(cloud, field, t)?;
    Ok((
        out,
        DeformTape {
            field: field.clone(),
            time: t,
            positions: cloud.positions.clone(),
        },
    ))
}

/// Maps gradients on the deformed cloud back to the static cloud and field.
pub fn deform_backward(tape: &DeformTape, grad_deformed: &GaussianCloud) -> (GaussianCloud, FieldGradients) {
    let field = &tape.field;
    let head = field.head();
    let k = grad_deformed.sh_stride();
    let n = tape.positions.len();
    let indices: Vec<usize> = (0..n).collect();

    struct ChunkResult {
        mlp: Vec<f64>,
        planes: Vec<(usize, f64)>,
        grad_means: Vec<[f64; 3]>,
    }

    let results: Vec<ChunkResult> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut res = ChunkResult {
                mlp: vec![0.0; field.mlp_params.len()],
                planes: Vec::new(),
                grad_means: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let mut go = vec![0.0; head.width()];
                go[HeadLayout::POSITION..HeadLayout::POSITION + 3].copy_from_slice(&grad_deformed.positions[i]);
                go[HeadLayout::LOG_SCALE..HeadLayout::LOG_SCALE + 3].copy_from_slice(&grad_deformed.log_scales[i]);
                go[HeadLayout::ROTATION..HeadLayout::ROTATION + 4].copy_from_slice(&grad_deformed.rotations[i]);
                go[HeadLayout::SH..HeadLayout::SH + k].copy_from_slice(grad_deformed.sh_of(i));
                go[head.opacity()] = grad_deformed.opacity_logits[i];
                if go.iter().all(|&g| g == 0.0) {
                    res.grad_means.push([0.0; 3]);
                    continue;
                }
                let fwd = field.forward_one(&tape.positions[i], tape.time);
                let gm = field.backward_one(&fwd, &go, &mut res.mlp, &mut res.planes);
                res.grad_means.push(gm);
            }
            res
        })
        .collect();

    let mut grad_static = grad_deformed.clone();
    let mut grads = field.zero_gradients();
    let mut i = 0;
    for r in results {
        for (a, b) in grads.mlp.iter_mut().zip(&r.mlp) {
            *a += b;
        }
        for (idx, g) in r.planes {
            grads.planes[idx] += g;
        }
        for gm in r.grad_means {
            for a in 0..3 {
                grad_static.positions[i][a] += gm[a];
            }
            i += 1;
        }
    }
    (grad_static, grads)
}
