//! Anisotropic 3D Gaussian parameterization: covariance construction,
//! pinhole projection to screen space, and spherical-harmonic color.
//!
//! Every forward function here has a matching `*_backward` that maps an
//! upstream gradient back onto the unconstrained parameters (position,
//! raw quaternion, log-scale, SH coefficients).

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real SH basis constant for band 0.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Real SH basis constant for band 1.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
/// Diagonal floor added to every screen-space covariance, in px².
pub const COV2D_FLOOR: f64 = 0.3;
/// Gaussians with camera depth at or below `near * NEAR_CULL_FACTOR` are culled.
pub const NEAR_CULL_FACTOR: f64 = 0.99;
pub const MAX_SH_DEGREE: usize = 1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Number of SH basis functions for a degree.
pub fn sh_basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Structure-of-arrays Gaussian parameter set.
///
/// Rotations are stored as raw `(w, x, y, z)` quaternions and normalized
/// whenever a covariance is built. SH coefficients are laid out per Gaussian
/// as `[basis][channel]`, i.e. `sh_stride() = 3 * (degree + 1)^2` values.
///
/// The same layout doubles as the gradient accumulator for a cloud
/// (see [`GaussianCloud::zeros_like`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
    pub sh_degree: usize,
}

/// Gradient buffers with the same shape as a [`GaussianCloud`].
pub type CloudGradients = GaussianCloud;

/// Parameter groups of a cloud, in the order used by the optimizer and
/// the checkpoint format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CloudGroup {
    Positions,
    Rotations,
    LogScales,
    Opacity,
    Sh,
}

impl CloudGroup {
    pub const ALL: [CloudGroup; 5] = [
        CloudGroup::Positions,
        CloudGroup::Rotations,
        CloudGroup::LogScales,
        CloudGroup::Opacity,
        CloudGroup::Sh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CloudGroup::Positions => "positions",
            CloudGroup::Rotations => "rotations",
            CloudGroup::LogScales => "log_scales",
            CloudGroup::Opacity => "opacity_logits",
            CloudGroup::Sh => "sh",
        }
    }
}

impl GaussianCloud {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
            sh_degree,
        }
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        3 * sh_basis_count(self.sh_degree)
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let k = self.sh_stride();
        &self.sh[i * k..(i + 1) * k]
    }

    pub fn sh_of_mut(&mut self, i: usize) -> &mut [f64] {
        let k = self.sh_stride();
        &mut self.sh[i * k..(i + 1) * k]
    }

    /// Appends one Gaussian. `sh` must hold `sh_stride()` values.
    pub fn push(
        &mut self,
        position: [f64; 3],
        rotation: [f64; 4],
        log_scale: [f64; 3],
        opacity_logit: f64,
        sh: &[f64],
    ) {
        assert_eq!(sh.len(), self.sh_stride(), "sh coefficient count");
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.sh.extend_from_slice(sh);
    }

    /// Appends a Gaussian whose view-independent color is `rgb`.
    pub fn push_colored(
        &mut self,
        position: [f64; 3],
        rotation: [f64; 4],
        log_scale: [f64; 3],
        opacity_logit: f64,
        rgb: [f64; 3],
    ) {
        let mut sh = vec![0.0; self.sh_stride()];
        for c in 0..3 {
            sh[c] = rgb_to_sh_dc(rgb[c]);
        }
        self.push(position, rotation, log_scale, opacity_logit, &sh);
    }

    /// A zero-valued buffer with the same shape, used for gradients.
    pub fn zeros_like(&self) -> Self {
        let n = self.count();
        Self {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh: vec![0.0; self.sh.len()],
            sh_degree: self.sh_degree,
        }
    }

    pub fn group(&self, g: CloudGroup) -> &[f64] {
        match g {
            CloudGroup::Positions => self.positions.as_flattened(),
            CloudGroup::Rotations => self.rotations.as_flattened(),
            CloudGroup::LogScales => self.log_scales.as_flattened(),
            CloudGroup::Opacity => &self.opacity_logits,
            CloudGroup::Sh => &self.sh,
        }
    }

    pub fn group_mut(&mut self, g: CloudGroup) -> &mut [f64] {
        match g {
            CloudGroup::Positions => self.positions.as_flattened_mut(),
            CloudGroup::Rotations => self.rotations.as_flattened_mut(),
            CloudGroup::LogScales => self.log_scales.as_flattened_mut(),
            CloudGroup::Opacity => &mut self.opacity_logits,
            CloudGroup::Sh => &mut self.sh,
        }
    }

    /// Values per Gaussian in a group.
    pub fn group_width(&self, g: CloudGroup) -> usize {
        match g {
            CloudGroup::Positions | CloudGroup::LogScales => 3,
            CloudGroup::Rotations => 4,
            CloudGroup::Opacity => 1,
            CloudGroup::Sh => self.sh_stride(),
        }
    }

    /// `self += other * factor`, elementwise over all groups.
    pub fn add_scaled(&mut self, other: &GaussianCloud, factor: f64) {
        assert_eq!(self.count(), other.count());
        for g in CloudGroup::ALL {
            for (a, b) in self.group_mut(g).iter_mut().zip(other.group(g)) {
                *a += b * factor;
            }
        }
    }

    /// Keeps the Gaussians for which `keep[i]` is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.count());
        let k = self.sh_stride();
        let mut it = keep.iter();
        self.positions.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.rotations.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.log_scales.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.opacity_logits.retain(|_| *it.next().unwrap());
        let sh = std::mem::take(&mut self.sh);
        self.sh = sh
            .chunks(k)
            .zip(keep)
            .filter(|(_, &kp)| kp)
            .flat_map(|(c, _)| c.iter().copied())
            .collect();
    }

    /// Checks array lengths and finiteness, naming the first offending Gaussian.
    pub fn validate(&self) -> Result<()> {
        let n = self.count();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.sh.len() != n * self.sh_stride()
        {
            return Err(Error::Contract("gaussian cloud arrays differ in length".into()));
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(Error::InvalidParameter(format!(
                "sh degree {} exceeds supported maximum {MAX_SH_DEGREE}",
                self.sh_degree
            )));
        }
        for i in 0..n {
            let finite = self.positions[i].iter().all(|v| v.is_finite())
                && self.rotations[i].iter().all(|v| v.is_finite())
                && self.log_scales[i].iter().all(|v| v.is_finite())
                && self.opacity_logits[i].is_finite()
                && self.sh_of(i).iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFinite {
                    what: "gaussian parameters",
                    index: i,
                });
            }
            if self.rotations[i].iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "gaussian {i} has a zero quaternion"
                )));
            }
        }
        Ok(())
    }
}

/// Inverse of the DC color mapping: the coefficient that yields `value`.
pub fn rgb_to_sh_dc(value: f64) -> f64 {
    (value - 0.5) / SH_C0
}

/// Pinhole camera with a rigid world-to-camera transform.
///
/// Pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)` in the same
/// coordinates as `cx`, `cy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 rigid transform.
    pub world_to_camera: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at the origin looking down +z with the principal point at the image center.
    pub fn identity_pose(width: usize, height: usize, fx: f64, fy: f64, near: f64, far: f64) -> Self {
        Self {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            width,
            height,
            near,
            far,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let w = &self.world_to_camera;
        Matrix3::new(
            w[0][0], w[0][1], w[0][2], w[1][0], w[1][1], w[1][2], w[2][0], w[2][1], w[2][2],
        )
    }

    pub fn translation(&self) -> Vector3<f64> {
        let w = &self.world_to_camera;
        Vector3::new(w[0][3], w[1][3], w[2][3])
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn world_to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera-space point to world space.
    pub fn cam_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.translation())
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.fx, self.fy, self.cx, self.cy, self.near, self.far];
        if vals.iter().any(|v| !v.is_finite()) || self.world_to_camera.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("camera has non-finite values".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("camera image size must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidParameter(format!(
                "camera planes must satisfy 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::InvalidParameter(format!(
                "world_to_camera rotation is not orthonormal (error {err:.3e})"
            )));
        }
        let last = self.world_to_camera[3];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidParameter(
                "world_to_camera last row must be (0, 0, 0, 1)".into(),
            ));
        }
        Ok(())
    }
}

pub fn normalize_quat(q: &[f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Backward of `normalize_quat` for the raw quaternion `q`.
pub fn normalize_quat_backward(q: &[f64; 4], grad_unit: &[f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let dot: f64 = (0..4).map(|i| u[i] * grad_unit[i]).sum();
    std::array::from_fn(|i| (grad_unit[i] - u[i] * dot) / n)
}

/// Rotation matrix of a unit `(w, x, y, z)` quaternion.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient with respect to the unit quaternion given `dL/dR`.
pub fn quat_to_matrix_backward(q: &[f64; 4], grad_r: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(
        0.0,
        2.0 * y,
        2.0 * z,
        2.0 * y,
        -4.0 * x,
        -2.0 * w,
        2.0 * z,
        2.0 * w,
        -4.0 * x,
    );
    let dy = Matrix3::new(
        -4.0 * y,
        2.0 * x,
        2.0 * w,
        2.0 * x,
        0.0,
        2.0 * z,
        -2.0 * w,
        2.0 * z,
        -4.0 * y,
    );
    let dz = Matrix3::new(
        -4.0 * z,
        -2.0 * w,
        2.0 * x,
        2.0 * w,
        -4.0 * z,
        2.0 * y,
        2.0 * x,
        2.0 * y,
        0.0,
    );
    [
        grad_r.component_mul(&dw).sum(),
        grad_r.component_mul(&dx).sum(),
        grad_r.component_mul(&dy).sum(),
        grad_r.component_mul(&dz).sum(),
    ]
}

fn check_finite(vals: &[f64], what: &str) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} is not finite")))
    }
}

/// Σ = R S Sᵀ Rᵀ for a (possibly unnormalized) quaternion and positive scales.
pub fn build_covariance(rotation: &[f64; 4], scale: &[f64; 3]) -> Result<Matrix3<f64>> {
    check_finite(rotation, "rotation")?;
    check_finite(scale, "scale")?;
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidParameter("scales must be positive".into()));
    }
    if rotation.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidParameter("zero quaternion".into()));
    }
    Ok(covariance_unchecked(rotation, scale))
}

fn covariance_unchecked(rotation: &[f64; 4], scale: &[f64; 3]) -> Matrix3<f64> {
    let r = quat_to_matrix(&normalize_quat(rotation));
    let m = r * Matrix3::from_diagonal(&Vector3::new(scale[0], scale[1], scale[2]));
    m * m.transpose()
}

/// Gradients of Σ(rotation, exp(log_scale)) with respect to the raw
/// quaternion and the log-scales, given a symmetric `dL/dΣ`.
pub fn covariance_backward(
    rotation: &[f64; 4],
    log_scale: &[f64; 3],
    grad_cov: &Matrix3<f64>,
) -> ([f64; 4], [f64; 3]) {
    let unit = normalize_quat(rotation);
    let r = quat_to_matrix(&unit);
    let s = Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let m = r * Matrix3::from_diagonal(&s);
    let grad_m = (grad_cov + grad_cov.transpose()) * m;
    let mut grad_log_scale = [0.0; 3];
    let mut grad_r = Matrix3::zeros();
    for i in 0..3 {
        let mut ds = 0.0;
        for k in 0..3 {
            ds += grad_m[(k, i)] * r[(k, i)];
            grad_r[(k, i)] = grad_m[(k, i)] * s[i];
        }
        grad_log_scale[i] = ds * s[i];
    }
    let grad_unit = quat_to_matrix_backward(&unit, &grad_r);
    (normalize_quat_backward(rotation, &grad_unit), grad_log_scale)
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    /// Pixel coordinates of the projected mean.
    pub mean2d: [f64; 2],
    /// Symmetric 2x2 covariance including [`COV2D_FLOOR`].
    pub cov2d: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
}

impl Projected {
    pub fn conic(&self) -> Matrix2<f64> {
        let c = &self.cov2d;
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
        Matrix2::new(c[(1, 1)] / det, -c[(0, 1)] / det, -c[(1, 0)] / det, c[(0, 0)] / det)
    }

    pub fn det(&self) -> f64 {
        self.cov2d.determinant()
    }
}

fn projection_jacobian(p: &Vector3<f64>, camera: &Camera) -> Matrix2x3<f64> {
    let z = p.z;
    Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * p.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * p.y / (z * z),
    )
}

/// Projects a world-space Gaussian. Returns `None` when the mean is culled
/// (at or behind `near * 0.99`, or beyond `far`).
pub fn project_gaussian(mean: &Vector3<f64>, cov: &Matrix3<f64>, camera: &Camera) -> Option<Projected> {
    let p = camera.world_to_cam(mean);
    if p.z <= camera.near * NEAR_CULL_FACTOR || p.z >= camera.far {
        return None;
    }
    let w = camera.rotation();
    let t = projection_jacobian(&p, camera) * w;
    let cov2d = t * cov * t.transpose() + Matrix2::identity() * COV2D_FLOOR;
    Some(Projected {
        mean2d: [
            camera.fx * p.x / p.z + camera.cx,
            camera.fy * p.y / p.z + camera.cy,
        ],
        cov2d,
        depth: p.z,
    })
}

/// Projects Gaussian `i` of a cloud without validating parameters.
pub fn project_parameters(
    position: &[f64; 3],
    rotation: &[f64; 4],
    log_scale: &[f64; 3],
    camera: &Camera,
) -> Option<Projected> {
    let scale = [log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp()];
    let cov = covariance_unchecked(rotation, &scale);
    project_gaussian(&Vector3::from(*position), &cov, camera)
}

/// Upstream gradients of one projected Gaussian.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProjectedGrad {
    pub mean2d: [f64; 2],
    /// Full-matrix gradient (both off-diagonal entries treated independently, symmetric).
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Backward of [`project_parameters`]: returns gradients for position,
/// raw quaternion, and log-scale.
pub fn project_backward(
    position: &[f64; 3],
    rotation: &[f64; 4],
    log_scale: &[f64; 3],
    camera: &Camera,
    grad: &ProjectedGrad,
) -> ([f64; 3], [f64; 4], [f64; 3]) {
    let mean = Vector3::from(*position);
    let scale = [log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp()];
    let cov = covariance_unchecked(rotation, &scale);
    let w = camera.rotation();
    let p = camera.world_to_cam(&mean);
    let j = projection_jacobian(&p, camera);
    let t = j * w;
    let g = (grad.cov2d + grad.cov2d.transpose()) * 0.5;

    let grad_cov3 = t.transpose() * g * t;
    let grad_t = 2.0 * g * t * cov;
    let grad_j = grad_t * w.transpose();

    let (x, y, z) = (p.x, p.y, p.z);
    let (fx, fy) = (camera.fx, camera.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dp = Vector3::zeros();
    dp.x += grad_j[(0, 2)] * (-fx / z2);
    dp.y += grad_j[(1, 2)] * (-fy / z2);
    dp.z += grad_j[(0, 0)] * (-fx / z2)
        + grad_j[(0, 2)] * (2.0 * fx * x / z3)
        + grad_j[(1, 1)] * (-fy / z2)
        + grad_j[(1, 2)] * (2.0 * fy * y / z3);
    dp.x += grad.mean2d[0] * fx / z;
    dp.z += grad.mean2d[0] * (-fx * x / z2);
    dp.y += grad.mean2d[1] * fy / z;
    dp.z += grad.mean2d[1] * (-fy * y / z2);
    dp.z += grad.depth;

    let grad_mean = w.transpose() * dp;
    let (grad_rot, grad_log_scale) = covariance_backward(rotation, log_scale, &grad_cov3);
    ([grad_mean.x, grad_mean.y, grad_mean.z], grad_rot, grad_log_scale)
}

/// Real SH basis values for `degree` at a unit direction.
pub fn sh_basis(degree: usize, dir: &Vector3<f64>) -> Vec<f64> {
    let mut b = vec![SH_C0];
    if degree >= 1 {
        b.push(-SH_C1 * dir.y);
        b.push(SH_C1 * dir.z);
        b.push(-SH_C1 * dir.x);
    }
    b
}

/// SH color before clamping (includes the +0.5 offset).
pub fn sh_to_color_raw(coeffs: &[f64], degree: usize, dir: &Vector3<f64>) -> [f64; 3] {
    let basis = sh_basis(degree, dir);
    let mut rgb = [0.5; 3];
    for (b, &yb) in basis.iter().enumerate() {
        for (c, v) in rgb.iter_mut().enumerate() {
            *v += yb * coeffs[b * 3 + c];
        }
    }
    rgb
}

/// View-dependent color, clamped to [0, 1].
pub fn sh_to_color(coeffs: &[f64], degree: usize, dir: &Vector3<f64>) -> [f64; 3] {
    sh_to_color_raw(coeffs, degree, dir).map(|v| v.clamp(0.0, 1.0))
}

/// Backward of [`sh_to_color`]. Channels clamped in the forward pass pass no
/// gradient. Returns `(dL/dcoeffs, dL/ddir)`.
pub fn sh_to_color_backward(
    coeffs: &[f64],
    degree: usize,
    dir: &Vector3<f64>,
    grad_rgb: &[f64; 3],
) -> (Vec<f64>, Vector3<f64>) {
    let raw = sh_to_color_raw(coeffs, degree, dir);
    let g: [f64; 3] = std::array::from_fn(|c| {
        if (0.0..=1.0).contains(&raw[c]) {
            grad_rgb[c]
        } else {
            0.0
        }
    });
    let basis = sh_basis(degree, dir);
    let mut grad_coeffs = vec![0.0; coeffs.len()];
    for (b, &yb) in basis.iter().enumerate() {
        for c in 0..3 {
            grad_coeffs[b * 3 + c] = yb * g[c];
        }
    }
    let mut grad_dir = Vector3::zeros();
    if degree >= 1 {
        for c in 0..3 {
            grad_dir.y += -SH_C1 * coeffs[3 + c] * g[c];
            grad_dir.z += SH_C1 * coeffs[6 + c] * g[c];
            grad_dir.x += -SH_C1 * coeffs[9 + c] * g[c];
        }
    }
    (grad_coeffs, grad_dir)
}

/// Unit direction from the camera center to a world point, with the backward
/// map for its gradient.
pub fn view_direction(position: &[f64; 3], camera_center: &Vector3<f64>) -> Vector3<f64> {
    (Vector3::from(*position) - camera_center).normalize()
}

pub fn view_direction_backward(
    position: &[f64; 3],
    camera_center: &Vector3<f64>,
    grad_dir: &Vector3<f64>,
) -> Vector3<f64> {
    let v = Vector3::from(*position) - camera_center;
    let n = v.norm();
    let d = v / n;
    (grad_dir - d * d.dot(grad_dir)) / n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_mat(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    #[test]
    fn identity_covariance() {
        let c = build_covariance(&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(approx_mat(&c, &Matrix3::identity(), 1e-15));
        let c = build_covariance(&[1.0, 0.0, 0.0, 0.0], &[2.0, 1.0, 1.0]).unwrap();
        assert!(approx_mat(&c, &Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), 1e-15));
    }

    // Independent axis-angle construction of a rotation about z.
    fn rot_z(theta: f64) -> Matrix3<f64> {
        let (s, c) = theta.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn rotated_covariance_matches_rotation_oracle() {
        let half = std::f64::consts::FRAC_PI_4;
        let q = [half.cos(), 0.0, 0.0, half.sin()];
        let c = build_covariance(&q, &[2.0, 1.0, 1.0]).unwrap();
        let r = rot_z(std::f64::consts::FRAC_PI_2);
        let expect = r * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * r.transpose();
        assert!(approx_mat(&c, &expect, 1e-12));
        assert!(approx_mat(&c, &Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), 1e-12));
    }

    #[test]
    fn covariance_rejects_bad_input() {
        assert!(build_covariance(&[f64::NAN, 0.0, 0.0, 0.0], &[1.0; 3]).is_err());
        assert!(build_covariance(&[1.0, 0.0, 0.0, 0.0], &[1.0, f64::INFINITY, 1.0]).is_err());
        assert!(build_covariance(&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn unit_quaternion_normalization_is_noop() {
        let q = normalize_quat(&[0.3, -0.5, 0.7, 0.1]);
        let q2 = normalize_quat(&q);
        for i in 0..4 {
            assert!((q[i] - q2[i]).abs() <= 1e-12);
        }
        let n: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    fn cam100() -> Camera {
        Camera::identity_pose(64, 64, 100.0, 100.0, 0.1, 100.0)
    }

    #[test]
    fn on_axis_projection_scales_with_depth() {
        let eps = 0.1;
        let cov = Matrix3::identity() * eps * eps;
        let cam = cam100();
        let p1 = project_gaussian(&Vector3::new(0.0, 0.0, 1.0), &cov, &cam).unwrap();
        let raw1 = p1.cov2d - Matrix2::identity() * COV2D_FLOOR;
        assert!((raw1[(0, 0)] - 100.0 * 100.0 * eps * eps).abs() < 1e-9);
        assert!((raw1[(1, 1)] - 100.0 * 100.0 * eps * eps).abs() < 1e-9);
        assert!(raw1[(0, 1)].abs() < 1e-12);
        let p2 = project_gaussian(&Vector3::new(0.0, 0.0, 2.0), &cov, &cam).unwrap();
        let raw2 = p2.cov2d - Matrix2::identity() * COV2D_FLOOR;
        assert!((raw2[(0, 0)] - 50.0 * 50.0 * eps * eps).abs() < 1e-9);
        assert_eq!(p2.depth, 2.0);
        assert_eq!(p1.mean2d, [32.0, 32.0]);
    }

    #[test]
    fn off_axis_covariance_matches_numerical_jacobian() {
        let cam = cam100();
        let mean = Vector3::new(0.5, 0.0, 1.0);
        let cov = build_covariance(&[0.9, 0.1, -0.2, 0.3], &[0.05, 0.1, 0.02]).unwrap();
        let proj = |p: &Vector3<f64>| -> [f64; 2] {
            [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy]
        };
        let h = 1e-6;
        let mut jac = Matrix2x3::zeros();
        for k in 0..3 {
            let mut a = mean;
            let mut b = mean;
            a[k] += h;
            b[k] -= h;
            let (pa, pb) = (proj(&a), proj(&b));
            for r in 0..2 {
                jac[(r, k)] = (pa[r] - pb[r]) / (2.0 * h);
            }
        }
        let expect = jac * cov * jac.transpose() + Matrix2::identity() * COV2D_FLOOR;
        let got = project_gaussian(&mean, &cov, &cam).unwrap();
        assert!((got.cov2d - expect).abs().max() <= 1e-5);
    }

    #[test]
    fn near_plane_culls() {
        let cam = cam100();
        let cov = Matrix3::identity() * 0.01;
        assert!(project_gaussian(&Vector3::new(0.0, 0.0, 0.099), &cov, &cam).is_none());
        assert!(project_gaussian(&Vector3::new(0.0, 0.0, -1.0), &cov, &cam).is_none());
        assert!(project_gaussian(&Vector3::new(0.0, 0.0, 0.1), &cov, &cam).is_some());
    }

    #[test]
    fn sh_degree_zero_is_view_independent() {
        let c = [0.4, -0.2, 1.0];
        let a = sh_to_color(&c, 0, &Vector3::new(0.0, 0.0, 1.0));
        let b = sh_to_color(&c, 0, &Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(a, b);
        for ch in 0..3 {
            assert!((a[ch] - (c[ch] * SH_C0 + 0.5).clamp(0.0, 1.0)).abs() < 1e-15);
        }
        let mut c1 = vec![0.0; 12];
        c1[..3].copy_from_slice(&c);
        let d = Vector3::new(0.6, 0.0, 0.8);
        assert_eq!(sh_to_color(&c1, 1, &d), a);
    }

    #[test]
    fn sh_degree_one_is_antisymmetric_about_dc() {
        let mut c = vec![0.1, 0.0, -0.1, 0.2, 0.1, -0.3, 0.05, 0.2, 0.1, -0.15, 0.3, 0.0];
        c[0] = 0.0;
        let d = Vector3::new(0.48, -0.6, 0.64);
        let a = sh_to_color_raw(&c, 1, &d);
        let b = sh_to_color_raw(&c, 1, &(-d));
        let dc = sh_to_color_raw(&c[..3], 0, &d);
        // explicit basis: Y_1,-1 = -C1 y, Y_1,0 = C1 z, Y_1,1 = -C1 x
        for ch in 0..3 {
            let lin = -SH_C1 * d.y * c[3 + ch] + SH_C1 * d.z * c[6 + ch] - SH_C1 * d.x * c[9 + ch];
            assert!((a[ch] - dc[ch] - lin).abs() < 1e-15);
            assert!(((a[ch] + b[ch]) / 2.0 - dc[ch]).abs() < 1e-15);
        }
    }

    #[test]
    fn camera_validation() {
        let mut cam = cam100();
        assert!(cam.validate().is_ok());
        cam.world_to_camera[0][0] = 2.0;
        assert!(cam.validate().is_err());
        let mut cam = cam100();
        cam.near = 10.0;
        cam.far = 1.0;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn retain_mask_keeps_rows_aligned() {
        let mut cloud = GaussianCloud::empty(0);
        for i in 0..4 {
            let f = i as f64;
            cloud.push([f; 3], [1.0, 0.0, 0.0, 0.0], [f; 3], f, &[f, f, f]);
        }
        cloud.retain_mask(&[true, false, true, false]);
        assert_eq!(cloud.count(), 2);
        assert_eq!(cloud.positions[1], [2.0; 3]);
        assert_eq!(cloud.sh_of(1), &[2.0, 2.0, 2.0]);
        assert!(cloud.validate().is_ok());
    }
}
