//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use freqsplat::gaussians::{Camera, GaussianCloud};
use freqsplat::Image;
use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::Rng;

pub type Complex = (f64, f64);

/// Direct O(N²) DFT of one channel; entry `(u, v)` lands at the centered
/// position `((u + W/2) % W, (v + H/2) % H)`.
pub fn naive_dft(img: &Image, c: usize) -> Vec<Complex> {
    let (w, h) = (img.width, img.height);
    let mut out = vec![(0.0, 0.0); w * h];
    for v in 0..h {
        for u in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let ang = -2.0 * std::f64::consts::PI * ((u * x) as f64 / w as f64 + (v * y) as f64 / h as f64);
                    let p = img.get(x, y, c);
                    re += p * ang.cos();
                    im += p * ang.sin();
                }
            }
            let (cu, cv) = ((u + w / 2) % w, (v + h / 2) % h);
            out[cv * w + cu] = (re, im);
        }
    }
    out
}

/// Inverse of [`naive_dft`], real part only.
pub fn naive_idft(spec: &[Complex], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut re = 0.0;
            for v in 0..h {
                for u in 0..w {
                    let (cu, cv) = ((u + w / 2) % w, (v + h / 2) % h);
                    let (a, b) = spec[cv * w + cu];
                    let ang = 2.0 * std::f64::consts::PI * ((u * x) as f64 / w as f64 + (v * y) as f64 / h as f64);
                    re += a * ang.cos() - b * ang.sin();
                }
            }
            out[y * w + x] = re / (w * h) as f64;
        }
    }
    out
}

fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
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

struct Shaded {
    index: usize,
    mean: [f64; 2],
    conic: Matrix2<f64>,
    z: f64,
    opacity: f64,
    color: [f64; 3],
}

/// Per-pixel front-to-back compositing over every Gaussian, written from the
/// formulas rather than from the library's projection helpers.
pub fn oracle_render(cloud: &GaussianCloud, cam: &Camera, cutoffs: bool) -> (Image, Image, Image) {
    let m = &cam.world_to_camera;
    let rot = Matrix3::new(m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]);
    let trans = Vector3::new(m[0][3], m[1][3], m[2][3]);
    let center = -rot.transpose() * trans;
    let mut shaded = Vec::new();
    for i in 0..cloud.count() {
        let pw = Vector3::from(cloud.positions[i]);
        let p = rot * pw + trans;
        if p.z <= cam.near * 0.99 || p.z >= cam.far {
            continue;
        }
        let r = rotation_matrix(&cloud.rotations[i]);
        let s = Matrix3::from_diagonal(&Vector3::from(cloud.log_scales[i].map(f64::exp)));
        let sigma = r * s * s * r.transpose();
        let j = nalgebra::Matrix2x3::new(
            cam.fx / p.z,
            0.0,
            -cam.fx * p.x / (p.z * p.z),
            0.0,
            cam.fy / p.z,
            -cam.fy * p.y / (p.z * p.z),
        );
        let t = j * rot;
        let cov = t * sigma * t.transpose() + Matrix2::identity() * 0.3;
        let dir = (pw - center).normalize();
        let sh = cloud.sh_of(i);
        let mut color = [0.0; 3];
        for (c, out) in color.iter_mut().enumerate() {
            let mut v = 0.5 + 0.282_094_791_773_878_14 * sh[c];
            if cloud.sh_degree >= 1 {
                let k = 0.488_602_511_902_919_9;
                v += -k * dir.y * sh[3 + c] + k * dir.z * sh[6 + c] - k * dir.x * sh[9 + c];
            }
            *out = v.clamp(0.0, 1.0);
        }
        shaded.push(Shaded {
            index: i,
            mean: [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy],
            conic: cov.try_inverse().unwrap(),
            z: p.z,
            opacity: 1.0 / (1.0 + (-cloud.opacity_logits[i]).exp()),
            color,
        });
    }
    shaded.sort_by(|a, b| a.z.total_cmp(&b.z).then(a.index.cmp(&b.index)));
    let (w, h) = (cam.width, cam.height);
    let (mut image, mut depth, mut alpha) = (Image::new(w, h, 3), Image::new(w, h, 1), Image::new(w, h, 1));
    for y in 0..h {
        for x in 0..w {
            let d = nalgebra::Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut transmittance = 1.0;
            for g in &shaded {
                let r = d - nalgebra::Vector2::from(g.mean);
                let power = (r.transpose() * g.conic * r)[(0, 0)];
                if cutoffs && power > 9.0 {
                    continue;
                }
                let a = (g.opacity * (-0.5 * power).exp()).min(0.99);
                for c in 0..3 {
                    image.set(x, y, c, image.get(x, y, c) + g.color[c] * a * transmittance);
                }
                depth.set(x, y, 0, depth.get(x, y, 0) + g.z * a * transmittance);
                transmittance *= 1.0 - a;
                if cutoffs && transmittance < 1e-4 {
                    break;
                }
            }
            alpha.set(x, y, 0, 1.0 - transmittance);
        }
    }
    (image, depth, alpha)
}

/// Camera with a small random rotation and offset.
pub fn random_camera(rng: &mut impl Rng, w: usize, h: usize) -> Camera {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let r = nalgebra::Rotation3::new(axis.normalize() * rng.random_range(0.0..0.2));
    let t = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let f = w.max(h) as f64 * rng.random_range(0.8..1.5);
    let mut cam = Camera::identity_pose(w, h, f, f, 0.1, 50.0);
    for i in 0..3 {
        for j in 0..3 {
            cam.world_to_camera[i][j] = r[(i, j)];
        }
        cam.world_to_camera[i][3] = t[i];
    }
    cam
}

/// Random cloud roughly in front of an identity-like camera.
pub fn random_cloud(rng: &mut impl Rng, n: usize, sh_degree: usize) -> GaussianCloud {
    let mut cloud = GaussianCloud::empty(sh_degree);
    for _ in 0..n {
        let z = rng.random_range(1.0..4.0);
        let pos = [rng.random_range(-0.5..0.5) * z, rng.random_range(-0.5..0.5) * z, z];
        let rot = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let ls = [
            rng.random_range(-3.5..-1.5),
            rng.random_range(-3.5..-1.5),
            rng.random_range(-3.5..-1.5),
        ];
        let sh: Vec<f64> = (0..cloud.sh_stride()).map(|_| rng.random_range(-1.0..1.0)).collect();
        cloud.push(pos, rot, ls, rng.random_range(-2.0..3.0), &sh);
    }
    cloud
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, ch: usize) -> Image {
    let data = (0..w * h * ch).map(|_| rng.random::<f64>()).collect();
    Image::from_vec(w, h, ch, data).unwrap()
}

/// SSIM from explicit 11x11 windows: Gaussian weights with σ = 1.5, valid
/// positions only, averaged over channels.
pub fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let n = 11;
    let mut win = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let (dx, dy) = (i as f64 - 5.0, j as f64 - 5.0);
            win[j * n + i] = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..a.channels {
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=a.height - n {
            for x0 in 0..=a.width - n {
                let (mut mx, mut my) = (0.0, 0.0);
                for j in 0..n {
                    for i in 0..n {
                        mx += win[j * n + i] * a.get(x0 + i, y0 + j, c);
                        my += win[j * n + i] * b.get(x0 + i, y0 + j, c);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for j in 0..n {
                    for i in 0..n {
                        let (p, q) = (a.get(x0 + i, y0 + j, c) - mx, b.get(x0 + i, y0 + j, c) - my);
                        vx += win[j * n + i] * p * p;
                        vy += win[j * n + i] * q * q;
                        cov += win[j * n + i] * p * q;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / a.channels as f64
}
