//! Spatial high-frequency emphasis.
//!
//! The ground-truth image is transformed per channel, its centered amplitude
//! spectrum is multiplied by the complement of a low-frequency disc (phase
//! untouched), and the inverse transform gives a high-pass image `Iʰ`. The
//! loss is an L1 residual weighted per pixel and channel by `|Iʰ|`.
//!
//! The weight map depends only on the ground truth, so it can be computed
//! once per frame and reused ([`ShfWeights`]).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_RADIUS_RATIO: f64 = 0.25;

/// Centered amplitude and phase spectra, one plane per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Same `(x, y, c)` layout as [`Image`].
    pub amplitude: Vec<f64>,
    /// In (−π, π].
    pub phase: Vec<f64>,
    /// Zero frequency at `(⌊W/2⌋, ⌊H/2⌋)` when true.
    pub centered: bool,
}

fn fft_rows_cols(buf: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
    if inverse {
        let n = (w * h) as f64;
        buf.iter_mut().for_each(|v| *v /= n);
    }
}

/// Position of unshifted bin `k` after centering along an axis of length `n`.
#[inline]
fn shifted(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

#[inline]
fn unshifted(k: usize, n: usize) -> usize {
    (k + n - n / 2) % n
}

/// Centered complex spectrum of one channel.
fn channel_spectrum(image: &Image, c: usize) -> Vec<Complex<f64>> {
    let (w, h) = (image.width, image.height);
    let mut buf: Vec<Complex<f64>> = (0..w * h)
        .map(|p| Complex::new(image.data[p * image.channels + c], 0.0))
        .collect();
    fft_rows_cols(&mut buf, w, h, false);
    let mut out = vec![Complex::new(0.0, 0.0); w * h];
    for y in 0..h {
        for x in 0..w {
            out[shifted(y, h) * w + shifted(x, w)] = buf[y * w + x];
        }
    }
    out
}

/// Inverse of [`channel_spectrum`], returning the real part.
fn channel_inverse(centered: &[Complex<f64>], w: usize, h: usize) -> Vec<f64> {
    let mut buf = vec![Complex::new(0.0, 0.0); w * h];
    for y in 0..h {
        for x in 0..w {
            buf[unshifted(y, h) * w + unshifted(x, w)] = centered[y * w + x];
        }
    }
    fft_rows_cols(&mut buf, w, h, true);
    buf.iter().map(|v| v.re).collect()
}

fn wrap_phase(p: f64) -> f64 {
    if p <= -std::f64::consts::PI {
        p + 2.0 * std::f64::consts::PI
    } else {
        p
    }
}

/// Per-channel 2D DFT with the zero frequency moved to the center.
pub fn fft2(image: &Image) -> Result<Spectrum> {
    if image.width < 2 || image.height < 2 {
        return Err(Error::InvalidParameter("fft2 needs at least 2x2 pixels".into()));
    }
    let (w, h, ch) = (image.width, image.height, image.channels);
    let mut amplitude = vec![0.0; w * h * ch];
    let mut phase = vec![0.0; w * h * ch];
    for c in 0..ch {
        for (p, z) in channel_spectrum(image, c).into_iter().enumerate() {
            amplitude[p * ch + c] = z.norm();
            phase[p * ch + c] = wrap_phase(z.arg());
        }
    }
    Ok(Spectrum {
        width: w,
        height: h,
        channels: ch,
        amplitude,
        phase,
        centered: true,
    })
}

impl Spectrum {
    /// Inverse transform (real part) of `amplitude · e^{i·phase}`.
    pub fn inverse(&self) -> Image {
        let (w, h, ch) = (self.width, self.height, self.channels);
        let mut out = Image::new(w, h, ch);
        for c in 0..ch {
            let mut z: Vec<Complex<f64>> = (0..w * h)
                .map(|p| Complex::from_polar(self.amplitude[p * ch + c], self.phase[p * ch + c]))
                .collect();
            if !self.centered {
                let raw = z.clone();
                for y in 0..h {
                    for x in 0..w {
                        z[shifted(y, h) * w + shifted(x, w)] = raw[y * w + x];
                    }
                }
            }
            for (p, v) in channel_inverse(&z, w, h).into_iter().enumerate() {
                out.data[p * ch + c] = v;
            }
        }
        out
    }

    /// Amplitude multiplied by `factor(x, y)`, phase kept.
    pub fn scale_amplitude(&self, factor: impl Fn(usize, usize) -> f64) -> Spectrum {
        let mut s = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let f = factor(x, y);
                for c in 0..self.channels {
                    s.amplitude[(y * self.width + x) * self.channels + c] *= f;
                }
            }
        }
        s
    }
}

/// Binary low-frequency disc on a centered spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMask {
    pub width: usize,
    pub height: usize,
    pub radius_ratio: f64,
    /// Row-major, `true` inside the disc.
    pub mask: Vec<bool>,
}

impl FrequencyMask {
    /// Disc of radius `radius_ratio · min(W, H) / 2` around the centered DC bin.
    pub fn low_pass_disc(width: usize, height: usize, radius_ratio: f64) -> Result<Self> {
        if !(radius_ratio >= 0.0 && radius_ratio < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "radius_ratio must lie in [0, 1), got {radius_ratio}"
            )));
        }
        let r = radius_ratio * width.min(height) as f64 / 2.0;
        let (cx, cy) = ((width / 2) as f64, (height / 2) as f64);
        let mut mask = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                mask.push(d2 <= r * r);
            }
        }
        Ok(Self {
            width,
            height,
            radius_ratio,
            mask,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }
}

fn filtered_image(image: &Image, radius_ratio: f64, keep_low: bool) -> Result<Image> {
    let spec = fft2(image)?;
    let mask = FrequencyMask::low_pass_disc(image.width, image.height, radius_ratio)?;
    let filtered = spec.scale_amplitude(|x, y| if mask.get(x, y) == keep_low { 1.0 } else { 0.0 });
    Ok(filtered.inverse())
}

/// Spatial-domain image holding only the frequencies outside the disc.
pub fn high_freq_image(image: &Image, radius_ratio: f64) -> Result<Image> {
    filtered_image(image, radius_ratio, false)
}

/// Complement of [`high_freq_image`]: only the frequencies inside the disc.
pub fn low_freq_image(image: &Image, radius_ratio: f64) -> Result<Image> {
    filtered_image(image, radius_ratio, true)
}

/// Per-pixel, per-channel loss weights `|Iʰ|` of a ground-truth image.
#[derive(Clone, Debug, PartialEq)]
pub struct ShfWeights(pub Image);

impl ShfWeights {
    pub fn from_ground_truth(gt: &Image, radius_ratio: f64) -> Result<Self> {
        Ok(Self(high_freq_image(gt, radius_ratio)?.map(f64::abs)))
    }

    /// Zeroes weights on pixels where the single-channel `mask` is set.
    pub fn with_mask(mut self, mask: &Image) -> Result<Self> {
        if (mask.width, mask.height) != (self.0.width, self.0.height) {
            return Err(Error::Contract(format!(
                "mask is {}x{}, weights are {}x{}",
                mask.width, mask.height, self.0.width, self.0.height
            )));
        }
        let ch = self.0.channels;
        for p in 0..self.0.pixel_count() {
            if mask.data[p * mask.channels] >= 0.5 {
                self.0.data[p * ch..(p + 1) * ch].fill(0.0);
            }
        }
        Ok(self)
    }

    /// Weighted L1 and its gradient with respect to the rendered image.
    pub fn loss(&self, gt: &Image, rendered: &Image) -> Result<(f64, Image)> {
        gt.ensure_same_shape(rendered, "shf loss")?;
        self.0.ensure_same_shape(gt, "shf weights")?;
        let mut grad = Image::new(gt.width, gt.height, gt.channels);
        let mut loss = 0.0;
        for i in 0..gt.data.len() {
            let r = gt.data[i] - rendered.data[i];
            let w = self.0.data[i];
            loss += w * r.abs();
            grad.data[i] = if r > 0.0 {
                -w
            } else if r < 0.0 {
                w
            } else {
                0.0
            };
        }
        Ok((loss, grad))
    }
}

/// `Σ |Iʰ| · |I − Î|` over pixels and channels, with `dL/dÎ`.
pub fn shf_loss(gt: &Image, rendered: &Image, radius_ratio: f64) -> Result<(f64, Image)> {
    gt.ensure_same_shape(rendered, "shf loss")?;
    ShfWeights::from_ground_truth(gt, radius_ratio)?.loss(gt, rendered)
}
