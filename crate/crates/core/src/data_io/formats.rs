//! PNG, PLY and `.flo` readers and writers, plus diagnostic visualizations.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::image::Image;
use crate::shf::Spectrum;
use crate::thf::FlowField;

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

/// Writes a 1- or 3-channel image in [0, 1] as an 8-bit PNG.
pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        3 => {
            let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
                ImageBuffer::from_raw(w, h, img.data.iter().map(|&v| quantize8(v)).collect())
                    .expect("buffer size matches");
            buf.save(path).map_err(|e| image_err(path, e))
        }
        1 => {
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_raw(w, h, img.data.iter().map(|&v| quantize8(v)).collect())
                    .expect("buffer size matches");
            buf.save(path).map_err(|e| image_err(path, e))
        }
        n => Err(Error::Contract(format!("cannot write a {n}-channel PNG"))),
    }
}

/// Reads a PNG as RGB in [0, 1].
pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Image::from_vec(
        w as usize,
        h as usize,
        3,
        img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    )
}

/// Reads a PNG as one channel in [0, 1].
pub fn read_png_gray(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Image::from_vec(
        w as usize,
        h as usize,
        1,
        img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    )
}

/// Writes depth as 16-bit fixed point: stored value = `round(depth * scale)`.
pub fn write_depth_png(depth: &Image, scale: f64, path: &Path) -> Result<()> {
    let raw: Vec<u16> = depth
        .data
        .iter()
        .map(|&d| {
            if d.is_finite() && d > 0.0 {
                (d * scale).round().clamp(0.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, raw).expect("buffer size matches");
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn read_depth_png(path: &Path, scale: f64) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    Image::from_vec(
        w as usize,
        h as usize,
        1,
        img.into_raw().into_iter().map(|v| v as f64 / scale).collect(),
    )
}

const FLO_MAGIC: f32 = 202021.25;

/// Middlebury `.flo`: magic, width, height, then interleaved `(u, v)` as f32.
pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut bytes = Vec::with_capacity(12 + flow.u.len() * 8);
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(flow.width as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        bytes.extend_from_slice(&(*u as f32).to_le_bytes());
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    if f32::from_le_bytes(word(0)) != FLO_MAGIC {
        return Err(bad("bad magic"));
    }
    let (w, h) = (i32::from_le_bytes(word(4)), i32::from_le_bytes(word(8)));
    if w <= 0 || h <= 0 {
        return Err(bad("bad dimensions"));
    }
    let n = (w * h) as usize;
    if bytes.len() != 12 + n * 8 {
        return Err(bad("size does not match header"));
    }
    let mut flow = FlowField::zeros(w as usize, h as usize);
    for p in 0..n {
        flow.u[p] = f32::from_le_bytes(word(12 + p * 8)) as f64;
        flow.v[p] = f32::from_le_bytes(word(16 + p * 8)) as f64;
    }
    Ok(flow)
}

const PLY_FIELDS_FIXED: [&str; 3] = ["x", "y", "z"];

fn ply_property_names(sh_degree: usize) -> Vec<String> {
    let stride = 3 * crate::gaussians::sh_basis_count(sh_degree);
    let mut names: Vec<String> = PLY_FIELDS_FIXED.iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    names.extend((0..stride - 3).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

/// Binary little-endian PLY with the usual splatting property names.
pub fn write_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let names = ply_property_names(cloud.sh_degree);
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        cloud.count()
    );
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    let mut bytes = header.into_bytes();
    let bases = cloud.sh_stride() / 3;
    for i in 0..cloud.count() {
        let sh = cloud.sh_of(i);
        let mut row: Vec<f64> = cloud.positions[i].to_vec();
        row.extend_from_slice(&sh[..3]);
        // remaining coefficients channel-major, as other splatting tools expect
        for c in 0..3 {
            row.extend((1..bases).map(|b| sh[b * 3 + c]));
        }
        row.push(cloud.opacity_logits[i]);
        row.extend_from_slice(&cloud.log_scales[i]);
        row.extend_from_slice(&cloud.rotations[i]);
        for v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a PLY written by [`write_ply`] (or any binary little-endian file
/// with the same float properties).
pub fn read_ply(path: &Path) -> Result<GaussianCloud> {
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut count = None;
    let mut names = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("missing end_header".into()));
        }
        let line = line.trim();
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(bad(format!("unsupported format {fmt}")));
            }
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
            }
            ["property", "float", name] => names.push(name.to_string()),
            ["property", ty, name] => return Err(bad(format!("property {name} has unsupported type {ty}"))),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    let rest = names.iter().filter(|n| n.starts_with("f_rest_")).count();
    let sh_degree = match rest {
        0 => 0,
        9 => 1,
        n => return Err(bad(format!("unsupported number of SH rest coefficients {n}"))),
    };
    let expected = ply_property_names(sh_degree);
    if names != expected {
        return Err(bad("unexpected property layout".into()));
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let width = names.len();
    if body.len() != count * width * 4 {
        return Err(bad("vertex data size does not match header".into()));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let bases = crate::gaussians::sh_basis_count(sh_degree);
    let mut cloud = GaussianCloud::empty(sh_degree);
    for row in vals.chunks_exact(width) {
        let mut sh = vec![0.0; 3 * bases];
        for c in 0..3 {
            sh[c] = row[3 + c];
            for b in 1..bases {
                sh[b * 3 + c] = row[6 + c * (bases - 1) + (b - 1)];
            }
        }
        let o = 3 + 3 * bases;
        cloud.push(
            [row[0], row[1], row[2]],
            [row[o + 4], row[o + 5], row[o + 6], row[o + 7]],
            [row[o + 1], row[o + 2], row[o + 3]],
            row[o],
            &sh,
        );
    }
    Ok(cloud)
}

/// HSV flow coloring: hue from direction, saturation from magnitude
/// relative to `max_magnitude`.
pub fn flow_to_rgb(flow: &FlowField, max_magnitude: f64) -> Image {
    let scale = if max_magnitude > 0.0 { max_magnitude } else { 1.0 };
    let mut img = Image::new(flow.width, flow.height, 3);
    for p in 0..flow.u.len() {
        let (u, v) = (flow.u[p], flow.v[p]);
        let hue = (v.atan2(u).to_degrees() + 360.0) % 360.0;
        let sat = (u.hypot(v) / scale).min(1.0);
        let rgb = hsv_to_rgb(hue, sat, 1.0);
        img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
    }
    img
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// `log(1 + |F|)` of one channel, normalized to [0, 1].
pub fn log_amplitude_image(spectrum: &Spectrum, channel: usize) -> Image {
    let (w, h, ch) = (spectrum.width, spectrum.height, spectrum.channels);
    let vals: Vec<f64> = (0..w * h).map(|p| spectrum.amplitude[p * ch + channel].ln_1p()).collect();
    let max = vals.iter().copied().fold(0.0, f64::max);
    let norm = if max > 0.0 { max } else { 1.0 };
    Image::from_vec(w, h, 1, vals.into_iter().map(|v| v / norm).collect()).expect("size matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(240.0, 0.0, 1.0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_flow_is_white() {
        let img = flow_to_rgb(&FlowField::zeros(2, 2), 1.0);
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn property_names_degree_one() {
        let n = ply_property_names(1);
        assert_eq!(n.len(), 3 + 3 + 9 + 1 + 3 + 4);
        assert_eq!(n[6], "f_rest_0");
    }
}
