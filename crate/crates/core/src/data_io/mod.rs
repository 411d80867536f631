//! Datasets, synthetic scenes, metrics and file formats.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! camera.json          intrinsics, shared or per-frame extrinsics, depth scale
//! images/NNNNNN.png    8-bit RGB
//! depth/NNNNNN.png     optional, 16-bit, value = depth * depth_scale
//! masks/NNNNNN.png     optional, 8-bit, >= 128 marks excluded pixels
//! flow/NNNNNN.flo      optional ground-truth flow from frame N-1 to N
//! ```
//!
//! Frames are ordered by the number in their file stem and get time `i / T`.

pub mod formats;
pub mod metrics;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::Camera;
use crate::image::Image;
use crate::thf::FlowField;

pub use metrics::{psnr, ssim};

pub const DEFAULT_DEPTH_SCALE: f64 = 1000.0;
const CAMERA_FILE: &str = "camera.json";

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    /// RGB in [0, 1].
    pub image: Image,
    pub depth: Option<Image>,
    /// One channel; 1 marks tool or occluded pixels.
    pub mask: Image,
    pub time: f64,
}

impl FrameRecord {
    pub fn mask_is_empty(&self) -> bool {
        self.mask.data.iter().all(|&m| m < 0.5)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// One camera per frame.
    pub cameras: Vec<Camera>,
    pub frames: Vec<FrameRecord>,
    /// `flows[i]` is the flow from frame `i − 1` to `i`; `flows[0]` is zero.
    pub gt_flows: Option<Vec<FlowField>>,
    pub depth_scale: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames.first().map(|f| (f.image.width, f.image.height)).unwrap_or((0, 0))
    }

    pub fn has_depth(&self) -> bool {
        self.frames.iter().all(|f| f.depth.is_some())
    }

    /// Checks shapes, times and cameras.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Data("dataset has no frames".into()));
        }
        if self.cameras.len() != self.frames.len() {
            return Err(Error::Data(format!(
                "{} cameras for {} frames",
                self.cameras.len(),
                self.frames.len()
            )));
        }
        let (w, h) = self.dims();
        for (i, (f, cam)) in self.frames.iter().zip(&self.cameras).enumerate() {
            let ok = f.image.channels == 3
                && (f.image.width, f.image.height) == (w, h)
                && (f.mask.width, f.mask.height, f.mask.channels) == (w, h, 1)
                && f.depth.as_ref().is_none_or(|d| (d.width, d.height, d.channels) == (w, h, 1));
            if !ok {
                return Err(Error::Data(format!("frame {i} does not match {w}x{h} RGB with 1-channel maps")));
            }
            if (cam.width, cam.height) != (w, h) {
                return Err(Error::Data(format!(
                    "camera {i} is {}x{}, frames are {w}x{h}",
                    cam.width, cam.height
                )));
            }
            cam.validate().map_err(|e| Error::Data(format!("camera {i}: {e}")))?;
            if i > 0 && !(f.time > self.frames[i - 1].time) {
                return Err(Error::Data(format!("frame times are not strictly increasing at frame {i}")));
            }
        }
        if let Some(flows) = &self.gt_flows {
            if flows.len() != self.frames.len() || flows.iter().any(|fl| (fl.width, fl.height) != (w, h)) {
                return Err(Error::Data("ground-truth flows do not match the frames".into()));
            }
        }
        Ok(())
    }
}

/// `camera.json` schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
    /// Shared row-major world-to-camera transform.
    pub world_to_camera: [[f64; 4]; 4],
    /// Per-frame transforms overriding the shared one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_poses: Option<Vec<[[f64; 4]; 4]>>,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    DEFAULT_DEPTH_SCALE
}

impl CameraFile {
    /// Camera of frame `i`: its own pose if listed, else the shared one.
    pub fn camera_for(&self, i: usize) -> Camera {
        let pose = self
            .frame_poses
            .as_ref()
            .and_then(|p| p.get(i).copied())
            .unwrap_or(self.world_to_camera);
        self.camera(pose)
    }

    pub fn camera(&self, pose: [[f64; 4]; 4]) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            world_to_camera: pose,
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
    }
}

pub fn frame_time(index: usize, count: usize) -> f64 {
    index as f64 / count as f64
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

/// Numbered files in `dir` with the given extension, keyed by index.
fn indexed_files(dir: &Path, ext: &str) -> Result<BTreeMap<u64, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
        let idx = digits
            .parse::<u64>()
            .map_err(|_| Error::Data(format!("{}: file name has no frame number", path.display())))?;
        if let Some(prev) = out.insert(idx, path.clone()) {
            return Err(Error::Data(format!(
                "{} and {} have the same frame number",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

fn matching(dir: &Path, ext: &str, indices: &[u64]) -> Result<Option<Vec<PathBuf>>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let files = indexed_files(dir, ext)?;
    let mut out = Vec::with_capacity(indices.len());
    for i in indices {
        match files.get(i) {
            Some(p) => out.push(p.clone()),
            None => {
                return Err(Error::Data(format!(
                    "{} has no file for frame {i}",
                    dir.display()
                )))
            }
        }
    }
    Ok(Some(out))
}

fn check_dims(img: &Image, w: usize, h: usize, path: &Path) -> Result<()> {
    if (img.width, img.height) != (w, h) {
        return Err(Error::Data(format!(
            "{} is {}x{}, expected {w}x{h}",
            path.display(),
            img.width,
            img.height
        )));
    }
    Ok(())
}

pub fn read_camera_file(root: &Path) -> Result<CameraFile> {
    let path = root.join(CAMERA_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let cam = read_camera_file(root)?;
    let images = indexed_files(&root.join("images"), "png")?;
    if images.is_empty() {
        return Err(Error::Data(format!("{} has no frames", root.join("images").display())));
    }
    let indices: Vec<u64> = images.keys().copied().collect();
    let image_paths: Vec<PathBuf> = images.into_values().collect();
    let depth_paths = matching(&root.join("depth"), "png", &indices)?;
    let mask_paths = matching(&root.join("masks"), "png", &indices)?;
    if depth_paths.is_none() {
        log::warn!("{}: no depth directory, depth supervision disabled", root.display());
    }
    let (w, h) = (cam.width, cam.height);
    let count = indices.len();
    let frames: Vec<FrameRecord> = (0..count)
        .into_par_iter()
        .map(|i| -> Result<FrameRecord> {
            let image = formats::read_png_rgb(&image_paths[i])?;
            check_dims(&image, w, h, &image_paths[i])?;
            let depth = match &depth_paths {
                Some(p) => {
                    let d = formats::read_depth_png(&p[i], cam.depth_scale)?;
                    check_dims(&d, w, h, &p[i])?;
                    Some(d)
                }
                None => None,
            };
            let mask = match &mask_paths {
                Some(p) => {
                    let m = formats::read_png_gray(&p[i])?;
                    check_dims(&m, w, h, &p[i])?;
                    m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
                }
                None => Image::new(w, h, 1),
            };
            Ok(FrameRecord {
                image,
                depth,
                mask,
                time: frame_time(i, count),
            })
        })
        .collect::<Result<_>>()?;
    let cameras = match &cam.frame_poses {
        Some(poses) if poses.len() != count => {
            return Err(Error::Data(format!(
                "{CAMERA_FILE} lists {} frame poses for {count} frames",
                poses.len()
            )))
        }
        Some(poses) => poses.iter().map(|p| cam.camera(*p)).collect(),
        None => vec![cam.camera(cam.world_to_camera); count],
    };
    let flow_dir = root.join("flow");
    let gt_flows = if flow_dir.is_dir() {
        let files = indexed_files(&flow_dir, "flo")?;
        let mut flows = vec![FlowField::zeros(w, h)];
        for i in &indices[1..] {
            let p = files
                .get(i)
                .ok_or_else(|| Error::Data(format!("{} has no flow for frame {i}", flow_dir.display())))?;
            let f = formats::read_flo(p)?;
            if (f.width, f.height) != (w, h) {
                return Err(Error::Data(format!("{} has the wrong size", p.display())));
            }
            flows.push(f);
        }
        Some(flows)
    } else {
        None
    };
    let ds = Dataset {
        cameras,
        frames,
        gt_flows,
        depth_scale: cam.depth_scale,
    };
    ds.validate()?;
    Ok(ds)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes a dataset directory readable by [`load_dataset`].
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    ds.validate()?;
    let c0 = &ds.cameras[0];
    let shared = ds.cameras.iter().all(|c| c.world_to_camera == c0.world_to_camera);
    let cam = CameraFile {
        width: c0.width,
        height: c0.height,
        fx: c0.fx,
        fy: c0.fy,
        cx: c0.cx,
        cy: c0.cy,
        near: c0.near,
        far: c0.far,
        world_to_camera: c0.world_to_camera,
        frame_poses: (!shared).then(|| ds.cameras.iter().map(|c| c.world_to_camera).collect()),
        depth_scale: ds.depth_scale,
    };
    create_dir(root)?;
    let cam_path = root.join(CAMERA_FILE);
    let text = serde_json::to_string_pretty(&cam).expect("camera serializes");
    std::fs::write(&cam_path, text + "\n").map_err(|e| Error::io(&cam_path, e))?;
    for sub in ["images", "masks"] {
        create_dir(&root.join(sub))?;
    }
    if ds.has_depth() {
        create_dir(&root.join("depth"))?;
    }
    ds.frames.par_iter().enumerate().try_for_each(|(i, f)| -> Result<()> {
        formats::write_png(&f.image, &root.join("images").join(frame_name(i, "png")))?;
        formats::write_png(&f.mask, &root.join("masks").join(frame_name(i, "png")))?;
        if let Some(d) = &f.depth {
            formats::write_depth_png(d, ds.depth_scale, &root.join("depth").join(frame_name(i, "png")))?;
        }
        Ok(())
    })?;
    if let Some(flows) = &ds.gt_flows {
        create_dir(&root.join("flow"))?;
        for (i, f) in flows.iter().enumerate().skip(1) {
            formats::write_flo(f, &root.join("flow").join(frame_name(i, "flo")))?;
        }
    }
    Ok(())
}
