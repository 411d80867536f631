//! Versioned single-file checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header,
//! then the raw little-endian `f64` sections listed in the header, in order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::{FieldOptimizer, TrainConfig, TrainState};
use crate::deformation::{FieldConfig, HexPlaneField};
use crate::error::{Error, Result};
use crate::gaussians::{CloudGroup, GaussianCloud};
use crate::optim::{AdamState, CloudOptimizer};
use crate::trainer::densify::DensifyStats;

pub const MAGIC: &[u8; 8] = b"FQSPLAT\x01";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FieldMeta {
    config: FieldConfig,
    bounds_min: [f64; 3],
    bounds_max: [f64; 3],
    sh_degree: usize,
    plane_steps: u64,
    mlp_steps: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    iteration: u64,
    config_hash: String,
    config: TrainConfig,
    scene_extent: f64,
    image_size: [usize; 2],
    gaussians: usize,
    sh_degree: usize,
    group_steps: Vec<u64>,
    field: Option<FieldMeta>,
    sections: Vec<Section>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    /// Rejects a checkpoint written under a different configuration.
    pub fn ensure_config(&self, config: &TrainConfig) -> Result<()> {
        let (have, want) = (self.config.hash(), config.hash());
        if have != want {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {have}, current {want}"
            )));
        }
        Ok(())
    }
}

fn sections_of(state: &TrainState) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for g in CloudGroup::ALL {
        out.push((g.name().to_string(), state.cloud.group(g).to_vec()));
    }
    for g in CloudGroup::ALL {
        let s = &state.cloud_opt.groups[g as usize];
        out.push((format!("adam_m.{}", g.name()), s.m.clone()));
        out.push((format!("adam_v.{}", g.name()), s.v.clone()));
    }
    out.push(("densify_accum".into(), state.stats.accum.clone()));
    out.push(("densify_count".into(), state.stats.count.iter().map(|&c| c as f64).collect()));
    if let (Some(f), Some(o)) = (&state.field, &state.field_opt) {
        out.push(("field_planes".into(), f.plane_params.clone()));
        out.push(("field_mlp".into(), f.mlp_params.clone()));
        out.push(("adam_m.field_planes".into(), o.planes.m.clone()));
        out.push(("adam_v.field_planes".into(), o.planes.v.clone()));
        out.push(("adam_m.field_mlp".into(), o.mlp.m.clone()));
        out.push(("adam_v.field_mlp".into(), o.mlp.v.clone()));
    }
    out
}

/// Encodes `state` into checkpoint bytes.
pub fn encode(config: &TrainConfig, state: &TrainState) -> Vec<u8> {
    let sections = sections_of(state);
    let header = Header {
        iteration: state.iteration,
        config_hash: config.hash(),
        config: config.clone(),
        scene_extent: state.scene_extent,
        image_size: state.image_size,
        gaussians: state.cloud.count(),
        sh_degree: state.cloud.sh_degree,
        group_steps: state.cloud_opt.groups.iter().map(|s| s.step).collect(),
        field: state.field.as_ref().zip(state.field_opt.as_ref()).map(|(f, o)| FieldMeta {
            config: f.config.clone(),
            bounds_min: f.bounds_min,
            bounds_max: f.bounds_max,
            sh_degree: f.sh_degree,
            plane_steps: o.planes.step,
            mlp_steps: o.mlp.step,
        }),
        sections: sections
            .iter()
            .map(|(name, v)| Section {
                name: name.clone(),
                len: v.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let payload: usize = sections.iter().map(|(_, v)| v.len() * 8).sum();
    let mut bytes = Vec::with_capacity(20 + json.len() + payload);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, v) in &sections {
        for x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    bytes
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(bad(format!("file truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

/// Decodes checkpoint bytes, checking every section against the shapes the
/// header implies.
pub fn decode(mut bytes: &[u8]) -> Result<Checkpoint> {
    let magic = take(&mut bytes, 8, "magic")?;
    if magic != MAGIC {
        return Err(bad("bad magic: not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let hlen = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, hlen, "header")?)
        .map_err(|e| bad(format!("unreadable header: {e}")))?;
    if header.config_hash != header.config.hash() {
        return Err(bad("header config does not match its recorded hash"));
    }
    header.config.validate().map_err(|e| bad(format!("header config: {e}")))?;

    let n = header.gaussians;
    let mut cloud = GaussianCloud::empty(header.sh_degree);
    cloud.validate().map_err(|e| bad(e.to_string()))?;
    let mut expected: Vec<(String, usize)> = Vec::new();
    for g in CloudGroup::ALL {
        expected.push((g.name().into(), n * cloud.group_width(g)));
    }
    for g in CloudGroup::ALL {
        let len = n * cloud.group_width(g);
        expected.push((format!("adam_m.{}", g.name()), len));
        expected.push((format!("adam_v.{}", g.name()), len));
    }
    expected.push(("densify_accum".into(), n));
    expected.push(("densify_count".into(), n));
    let field = match &header.field {
        Some(meta) => {
            let f = HexPlaneField::new(meta.config.clone(), meta.bounds_min, meta.bounds_max, meta.sh_degree, 0)
                .map_err(|e| bad(format!("field metadata: {e}")))?;
            let (p, m) = (f.plane_params.len(), f.mlp_params.len());
            for (name, len) in [
                ("field_planes", p),
                ("field_mlp", m),
                ("adam_m.field_planes", p),
                ("adam_v.field_planes", p),
                ("adam_m.field_mlp", m),
                ("adam_v.field_mlp", m),
            ] {
                expected.push((name.into(), len));
            }
            Some(f)
        }
        None => None,
    };
    if header.sections.len() != expected.len() {
        return Err(bad(format!(
            "header lists {} sections, expected {}",
            header.sections.len(),
            expected.len()
        )));
    }
    if header.group_steps.len() != CloudGroup::ALL.len() {
        return Err(bad("header has the wrong number of optimizer step counters"));
    }
    let mut data = std::collections::HashMap::new();
    for (sec, (name, len)) in header.sections.iter().zip(&expected) {
        if &sec.name != name || sec.len != *len {
            return Err(bad(format!(
                "shape mismatch: section '{}' has {} values, expected '{}' with {}",
                sec.name, sec.len, name, len
            )));
        }
        let raw = take(&mut bytes, len * 8, name)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        data.insert(name.clone(), values);
    }
    if !bytes.is_empty() {
        return Err(bad(format!("{} trailing bytes after the last section", bytes.len())));
    }
    let mut get = |name: &str| data.remove(name).expect("section was checked");

    cloud.positions = get("positions").chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    cloud.rotations = get("rotations").chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    cloud.log_scales = get("log_scales").chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    cloud.opacity_logits = get("opacity_logits");
    cloud.sh = get("sh");
    let groups = CloudGroup::ALL
        .iter()
        .zip(&header.group_steps)
        .map(|(g, &step)| AdamState {
            m: get(&format!("adam_m.{}", g.name())),
            v: get(&format!("adam_v.{}", g.name())),
            step,
        })
        .collect();
    let stats = DensifyStats {
        accum: get("densify_accum"),
        count: get("densify_count").into_iter().map(|c| c as u64).collect(),
    };
    let (field, field_opt) = match (field, &header.field) {
        (Some(mut f), Some(meta)) => {
            f.plane_params = get("field_planes");
            f.mlp_params = get("field_mlp");
            let opt = FieldOptimizer {
                planes: AdamState {
                    m: get("adam_m.field_planes"),
                    v: get("adam_v.field_planes"),
                    step: meta.plane_steps,
                },
                mlp: AdamState {
                    m: get("adam_m.field_mlp"),
                    v: get("adam_v.field_mlp"),
                    step: meta.mlp_steps,
                },
            };
            (Some(f), Some(opt))
        }
        _ => (None, None),
    };
    Ok(Checkpoint {
        config: header.config.clone(),
        state: TrainState {
            iteration: header.iteration,
            scene_extent: header.scene_extent,
            image_size: header.image_size,
            cloud,
            cloud_opt: CloudOptimizer {
                hyper: header.config.adam,
                groups,
            },
            field,
            field_opt,
            stats,
        },
    })
}

/// Writes via a temporary file and a rename so readers never see a partial
/// checkpoint.
pub fn save(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    write_bytes(path, &encode(config, state))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes checkpoints on a background thread from an owned snapshot.
#[derive(Debug, Default)]
pub struct BackgroundWriter {
    pending: Option<JoinHandle<Result<()>>>,
}

impl BackgroundWriter {
    /// Waits for the previous write, then starts writing `state`.
    pub fn submit(&mut self, path: PathBuf, config: &TrainConfig, state: &TrainState) -> Result<()> {
        self.wait()?;
        let bytes = encode(config, state);
        self.pending = Some(std::thread::spawn(move || write_bytes(&path, &bytes)));
        Ok(())
    }

    pub fn wait(&mut self) -> Result<()> {
        match self.pending.take() {
            Some(h) => h.join().map_err(|_| bad("checkpoint writer panicked"))?,
            None => Ok(()),
        }
    }
}
