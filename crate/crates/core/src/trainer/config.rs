//! Training configuration. Every field has a default so a config file only
//! needs the values it changes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deformation::FieldConfig;
use crate::error::{Error, Result};
use crate::objective::{LossWeights, DEFAULT_DEPTH_MIN_ALPHA, DEFAULT_DEPTH_PERCENTILE, DEFAULT_HUBER_DELTA};
use crate::optim::AdamHyper;
use crate::shf::DEFAULT_RADIUS_RATIO;
use crate::thf::{LkConfig, ThfConfig};

/// Adam learning rates per parameter group.
///
/// Position rates are multiplied by the scene extent and decay
/// exponentially from `position_init` to `position_final` over the run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
    pub planes: f64,
    pub mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            planes: 1.6e-2,
            mlp: 1.6e-3,
        }
    }
}

impl LearningRates {
    /// Position rate at iteration `k` of `total`, before extent scaling.
    pub fn position_at(&self, k: u64, total: u64) -> f64 {
        if total <= 1 {
            return self.position_init;
        }
        let s = (k as f64 / (total - 1) as f64).clamp(0.0, 1.0);
        (self.position_init.ln() * (1.0 - s) + self.position_final.ln() * s).exp()
    }
}

/// Where the ground-truth branch of the temporal loss gets its flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    /// Lucas-Kanade on consecutive ground-truth frames.
    Lk,
    /// Flow fields shipped with the dataset.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub static_iters: u64,
    pub deform_iters: u64,
    pub seed: u64,
    pub lr: LearningRates,
    pub adam: AdamHyper,
    pub densify_interval: u64,
    /// Mean screen-space gradient, in normalized device units of a
    /// per-element mean loss, above which a Gaussian is cloned or split.
    pub densify_grad_threshold: f64,
    pub opacity_prune_threshold: f64,
    /// Largest scale that is cloned rather than split, as a fraction of
    /// the scene extent.
    pub scale_split_threshold: f64,
    pub max_gaussians: usize,
    pub init_stride: usize,
    pub sh_degree: usize,
    pub weights: LossWeights,
    pub shf_radius_ratio: f64,
    pub depth_delta: f64,
    /// Quantile of the ground-truth depths used to normalize depth.
    pub depth_percentile: f64,
    pub depth_min_alpha: f64,
    pub field: FieldConfig,
    /// Padding of the field bounds around the cloud, relative to its size.
    pub field_margin: f64,
    pub lk: LkConfig,
    pub thf: ThfConfig,
    pub flow_source: FlowSource,
    pub tile_size: usize,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            static_iters: 3000,
            deform_iters: 60000,
            seed: 0,
            lr: LearningRates::default(),
            adam: AdamHyper::default(),
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            opacity_prune_threshold: 0.005,
            scale_split_threshold: 0.01,
            max_gaussians: 200_000,
            init_stride: 2,
            sh_degree: 0,
            weights: LossWeights::default(),
            shf_radius_ratio: DEFAULT_RADIUS_RATIO,
            depth_delta: DEFAULT_HUBER_DELTA,
            depth_percentile: DEFAULT_DEPTH_PERCENTILE,
            depth_min_alpha: DEFAULT_DEPTH_MIN_ALPHA,
            field: FieldConfig::default(),
            field_margin: 0.1,
            lk: LkConfig::default(),
            thf: ThfConfig::default(),
            flow_source: FlowSource::Lk,
            tile_size: 16,
            checkpoint_interval: 0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    pub fn total_iters(&self) -> u64 {
        self.static_iters + self.deform_iters
    }

    /// Iterations (exclusive end) during which densification runs: all of
    /// stage 1 and the first half of stage 2.
    pub fn densify_until(&self) -> u64 {
        self.static_iters + self.deform_iters / 2
    }

    pub fn validate(&self) -> Result<()> {
        positive("densify_grad_threshold", self.densify_grad_threshold)?;
        positive("opacity_prune_threshold", self.opacity_prune_threshold)?;
        positive("scale_split_threshold", self.scale_split_threshold)?;
        positive("shf_radius_ratio", self.shf_radius_ratio)?;
        positive("depth_delta", self.depth_delta)?;
        positive("field_margin", self.field_margin)?;
        let lr = &self.lr;
        for (name, v) in [
            ("lr.position_init", lr.position_init),
            ("lr.position_final", lr.position_final),
            ("lr.rotation", lr.rotation),
            ("lr.scale", lr.scale),
            ("lr.opacity", lr.opacity),
            ("lr.sh", lr.sh),
            ("lr.planes", lr.planes),
            ("lr.mlp", lr.mlp),
        ] {
            positive(name, v)?;
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        positive("adam.eps", self.adam.eps)?;
        if self.opacity_prune_threshold >= 1.0 {
            return Err(Error::Config("opacity_prune_threshold must be below 1".into()));
        }
        if !(0.0..=1.0).contains(&self.depth_percentile) || !(0.0..=1.0).contains(&self.depth_min_alpha) {
            return Err(Error::Config("depth_percentile and depth_min_alpha must lie in [0, 1]".into()));
        }
        if self.densify_interval == 0 {
            return Err(Error::Config("densify_interval must be at least 1".into()));
        }
        if self.init_stride == 0 {
            return Err(Error::Config("init_stride must be at least 1".into()));
        }
        if self.max_gaussians == 0 {
            return Err(Error::Config("max_gaussians must be at least 1".into()));
        }
        if self.sh_degree > crate::gaussians::MAX_SH_DEGREE {
            return Err(Error::Config(format!("sh_degree must be at most {}", crate::gaussians::MAX_SH_DEGREE)));
        }
        if self.tile_size == 0 {
            return Err(Error::Config("tile_size must be at least 1".into()));
        }
        self.weights.validate()?;
        self.field.validate()?;
        self.lk.validate().map_err(|e| Error::Config(format!("lk: {e}")))?;
        Ok(())
    }

    /// Parses TOML; unknown fields are rejected by name.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("train config serializes")
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("train config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
