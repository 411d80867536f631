//! Adaptive densification: clone small, split large, prune transparent.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gaussians::{quat_to_matrix, sigmoid, GaussianCloud};
use crate::optim::CloudOptimizer;

pub const SPLIT_SCALE_FACTOR: f64 = 1.6;

/// Accumulated screen-space positional gradient magnitudes since the last
/// densification event.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyStats {
    pub accum: Vec<f64>,
    pub count: Vec<u64>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            accum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accum.is_empty()
    }

    /// Adds one observation per visible Gaussian.
    ///
    /// Pixel gradients of a summed loss are converted to normalized device
    /// units of a per-element mean loss, so the threshold does not depend
    /// on the image size.
    pub fn record(&mut self, screen: &[[f64; 2]], visible: &[bool], width: usize, height: usize) {
        let (w, h) = (width as f64, height as f64);
        let per_element = 1.0 / (3.0 * w * h);
        for i in 0..self.accum.len() {
            if visible[i] {
                let gx = screen[i][0] * 0.5 * w * per_element;
                let gy = screen[i][1] * 0.5 * h * per_element;
                self.accum[i] += (gx * gx + gy * gy).sqrt();
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.accum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensifyConfig {
    pub grad_threshold: f64,
    pub opacity_prune_threshold: f64,
    /// Absolute world-space scale separating clone from split.
    pub split_scale: f64,
    pub max_gaussians: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

fn copy_row(cloud: &mut GaussianCloud, i: usize) {
    let sh = cloud.sh_of(i).to_vec();
    cloud.push(cloud.positions[i], cloud.rotations[i], cloud.log_scales[i], cloud.opacity_logits[i], &sh);
}

/// One densification event. Candidates are taken in decreasing gradient
/// order until the cloud reaches `max_gaussians`; new rows get zero Adam
/// moments and the statistics are reset.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &mut DensifyStats,
    optimizer: &mut CloudOptimizer,
    cfg: &DensifyConfig,
    rng: &mut impl Rng,
) -> DensifyOutcome {
    let n = cloud.count();
    assert_eq!(stats.len(), n, "densify stats out of sync with the cloud");
    let mut candidates: Vec<(usize, f64)> = (0..n)
        .map(|i| (i, stats.mean(i)))
        .filter(|&(_, g)| g >= cfg.grad_threshold)
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(cfg.max_gaussians.saturating_sub(n));
    candidates.sort_by_key(|c| c.0);

    let mut outcome = DensifyOutcome::default();
    let mut remove = vec![false; n];
    for &(i, _) in &candidates {
        let max_scale = cloud.log_scales[i].iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        if max_scale <= cfg.split_scale {
            copy_row(cloud, i);
            outcome.cloned += 1;
        } else {
            let r = quat_to_matrix(&cloud.rotations[i]);
            let s = cloud.log_scales[i].map(f64::exp);
            for _ in 0..2 {
                let z = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal) * s[0],
                    rng.sample::<f64, _>(StandardNormal) * s[1],
                    rng.sample::<f64, _>(StandardNormal) * s[2],
                );
                let offset = r * z;
                copy_row(cloud, i);
                let j = cloud.count() - 1;
                for a in 0..3 {
                    cloud.positions[j][a] += offset[a];
                    cloud.log_scales[j][a] -= SPLIT_SCALE_FACTOR.ln();
                }
            }
            remove[i] = true;
            outcome.split += 1;
        }
    }
    let added = cloud.count() - n;
    optimizer.append(added, cloud);

    let keep: Vec<bool> = (0..cloud.count())
        .map(|i| !(i < n && remove[i]) && sigmoid(cloud.opacity_logits[i]) >= cfg.opacity_prune_threshold)
        .collect();
    outcome.pruned = keep.iter().filter(|k| !**k).count() - outcome.split;
    cloud.retain_mask(&keep);
    optimizer.retain(&keep, cloud);
    *stats = DensifyStats::new(cloud.count());
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::logit;
    use crate::optim::AdamHyper;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(opacities: &[f64], log_scale: f64) -> GaussianCloud {
        let mut c = GaussianCloud::empty(0);
        for (i, &o) in opacities.iter().enumerate() {
            c.push_colored([i as f64, 0.0, 2.0], [1.0, 0.0, 0.0, 0.0], [log_scale; 3], logit(o), [0.5; 3]);
        }
        c
    }

    fn cfg() -> DensifyConfig {
        DensifyConfig {
            grad_threshold: 2e-4,
            opacity_prune_threshold: 0.005,
            split_scale: 0.05,
            max_gaussians: 100,
        }
    }

    fn stats_with(n: usize, hot: Option<usize>) -> DensifyStats {
        let mut s = DensifyStats::new(n);
        for i in 0..n {
            s.count[i] = 2;
            s.accum[i] = if Some(i) == hot { 2.0 * 1e-3 } else { 2.0 * 1e-5 };
        }
        s
    }

    #[test]
    fn quiet_opaque_cloud_is_unchanged() {
        let mut c = cloud(&[0.9, 0.8, 0.7], (0.01f64).ln());
        let before = c.clone();
        let mut s = stats_with(3, None);
        let mut opt = CloudOptimizer::new(&c, AdamHyper::default());
        let out = densify_and_prune(&mut c, &mut s, &mut opt, &cfg(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out, DensifyOutcome::default());
        assert_eq!(c, before);
    }

    #[test]
    fn small_hot_gaussian_is_cloned_once() {
        let mut c = cloud(&[0.9, 0.8, 0.7], (0.01f64).ln());
        let mut s = stats_with(3, Some(1));
        let mut opt = CloudOptimizer::new(&c, AdamHyper::default());
        opt.groups[0].m.iter_mut().for_each(|m| *m = 1.0);
        let out = densify_and_prune(&mut c, &mut s, &mut opt, &cfg(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.cloned, 1);
        assert_eq!(c.count(), 4);
        assert_eq!(c.positions[3], c.positions[1]);
        assert_eq!(opt.groups[0].m.len(), 12);
        assert!(opt.groups[0].m[9..].iter().all(|&m| m == 0.0));
        assert!(opt.groups[0].m[..9].iter().all(|&m| m == 1.0));
        assert_eq!(s, DensifyStats::new(4));
    }

    #[test]
    fn large_hot_gaussian_is_split_with_shrunk_scales() {
        let mut c = cloud(&[0.9, 0.8], (0.2f64).ln());
        let mut s = stats_with(2, Some(0));
        let mut opt = CloudOptimizer::new(&c, AdamHyper::default());
        let out = densify_and_prune(&mut c, &mut s, &mut opt, &cfg(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!((out.split, out.cloned, out.pruned), (1, 0, 0));
        assert_eq!(c.count(), 3);
        for j in 1..3 {
            assert!((c.log_scales[j][0].exp() - 0.2 / 1.6).abs() < 1e-12);
            assert!(c.positions[j].iter().all(|v| v.is_finite()));
        }
        assert_eq!(c.positions[0], [1.0, 0.0, 2.0]);
    }

    #[test]
    fn transparent_gaussian_is_pruned() {
        let mut c = cloud(&[0.9, 1e-4, 0.7], (0.01f64).ln());
        let mut s = stats_with(3, None);
        let mut opt = CloudOptimizer::new(&c, AdamHyper::default());
        let out = densify_and_prune(&mut c, &mut s, &mut opt, &cfg(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.pruned, 1);
        assert_eq!(c.count(), 2);
        assert_eq!(c.positions[1], [2.0, 0.0, 2.0]);
        assert_eq!(opt.groups[3].m.len(), 2);
    }

    #[test]
    fn cap_limits_growth() {
        let mut c = cloud(&[0.9, 0.8, 0.7], (0.01f64).ln());
        let mut s = DensifyStats::new(3);
        s.count.fill(1);
        s.accum = vec![1e-3, 3e-3, 2e-3];
        let mut opt = CloudOptimizer::new(&c, AdamHyper::default());
        let cfg = DensifyConfig {
            max_gaussians: 4,
            ..cfg()
        };
        densify_and_prune(&mut c, &mut s, &mut opt, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(c.count(), 4);
        assert_eq!(c.positions[3], [1.0, 0.0, 2.0]);
    }
}
