//! Adam with per-group moment buffers that follow densification.

use serde::{Deserialize, Serialize};

use crate::gaussians::{CloudGradients, CloudGroup, GaussianCloud};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Outcome of one group update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was not finite; parameters and state are untouched.
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Keeps rows of `width` entries where `keep` holds.
    pub fn retain_rows(&mut self, keep: &[bool], width: usize) {
        for buf in [&mut self.m, &mut self.v] {
            let mut out = Vec::with_capacity(buf.len());
            for (row, &k) in buf.chunks(width).zip(keep) {
                if k {
                    out.extend_from_slice(row);
                }
            }
            *buf = out;
        }
    }

    /// Appends zero-initialized moments.
    pub fn extend_zeros(&mut self, len: usize) {
        self.m.resize(self.m.len() + len, 0.0);
        self.v.resize(self.v.len() + len, 0.0);
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, hp: &AdamHyper) -> StepOutcome {
    assert_eq!(params.len(), grads.len(), "adam: parameter/gradient length mismatch");
    assert_eq!(params.len(), state.len(), "adam: parameter/state length mismatch");
    if grads.iter().any(|g| !g.is_finite()) {
        return StepOutcome::SkippedNonFinite;
    }
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    StepOutcome::Applied
}

/// Moment buffers for the five cloud parameter groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudOptimizer {
    pub hyper: AdamHyper,
    /// Indexed like [`CloudGroup::ALL`].
    pub groups: Vec<AdamState>,
}

impl CloudOptimizer {
    pub fn new(cloud: &GaussianCloud, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            groups: CloudGroup::ALL
                .iter()
                .map(|&g| AdamState::new(cloud.group(g).len()))
                .collect(),
        }
    }

    pub fn state(&self, g: CloudGroup) -> &AdamState {
        &self.groups[g as usize]
    }

    /// Updates each group with its learning rate; returns groups skipped for
    /// non-finite gradients.
    pub fn step(
        &mut self,
        cloud: &mut GaussianCloud,
        grads: &CloudGradients,
        lr: impl Fn(CloudGroup) -> f64,
    ) -> Vec<CloudGroup> {
        let mut skipped = Vec::new();
        for g in CloudGroup::ALL {
            let out = adam_step(
                cloud.group_mut(g),
                grads.group(g),
                &mut self.groups[g as usize],
                lr(g),
                &self.hyper,
            );
            if out == StepOutcome::SkippedNonFinite {
                skipped.push(g);
            }
        }
        skipped
    }

    pub fn retain(&mut self, keep: &[bool], cloud: &GaussianCloud) {
        for g in CloudGroup::ALL {
            let w = cloud.group_width(g);
            self.groups[g as usize].retain_rows(keep, w);
        }
    }

    /// Zero moments for `rows` newly appended Gaussians.
    pub fn append(&mut self, rows: usize, cloud: &GaussianCloud) {
        for g in CloudGroup::ALL {
            let w = cloud.group_width(g);
            self.groups[g as usize].extend_zeros(rows * w);
        }
    }
}
