//! Adam with cosine step-size decay.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Final step size as a fraction of `lr` at the end of the cosine.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            min_lr_ratio: 0.0,
            clip_norm: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.min_lr_ratio)
            && self.clip_norm >= 0.0;
        if !ok {
            bail!(Config, "invalid optimizer settings: {self:?}");
        }
        Ok(())
    }

    /// Step size for 0-based `step` of `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
        let cos = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t));
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    /// Moments keyed by parameter name.
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    /// Apply one update to every trainable parameter that has a gradient.
    /// Returns the global gradient norm before clipping.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        total_steps: u64,
    ) -> f64 {
        let norm = libm::sqrt(
            grads
                .iter()
                .flatten()
                .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>(),
        );
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.config.lr_at(self.step, total_steps);
        self.step += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - libm::pow(b1, self.step as f64);
        let bc2 = 1.0 - libm::pow(b2, self.step as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(Some(grad)) = grads.get(id.index()) else {
                continue;
            };
            let name = String::from(store.name(id));
            let p = store.get_mut(id);
            let mom = self.moments.entry(name).or_insert_with(|| Moments {
                m: alloc::vec![0.0; p.data.len()],
                v: alloc::vec![0.0; p.data.len()],
            });
            for i in 0..p.data.len() {
                let g = grad.data[i] * clip;
                mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
                let mh = mom.m[i] / bc1;
                let vh = mom.v[i] / bc2;
                p.data[i] -= lr * mh / (libm::sqrt(vh) + self.config.eps);
            }
        }
        norm
    }
}
