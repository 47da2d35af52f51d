//! AdamW with a step learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Params;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: Some(0.1),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("AdamW betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "AdamW eps must be positive and weight decay non-negative".into(),
            ));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("gradient clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate `base`, multiplied by `factor` once per passed milestone.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr(&self, iter: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| iter >= m).count();
        self.base * self.factor.powi(drops as i32)
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

/// Global L2 norm of a set of named gradients.
pub fn grad_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`; parameters without a
    /// gradient entry are left untouched, decay included.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut Params<T>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        let c = &self.cfg;
        let clip = match c.clip_norm {
            Some(max) => {
                let n = grad_norm(grads);
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("gradient for unknown parameter `{name}`")))?;
            if p.len() != g.len() {
                return Err(Error::Dimension {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] * clip;
                mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * gi;
                mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = mo.m[i] / bc1;
                let vh = mo.v[i] / bc2;
                let x = w.as_f64();
                *w = T::from_f64(x - lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * x));
            }
        }
        Ok(())
    }
}
