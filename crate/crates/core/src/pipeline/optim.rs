//! Learning-rate schedule, provenance-keyed parameter groups and AdamW.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamStore, Provenance};
use crate::tensor::Mat;

/// Number of warm-up steps, `ceil(ratio * total)`.
pub fn warmup_steps(total: usize, warmup_ratio: f64) -> usize {
    // Guards products like 0.06 * 100 that land a hair above an integer.
    ((warmup_ratio * total as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Linear warm-up from 0 to `peak`, then linear decay to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> Result<f64> {
    if step > total {
        return Err(Error::rejected(format!("step {step} beyond schedule of {total} steps")));
    }
    let warm = warmup_steps(total, warmup_ratio);
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    if total == warm {
        return Ok(peak);
    }
    Ok(peak * (total - step) as f64 / (total - warm) as f64)
}

/// Tensor names split by learning-rate group.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamGroups {
    /// Created in the running stage.
    pub fresh: Vec<String>,
    /// Carried over from a pretrained model or an earlier stage.
    pub carried: Vec<String>,
}

impl ParamGroups {
    pub fn param_counts(&self, store: &ParamStore) -> (usize, usize) {
        let count = |names: &[String]| {
            names
                .iter()
                .map(|n| store.get(n).map_or(0, Mat::len))
                .sum()
        };
        (count(&self.fresh), count(&self.carried))
    }
}

pub fn group_params(store: &ParamStore, stage: u8) -> ParamGroups {
    let mut groups = ParamGroups::default();
    for (name, t) in store.iter() {
        if t.provenance == Provenance::Stage(stage) {
            groups.fresh.push(name.clone());
        } else {
            groups.carried.push(name.clone());
        }
    }
    groups
}

/// Per-tensor learning rate for `stage` at schedule value `lr`.
pub fn group_lr(provenance: Provenance, stage: u8, lr: f64, ratio: f64) -> f64 {
    if provenance == Provenance::Stage(stage) {
        lr
    } else {
        lr * ratio
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every tensor that has a gradient, at the rate `lr_of(name)`.
    /// Tensors without a gradient are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Mat>,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let lr = lr_of(name);
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient shape mismatch for '{name}'")));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let update = (*mv / c1) / ((*vv / c2).sqrt() + eps);
                *pv -= lr * (update + wd * *pv);
            }
        }
        Ok(())
    }
}
