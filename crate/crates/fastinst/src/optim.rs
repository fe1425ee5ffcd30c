//! AdamW with decoupled weight decay and the step learning-rate schedule
//! (decay by a fixed factor at given fractions of total training).

use std::collections::BTreeMap;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::VarStore;
use crate::tensor::Elem;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers per parameter plus the shared step count.
pub struct AdamW<E: Elem> {
    pub state: BTreeMap<String, (Vec<E>, Vec<E>)>,
    pub step: u64,
    pub weight_decay: f64,
}

impl<E: Elem> AdamW<E> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            state: BTreeMap::new(),
            step: 0,
            weight_decay,
        }
    }

    /// One decoupled-weight-decay Adam step over the store. Parameters
    /// whose name starts with `backbone.` use `lr_backbone`, all others
    /// `lr_main`. Rejects non-finite gradients without touching any
    /// parameter.
    pub fn step(&mut self, vs: &VarStore<E>, lr_main: f64, lr_backbone: f64) -> Result<()> {
        for (name, t) in vs.iter() {
            let g = t
                .grad()
                .ok_or_else(|| Error::invalid(format!("adamw: `{name}` has no gradient")))?;
            if g.iter().any(|v| !v.to_f64().is_finite()) {
                return Err(Error::NonFinite(format!(
                    "adamw: non-finite gradient in `{name}`; step rejected"
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for (name, param) in vs.iter() {
            let lr = if name.starts_with("backbone.") {
                lr_backbone
            } else {
                lr_main
            };
            let g = param.grad().expect("checked above");
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![E::ZERO; g.len()], vec![E::ZERO; g.len()]));
            let mut data = param.to_vec();
            for i in 0..g.len() {
                let gi = g[i].to_f64();
                let mi = ADAM_BETA1 * m[i].to_f64() + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v[i].to_f64() + (1.0 - ADAM_BETA2) * gi * gi;
                m[i] = E::from_f64(mi);
                v[i] = E::from_f64(vi);
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let update = lr * self.weight_decay * data[i].to_f64()
                    + lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                data[i] = E::from_f64(data[i].to_f64() - update);
            }
            param.set_data(&data);
        }
        Ok(())
    }

    /// Flatten optimizer state for checkpointing (`opt/` namespace).
    pub fn export(&self) -> Vec<(String, Vec<E>, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, (m, v)) in &self.state {
            out.push((format!("opt/{name}/m"), m.clone(), vec![m.len()]));
            out.push((format!("opt/{name}/v"), v.clone(), vec![v.len()]));
        }
        out.push((
            "opt/step".to_string(),
            vec![E::from_f64(self.step as f64)],
            vec![1],
        ));
        out
    }

    pub fn import(&mut self, entries: &[(String, Vec<E>)]) {
        self.state.clear();
        for (name, data) in entries {
            if name == "opt/step" {
                self.step = data[0].to_f64() as u64;
            } else if let Some(rest) = name.strip_prefix("opt/") {
                if let Some(stripped) = rest.strip_suffix("/m") {
                    self.state
                        .entry(stripped.to_string())
                        .or_insert_with(|| (vec![], vec![]))
                        .0 = data.clone();
                } else if let Some(stripped) = rest.strip_suffix("/v") {
                    self.state
                        .entry(stripped.to_string())
                        .or_insert_with(|| (vec![], vec![]))
                        .1 = data.clone();
                }
            }
        }
    }
}

/// Piecewise-constant schedule: the base rate is multiplied by
/// `decay_factor` after each fraction in `decay_fractions` of the total
/// iterations; the backbone always runs at `backbone_lr_mult` times the
/// main rate.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> (f64, f64) {
    let frac = iter as f64 / cfg.total_iters as f64;
    let mut lr = cfg.base_lr;
    for &boundary in &cfg.decay_fractions {
        if frac >= boundary {
            lr *= cfg.decay_factor;
        }
    }
    (lr, lr * cfg.backbone_lr_mult)
}
