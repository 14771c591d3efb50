//! SGD with Nesterov momentum and weight decay.
//!
//! Weight decay applies to conv/linear weights only (never batchnorm
//! parameters or biases). Masked coordinates carry no state: weights and
//! momentum are re-zeroed after every step.

use crate::error::{Error, Result};
use crate::store::ParamStore;
use crate::tensor::{all_finite, Element};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub nesterov: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            nesterov: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0,1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One optimizer step over every trainable entry:
///   d = g + λw,  v ← βv + d,  w ← w − lr·(d + βv)   (Nesterov)
///   w ← w − lr·v otherwise; then w ⊙= m, v ⊙= m.
pub fn step<E: Element>(store: &mut ParamStore<E>, cfg: &OptimConfig, lr: f64) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be > 0")));
    }
    cfg.validate()?;
    let lr = E::from_f64(lr);
    let beta = E::from_f64(cfg.momentum);
    for entry in store.entries_mut() {
        if !entry.kind.trainable() {
            continue;
        }
        let lambda = if entry.kind.decays() {
            E::from_f64(cfg.weight_decay)
        } else {
            E::zero()
        };
        for ((w, g), v) in entry
            .weight
            .data_mut()
            .iter_mut()
            .zip(entry.grad.data().iter())
            .zip(entry.momentum.data_mut().iter_mut())
        {
            let d = *g + lambda * *w;
            *v = beta * *v + d;
            let update = if cfg.nesterov { d + beta * *v } else { *v };
            *w -= lr * update;
        }
        entry.enforce_mask();
        if !all_finite(entry.weight.data()) {
            return Err(Error::Numeric(format!(
                "non-finite update for parameter {}",
                entry.name
            )));
        }
    }
    Ok(())
}

/// Zero every momentum buffer; weights are untouched.
pub fn reset_state<E: Element>(store: &mut ParamStore<E>) {
    for entry in store.entries_mut() {
        entry.momentum.data_mut().fill(E::zero());
    }
}
