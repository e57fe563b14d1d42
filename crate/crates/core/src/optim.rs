//! First-order optimizers over [`ParameterSet`]s.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParameterSet, RoleMask};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptKind {
    Sgd,
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptKind {
    pub fn sgd_momentum() -> Self {
        OptKind::SgdMomentum { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Slot<T> {
    momentum: Vec<T>,
    second: Vec<T>,
}

/// Optimizer state: learning rate, per-parameter auxiliary buffers and a
/// step counter. Buffers are keyed by parameter name and shape-checked.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Element> {
    pub kind: OptKind,
    pub learning_rate: f64,
    step_count: u64,
    slots: HashMap<String, Slot<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptKind, learning_rate: f64) -> Result<Self> {
        if learning_rate < 0.0 {
            return Err(Error::config("learning rate must be non-negative"));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            slots: HashMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the gradients accumulated in `params`.
    ///
    /// Only trainable entries whose role matches `filter` are touched;
    /// everything else is left bit-identical. A filtered-in trainable entry
    /// without a gradient is an error.
    pub fn step(&mut self, params: &mut ParameterSet<T>, filter: Option<RoleMask>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let lr = T::from_f64(self.learning_rate);
        for entry in params.iter_mut() {
            if !entry.tensor.requires_grad() {
                continue;
            }
            if let Some(mask) = filter {
                if !mask.contains(entry.role) {
                    continue;
                }
            }
            let grad = entry
                .tensor
                .grad()
                .ok_or_else(|| Error::MissingGradient(entry.name.clone()))?
                .to_vec();
            let numel = entry.tensor.numel();
            match self.kind {
                OptKind::Sgd => {
                    let data = entry.tensor.data_mut();
                    for (w, g) in data.iter_mut().zip(&grad) {
                        *w = *w - lr * *g;
                    }
                }
                OptKind::SgdMomentum { momentum } => {
                    let slot = self.slots.entry(entry.name.clone()).or_insert_with(|| Slot {
                        momentum: vec![T::zero(); numel],
                        second: Vec::new(),
                    });
                    if slot.momentum.len() != numel {
                        return Err(Error::structure(format!(
                            "optimizer buffer shape changed for '{}'",
                            entry.name
                        )));
                    }
                    let mu = T::from_f64(momentum);
                    let data = entry.tensor.data_mut();
                    for ((w, g), v) in data.iter_mut().zip(&grad).zip(slot.momentum.iter_mut()) {
                        *v = mu * *v + *g;
                        *w = *w - lr * *v;
                    }
                }
                OptKind::Adam { beta1, beta2, eps } => {
                    let slot = self.slots.entry(entry.name.clone()).or_insert_with(|| Slot {
                        momentum: vec![T::zero(); numel],
                        second: vec![T::zero(); numel],
                    });
                    if slot.momentum.len() != numel {
                        return Err(Error::structure(format!(
                            "optimizer buffer shape changed for '{}'",
                            entry.name
                        )));
                    }
                    let b1 = T::from_f64(beta1);
                    let b2 = T::from_f64(beta2);
                    let eps_t = T::from_f64(eps);
                    let corr1 = T::from_f64(1.0 - beta1.powi(t as i32));
                    let corr2 = T::from_f64(1.0 - beta2.powi(t as i32));
                    let data = entry.tensor.data_mut();
                    for (i, (w, g)) in data.iter_mut().zip(&grad).enumerate() {
                        slot.momentum[i] = b1 * slot.momentum[i] + (T::one() - b1) * *g;
                        slot.second[i] = b2 * slot.second[i] + (T::one() - b2) * *g * *g;
                        let m_hat = slot.momentum[i] / corr1;
                        let v_hat = slot.second[i] / corr2;
                        *w = *w - lr * m_hat / (v_hat.sqrt() + eps_t);
                    }
                }
            }
        }
        Ok(())
    }
}
