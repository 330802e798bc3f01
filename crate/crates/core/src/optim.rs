//! Stochastic gradient descent with a step-decay learning rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{ApnError, Result};
use crate::params::ParamSet;
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Learning-rate schedule and momentum. The rate at epoch `e` is
/// `learning_rate * decay_factor^(e / decay_every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdState {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub momentum: f64,
}

impl Default for SgdState {
    fn default() -> Self {
        SgdState { learning_rate: 0.001, decay_factor: 0.1, decay_every: 30, momentum: 0.9 }
    }
}

impl SgdState {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(ApnError::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(ApnError::Config(format!("decay factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_every == 0 {
            return Err(ApnError::Config("decay_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ApnError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// Sum of per-example gradients, averaged on demand.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    sums: Vec<Option<Tensor>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new(num_slots: usize) -> Self {
        GradAccumulator { sums: vec![None; num_slots], count: 0 }
    }

    pub fn add(&mut self, grads: &Gradients) -> Result<()> {
        for (slot, sum) in self.sums.iter_mut().enumerate() {
            if let Some(g) = grads.param(slot) {
                match sum {
                    Some(s) => s.axpy(1.0, g)?,
                    None => *sum = Some(g.clone()),
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self, slot: usize) -> Option<Tensor> {
        let c = self.count.max(1) as f64;
        self.sums[slot].as_ref().map(|t| t.scale(1.0 / c))
    }
}

/// Plain or heavy-ball SGD over a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub state: SgdState,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(state: SgdState, num_slots: usize) -> Self {
        Sgd { state, velocity: vec![None; num_slots] }
    }

    /// `θ ← θ − α v`, where `v ← μ v + g` and `g` is the averaged gradient.
    pub fn step(&mut self, params: &mut ParamSet, acc: &GradAccumulator, epoch: usize) -> Result<()> {
        let lr = self.state.lr_at_epoch(epoch);
        let mu = self.state.momentum;
        for slot in 0..params.len() {
            let Some(g) = acc.mean(slot) else { continue };
            let v = match self.velocity[slot].take() {
                Some(mut v) if mu > 0.0 => {
                    for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                        *vi = mu * *vi + gi;
                    }
                    v.normalize_precision();
                    v
                }
                _ => g,
            };
            let p = params.get_mut(slot);
            p.axpy(-lr, &v)?;
            if !p.is_finite() {
                return Err(ApnError::Domain(format!("parameter `{}` diverged", params.name(slot))));
            }
            self.velocity[slot] = Some(v);
        }
        Ok(())
    }
}
