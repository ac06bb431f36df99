//! SGD with momentum and RMSProp, with step-decayed learning rate and
//! decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Rmsprop,
}

/// Multiply the learning rate by `factor` every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub factor: f64,
    pub every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_rms_decay")]
    pub rms_decay: f64,
    #[serde(default = "default_rms_epsilon")]
    pub rms_epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_decay: Option<LrDecay>,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_rms_decay() -> f64 {
    0.9
}
fn default_rms_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            rms_decay: default_rms_decay(),
            rms_epsilon: default_rms_epsilon(),
            weight_decay: 0.0,
            lr_decay: None,
        }
    }

    pub fn rmsprop(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Rmsprop,
            momentum: 0.0,
            ..Self::sgd(learning_rate, 0.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return Err(Error::config("rms_decay must lie in (0, 1)"));
        }
        if !(self.rms_epsilon >= 0.0) {
            return Err(Error::config("rms_epsilon must be non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0) || d.every == 0 {
                return Err(Error::config("lr_decay needs a positive factor and period"));
            }
        }
        Ok(())
    }

    /// Learning rate in effect at (zero-based) step `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.lr_decay {
            Some(d) => self.learning_rate * d.factor.powi((step / d.every) as i32),
            None => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Velocity (SGD) or running mean of squared gradients (RMSProp).
    slots: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimizerState {
            slots: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &[Tensor] {
        &self.slots
    }
}

/// Applies one update in place. `names` label parameters in error messages.
pub fn step(params: &mut [Tensor], grads: &[Tensor], names: &[String], state: &mut OptimizerState, config: &OptimizerConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(Error::config(format!(
            "optimizer got {} params, {} grads, {} slots",
            params.len(),
            grads.len(),
            state.slots.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                step: state.step,
                param: names.get(i).cloned().unwrap_or_else(|| format!("param{i}")),
            });
        }
    }
    let lr = config.learning_rate_at(state.step);
    let decay = lr * config.weight_decay;
    for ((p, g), slot) in params.iter_mut().zip(grads).zip(state.slots.iter_mut()) {
        let (p, g, s) = (p.data_mut(), g.data(), slot.data_mut());
        if decay != 0.0 {
            p.iter_mut().for_each(|w| *w -= decay * *w);
        }
        match config.kind {
            OptimizerKind::SgdMomentum => {
                for ((w, &gi), v) in p.iter_mut().zip(g).zip(s.iter_mut()) {
                    *v = config.momentum * *v + gi;
                    *w -= lr * *v;
                }
            }
            OptimizerKind::Rmsprop => {
                let rho = config.rms_decay;
                for ((w, &gi), ms) in p.iter_mut().zip(g).zip(s.iter_mut()) {
                    *ms = rho * *ms + (1.0 - rho) * gi * gi;
                    *w -= lr * gi / (*ms + config.rms_epsilon).sqrt();
                }
            }
        }
    }
    state.step += 1;
    Ok(())
}
