use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::module::{EntryMut, Module};
use super::tensor::Real;
use crate::error::{Result, RsadError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = RsadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(RsadError::config("optimizer", format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl OptimizerSpec {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64, nesterov: bool) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay,
            momentum,
            nesterov,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::Adam,
            lr,
            weight_decay: 0.0,
            momentum: 0.9,
            nesterov: false,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerSpec {
            kind: OptimizerKind::AdamW,
            lr,
            weight_decay,
            momentum: 0.9,
            nesterov: false,
        }
    }
}

/// Step-decay learning-rate schedule. `lr(e) = base * gamma^k` where `k`
/// counts the milestones strictly below the 1-based epoch (or step) `e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStep {
    pub base_lr: f64,
    pub milestones: Vec<u64>,
    pub gamma: f64,
}

impl MultiStep {
    pub fn new(base_lr: f64, milestones: Vec<u64>, gamma: f64) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RsadError::config(
                "milestones",
                format!("must be strictly increasing, got {milestones:?}"),
            ));
        }
        Ok(MultiStep {
            base_lr,
            milestones,
            gamma,
        })
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m < epoch).count();
        self.base_lr * self.gamma.powi(passed as i32)
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter moment buffers, keyed by parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: BTreeMap<String, Vec<T>>,
    pub second: BTreeMap<String, Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub spec: OptimizerSpec,
    pub state: OptimizerState<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(spec: OptimizerSpec) -> Self {
        Optimizer {
            spec,
            state: OptimizerState::default(),
        }
    }

    /// Applies one update to every parameter of `module` at learning rate `lr`.
    pub fn step(&mut self, module: &mut dyn Module<T>, lr: f64) {
        self.state.step += 1;
        let spec = self.spec.clone();
        let t = self.state.step as i32;
        let state = &mut self.state;
        module.visit_mut("", &mut |name, entry| {
            let EntryMut::Param(p) = entry else { return };
            let n = p.value.len();
            match spec.kind {
                OptimizerKind::Sgd => {
                    let buf = state
                        .first
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); n]);
                    let (mom, wd, lr) = (T::c(spec.momentum), T::c(spec.weight_decay), T::c(lr));
                    let first_step = t == 1;
                    for ((w, &g), b) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(buf.iter_mut()) {
                        let g = g + wd * *w;
                        *b = if first_step { g } else { mom * *b + g };
                        let d = if spec.nesterov { g + mom * *b } else { *b };
                        *w -= lr * d;
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let m = state
                        .first
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); n]);
                    let v = state
                        .second
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); n]);
                    let (b1, b2) = (T::c(ADAM_BETA1), T::c(ADAM_BETA2));
                    let bc1 = T::one() - b1.powi(t);
                    let bc2 = T::one() - b2.powi(t);
                    let (lr_t, wd, eps) = (T::c(lr), T::c(spec.weight_decay), T::c(ADAM_EPS));
                    let decoupled = spec.kind == OptimizerKind::AdamW;
                    for (((w, &g), mi), vi) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let g = if decoupled { g } else { g + wd * *w };
                        if decoupled {
                            *w -= lr_t * wd * *w;
                        }
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::module::{Entry, Param};
    use crate::nn::tensor::Tensor;
    use crate::nn::module::join;

    struct Quad {
        p: Param<f64>,
    }

    impl Module<f64> for Quad {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, f64>)) {
            f(&join(prefix, "p"), Entry::Param(&self.p));
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, f64>)) {
            f(&join(prefix, "p"), EntryMut::Param(&mut self.p));
        }
    }

    fn minimize(spec: OptimizerSpec, steps: usize) -> f64 {
        let mut q = Quad {
            p: Param::new(Tensor::from_vec(&[2], vec![3.0, -2.0])),
        };
        let mut opt = Optimizer::new(spec.clone());
        for _ in 0..steps {
            q.zero_grad();
            let v = q.p.value.data().to_vec();
            q.p.grad.data_mut().copy_from_slice(&[2.0 * v[0], 2.0 * v[1]]);
            opt.step(&mut q, spec.lr);
        }
        q.p.value.data().iter().map(|x| x * x).sum()
    }

    #[test]
    fn every_optimizer_descends_a_quadratic() {
        assert!(minimize(OptimizerSpec::sgd(0.1, 0.9, 0.0, true), 200) < 1e-6);
        assert!(minimize(OptimizerSpec::sgd(0.1, 0.0, 0.0, false), 200) < 1e-6);
        assert!(minimize(OptimizerSpec::adam(0.05), 500) < 1e-3);
        assert!(minimize(OptimizerSpec::adamw(0.05, 0.01), 500) < 1e-3);
    }

    #[test]
    fn multistep_matches_resnet_recipe() {
        let s = MultiStep::new(0.001, vec![75, 150], 0.1).unwrap();
        assert!((s.lr_at(1) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(75) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(76) - 0.0001).abs() < 1e-15);
        assert!((s.lr_at(151) - 0.00001).abs() < 1e-15);
        assert!(MultiStep::new(0.1, vec![10, 10], 0.1).is_err());
    }
}
