//! Adam with bias-corrected moments.

use std::collections::BTreeMap;

use super::{Param, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|(m, _)| m.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|(_, v)| v.as_slice())
    }

    /// Serialises step counter and moments as named tensors.
    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}step"), Tensor::scalar(self.step as f64))];
        for (name, (m, v)) in &self.moments {
            out.push((format!("{prefix}m.{name}"), Tensor::row(m)));
            out.push((format!("{prefix}v.{name}"), Tensor::row(v)));
        }
        out
    }

    pub fn from_tensors(lr: f64, prefix: &str, entries: &[(String, Tensor)]) -> Result<Self> {
        let mut state = AdamState::new(lr);
        let mut firsts = BTreeMap::new();
        let mut seconds = BTreeMap::new();
        for (name, t) in entries {
            let Some(rest) = name.strip_prefix(prefix) else { continue };
            if rest == "step" {
                state.step = t.item() as u64;
            } else if let Some(p) = rest.strip_prefix("m.") {
                firsts.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = rest.strip_prefix("v.") {
                seconds.insert(p.to_string(), t.data().to_vec());
            }
        }
        for (name, m) in firsts {
            let v = seconds.remove(&name).ok_or_else(|| {
                Error::format("checkpoint", format!("adam second moment missing for '{name}'"))
            })?;
            state.moments.insert(name, (m, v));
        }
        Ok(state)
    }
}

impl AdamState {
    /// Advances the step counter; call once per optimizer step before any
    /// [`update`](Self::update).
    pub fn advance(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter from `grad` using the current step's bias
    /// correction.
    pub fn update(&mut self, p: &mut Param, grad: &[f64]) -> Result<()> {
        let n = p.value.numel();
        if grad.len() != n {
            return Err(Error::Shape {
                op: "adam_update",
                lhs: p.value.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let t = self.step.max(1) as f64;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.epsilon);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let (m, v) = self
            .moments
            .entry(p.name().to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(grad).enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// One Adam update over `params`. Every parameter must carry a gradient;
/// gradients are left untouched.
pub fn adam_step(params: &mut [&mut Param], state: &mut AdamState) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name().to_string()));
    }
    state.advance();
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let r = state.update(p, grad.data());
        p.grad = Some(grad);
        r?;
    }
    Ok(())
}
