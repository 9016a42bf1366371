use std::collections::HashMap;

use super::ParameterSet;
use crate::error::{Error, Result};

/// AdamW hyper-parameters (learning rate is supplied per step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers, one pair per trainable entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn tracked(&self) -> usize {
        self.moments.len()
    }
}

/// Linear ramp from 0 to `peak` over `warmup` steps, then constant.
/// Steps are 1-based.
pub fn linear_warmup(step: u64, warmup: u64, peak: f64) -> f64 {
    if warmup == 0 || step >= warmup {
        peak
    } else {
        peak * step as f64 / warmup as f64
    }
}

/// One decoupled-weight-decay Adam update on every trainable entry, then
/// clears all gradients.
pub fn adamw_step(
    params: &mut ParameterSet,
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    for (name, p) in params.iter() {
        if !p.frozen && p.tensor.grad().is_none() {
            return Err(Error::Gradient(format!(
                "trainable parameter `{name}` has no gradient"
            )));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let n = p.tensor.len();
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let data = p.tensor.data_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * hp.weight_decay * data[i];
            data[i] -= lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    params.clear_grads();
    Ok(())
}
