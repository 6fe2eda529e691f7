//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ParameterVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWHyper {
    /// Problems with the hyperparameters, one message per field.
    /// A zero learning rate is allowed here as a null optimizer; `adamw_init`
    /// is stricter.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            out.push(format!("optimizer.lr: {} is not a finite non-negative number", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            out.push(format!("optimizer.beta1: {} is outside [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            out.push(format!("optimizer.beta2: {} is outside [0, 1)", self.beta2));
        }
        if !(self.eps > 0.0) {
            out.push(format!("optimizer.eps: {} is not positive", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(format!("optimizer.weight_decay: {} is negative", self.weight_decay));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub hyper: AdamWHyper,
}

pub fn adamw_init(param_count: usize, hyper: AdamWHyper) -> Result<AdamWState> {
    let mut problems = hyper.problems();
    if hyper.lr == 0.0 {
        problems.push("optimizer.lr: must be positive".into());
    }
    if !problems.is_empty() {
        return Err(Error::InvalidConfig(problems));
    }
    Ok(AdamWState::fresh(param_count, hyper))
}

impl AdamWState {
    /// Zeroed state without the strict learning-rate check, so `lr = 0`
    /// can serve as a null optimizer.
    pub fn fresh(param_count: usize, hyper: AdamWHyper) -> Self {
        AdamWState {
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            hyper,
        }
    }

    /// One in-place AdamW step. Decay uses the pre-step weights.
    pub fn step_in_place(&mut self, w: &mut ParameterVector, grad: &[f64]) -> Result<()> {
        if grad.len() != w.len() || self.m.len() != w.len() {
            return Err(Error::LayoutMismatch(format!(
                "optimizer holds {} entries, weights {}, gradient {}",
                self.m.len(),
                w.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: w.layout().name_at(i).unwrap_or("?").to_string(),
                index: i,
            });
        }
        let h = self.hyper;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - h.beta1.powi(t);
        let c2 = 1.0 - h.beta2.powi(t);
        let shrink = 1.0 - h.lr * h.weight_decay;
        for (((wi, &g), m), v) in w.values_mut().iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *wi = *wi * shrink - h.lr * mhat / (vhat.sqrt() + h.eps);
        }
        Ok(())
    }
}

/// Functional form: returns the advanced state and the new weights.
pub fn adamw_step(state: &AdamWState, w: &ParameterVector, grad: &ParameterVector) -> Result<(AdamWState, ParameterVector)> {
    w.check_layout(grad)?;
    let (mut s, mut out) = (state.clone(), w.clone());
    s.step_in_place(&mut out, grad.values())?;
    Ok((s, out))
}
