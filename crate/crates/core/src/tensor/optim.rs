use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Momentum SGD state. Weight decay is folded into the gradient as an L2 term.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "optimizer needs lr > 0, momentum in [0,1), decay >= 0; got {learning_rate}, {momentum}, {weight_decay}"
            )));
        }
        let velocity = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity,
        })
    }
}

/// `v <- momentum * v + (g + decay * w)`, `w <- w - lr * v`.
pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::InvalidArgument("optimizer state does not match parameter set".into()));
    }
    for idx in 0..store.len() {
        if grads.get(idx).is_none() {
            return Err(Error::MissingGradient(store.name(idx).to_string()));
        }
    }
    for idx in 0..store.len() {
        let g = grads.get(idx).expect("checked above");
        let v = &mut state.velocity[idx];
        let w = store.tensor_mut(idx).data_mut();
        if g.len() != w.len() || v.len() != w.len() {
            return Err(Error::shape("sgd_step", &[w.len()], &[g.len()]));
        }
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = state.momentum * *vi + gi + state.weight_decay * *wi;
            *wi -= state.learning_rate * *vi;
        }
    }
    Ok(())
}
