use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, base_lr: f64, max_iter: usize, power: f64) -> f64 {
    let frac = (iter.min(max_iter) as f64) / max_iter as f64;
    base_lr * (1.0 - frac).powf(power)
}

/// Velocity buffers mirroring the parameter registry.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub iteration: usize,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        OptimizerState {
            velocity: params.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            iteration: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdStep {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Classical momentum with decay folded into the gradient:
/// `g' = g + wd * theta; v = mu * v + g'; theta -= lr * v`.
/// Decay applies only to parameters flagged for it (conv/deconv kernels).
pub fn sgd_step(params: &mut ParamStore, state: &mut OptimizerState, step: SgdStep) -> Result<()> {
    if state.velocity.len() != params.params().len() {
        return Err(Error::ShapeMismatch {
            node: "sgd_step".into(),
            expected: format!("{} velocity buffers", params.params().len()),
            actual: format!("{}", state.velocity.len()),
        });
    }
    for (p, v) in params.params().iter().zip(&state.velocity) {
        if p.value.shape() != v.shape() || p.grad.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                node: format!("sgd_step/{}", p.name),
                expected: format!("{:?}", p.value.shape()),
                actual: format!("{:?}", v.shape()),
            });
        }
    }
    for (p, v) in params.params_mut().iter_mut().zip(&mut state.velocity) {
        let wd = if p.decay { step.weight_decay } else { 0.0 };
        let theta = p.value.data_mut();
        for ((t, vel), &g) in theta.iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
            let g = g + wd * *t;
            *vel = step.momentum * *vel + g;
            *t -= step.lr * *vel;
        }
    }
    state.iteration += 1;
    Ok(())
}
