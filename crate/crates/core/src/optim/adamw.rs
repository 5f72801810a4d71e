use crate::error::{Error, Result};
use crate::optim::OptimizerConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// Bias-corrected AdamW with decoupled weight decay. Returns the update direction
/// `m̂ / (√v̂ + ε)`.
pub fn adamw_step(
    w: &mut Tensor,
    g: &Tensor,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<Tensor> {
    if w.shape() != g.shape() || w.shape() != state.m.shape() {
        return Err(Error::shapes("adamw_step", w.shape(), g.shape()));
    }
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("learning rate must be > 0, got {lr}")));
    }
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let mut direction = Tensor::zeros(w.shape());
    let it = w
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(state.m.data_mut().iter_mut().zip(state.v.data_mut()))
        .zip(direction.data_mut());
    for (((wi, &gi), (mi, vi)), di) in it {
        *mi = b1 * *mi + (1.0 - b1) * gi;
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        let u = (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
        *di = u;
        *wi -= lr * (u + cfg.lambda * *wi);
    }
    Ok(direction)
}
