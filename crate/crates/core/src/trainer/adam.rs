use crate::ad::Tensor;
use crate::error::{Error, Result};
use crate::net::NetParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in canonical tensor order.
pub fn adam_step(
    params: &mut NetParams,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let count = params.tensors().count();
    if grads.len() != count || state.first.len() != count || state.second.len() != count {
        return Err(Error::Contract(format!(
            "adam: {count} parameter tensors, {} gradients, {}/{} moments",
            grads.len(),
            state.first.len(),
            state.second.len()
        )));
    }
    for (k, (p, g)) in params.tensors().zip(grads).enumerate() {
        if p.shape() != g.shape()
            || p.shape() != state.first[k].shape()
            || p.shape() != state.second[k].shape()
        {
            return Err(Error::Contract(format!(
                "adam: gradient {k} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (k, p) in params.tensors_mut().enumerate() {
        let g = grads[k].data();
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
