use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelParams;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    /// Adam with coupled (L2) weight decay added to the gradient.
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, flattened in parameter visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Real> AdamState<F> {
    pub fn new(num_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![F::zero(); num_params],
            v: vec![F::zero(); num_params],
        }
    }
}

pub fn adam_update<F: Real>(
    params: &mut ModelParams<F>,
    grad: &ModelParams<F>,
    state: &mut AdamState<F>,
    optimizer: &Optimizer,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    let Optimizer::Adam {
        beta1,
        beta2,
        epsilon,
    } = *optimizer;
    state.step += 1;
    let t = state.step as i32;
    let correction1 = F::lit(1.0 - beta1.powi(t));
    let correction2 = F::lit(1.0 - beta2.powi(t));
    let (b1, b2) = (F::lit(beta1), F::lit(beta2));
    let (lr, wd, eps) = (F::lit(learning_rate), F::lit(weight_decay), F::lit(epsilon));

    let mut theta = params.to_flat();
    let g = grad.to_flat();
    for i in 0..theta.len() {
        let gi = g[i] + wd * theta[i];
        state.m[i] = b1 * state.m[i] + (F::one() - b1) * gi;
        state.v[i] = b2 * state.v[i] + (F::one() - b2) * gi * gi;
        let m_hat = state.m[i] / correction1;
        let v_hat = state.v[i] / correction2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    params.assign_flat(&theta)
}
