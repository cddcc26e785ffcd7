use serde::{Deserialize, Serialize};

use super::params::ParamTensor;
use super::{NnError, Result};

/// Adam hyper-parameters. Defaults: betas (0.9, 0.999), eps 1e-8, no decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: AsRef<ParamTensor>>(cfg: AdamConfig, params: &[P]) -> Self {
        AdamState {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.as_ref().len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.as_ref().len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update, in place. `grads` must align with
/// `params`; a non-finite gradient aborts the step and names the parameter.
/// Weight decay is added to the gradient (coupled L2 form).
pub fn adam_step<P: AsMut<ParamTensor>>(
    state: &mut AdamState,
    params: &mut [P],
    grads: &[Vec<f64>],
    lr: f64,
) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
    for (p, g) in params.iter_mut().zip(grads) {
        let p = p.as_mut();
        assert_eq!(p.len(), g.len(), "gradient size mismatch for {}", p.name);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteGradient(p.name.clone()));
        }
    }

    state.step += 1;
    let t = state.step;
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.cfg;
    let bias1 = 1.0 - beta1.powi(t as i32);
    let bias2 = 1.0 - beta2.powi(t as i32);

    for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let p = p.as_mut();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..p.values.len() {
            let grad = g[i] + weight_decay * p.values[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
