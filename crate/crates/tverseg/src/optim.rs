//! Adam with bias-corrected moments and a stepped learning-rate decay:
//! the effective rate is base_lr * decay_factor^floor(t / decay_every).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::unet::NetParams;
use crate::nn::KernelGrad;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: u64,
}

fn default_base_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_decay_factor() -> f64 {
    0.9
}
fn default_decay_every() -> u64 {
    1000
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            base_lr: default_base_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            decay_factor: default_decay_factor(),
            decay_every: default_decay_every(),
        }
    }
}

#[derive(Debug, Clone)]
struct MomentBlock {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Optimizer state: first/second moments shaped like the parameters plus the
/// completed-step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    step: u64,
    m: Vec<MomentBlock>,
    v: Vec<MomentBlock>,
}

impl AdamState {
    pub fn new(params: &NetParams, hyper: AdamHyper) -> Self {
        let blocks: Vec<MomentBlock> = params
            .layers
            .iter()
            .map(|layer| MomentBlock {
                weights: vec![0.0; layer.kernel.weights.len()],
                bias: vec![0.0; layer.kernel.bias.len()],
            })
            .collect();
        AdamState {
            hyper,
            step: 0,
            m: blocks.clone(),
            v: blocks,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate in effect at completed-step count `t`.
    pub fn effective_lr(&self, t: u64) -> f64 {
        self.hyper.base_lr * self.hyper.decay_factor.powi((t / self.hyper.decay_every) as i32)
    }
}

fn update_block(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hyper: &AdamHyper,
    t: u64,
    lr: f64,
) {
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + hyper.adam_eps);
    }
}

/// One Adam step over all parameters in place.
pub fn adam_step(params: &mut NetParams, grads: &[KernelGrad], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.layers.len() || grads.len() != state.m.len() {
        return Err(Error::shape_mismatch(
            "adam gradients",
            params.layers.len(),
            grads.len(),
        ));
    }
    for ((layer, grad), (m, v)) in params
        .layers
        .iter()
        .zip(grads)
        .zip(state.m.iter().zip(state.v.iter()))
    {
        if grad.d_weights.len() != layer.kernel.weights.len()
            || grad.d_bias.len() != layer.kernel.bias.len()
            || m.weights.len() != layer.kernel.weights.len()
            || v.bias.len() != layer.kernel.bias.len()
        {
            return Err(Error::shape_mismatch(
                format!("adam gradient for layer {}", layer.name),
                layer.kernel.weights.shape(),
                grad.d_weights.shape(),
            ));
        }
    }

    state.step += 1;
    let t = state.step;
    let lr = state.effective_lr(t);
    for ((layer, grad), (m, v)) in params
        .layers
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        update_block(
            layer.kernel.weights.data_mut(),
            grad.d_weights.data(),
            &mut m.weights,
            &mut v.weights,
            &state.hyper,
            t,
            lr,
        );
        update_block(
            &mut layer.kernel.bias,
            &grad.d_bias,
            &mut m.bias,
            &mut v.bias,
            &state.hyper,
            t,
            lr,
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{init_params, NetConfig};

    fn tiny_params() -> (NetConfig, NetParams) {
        let cfg = NetConfig {
            input_shape: [4, 4, 4],
            in_channels: 1,
            levels: 1,
            base_features: 1,
            out_classes: 2,
            use_bias: true,
            seed: 3,
        };
        let params = init_params(&cfg).unwrap();
        (cfg, params)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (_, mut params) = tiny_params();
        let before = params.clone();
        let grads = params.zero_grads();
        let mut state = AdamState::new(&params, AdamHyper::default());
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn scalar_first_step_moves_by_learning_rate() {
        let hyper = AdamHyper {
            base_lr: 0.1,
            ..AdamHyper::default()
        };
        let mut theta = [1.0];
        let grad = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        update_block(&mut theta, &grad, &mut m, &mut v, &hyper, 1, 0.1);
        // m_hat = v_hat = 1 at t = 1, so the update is -lr/(1 + eps)
        assert!((theta[0] - 0.9).abs() < 1e-8, "theta = {}", theta[0]);
    }

    #[test]
    fn learning_rate_decays_by_factor_at_each_multiple() {
        let (_, params) = tiny_params();
        let state = AdamState::new(&params, AdamHyper::default());
        let base = state.hyper.base_lr;
        assert_eq!(state.effective_lr(1), base);
        assert_eq!(state.effective_lr(999), base);
        assert!((state.effective_lr(1000) - 0.9 * base).abs() < 1e-18);
        assert!((state.effective_lr(1999) - 0.9 * base).abs() < 1e-18);
        assert!((state.effective_lr(2000) - 0.81 * base).abs() < 1e-18);
    }

    #[test]
    fn learning_rate_schedule_is_nonincreasing() {
        let (_, params) = tiny_params();
        let state = AdamState::new(
            &params,
            AdamHyper {
                decay_every: 7,
                ..AdamHyper::default()
            },
        );
        let mut prev = f64::INFINITY;
        for t in 1..100 {
            let lr = state.effective_lr(t);
            assert!(lr <= prev);
            if t % 7 == 0 {
                assert!((lr - state.effective_lr(t - 1) * 0.9).abs() < 1e-18);
            }
            prev = lr;
        }
    }

    #[test]
    fn mismatched_gradient_count_is_rejected() {
        let (_, mut params) = tiny_params();
        let mut grads = params.zero_grads();
        grads.pop();
        let mut state = AdamState::new(&params, AdamHyper::default());
        assert!(adam_step(&mut params, &grads, &mut state).is_err());
    }
}
