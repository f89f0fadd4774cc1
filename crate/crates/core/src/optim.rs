use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied as `p ← p − lr·wd·p` before the moment step.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Step count and first/second moment estimates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// One AdamW update of `params` in place. State is sized on the first call.
pub fn optimizer_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err(
            "optimizer_step",
            format!("{} params but {} grads", params.len(), grads.len()),
        ));
    }
    if state.m.is_empty() && state.step == 0 {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(shape_err(
            "optimizer_step",
            format!("state holds {} slots for {} params", state.m.len(), params.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(shape_err(
                "optimizer_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate {lr} is invalid")));
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let p = p.data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            if config.weight_decay != 0.0 {
                p[j] -= lr * config.weight_decay * p[j];
            }
            let mj = &mut m.data_mut()[j];
            *mj = config.beta1 * *mj + (1.0 - config.beta1) * gj;
            let m_hat = *mj / c1;
            let vj = &mut v.data_mut()[j];
            *vj = config.beta2 * *vj + (1.0 - config.beta2) * gj * gj;
            let v_hat = *vj / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params() {
        let mut p = Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        let mut state = AdamState::default();
        for _ in 0..5 {
            optimizer_step(&mut [&mut p], &[Tensor::zeros([3])], &mut state, &AdamWConfig::default(), 1e-3)
                .unwrap();
        }
        assert!(p.bit_eq(&before));
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = Tensor::scalar(0.5);
        let mut state = AdamState::default();
        optimizer_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut state, &AdamWConfig::default(), 1e-4)
            .unwrap();
        // m = 0.1, v = 0.001; bias-corrected both give 1, so the step is lr/(1 + eps).
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let want = 0.5 - 1e-4 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p.item() - want).abs() < 1e-15);
        assert!((p.item() - (0.5 - 1e-4 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_reference() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let grads = [0.3, -1.2];
        let lr = 0.01;
        let (mut p_ref, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            p_ref -= lr * 0.1 * p_ref;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            p_ref -= lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        let mut p = Tensor::scalar(2.0);
        let mut state = AdamState::default();
        for g in grads {
            optimizer_step(&mut [&mut p], &[Tensor::scalar(g)], &mut state, &cfg, lr).unwrap();
        }
        assert!((p.item() - p_ref).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::zeros([2]);
        let mut state = AdamState::default();
        assert!(optimizer_step(&mut [&mut p], &[Tensor::zeros([3])], &mut state, &AdamWConfig::default(), 1e-3)
            .is_err());
        assert!(optimizer_step(&mut [&mut p], &[], &mut state, &AdamWConfig::default(), 1e-3).is_err());
    }
}
