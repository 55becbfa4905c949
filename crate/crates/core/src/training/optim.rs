//! Optimizers and the learning-rate schedule.
//!
//! The network trains with momentum SGD under a cosine-annealed learning
//! rate; the embedding table trains with AdamW (decoupled weight decay) at
//! a constant learning rate. The two never share state: SGD weight decay
//! touches only network parameters, AdamW settings touch only the table.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator guard in the AdamW adaptive step.
pub const ADAM_EPSILON: f64 = 1e-8;

/// Momentum SGD with coupled weight decay.
///
/// Per parameter: `v <- momentum*v + grad + weight_decay*param`, then
/// `param <- param - lr*v`. Velocities are created lazily per parameter
/// name so a fresh optimizer starts every parameter from v = 0.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    momentum: f32,
    weight_decay: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.velocity
    }

    /// Restores velocities saved in a checkpoint.
    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Vec<f32>>) {
        self.velocity = velocity;
    }

    /// Applies one update for every parameter named in `grads`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f32,
    ) -> Result<()> {
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if param.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("sgd step for `{name}`"),
                    expected: param.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            if v.len() != grad.len() {
                return Err(Error::ShapeMismatch {
                    context: format!("sgd velocity for `{name}`"),
                    expected: vec![v.len()],
                    got: vec![grad.len()],
                });
            }
            let p = param.data_mut();
            let g = grad.data();
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] + g[i] + self.weight_decay * p[i];
                p[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// Serializable AdamW moments plus the step counter for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// AdamW over one flat parameter vector (the embedding table).
///
/// Weight decay is decoupled: `param -= lr*wd*param` happens separately
/// from the adaptive step, which uses bias-corrected moments and
/// [`ADAM_EPSILON`] in the denominator.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f32,
    beta1: f32,
    beta2: f32,
    weight_decay: f32,
    step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamW {
    pub fn new(lr: f32, beta1: f32, beta2: f32, weight_decay: f32, len: usize) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            weight_decay,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn state(&self) -> AdamWState {
        AdamWState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// Restores moments saved in a checkpoint.
    pub fn set_state(&mut self, state: AdamWState) -> Result<()> {
        if state.m.len() != self.m.len() || state.v.len() != self.v.len() {
            return Err(Error::ShapeMismatch {
                context: "adamw state restore".into(),
                expected: vec![self.m.len()],
                got: vec![state.m.len(), state.v.len()],
            });
        }
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one decoupled-decay and adaptive update in place.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "adamw step".into(),
                expected: vec![self.m.len()],
                got: vec![params.len(), grads.len()],
            });
        }
        self.step += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powf(self.step as f64);
        let bc2 = 1.0 - (self.beta2 as f64).powf(self.step as f64);
        let lr = self.lr as f64;
        for i in 0..params.len() {
            params[i] -= self.lr * self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] as f64 / bc1;
            let v_hat = self.v[i] as f64 / bc2;
            params[i] -= (lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON)) as f32;
        }
        Ok(())
    }
}

/// Cosine annealing: `lr_end + (lr_start - lr_end)*(1 + cos(pi*t))/2`
/// with `t = step/total_steps`. `step` 0 gives `lr_start` exactly and
/// `step == total_steps` gives `lr_end` exactly.
pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f32, lr_end: f32) -> f32 {
    debug_assert!(step <= total_steps);
    if total_steps == 0 {
        return lr_start;
    }
    let t = step as f64 / total_steps as f64;
    let lo = lr_end as f64;
    let hi = lr_start as f64;
    (lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: &[f32]) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        map.insert(
            "p".to_string(),
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        );
        map
    }

    #[test]
    fn sgd_zero_grad_zero_decay_is_identity() {
        let mut params = one_param(&[1.0, -2.0, 3.5]);
        let grads = one_param(&[0.0, 0.0, 0.0]);
        let mut opt = SgdMomentum::new(0.9, 0.0);
        opt.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params["p"].data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn sgd_first_step_matches_formula() {
        let mut params = one_param(&[2.0]);
        let grads = one_param(&[0.5]);
        let mut opt = SgdMomentum::new(0.9, 0.01);
        opt.step(&mut params, &grads, 0.1).unwrap();
        let expected = 2.0 - 0.1 * (0.5 + 0.01 * 2.0);
        assert!((params["p"].data()[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_two_step_unroll() {
        let mut params = one_param(&[0.0]);
        let grads = one_param(&[1.0]);
        let mut opt = SgdMomentum::new(0.9, 0.0);
        opt.step(&mut params, &grads, 0.1).unwrap();
        opt.step(&mut params, &grads, 0.1).unwrap();
        let expected = -0.1 * (1.0 + 1.9);
        assert!((params["p"].data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn sgd_rejects_unknown_parameter() {
        let mut params = one_param(&[0.0]);
        let mut grads = BTreeMap::new();
        grads.insert("q".to_string(), Tensor::zeros(vec![1]));
        let mut opt = SgdMomentum::new(0.9, 0.0);
        assert!(matches!(
            opt.step(&mut params, &grads, 0.1),
            Err(Error::UnknownParameter(_))
        ));
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut params = one_param(&[0.0]);
        let grads = one_param(&[1.0, 2.0]);
        let mut opt = SgdMomentum::new(0.9, 0.0);
        assert!(matches!(
            opt.step(&mut params, &grads, 0.1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        let mut params = vec![0.3, -0.7];
        let mut opt = AdamW::new(1e-3, 0.999, 0.999, 0.0, 2);
        opt.step(&mut params, &[0.0, 0.0]).unwrap();
        assert_eq!(params, vec![0.3, -0.7]);
    }

    #[test]
    fn adamw_first_step_magnitude_is_lr() {
        let lr = 1e-3f32;
        let mut params = vec![0.0f32];
        let mut opt = AdamW::new(lr, 0.999, 0.999, 0.0, 1);
        opt.step(&mut params, &[0.5]).unwrap();
        assert!((params[0].abs() - lr).abs() < 1e-8);
        assert!(params[0] < 0.0);
    }

    #[test]
    fn adamw_decay_only_shrinks_geometrically() {
        let lr = 1e-3f32;
        let wd = 1e-4f32;
        let mut params = vec![2.0f32];
        let mut expected = 2.0f32;
        let mut opt = AdamW::new(lr, 0.999, 0.999, wd, 1);
        for _ in 0..5 {
            opt.step(&mut params, &[0.0]).unwrap();
            expected -= lr * wd * expected;
        }
        assert_eq!(params[0], expected);
    }

    #[test]
    fn adamw_rejects_length_mismatch() {
        let mut params = vec![0.0f32; 3];
        let mut opt = AdamW::new(1e-3, 0.999, 0.999, 0.0, 2);
        assert!(matches!(
            opt.step(&mut params, &[0.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn adamw_state_round_trips() {
        let mut opt = AdamW::new(1e-3, 0.999, 0.999, 1e-4, 2);
        let mut params = vec![1.0f32, -1.0];
        opt.step(&mut params, &[0.2, -0.3]).unwrap();
        let state = opt.state();
        let mut fresh = AdamW::new(1e-3, 0.999, 0.999, 1e-4, 2);
        fresh.set_state(state.clone()).unwrap();
        assert_eq!(fresh.state(), state);
        assert_eq!(fresh.step_count(), 1);
    }

    #[test]
    fn cosine_hits_endpoints_exactly() {
        assert_eq!(cosine_lr(0, 100, 0.1, 1e-5), 0.1);
        assert_eq!(cosine_lr(100, 100, 0.1, 1e-5), 1e-5);
    }

    #[test]
    fn cosine_midpoint_is_average() {
        let mid = cosine_lr(50, 100, 0.1, 1e-5);
        let avg = (0.1 + 1e-5) / 2.0;
        assert!((mid - avg).abs() < 1e-9);
    }

    #[test]
    fn cosine_is_monotone_decreasing() {
        let mut prev = cosine_lr(0, 64, 0.1, 1e-5);
        for step in 1..=64 {
            let lr = cosine_lr(step, 64, 0.1, 1e-5);
            assert!(lr < prev, "lr rose at step {step}");
            prev = lr;
        }
    }

    #[test]
    fn cosine_degenerate_schedule_returns_start() {
        assert_eq!(cosine_lr(0, 0, 0.1, 1e-5), 0.1);
    }
}
