//! Bias-corrected Adam with decoupled weight decay and frozen-parameter
//! support. Frozen parameters are never touched, so their bytes stay
//! bit-identical across any number of steps.

use std::collections::HashMap;

use super::{rf, NumericsError, ParamSet, Real, Result};

#[derive(Debug, Clone, Copy)]
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

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub cfg: AdamConfig,
    pub t: u64,
    m: HashMap<String, Vec<F>>,
    v: HashMap<String, Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }
}

/// One optimizer step over the trainable parameters of `set`, using the
/// gradients currently stored on their tensors. A missing gradient counts
/// as zero; a non-finite gradient aborts, naming the parameter.
pub fn adam_step<F: Real>(
    set: &mut ParamSet<F>,
    state: &mut AdamState<F>,
    lr: F,
) -> Result<()> {
    state.t += 1;
    let b1 = rf::<F>(state.cfg.beta1);
    let b2 = rf::<F>(state.cfg.beta2);
    let eps = rf::<F>(state.cfg.eps);
    let wd = rf::<F>(state.cfg.weight_decay);
    let bc1 = F::one() - b1.powi(state.t as i32);
    let bc2 = F::one() - b2.powi(state.t as i32);

    for p in set.iter_mut() {
        if !p.trainable {
            continue;
        }
        let n = p.tensor.numel();
        let grad: Vec<F> = match p.tensor.grad() {
            Some(g) => g.to_vec(),
            None => vec![F::zero(); n],
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(NumericsError::NonFiniteGrad(p.name.clone()));
        }
        let m = state
            .m
            .entry(p.name.clone())
            .or_insert_with(|| vec![F::zero(); n]);
        let v = state
            .v
            .entry(p.name.clone())
            .or_insert_with(|| vec![F::zero(); n]);
        let data = p.tensor.data_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = b1 * m[i] + (F::one() - b1) * g;
            v[i] = b2 * v[i] + (F::one() - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let mut upd = lr * mhat / (vhat.sqrt() + eps);
            if wd > F::zero() {
                upd = upd + lr * wd * data[i];
            }
            data[i] = data[i] - upd;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Parameter, Tensor};

    fn scalar_set(value: f64, trainable: bool) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        let mut p = Parameter::new("p", Tensor::from_vec(&[1], vec![value]).unwrap());
        p.set_trainable(trainable);
        set.push(p).unwrap();
        set
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut set = scalar_set(1.0, true);
        set.get_mut("p").unwrap().tensor.set_grad(Some(vec![0.0]));
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut set, &mut st, 0.1).unwrap();
        assert_eq!(set.get("p").unwrap().tensor.data()[0], 1.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // p=1, g=1, lr=0.1: mhat=1, vhat=1, p' = 1 - 0.1/(1+1e-8)
        let mut set = scalar_set(1.0, true);
        set.get_mut("p").unwrap().tensor.set_grad(Some(vec![1.0]));
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut set, &mut st, 0.1).unwrap();
        let p = set.get("p").unwrap().tensor.data()[0];
        assert!((p - 0.9).abs() < 1e-7, "p = {p}");
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut set = scalar_set(std::f64::consts::PI, false);
        set.get_mut("p").unwrap().tensor.set_grad(Some(vec![5.0]));
        let before = set.get("p").unwrap().tensor.data()[0].to_bits();
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..17 {
            adam_step(&mut set, &mut st, 0.1).unwrap();
        }
        assert_eq!(before, set.get("p").unwrap().tensor.data()[0].to_bits());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut set = scalar_set(1.0, true);
        set.get_mut("p").unwrap().tensor.set_grad(Some(vec![f64::NAN]));
        let mut st = AdamState::new(AdamConfig::default());
        match adam_step(&mut set, &mut st, 0.1) {
            Err(NumericsError::NonFiniteGrad(name)) => assert_eq!(name, "p"),
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
    }
}
