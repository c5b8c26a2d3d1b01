//! Adam optimizer for the MIL heads.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: ParamSet<S>,
    v: ParamSet<S>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn zeros_like(params: &ParamSet<S>) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, t) in params.iter() {
            if t.requires_grad() {
                m.insert_param(name, Tensor::zeros(t.shape())).unwrap();
                v.insert_param(name, Tensor::zeros(t.shape())).unwrap();
            }
        }
        AdamState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam step with bias correction. NaN gradients reject the whole step.
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for '{name}', step rejected")));
        }
        if params.get(name).is_none() {
            return Err(Error::Data(format!("gradient for unknown parameter '{name}'")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one_b1 = S::from_f64(1.0 - cfg.beta1);
    let one_b2 = S::from_f64(1.0 - cfg.beta2);
    let corr1 = S::from_f64(1.0 / (1.0 - cfg.beta1.powi(t)));
    let corr2 = S::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
    let lr = S::from_f64(cfg.lr);
    let eps = S::from_f64(cfg.eps);
    let wd = S::from_f64(cfg.weight_decay);

    for (name, g) in grads {
        let w = params.get(name).unwrap().clone();
        let m_old = state.m.get(name).unwrap();
        let v_old = state.v.get(name).unwrap();
        let mut m_new = Vec::with_capacity(w.numel());
        let mut v_new = Vec::with_capacity(w.numel());
        let mut w_new = Vec::with_capacity(w.numel());
        for ((&wv, &gv), (&mv, &vv)) in
            w.data().iter().zip(g.data()).zip(m_old.data().iter().zip(v_old.data()))
        {
            let grad = gv + wd * wv;
            let m = b1 * mv + one_b1 * grad;
            let v = b2 * vv + one_b2 * grad * grad;
            let mhat = m * corr1;
            let vhat = v * corr2;
            m_new.push(m);
            v_new.push(v);
            w_new.push(wv - lr * mhat / (vhat.sqrt() + eps));
        }
        state.m.set(name, Tensor::new(w.shape().to_vec(), m_new)?)?;
        state.v.set(name, Tensor::new(w.shape().to_vec(), v_new)?)?;
        params.set(name, Tensor::new(w.shape().to_vec(), w_new)?)?;
    }
    Ok(())
}
