//! Layer-wise adaptive rate scaling.
//!
//! Per parameter tensor: trust ratio `eta * ||w|| / (||g|| + wd * ||w||)`
//! when both norms are positive (1 otherwise), heavy-ball momentum on the
//! scaled update, and a global learning-rate multiplier.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct LarsConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eta: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        LarsConfig { lr: 0.2, momentum: 0.9, weight_decay: 1.5e-6, eta: 1e-3 }
    }
}

/// Per-parameter momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct LarsState<S: Scalar> {
    velocity: ParamSet<S>,
}

impl<S: Scalar> LarsState<S> {
    /// Zero velocity for every trainable entry of `params`.
    pub fn zeros_like(params: &ParamSet<S>) -> Self {
        let mut velocity = ParamSet::new();
        for (name, t) in params.iter() {
            if t.requires_grad() {
                velocity.insert_param(name, Tensor::zeros(t.shape())).unwrap();
            }
        }
        LarsState { velocity }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<S>> {
        self.velocity.get(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.velocity.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(LarsState { velocity: ParamSet::from_bytes(bytes)? })
    }
}

/// One LARS step over every gradient in `grads`. A NaN anywhere rejects the
/// whole step and leaves parameters and state untouched.
pub fn lars_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    state: &mut LarsState<S>,
    cfg: &LarsConfig,
    global_lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for '{name}', step rejected")));
        }
        let w = params
            .get(name)
            .ok_or_else(|| Error::Data(format!("gradient for unknown parameter '{name}'")))?;
        if w.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for '{name}': {:?} vs parameter {:?}",
                g.shape(),
                w.shape()
            )));
        }
    }

    let wd = S::from_f64(cfg.weight_decay);
    let mom = S::from_f64(cfg.momentum);
    let glr = S::from_f64(global_lr);
    for (name, g) in grads {
        let w = params.get(name).unwrap().clone();
        let w_norm = w.l2_norm();
        let g_norm = g.l2_norm();
        let local_lr = if w_norm > S::ZERO && g_norm > S::ZERO {
            S::from_f64(cfg.eta) * w_norm / (g_norm + wd * w_norm)
        } else {
            S::ONE
        };
        let v_old = state.velocity.get(name).unwrap();
        let mut v_new = Vec::with_capacity(w.numel());
        let mut w_new = Vec::with_capacity(w.numel());
        for ((&wv, &gv), &vv) in w.data().iter().zip(g.data()).zip(v_old.data()) {
            let v = mom * vv + local_lr * (gv + wd * wv);
            v_new.push(v);
            w_new.push(wv - glr * v);
        }
        state.velocity.set(name, Tensor::new(w.shape().to_vec(), v_new)?)?;
        params.set(name, Tensor::new(w.shape().to_vec(), w_new)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> (ParamSet<f64>, LarsState<f64>) {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.insert_param("w", Tensor::scalar(v)).unwrap();
        let st = LarsState::zeros_like(&ps);
        (ps, st)
    }

    fn grad_map(g: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::scalar(g));
        m
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let (mut ps, mut st) = single_param(2.0);
        let cfg = LarsConfig { weight_decay: 0.0, ..Default::default() };
        lars_step(&mut ps, &grad_map(0.0), &mut st, &cfg, 0.2).unwrap();
        assert_eq!(ps.get("w").unwrap().item(), 2.0);
    }

    #[test]
    fn scalar_hand_case() {
        // w=2.0, g=0.5, wd=0, momentum=0, eta=1e-3, global_lr=0.2
        // local_lr = 1e-3 * 2 / 0.5 = 4e-3; w' = 2.0 - 0.2 * 4e-3 * 0.5 = 1.9996
        let (mut ps, mut st) = single_param(2.0);
        let cfg = LarsConfig { momentum: 0.0, weight_decay: 0.0, eta: 1e-3, lr: 0.2 };
        lars_step(&mut ps, &grad_map(0.5), &mut st, &cfg, 0.2).unwrap();
        let w = ps.get("w").unwrap().item();
        assert!((w - 1.9996).abs() < 1e-12, "w = {w}");
    }

    #[test]
    fn two_steps_match_hand_unrolled_recursion() {
        let (mut ps, mut st) = single_param(1.5);
        let cfg = LarsConfig { momentum: 0.9, weight_decay: 1e-4, eta: 1e-3, lr: 0.1 };
        let (g1, g2) = (0.3, -0.7);
        lars_step(&mut ps, &grad_map(g1), &mut st, &cfg, 0.1).unwrap();
        lars_step(&mut ps, &grad_map(g2), &mut st, &cfg, 0.1).unwrap();

        // manual unroll with identical arithmetic
        let mut w = 1.5f64;
        let mut v = 0.0f64;
        for g in [g1, g2] {
            let local = if w.abs() > 0.0 && g.abs() > 0.0 {
                1e-3 * w.abs() / (g.abs() + 1e-4 * w.abs())
            } else {
                1.0
            };
            v = 0.9 * v + local * (g + 1e-4 * w);
            w -= 0.1 * v;
        }
        assert!((ps.get("w").unwrap().item() - w).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_rejects_step_and_preserves_state() {
        let (mut ps, mut st) = single_param(2.0);
        let cfg = LarsConfig::default();
        lars_step(&mut ps, &grad_map(0.5), &mut st, &cfg, 0.2).unwrap();
        let w_after = ps.get("w").unwrap().item();
        let v_after = st.velocity("w").unwrap().item();
        let err = lars_step(&mut ps, &grad_map(f64::NAN), &mut st, &cfg, 0.2).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(ps.get("w").unwrap().item(), w_after);
        assert_eq!(st.velocity("w").unwrap().item(), v_after);
    }

    #[test]
    fn zero_weight_uses_unit_trust_ratio() {
        let (mut ps, mut st) = single_param(0.0);
        let cfg = LarsConfig { momentum: 0.0, weight_decay: 0.0, eta: 1e-3, lr: 1.0 };
        lars_step(&mut ps, &grad_map(0.5), &mut st, &cfg, 1.0).unwrap();
        // local_lr = 1 -> w' = -0.5
        assert!((ps.get("w").unwrap().item() + 0.5).abs() < 1e-12);
    }
}
