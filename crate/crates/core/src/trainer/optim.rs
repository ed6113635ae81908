use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 0.9e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment accumulators of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSlot<S> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<S> {
    pub slots: BTreeMap<String, MomentSlot<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new() -> Self {
        Self { slots: BTreeMap::new() }
    }

    /// Slots whose name starts with `from`, renamed to start with `to`.
    pub fn copy_prefix(&self, from: &str, to: &str) -> Vec<(String, MomentSlot<S>)> {
        self.slots
            .iter()
            .filter_map(|(k, s)| k.strip_prefix(from).map(|rest| (format!("{to}{rest}"), s.clone())))
            .collect()
    }
}

/// One AdamW update of every parameter that has a gradient.
///
/// Weight decay is decoupled: `p ← p − lr·wd·p` is applied first, then the
/// bias-corrected Adam step. Parameters without a gradient are left alone.
pub fn adamw_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &Gradients<S>,
    state: &mut OptimizerState<S>,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}` is {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let lr = S::lit(cfg.lr);
    let decay = S::lit(cfg.lr * cfg.weight_decay);
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let eps = S::lit(cfg.eps);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let slot = state.slots.entry(name.clone()).or_insert_with(|| MomentSlot {
            m: Tensor::zeros(g.shape()),
            v: Tensor::zeros(g.shape()),
            step: 0,
        });
        slot.step += 1;
        let k = slot.step as i32;
        let c1 = S::one() - b1.powi(k);
        let c2 = S::one() - b2.powi(k);
        let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *pv -= decay * *pv;
            m[i] = b1 * m[i] + (S::one() - b1) * gv;
            v[i] = b2 * v[i] + (S::one() - b2) * gv * gv;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *pv -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = one("w", 0.7);
        let g: Gradients<f64> = [("w".to_string(), Tensor::scalar(0.0))].into();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &g, &mut OptimizerState::new(), &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn decay_only_shrinks_by_lr_wd_p() {
        let mut p = one("w", 2.0);
        let g: Gradients<f64> = [("w".to_string(), Tensor::scalar(0.0))].into();
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        adamw_step(&mut p, &g, &mut OptimizerState::new(), &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 2.0 - 0.1 * 0.5 * 2.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = one("w", 2.0);
        let g: Gradients<f64> = [("w".to_string(), Tensor::zeros(&[2]))].into();
        let r = adamw_step(&mut p, &g, &mut OptimizerState::new(), &AdamWConfig::default());
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }
}
