use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

/// Gradients keyed by parameter path.
pub type Grads<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real = f64> {
    pub config: AdamWConfig,
    /// Completed updates.
    pub t: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> AdamW<T> {
    /// Zero moments mirroring `params`.
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, p) in params.iter() {
            m.insert(name, Tensor::zeros(p.shape()))?;
            v.insert(name, Tensor::zeros(p.shape()))?;
        }
        Ok(AdamW { config, t: 0, m, v })
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update at an explicit learning rate; nothing changes if any
    /// gradient is non-finite.
    pub fn step_with_lr(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for '{name}'")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim("adamw gradient", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for '{name}'")));
            }
        }
        if self.m.len() != params.len() || params.names().any(|n| !self.m.contains(n)) {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let m_corr = one - b1.powi(t);
        let v_corr = one - b2.powi(t);
        let decay = one - T::lit(lr * c.weight_decay);
        let (lr, eps) = (T::lit(lr), T::lit(c.eps));
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("checked above");
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / m_corr;
                let v_hat = *v / v_corr;
                *p = *p * decay - lr * (m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm<T: Real>(grads: &Grads<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the factor applied (1.0 when already within bounds).
pub fn clip_grad_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_nan() || norm <= max_norm || max_norm <= 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = T::lit(scale);
    for g in grads.values_mut() {
        for x in g.data_mut() {
            *x *= s;
        }
    }
    scale
}
