use std::collections::HashMap;

use super::param::Module;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update over every trainable parameter that holds a gradient.
    ///
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, modules: &mut [&mut dyn Module<T>]) -> Result<()> {
        for m in modules.iter() {
            let mut bad = None;
            m.visit(&mut |p| {
                if bad.is_none() && p.tensor().requires_grad() {
                    if let Some(g) = p.tensor().grad() {
                        if g.iter().any(|v| !v.is_finite()) {
                            bad = Some(p.name().to_string());
                        }
                    }
                }
            });
            if let Some(name) = bad {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let one = T::one();
        for m in modules.iter_mut() {
            m.visit_mut(&mut |p| {
                if !p.tensor().requires_grad() {
                    return;
                }
                let Some(g) = p.tensor().grad().map(<[T]>::to_vec) else {
                    return;
                };
                let (mo, ve) = self
                    .moments
                    .entry(p.name().to_string())
                    .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
                let vals = p.tensor_mut().values_mut();
                for i in 0..g.len() {
                    mo[i] = b1 * mo[i] + (one - b1) * g[i];
                    ve[i] = b2 * ve[i] + (one - b2) * g[i] * g[i];
                    let mhat = mo[i] / bc1;
                    let vhat = ve[i] / bc2;
                    vals[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}
