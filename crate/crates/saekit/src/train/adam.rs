//! Adam with bias correction. Defaults: lr 1e-4, beta1 0.9, beta2 0.999,
//! eps 1e-8.
//!
//! Moments are kept per parameter name and created lazily on first update,
//! so the state works for any store without pre-registration. All arithmetic
//! runs in f64 and is rounded back to the parameter's element type, which
//! makes the f64 trajectory exactly reproducible by a hand-rolled reference.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState<E: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update calls; bias correction uses step after increment.
    pub step: u64,
    m: IndexMap<String, Tensor<E>>,
    v: IndexMap<String, Tensor<E>>,
}

impl<E: Scalar> AdamState<E> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn moment_m(&self, name: &str) -> Option<&Tensor<E>> {
        self.m.get(name)
    }

    pub fn moment_v(&self, name: &str) -> Option<&Tensor<E>> {
        self.v.get(name)
    }

    /// Restores a moment pair (checkpoint loading).
    pub fn set_moments(&mut self, name: &str, m: Tensor<E>, v: Tensor<E>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }

    /// One optimizer step over the given (name, gradient) pairs. The step
    /// counter increments once per call; every parameter in the call shares
    /// the same bias correction.
    pub fn apply(&mut self, store: &mut ParamStore<E>, grads: &[(String, Tensor<E>)]) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store.param_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()).expect("moment shape"));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()).expect("moment shape"));
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i].to_f64();
                let mi = self.beta1 * md[i].to_f64() + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * vd[i].to_f64() + (1.0 - self.beta2) * gi * gi;
                md[i] = E::from_f64(mi);
                vd[i] = E::from_f64(vi);
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                pd[i] = E::from_f64(pd[i].to_f64() - update);
            }
        }
        Ok(())
    }
}
