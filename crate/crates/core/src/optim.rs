//! Adam optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }
}

impl<T: Scalar> Adam<T> {
    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::cast(self.beta1), T::cast(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::cast(lr * c2.sqrt() / c1);
        let eps = T::cast(self.eps * c2.sqrt());
        for (name, g) in grads {
            debug_assert!(store.is_trainable(name), "gradient for frozen parameter {name}");
            let Some(p) = store.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step * *mv / (vv.sqrt() + eps);
            }
        }
    }
}
