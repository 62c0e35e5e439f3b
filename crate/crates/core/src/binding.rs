//! Slot binding: learnable slot queries compete for pixels and are refined by a GRU.
//!
//! Per iteration, with `k = key(X)`, `v = value(X)` and slots `q`:
//! `attn = softmax_K(k q^T / sqrt(D))`, `A = attn` normalized over pixels, `U = A^T v`,
//! `q <- GRU(U, q)`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform_init, GruCell, Linear, ParamStore};
use crate::region_query::to_tokens;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Added to the attention before the per-slot normalization over pixels.
pub const COLUMN_EPS: f64 = 1e-8;

pub const SLOTS_PARAM: &str = "binding.slots";

/// Channels `(x, y, 1 - x, 1 - y)` with `x, y` running linearly from 0 to 1: `[4, h, w]`.
pub fn position_ramp<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let lin = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    Tensor::from_fn(&[4, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (fx, fy) = (lin(x, w), lin(y, h));
        T::cast([fx, fy, 1.0 - fx, 1.0 - fy][c])
    })
}

/// Softmax over slots and the pixel-normalized weights, both `[B, N, K]`.
#[derive(Clone, Copy, Debug)]
pub struct BindingWeights {
    pub attn: Var,
    pub a: Var,
}

/// `keys: [B, N, D]`, `slots: [B, K, D]`.
pub fn binding_weights<T: Scalar>(g: &mut Graph<T>, keys: Var, slots: Var) -> Result<BindingWeights> {
    let (ks, ss) = (g.shape(keys).to_vec(), g.shape(slots).to_vec());
    match (ks.as_slice(), ss.as_slice()) {
        ([b, n, d], [b2, k, d2]) if b == b2 && d == d2 => {
            if *n == 0 || *k == 0 {
                return Err(Error::validation(format!("binding needs N > 0 and K > 0, got N={n}, K={k}")));
            }
            let raw = g.matmul_t(keys, slots, false, true);
            let logits = g.scale(raw, T::cast(1.0 / (*d as f64).sqrt()));
            let attn = g.softmax(logits, 2);
            let shifted = g.add_scalar(attn, T::cast(COLUMN_EPS));
            let col = g.sum_axis(shifted, 1);
            let denom = g.broadcast_to(col, &ks[..2].iter().copied().chain([*k]).collect::<Vec<_>>());
            let a = g.div(shifted, denom);
            Ok(BindingWeights { attn, a })
        }
        _ => Err(Error::validation(format!("binding: keys {ks:?} and slots {ss:?} are incompatible"))),
    }
}

/// `U = A^T v`: each slot receives the weighted mean of the pixel values. `[B, K, D]`.
pub fn aggregate<T: Scalar>(g: &mut Graph<T>, weights: &BindingWeights, values: Var) -> Result<Var> {
    let (a, v) = (g.shape(weights.a).to_vec(), g.shape(values).to_vec());
    if a.len() != 3 || v.len() != 3 || a[0] != v[0] || a[1] != v[1] {
        return Err(Error::validation(format!("aggregate: weights {a:?} vs values {v:?}")));
    }
    Ok(g.matmul_t(weights.a, values, true, false))
}

#[derive(Clone, Copy, Debug)]
pub struct BindOutput {
    /// Final slots `[B, K, D]`.
    pub slots: Var,
    /// Weights of the last iteration.
    pub weights: BindingWeights,
}

#[derive(Clone, Debug)]
pub struct Binder {
    pub pos: Linear,
    pub key: Linear,
    pub value: Linear,
    pub gru: GruCell,
    pub slots: usize,
    pub dim: usize,
    pub steps: usize,
}

impl Binder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        dim: usize,
        slots: usize,
        steps: usize,
    ) -> Result<Self> {
        if slots < 2 {
            return Err(Error::validation(format!("need at least 2 slots, got {slots}")));
        }
        if steps == 0 {
            return Err(Error::validation("binding needs at least one iteration"));
        }
        let pos = Linear::new(store, rng, "binding.pos", 4, dim, true);
        let key = Linear::new(store, rng, "binding.key", dim, dim, false);
        let value = Linear::new(store, rng, "binding.value", dim, dim, false);
        let gru = GruCell::new(store, rng, "binding.gru", dim, dim);
        store.insert(SLOTS_PARAM, uniform_init(&[slots, dim], 1.0, rng), true);
        Ok(Binder { pos, key, value, gru, slots, dim, steps })
    }

    /// Flattened features plus the projected position ramp: `[B, D, h, w] -> [B, N, D]`.
    pub fn inputs<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Var {
        let [b, d, h, w]: [usize; 4] = g.shape(feat).try_into().expect("rank-4 features");
        let tokens = to_tokens(g, feat);
        let ramp = position_ramp::<T>(h, w).reshape(&[4, h * w]).permute(&[1, 0]);
        let rv = g.constant(ramp);
        let p = self.pos.forward(g, store, rv);
        let pb = g.broadcast_to(p, &[b, h * w, d]);
        g.add(tokens, pb)
    }

    /// The learnable initial slots, repeated over the batch.
    pub fn initial_slots<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: usize) -> Var {
        let q0 = g.param(store, SLOTS_PARAM);
        g.broadcast_to(q0, &[batch, self.slots, self.dim])
    }

    /// One binding iteration on prepared inputs.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        keys: Var,
        values: Var,
        slots: Var,
    ) -> Result<(Var, BindingWeights)> {
        let [b, k, d]: [usize; 3] =
            g.shape(slots).try_into().map_err(|_| Error::validation("slots must be [B, K, D]"))?;
        let w = binding_weights(g, keys, slots)?;
        let u = aggregate(g, &w, values)?;
        let u2 = g.reshape(u, &[b * k, d]);
        let h2 = g.reshape(slots, &[b * k, d]);
        let next = self.gru.forward(g, store, u2, h2);
        Ok((g.reshape(next, &[b, k, d]), w))
    }

    /// Runs all iterations from the given initial slots.
    pub fn bind_from<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        feat: Var,
        init: Var,
    ) -> Result<BindOutput> {
        let x = self.inputs(g, store, feat);
        let keys = self.key.forward(g, store, x);
        let values = self.value.forward(g, store, x);
        let mut slots = init;
        let mut last = None;
        for t in 1..=self.steps {
            let (next, w) = self.step(g, store, keys, values, slots)?;
            if !g.value(next).all_finite() {
                return Err(Error::Numeric { step: 0, message: format!("binding iterate {t} is not finite") });
            }
            slots = next;
            last = Some(w);
        }
        Ok(BindOutput { slots, weights: last.expect("at least one iteration") })
    }

    /// Binds `F: [B, D, h, w]` starting from the learned slots.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feat: Var) -> Result<BindOutput> {
        let b = g.shape(feat)[0];
        let init = self.initial_slots(g, store, b);
        self.bind_from(g, store, feat, init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_pixel_example() {
        let mut g = Graph::<f64>::new();
        let k = g.constant(Tensor::from_f64(&[1, 2, 1], &[1.0, -1.0]));
        let q = g.constant(Tensor::from_f64(&[1, 2, 1], &[1.0, -1.0]));
        let w = binding_weights(&mut g, k, q).unwrap();
        let hi = 1.0 / (1.0 + (-2f64).exp());
        let attn = g.value(w.attn).data().to_vec();
        for (a, e) in attn.iter().zip([hi, 1.0 - hi, 1.0 - hi, hi]) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!((attn[0] - 0.8808).abs() < 1e-4);
        for (a, b) in g.value(w.a).data().iter().zip(&attn) {
            assert!((a - b).abs() < 1e-7);
        }
        let v = g.constant(Tensor::from_f64(&[1, 2, 1], &[1.0, -1.0]));
        let u = aggregate(&mut g, &w, v).unwrap();
        let expect = hi - (1.0 - hi);
        assert!((g.value(u).data()[0] - expect).abs() < 1e-7);
        assert!((g.value(u).data()[1] + expect).abs() < 1e-7);
        assert!((expect - 0.7616).abs() < 1e-4);
    }

    #[test]
    fn identical_slots_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let k = g.constant(Tensor::uniform(&[1, 7, 3], -2.0, 2.0, &mut rng));
        let q = g.constant(Tensor::from_fn(&[1, 3, 3], |i| [0.3, -0.1, 0.9][i % 3]));
        let w = binding_weights(&mut g, k, q).unwrap();
        assert!(g.value(w.attn).data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn aligned_slot_takes_the_mass_as_norm_grows() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let mut prev = 0.0;
        for scale in [1.0, 10.0, 100.0] {
            let k = g.constant(Tensor::from_f64(&[1, 1, 2], &[scale, 0.0]));
            let w = binding_weights(&mut g, k, q).unwrap();
            let p = g.value(w.attn).data()[0];
            assert!(p > prev);
            prev = p;
        }
        assert!(prev > 1.0 - 1e-12);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let mut g = Graph::<f64>::new();
        let k = g.constant(Tensor::zeros(&[1, 0, 2]));
        let q = g.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(binding_weights(&mut g, k, q).is_err());
        let k = g.constant(Tensor::zeros(&[1, 3, 2]));
        let q = g.constant(Tensor::zeros(&[1, 0, 2]));
        assert!(binding_weights(&mut g, k, q).is_err());
    }

    #[test]
    fn aggregate_selects_and_averages() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals = Tensor::<f64>::uniform(&[1, 4, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let v = g.constant(vals.clone());
        // Column 0 one-hot at pixel 2, column 1 uniform.
        let a = g.constant(Tensor::from_f64(&[1, 4, 2], &[0.0, 0.25, 0.0, 0.25, 1.0, 0.25, 0.0, 0.25]));
        let w = BindingWeights { attn: a, a };
        let u = aggregate(&mut g, &w, v).unwrap();
        let u = g.value(u).data().to_vec();
        for c in 0..3 {
            assert_eq!(u[c], vals.data()[2 * 3 + c]);
            let mean = (0..4).map(|n| vals.data()[n * 3 + c]).sum::<f64>() / 4.0;
            assert!((u[3 + c] - mean).abs() < 1e-12);
        }
    }

    fn binder(dim: usize, steps: usize, seed: u64) -> (ParamStore<f64>, Binder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Binder::new(&mut store, &mut rng, dim, 2, steps).unwrap();
        (store, b)
    }

    #[test]
    fn single_step_is_one_composition() {
        let (store, b) = binder(4, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feat = Tensor::<f64>::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let f = g.constant(feat);
        let out = b.bind(&mut g, &store, f).unwrap();

        let x = b.inputs(&mut g, &store, f);
        let keys = b.key.forward(&mut g, &store, x);
        let values = b.value.forward(&mut g, &store, x);
        let init = b.initial_slots(&mut g, &store, 2);
        let w = binding_weights(&mut g, keys, init).unwrap();
        let u = aggregate(&mut g, &w, values).unwrap();
        let u2 = g.reshape(u, &[4, 4]);
        let h2 = g.reshape(init, &[4, 4]);
        let next = b.gru.forward(&mut g, &store, u2, h2);
        assert_eq!(g.value(out.slots).data(), g.value(next).data());
        assert_eq!(g.value(out.weights.attn), g.value(w.attn));
    }

    #[test]
    fn permuted_initial_slots_permute_outputs() {
        let (store, b) = binder(6, 5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feat = Tensor::<f64>::uniform(&[1, 6, 4, 4], -1.0, 1.0, &mut rng);
        let q0 = store.get(SLOTS_PARAM).unwrap().clone();
        let swapped = Tensor::concat(&[&q0.narrow(0, 1, 1), &q0.narrow(0, 0, 1)], 0);
        let mut g = Graph::new();
        let f = g.constant(feat);
        let i0 = g.constant(q0.reshape(&[1, 2, 6]));
        let i1 = g.constant(swapped.reshape(&[1, 2, 6]));
        let a = b.bind_from(&mut g, &store, f, i0).unwrap();
        let c = b.bind_from(&mut g, &store, f, i1).unwrap();
        let (sa, sc) = (g.value(a.slots).clone(), g.value(c.slots).clone());
        assert_eq!(sa.narrow(1, 0, 1), sc.narrow(1, 1, 1));
        assert_eq!(sa.narrow(1, 1, 1), sc.narrow(1, 0, 1));
        let (wa, wc) = (g.value(a.weights.a).clone(), g.value(c.weights.a).clone());
        assert_eq!(wa.narrow(2, 0, 1), wc.narrow(2, 1, 1));
        assert_eq!(wa.narrow(2, 1, 1), wc.narrow(2, 0, 1));
    }

    #[test]
    fn weights_stay_stochastic_every_iteration() {
        let (store, b) = binder(4, 1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let f = g.constant(Tensor::uniform(&[2, 4, 3, 5], -3.0, 3.0, &mut rng));
        let x = b.inputs(&mut g, &store, f);
        let keys = b.key.forward(&mut g, &store, x);
        let values = b.value.forward(&mut g, &store, x);
        let mut slots = b.initial_slots(&mut g, &store, 2);
        for _ in 0..5 {
            let (next, w) = b.step(&mut g, &store, keys, values, slots).unwrap();
            assert!(g.value(w.attn).sum_axis(2).data().iter().all(|v| (v - 1.0).abs() < 1e-6));
            assert!(g.value(w.a).sum_axis(1).data().iter().all(|v| (v - 1.0).abs() < 1e-6));
            slots = next;
        }
    }

    #[test]
    fn binding_step_gradients() {
        let (store, b) = binder(8, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let feat = Tensor::uniform(&[1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let names = [
            SLOTS_PARAM,
            "binding.key.weight",
            "binding.value.weight",
            "binding.gru.input.weight",
            "binding.gru.hidden.weight",
            "binding.gru.input.bias",
        ];
        let inputs: Vec<Tensor<f64>> =
            std::iter::once(feat).chain(names.iter().map(|n| store.get(n).unwrap().clone())).collect();
        let err = gradcheck::check(
            &inputs,
            |g, v| {
                for (i, n) in names.iter().enumerate() {
                    g.bind_param(n, v[i + 1]);
                }
                let out = b.bind(g, &store, v[0]).unwrap();
                let sq = g.square(out.slots);
                g.sum_all(sq)
            },
            1e-5,
        );
        assert!(err < 1e-4, "binding rel err {err}");
    }
}
