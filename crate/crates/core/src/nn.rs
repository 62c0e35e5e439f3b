//! Named parameters and the small set of layers the model is built from.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Flat, ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.entries.insert(name.into(), ParamEntry { value, trainable });
    }

    pub fn entry(&self, name: &str) -> &ParamEntry<T> {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Replaces a value, checking that the shape is unchanged.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self.entries.get_mut(name).ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::Internal(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                e.value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }
}

/// Uniform `[-bound, bound)` initialization.
pub fn uniform_init<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::uniform(shape, -bound, bound, rng)
}

/// He-uniform bound for a layer followed by a rectifier.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Glorot-uniform bound.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = x W + b` on the last axis of a rank-2 input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = format!("{name}.weight");
        store.insert(&weight, uniform_init(&[in_dim, out_dim], glorot_bound(in_dim, out_dim), rng), true);
        let bias = bias.then(|| {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(&[out_dim]), true);
            b
        });
        Linear { weight, bias, in_dim, out_dim }
    }

    /// Applies the map to `[M, in]` or `[B, M, in]` inputs.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        assert_eq!(*shape.last().unwrap(), self.in_dim, "{}: input width", self.weight);
        let flat = g.reshape(x, &[rows, self.in_dim]);
        let w = g.param(store, &self.weight);
        let mut y = g.matmul(flat, w);
        if let Some(b) = &self.bias {
            let bv = g.param(store, b);
            let bb = g.broadcast_to(bv, &[rows, self.out_dim]);
            y = g.add(y, bb);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub geom: ConvGeometry,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeometry,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        let fan_in = in_ch * geom.kernel * geom.kernel;
        store.insert(&weight, uniform_init(&[out_ch, in_ch, geom.kernel, geom.kernel], he_bound(fan_in), rng), true);
        store.insert(&bias, Tensor::zeros(&[out_ch]), true);
        Conv2d { weight, bias, geom, in_ch, out_ch }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, &self.weight);
        let b = g.param(store, &self.bias);
        g.conv2d(x, w, Some(b), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: String,
    pub bias: String,
    pub geom: ConvGeometry,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: ConvGeometry,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        // Each output pixel sees about in_ch * (k / stride)^2 inputs.
        let per_axis = (geom.kernel / geom.stride).max(1);
        let fan_in = in_ch * per_axis * per_axis;
        store.insert(&weight, uniform_init(&[in_ch, out_ch, geom.kernel, geom.kernel], he_bound(fan_in), rng), true);
        store.insert(&bias, Tensor::zeros(&[out_ch]), true);
        ConvTranspose2d { weight, bias, geom }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, &self.weight);
        let b = g.param(store, &self.bias);
        g.conv_transpose2d(x, w, Some(b), self.geom)
    }
}

/// Gated recurrent cell applied row-wise to `[M, input]` / `[M, hidden]` matrices.
#[derive(Clone, Debug)]
pub struct GruCell {
    input_map: Linear,
    hidden_map: Linear,
    hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let input_map = Linear::new(store, rng, &format!("{name}.input"), input, 3 * hidden, true);
        let hidden_map = Linear::new(store, rng, &format!("{name}.hidden"), hidden, 3 * hidden, true);
        GruCell { input_map, hidden_map, hidden }
    }

    pub fn input_map(&self) -> &Linear {
        &self.input_map
    }

    pub fn hidden_map(&self) -> &Linear {
        &self.hidden_map
    }

    /// Gate order inside the packed maps: reset, update, candidate.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let gi = self.input_map.forward(g, store, x);
        let gh = self.hidden_map.forward(g, store, h);
        let (ir, iz, in_) = (g.narrow(gi, 1, 0, hd), g.narrow(gi, 1, hd, hd), g.narrow(gi, 1, 2 * hd, hd));
        let (hr, hz, hn) = (g.narrow(gh, 1, 0, hd), g.narrow(gh, 1, hd, hd), g.narrow(gh, 1, 2 * hd, hd));
        let r_pre = g.add(ir, hr);
        let r = g.sigmoid(r_pre);
        let z_pre = g.add(iz, hz);
        let z = g.sigmoid(z_pre);
        let rh = g.mul(r, hn);
        let n_pre = g.add(in_, rh);
        let n = g.tanh(n_pre);
        // h' = n + z * (h - n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, &mut rng, "gru", 2, 2);
        store.set("gru.input.bias", Tensor::uniform(&[6], -1.0, 1.0, &mut rng)).unwrap();
        let x = Tensor::from_f64(&[1, 2], &[0.3, -0.7]);
        let h = Tensor::from_f64(&[1, 2], &[0.5, 0.1]);
        let mut g = Graph::new();
        let (xv, hv) = (g.constant(x.clone()), g.constant(h.clone()));
        let out = cell.forward(&mut g, &store, xv, hv);
        let wi = store.get("gru.input.weight").unwrap();
        let bi = store.get("gru.input.bias").unwrap();
        let wh = store.get("gru.hidden.weight").unwrap();
        let bh = store.get("gru.hidden.bias").unwrap();
        let lin = |w: &Tensor<f64>, b: &Tensor<f64>, v: &Tensor<f64>, j: usize| {
            b.data()[j] + (0..2).map(|i| v.data()[i] * w.at(&[i, j])).sum::<f64>()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for u in 0..2 {
            let r = sig(lin(wi, bi, &x, u) + lin(wh, bh, &h, u));
            let z = sig(lin(wi, bi, &x, 2 + u) + lin(wh, bh, &h, 2 + u));
            let n = (lin(wi, bi, &x, 4 + u) + r * lin(wh, bh, &h, 4 + u)).tanh();
            let want = (1.0 - z) * n + z * h.data()[u];
            assert!((g.value(out).data()[u] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let cell = GruCell::new(&mut store, &mut rng, "gru", 3, 4);
        let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let h = Tensor::uniform(&[2, 4], -1.0, 1.0, &mut rng);
        let err = check(
            &[x, h],
            |g, v| {
                let o = cell.forward(g, &store, v[0], v[1]);
                let s = g.square(o);
                g.sum_all(s)
            },
            1e-6,
        );
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::zeros(&[2]), true);
        assert!(store.set("a", Tensor::zeros(&[3])).is_err());
        assert!(store.set("b", Tensor::zeros(&[2])).is_err());
    }
}
