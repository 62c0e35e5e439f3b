//! Query and key image encoders and the momentum rule that ties them.
//!
//! Both encoders share one architecture: four 3x3 convolutions, each followed by a ReLU,
//! with stride 2 at `log2(eta)` of the stages. The key copy is stored as frozen parameters
//! under its own prefix and only changes through [`EncoderPair::momentum_step`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const QUERY_PREFIX: &str = "query";
pub const KEY_PREFIX: &str = "key";

#[derive(Clone, Debug)]
pub struct Encoder {
    convs: Vec<Conv2d>,
    eta: usize,
}

/// Strided stages for a given downsampling ratio: stages `1..=log2(eta)`, shifted to start at 0
/// only when all four stages must stride.
fn strided_stages(eta: usize) -> Result<Vec<bool>> {
    let n = match eta {
        1 => 0,
        2 => 1,
        4 => 2,
        8 => 3,
        16 => 4,
        _ => return Err(Error::validation(format!("downsampling ratio must be a power of two up to 16, got {eta}"))),
    };
    let first = if n == 4 { 0 } else { 1 };
    Ok((0..4).map(|i| i >= first && i < first + n).collect())
}

impl Encoder {
    /// `hidden` holds the three inner widths; the last stage outputs `dim` channels.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        hidden: [usize; 3],
        dim: usize,
        eta: usize,
    ) -> Result<Self> {
        let strides = strided_stages(eta)?;
        let widths = [3, hidden[0], hidden[1], hidden[2], dim];
        let convs = (0..4)
            .map(|i| {
                let geom = ConvGeometry::new(3, if strides[i] { 2 } else { 1 }, 1);
                Conv2d::new(store, rng, &format!("{prefix}.conv{i}"), widths[i], widths[i + 1], geom)
            })
            .collect();
        Ok(Encoder { convs, eta })
    }

    /// Same layer layout under another prefix, without creating parameters.
    pub fn renamed(&self, from: &str, to: &str) -> Self {
        let mut e = self.clone();
        for c in &mut e.convs {
            c.weight = c.weight.replacen(from, to, 1);
            c.bias = c.bias.replacen(from, to, 1);
        }
        e
    }

    pub fn eta(&self) -> usize {
        self.eta
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.convs.iter().flat_map(|c| [c.weight.as_str(), c.bias.as_str()])
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, 3, h, w] if h % self.eta == 0 && w % self.eta == 0 && h > 0 && w > 0 => Ok(()),
            [_, 3, h, w] => Err(Error::validation(format!("input {h}x{w} is not divisible by {}", self.eta))),
            ref s => Err(Error::validation(format!("encoder expects [B, 3, H, W], got {s:?}"))),
        }
    }

    /// `[B, 3, H, W] -> [B, D, H/eta, W/eta]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(g, store, h);
            h = g.relu(y);
        }
        Ok(h)
    }
}

/// Query encoder plus its frozen, momentum-averaged key copy.
#[derive(Clone, Debug)]
pub struct EncoderPair {
    pub query: Encoder,
    pub key: Encoder,
    pub momentum: f64,
}

impl EncoderPair {
    /// Creates the query encoder and initializes the key encoder as an exact frozen copy.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        hidden: [usize; 3],
        dim: usize,
        eta: usize,
        momentum: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::validation(format!("momentum must lie in [0, 1], got {momentum}")));
        }
        let query = Encoder::new(store, rng, QUERY_PREFIX, hidden, dim, eta)?;
        let key = query.renamed(QUERY_PREFIX, KEY_PREFIX);
        for (q, k) in query.param_names().zip(key.param_names()) {
            let v = store.get(q).expect("query parameter").clone();
            store.insert(k, v, false);
        }
        Ok(EncoderPair { query, key, momentum })
    }

    pub fn encode_query<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, crop: Var) -> Result<Var> {
        self.query.forward(g, store, crop)
    }

    /// The key branch never produces gradients: its parameters are frozen and its input is
    /// taken as a constant.
    pub fn encode_key<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, region: &Tensor<T>) -> Result<Var> {
        let x = g.constant(region.clone());
        let out = self.key.forward(g, store, x)?;
        debug_assert!(!g.needs_grad(out), "key branch must not require gradients");
        Ok(out)
    }

    /// In-place momentum update of every key parameter, called once per optimizer step.
    pub fn momentum_step<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (q, k) in self.query.param_names().zip(self.key.param_names()) {
            let qv = store.get(q).ok_or_else(|| Error::Internal(format!("missing {q}")))?;
            let kv = store.get(k).ok_or_else(|| Error::Internal(format!("missing {k}")))?;
            let next = momentum_update(kv, qv, self.momentum)?;
            store.set(k, next).map_err(|e| Error::Internal(e.to_string()))?;
        }
        Ok(())
    }
}

/// `m * key + (1 - m) * query`, elementwise.
pub fn momentum_update<T: Scalar>(key: &Tensor<T>, query: &Tensor<T>, m: f64) -> Result<Tensor<T>> {
    if key.shape() != query.shape() {
        return Err(Error::Internal(format!(
            "key shape {:?} differs from query shape {:?}",
            key.shape(),
            query.shape()
        )));
    }
    let (a, b) = (T::cast(m), T::cast(1.0 - m));
    Ok(key.zip_map(query, |k, q| a * k + b * q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(eta: usize, dim: usize) -> (ParamStore<f64>, EncoderPair) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EncoderPair::new(&mut store, &mut rng, [4, 6, 6], dim, eta, 0.999).unwrap();
        (store, p)
    }

    #[test]
    fn output_shape_follows_eta() {
        for eta in [4, 8] {
            let (store, p) = pair(eta, 8);
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(&[2, 3, 32, 64]));
            let y = p.encode_query(&mut g, &store, x).unwrap();
            assert_eq!(g.shape(y), &[2, 8, 32 / eta, 64 / eta]);
            assert!(g.value(y).all_finite());
        }
    }

    #[test]
    fn paper_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderPair::new(&mut store, &mut rng, [32, 64, 64], 64, 4, 0.999).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 128, 256]));
        let y = p.encode_query(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 64, 32, 64]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let (store, p) = pair(4, 8);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 30, 64]));
        assert!(matches!(p.encode_query(&mut g, &store, x), Err(Error::Validation(_))));
    }

    #[test]
    fn key_starts_as_copy_and_matches_query() {
        let (store, p) = pair(4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let q = p.encode_query(&mut g, &store, xv).unwrap();
        let k = p.encode_key(&mut g, &store, &x).unwrap();
        assert_eq!(g.value(q), g.value(k));
        assert!(!g.needs_grad(k));
    }

    #[test]
    fn momentum_cases() {
        let k = Tensor::<f64>::full(&[3], 2.0);
        let q = Tensor::<f64>::full(&[3], 1.0);
        assert_eq!(momentum_update(&k, &q, 1.0).unwrap(), k);
        assert_eq!(momentum_update(&k, &q, 0.0).unwrap(), q);
        for v in momentum_update(&k, &q, 0.9).unwrap().data() {
            assert!((v - (0.9 * 2.0 + 0.1 * 1.0)).abs() < 1e-12);
        }
        assert!(matches!(momentum_update(&k, &Tensor::zeros(&[2]), 0.5), Err(Error::Internal(_))));
    }

    #[test]
    fn momentum_step_with_zero_copies_query() {
        let (mut store, mut p) = pair(4, 8);
        let name = "query.conv0.weight";
        let shifted = store.get(name).unwrap().map(|v| v + 1.0);
        store.set(name, shifted.clone()).unwrap();
        p.momentum = 0.0;
        p.momentum_step(&mut store).unwrap();
        assert_eq!(store.get("key.conv0.weight").unwrap(), &shifted);
        assert!(!store.is_trainable("key.conv0.weight"));
    }
}
