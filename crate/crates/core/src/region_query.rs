//! Region query module: cross-attention from crop features to region features, channel
//! self-attention, and fusion with the downsampled crop into the binding input.
//!
//! Token tensors are `[B, N, D]` with `N = h * w`; feature maps are `[B, D, h, w]`.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::conv::{avg_pool, ConvGeometry};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    /// Normalize the spatial similarity over the query index instead of the key index.
    pub paper_norm_axis: bool,
    /// Largest accepted |logit|; `None` disables the check.
    pub max_logit: Option<f64>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { paper_norm_axis: false, max_logit: Some(80.0) }
    }
}

/// `[B, D, h, w] -> [B, N, D]`.
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let [b, d, h, w] = dims4(g.shape(x));
    let flat = g.reshape(x, &[b, d, h * w]);
    g.permute(flat, &[0, 2, 1])
}

/// `[B, N, D] -> [B, D, h, w]`.
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Var {
    let [b, n, d] = dims3(g.shape(t));
    assert_eq!(n, h * w, "token count vs grid");
    let p = g.permute(t, &[0, 2, 1]);
    g.reshape(p, &[b, d, h, w])
}

fn dims4(s: &[usize]) -> [usize; 4] {
    s.try_into().unwrap_or_else(|_| panic!("expected rank-4 shape, got {s:?}"))
}

fn dims3(s: &[usize]) -> [usize; 3] {
    s.try_into().unwrap_or_else(|_| panic!("expected rank-3 shape, got {s:?}"))
}

fn check_tokens(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    match *shape {
        [b, n, d] if b > 0 && n > 0 && d > 0 => Ok([b, n, d]),
        ref s => Err(Error::validation(format!("{what}: expected non-empty [B, N, D], got {s:?}"))),
    }
}

fn scaled_logits<T: Scalar>(g: &mut Graph<T>, raw: Var, denom: f64, cfg: &AttentionConfig) -> Result<Var> {
    let logits = g.scale(raw, T::cast(1.0 / denom));
    let v = g.value(logits);
    if !v.all_finite() {
        return Err(Error::Numeric { step: 0, message: "attention logits are not finite".into() });
    }
    if let Some(limit) = cfg.max_logit {
        let m = v.max_abs().as_f64();
        if m > limit {
            return Err(Error::Numeric {
                step: 0,
                message: format!("attention logit magnitude {m:.3} exceeds {limit}"),
            });
        }
    }
    Ok(logits)
}

/// Spatial cross-attention: `S = softmax(q k^T / sqrt(D))`, output `S v + q` with `v = k`.
pub fn rqn<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, cfg: &AttentionConfig) -> Result<Var> {
    let [_, _, d] = check_tokens(g.shape(q), "rqn query")?;
    if g.shape(q) != g.shape(k) {
        return Err(Error::validation(format!("rqn: query {:?} vs key {:?}", g.shape(q), g.shape(k))));
    }
    let raw = g.matmul_t(q, k, false, true);
    let logits = scaled_logits(g, raw, (d as f64).sqrt(), cfg)?;
    let s = g.softmax(logits, if cfg.paper_norm_axis { 1 } else { 2 });
    let sv = g.matmul(s, k);
    Ok(g.add(sv, q))
}

/// Channel self-attention: `S = softmax(q^T q / (N sqrt(D)))` normalized over its first index,
/// output `v S + q` with `k = v = q`.
///
/// The channel products are averaged over the `N` tokens rather than summed, so the logit scale
/// does not grow with the grid size.
pub fn sqn<T: Scalar>(g: &mut Graph<T>, q: Var, cfg: &AttentionConfig) -> Result<Var> {
    let [_, n, d] = check_tokens(g.shape(q), "sqn")?;
    let raw = g.matmul_t(q, q, true, false);
    let logits = scaled_logits(g, raw, n as f64 * (d as f64).sqrt(), cfg)?;
    let s = g.softmax(logits, 1);
    let vs = g.matmul(q, s);
    Ok(g.add(vs, q))
}

#[derive(Clone, Debug)]
pub struct RegionQuery {
    pub fuse: Conv2d,
    pub enable_rqn: bool,
    pub enable_sqn: bool,
    pub attention: AttentionConfig,
    pub dim: usize,
    pub eta: usize,
}

impl RegionQuery {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        dim: usize,
        eta: usize,
        enable_rqn: bool,
        enable_sqn: bool,
        attention: AttentionConfig,
    ) -> Self {
        let fuse = Conv2d::new(store, rng, "rqm.fuse", 2 * dim + 3, dim, ConvGeometry::new(1, 1, 0));
        RegionQuery { fuse, enable_rqn, enable_sqn, attention, dim, eta }
    }

    /// Projects `[A_rqn | A_sqn | image]` (all `[B, *, h, w]`) back to `D` channels.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        a_rqn: Var,
        a_sqn: Var,
        image: Var,
    ) -> Result<Var> {
        let (sr, ss, si) = (g.shape(a_rqn).to_vec(), g.shape(a_sqn).to_vec(), g.shape(image).to_vec());
        if sr.len() != 4
            || sr != ss
            || sr[1] != self.dim
            || si.len() != 4
            || si[1] != 3
            || si[0] != sr[0]
            || si[2..] != sr[2..]
        {
            return Err(Error::validation(format!("fuse: shapes {sr:?}, {ss:?}, {si:?} do not line up")));
        }
        let cat = g.concat(&[a_rqn, a_sqn, image], 1);
        Ok(self.fuse.forward(g, store, cat))
    }

    /// Binding input `F: [B, D, h, w]` from query features, key features and the full-size crops.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query_feat: Var,
        key_feat: Var,
        crops: &Tensor<T>,
    ) -> Result<Var> {
        let [b, d, h, w] = dims4(g.shape(query_feat));
        if g.shape(key_feat) != g.shape(query_feat) {
            return Err(Error::validation(format!(
                "key features {:?} vs query {:?}",
                g.shape(key_feat),
                g.shape(query_feat)
            )));
        }
        let q = to_tokens(g, query_feat);
        let a_rqn = if self.enable_rqn {
            let k = to_tokens(g, key_feat);
            let a = rqn(g, q, k, &self.attention)?;
            from_tokens(g, a, h, w)
        } else {
            g.constant(Tensor::zeros(&[b, d, h, w]))
        };
        let a_sqn = if self.enable_sqn {
            let a = sqn(g, q, &self.attention)?;
            from_tokens(g, a, h, w)
        } else {
            g.constant(Tensor::zeros(&[b, d, h, w]))
        };
        let small = avg_pool(crops, self.eta);
        let img = g.constant(small);
        self.fuse(g, store, a_rqn, a_sqn, img)
    }
}
