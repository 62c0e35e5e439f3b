//! The full network: encoders, region query, binding and the two decoders.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::binding::{Binder, BindingWeights};
use crate::datamodel::derive_seed;
use crate::decoding::{compose, LayerDecoder, LayerStack, MaskDecoder};
use crate::encoders::EncoderPair;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::region_query::{AttentionConfig, RegionQuery};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture settings. Everything here is recorded in checkpoints and must match on resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    /// Downsampling ratio between crop and feature grid.
    pub eta: usize,
    pub dim: usize,
    pub slots: usize,
    pub steps: usize,
    pub enc_hidden: [usize; 3],
    pub mask_widths: Vec<usize>,
    pub layer_widths: Vec<usize>,
    /// Feed the pooled crop to every mask decoder stage.
    pub image_skip: bool,
    pub enable_rqn: bool,
    pub enable_sqn: bool,
    pub paper_norm_axis: bool,
    pub max_logit: Option<f64>,
    pub momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            crop_h: 128,
            crop_w: 256,
            eta: 4,
            dim: 64,
            slots: 2,
            steps: 5,
            enc_hidden: [32, 64, 64],
            mask_widths: vec![64, 32, 16],
            layer_widths: vec![64, 32, 16],
            image_skip: true,
            enable_rqn: true,
            enable_sqn: true,
            paper_norm_axis: false,
            max_logit: Some(80.0),
            momentum: 0.999,
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

pub(crate) fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::validation(format!("{key}: cannot parse {v:?}")))
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::validation(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl ModelConfig {
    /// Flat `key = value` view, sorted by key.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("data.crop_h", self.crop_h.to_string());
        put("data.crop_w", self.crop_w.to_string());
        put("encoders.eta", self.eta.to_string());
        put("encoders.dim", self.dim.to_string());
        put("encoders.hidden", list(&self.enc_hidden));
        put("encoders.momentum", self.momentum.to_string());
        put("rqm.enable_rqn", self.enable_rqn.to_string());
        put("rqm.enable_sqn", self.enable_sqn.to_string());
        put("rqm.paper_norm_axis", self.paper_norm_axis.to_string());
        put("rqm.max_logit", self.max_logit.map_or("none".to_string(), |v| v.to_string()));
        put("binding.K", self.slots.to_string());
        put("binding.T", self.steps.to_string());
        put("decoding.mask_widths", list(&self.mask_widths));
        put("decoding.layer_widths", list(&self.layer_widths));
        put("decoding.image_skip", self.image_skip.to_string());
        m
    }

    /// Applies one setting. Returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "data.crop_h" => self.crop_h = parse_num(key, v)?,
            "data.crop_w" => self.crop_w = parse_num(key, v)?,
            "encoders.eta" => self.eta = parse_num(key, v)?,
            "encoders.dim" => self.dim = parse_num(key, v)?,
            "encoders.hidden" => {
                self.enc_hidden = parse_list(key, v)?
                    .try_into()
                    .map_err(|_| Error::validation(format!("{key}: expected three widths")))?
            }
            "encoders.momentum" => self.momentum = parse_num(key, v)?,
            "rqm.enable_rqn" => self.enable_rqn = parse_bool(key, v)?,
            "rqm.enable_sqn" => self.enable_sqn = parse_bool(key, v)?,
            "rqm.paper_norm_axis" => self.paper_norm_axis = parse_bool(key, v)?,
            "rqm.max_logit" => self.max_logit = if v == "none" { None } else { Some(parse_num(key, v)?) },
            "binding.K" => self.slots = parse_num(key, v)?,
            "binding.T" => self.steps = parse_num(key, v)?,
            "decoding.mask_widths" => self.mask_widths = parse_list(key, v)?,
            "decoding.layer_widths" => self.layer_widths = parse_list(key, v)?,
            "decoding.image_skip" => self.image_skip = parse_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.enc_hidden.contains(&0)
            || self.mask_widths.contains(&0)
            || self.layer_widths.contains(&0)
        {
            return Err(Error::validation("layer widths must be positive"));
        }
        if self.crop_h == 0
            || self.crop_w == 0
            || !self.crop_h.is_multiple_of(self.eta)
            || !self.crop_w.is_multiple_of(self.eta)
        {
            return Err(Error::validation(format!(
                "crop {}x{} is not divisible by eta {}",
                self.crop_h, self.crop_w, self.eta
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::validation(format!("momentum must lie in [0, 1], got {}", self.momentum)));
        }
        if self.max_logit.is_some_and(|v| !(v > 0.0)) {
            return Err(Error::validation("rqm.max_logit must be positive"));
        }
        Ok(())
    }

    /// SHA-256 over the sorted `key=value` lines.
    pub fn hash(&self) -> String {
        hash_entries(&self.entries())
    }

    /// Human readable list of differing keys, empty when equal.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let (a, b) = (self.entries(), other.entries());
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} vs {}", b.get(k).map_or("<missing>", |s| s.as_str())))
            .collect()
    }
}

pub fn hash_entries(entries: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in entries {
        h.update(format!("{k}={v}\n").as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub stack: LayerStack,
    pub slots: Var,
    pub weights: BindingWeights,
}

pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub encoders: EncoderPair,
    pub rqm: RegionQuery,
    pub binder: Binder,
    pub mask_dec: MaskDecoder,
    pub layer_dec: LayerDecoder,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model/init"));
        let mut params = ParamStore::new();
        let encoders = EncoderPair::new(&mut params, &mut rng, cfg.enc_hidden, cfg.dim, cfg.eta, cfg.momentum)?;
        let attention = AttentionConfig { paper_norm_axis: cfg.paper_norm_axis, max_logit: cfg.max_logit };
        let rqm = RegionQuery::new(&mut params, &mut rng, cfg.dim, cfg.eta, cfg.enable_rqn, cfg.enable_sqn, attention);
        let binder = Binder::new(&mut params, &mut rng, cfg.dim, cfg.slots, cfg.steps)?;
        let mask_dec = MaskDecoder::new(&mut params, &mut rng, cfg.dim, cfg.eta, &cfg.mask_widths, cfg.image_skip)?;
        let layer_dec = LayerDecoder::new(&mut params, &mut rng, cfg.dim, cfg.eta, &cfg.layer_widths)?;
        Ok(Model { cfg, params, encoders, rqm, binder, mask_dec, layer_dec })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.cfg.crop_h / self.cfg.eta, self.cfg.crop_w / self.cfg.eta)
    }

    /// `crops` and `key_inputs` are `[B, 3, H, W]`; the key branch sees `key_inputs` only.
    pub fn forward(&self, g: &mut Graph<T>, crops: &Tensor<T>, key_inputs: &Tensor<T>) -> Result<Forward> {
        let want = [crops.shape().first().copied().unwrap_or(0), 3, self.cfg.crop_h, self.cfg.crop_w];
        if crops.shape() != want || want[0] == 0 {
            return Err(Error::validation(format!("crops {:?}, expected {want:?}", crops.shape())));
        }
        if key_inputs.shape() != crops.shape() {
            return Err(Error::validation(format!("key inputs {:?} vs crops {:?}", key_inputs.shape(), crops.shape())));
        }
        let x = g.constant(crops.clone());
        let q = self.encoders.encode_query(g, &self.params, x)?;
        let k = self.encoders.encode_key(g, &self.params, key_inputs)?;
        let feat = self.rqm.forward(g, &self.params, q, k, crops)?;
        let bound = self.binder.bind(g, &self.params, feat)?;
        let grid = self.grid();
        let alpha = self.mask_dec.decode_masks(g, &self.params, bound.slots, Some(crops), grid)?;
        let layers = self.layer_dec.decode_layers(g, &self.params, bound.slots, grid)?;
        if !g.value(alpha).all_finite() || !g.value(layers).all_finite() {
            return Err(Error::Numeric { step: 0, message: "decoder output is not finite".into() });
        }
        let recon = compose(g, alpha, layers)?;
        Ok(Forward { stack: LayerStack { alpha, layers, recon }, slots: bound.slots, weights: bound.weights })
    }

    pub fn momentum_step(&mut self) -> Result<()> {
        self.encoders.momentum_step(&mut self.params)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.iter().filter(|(_, e)| e.trainable).map(|(n, _)| n.to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            crop_h: 16,
            crop_w: 32,
            dim: 8,
            enc_hidden: [4, 8, 8],
            mask_widths: vec![8, 6, 4],
            layer_widths: vec![8, 6, 4],
            ..Default::default()
        }
    }

    #[test]
    fn entries_round_trip() {
        let mut cfg = tiny();
        cfg.max_logit = None;
        cfg.enable_sqn = false;
        let mut back = ModelConfig::default();
        for (k, v) in cfg.entries() {
            assert!(back.set(&k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(!back.set("train.seed", "1").unwrap());
    }

    #[test]
    fn diff_lists_changed_keys() {
        let a = tiny();
        let b = ModelConfig { slots: 3, ..tiny() };
        assert_eq!(a.diff(&b), vec!["binding.K: 2 vs 3".to_string()]);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut c = tiny();
        assert!(c.set("binding.K", "two").is_err());
        assert!(c.set("encoders.hidden", "1,2").is_err());
        assert!(ModelConfig { crop_h: 18, ..tiny() }.validate().is_err());
        assert!(ModelConfig { momentum: 1.5, ..tiny() }.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_simplex() {
        let m = Model::<f64>::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[2, 3, 16, 32], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let out = m.forward(&mut g, &x, &x).unwrap();
        assert_eq!(g.shape(out.stack.alpha), &[2, 2, 16, 32]);
        assert_eq!(g.shape(out.stack.layers), &[2, 2, 3, 16, 32]);
        assert_eq!(g.shape(out.stack.recon), &[2, 3, 16, 32]);
        for s in g.value(out.stack.alpha).sum_axis(1).data() {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::<f32>::new(tiny(), 11).unwrap();
        let b = Model::<f32>::new(tiny(), 11).unwrap();
        let c = Model::<f32>::new(tiny(), 12).unwrap();
        let same =
            |x: &Model<f32>, y: &Model<f32>| x.params.iter().zip(y.params.iter()).all(|(p, q)| p.1.value == q.1.value);
        assert!(same(&a, &b));
        assert!(!same(&a, &c));
    }

    #[test]
    fn wrong_crop_size_is_rejected() {
        let m = Model::<f64>::new(tiny(), 3).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let mut g = Graph::new();
        assert!(matches!(m.forward(&mut g, &x, &x), Err(Error::Validation(_))));
    }

    #[test]
    fn key_parameters_are_frozen() {
        let m = Model::<f64>::new(tiny(), 3).unwrap();
        let names = m.trainable_names();
        assert!(names.iter().all(|n| !n.starts_with("key.")));
        assert!(names.iter().any(|n| n.starts_with("query.")));
    }
}
