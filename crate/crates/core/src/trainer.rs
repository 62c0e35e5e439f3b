//! Self-supervised training: configuration, schedules, batches, the optimizer loop and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::datamodel::{
    build_replacement_pair, crop_regions, derive_seed, load_dataset, ColorParams, CropConfig, GeometricParams, Image,
    RegionCrop,
};
use crate::error::{Error, Result};
use crate::losses::{consistency_loss, entropy_loss, recon_loss, total_loss, weighted_total, LossBundle, LossWeights};
use crate::model::{hash_entries, parse_bool, parse_num, Model, ModelConfig};
use crate::optim::Adam;
use crate::plot;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer, schedule and data settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_period: u64,
    pub decay_factor: f64,
    pub lambda_scale_period: u64,
    pub lambda_scale_factor: f64,
    pub total_steps: u64,
    /// Crops per step. With the consistency loss on, this counts both members of every pair.
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Initial loss weights; the entropy and consistency weights grow on the schedule.
    pub lambda: LossWeights,
    pub enable_rep: bool,
    pub geometric_aug: bool,
    pub color_aug: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            warmup_steps: 2000,
            decay_period: 100_000,
            decay_factor: 0.5,
            lambda_scale_period: 100_000,
            lambda_scale_factor: 5.0,
            total_steps: 500_000,
            batch_size: 16,
            seed: 0,
            checkpoint_every: 10_000,
            lambda: LossWeights { recon: 100.0, entr: 0.01, rep: 0.01 },
            enable_rep: true,
            geometric_aug: true,
            color_aug: true,
        }
    }
}

impl TrainConfig {
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("train.base_lr", self.base_lr.to_string());
        put("train.warmup_steps", self.warmup_steps.to_string());
        put("train.decay_period", self.decay_period.to_string());
        put("train.decay_factor", self.decay_factor.to_string());
        put("train.lambda_scale_period", self.lambda_scale_period.to_string());
        put("train.lambda_scale_factor", self.lambda_scale_factor.to_string());
        put("train.total_steps", self.total_steps.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.seed", self.seed.to_string());
        put("train.checkpoint_every", self.checkpoint_every.to_string());
        put("losses.lambda_recon", self.lambda.recon.to_string());
        put("losses.lambda_entr", self.lambda.entr.to_string());
        put("losses.lambda_rep", self.lambda.rep.to_string());
        put("losses.enable_rep", self.enable_rep.to_string());
        put("data.geometric_aug", self.geometric_aug.to_string());
        put("data.color_aug", self.color_aug.to_string());
        m
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "train.base_lr" => self.base_lr = parse_num(key, v)?,
            "train.warmup_steps" => self.warmup_steps = parse_num(key, v)?,
            "train.decay_period" => self.decay_period = parse_num(key, v)?,
            "train.decay_factor" => self.decay_factor = parse_num(key, v)?,
            "train.lambda_scale_period" => self.lambda_scale_period = parse_num(key, v)?,
            "train.lambda_scale_factor" => self.lambda_scale_factor = parse_num(key, v)?,
            "train.total_steps" => self.total_steps = parse_num(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.seed" => self.seed = parse_num(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "losses.lambda_recon" => self.lambda.recon = parse_num(key, v)?,
            "losses.lambda_entr" => self.lambda.entr = parse_num(key, v)?,
            "losses.lambda_rep" => self.lambda.rep = parse_num(key, v)?,
            "losses.enable_rep" => self.enable_rep = parse_bool(key, v)?,
            "data.geometric_aug" => self.geometric_aug = parse_bool(key, v)?,
            "data.color_aug" => self.color_aug = parse_bool(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("train.warmup_steps", self.warmup_steps),
            ("train.decay_period", self.decay_period),
            ("train.lambda_scale_period", self.lambda_scale_period),
            ("train.total_steps", self.total_steps),
            ("train.checkpoint_every", self.checkpoint_every),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::validation(format!("{k} must be positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::validation("train.batch_size must be positive"));
        }
        if self.enable_rep && !self.batch_size.is_multiple_of(2) {
            return Err(Error::validation("train.batch_size must be even when pairs share a batch"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::validation(format!("train.decay_factor must lie in (0, 1), got {}", self.decay_factor)));
        }
        if !(self.base_lr > 0.0) || !(self.lambda_scale_factor > 0.0) {
            return Err(Error::validation("learning rate and lambda scale factor must be positive"));
        }
        let w = self.lambda;
        if [w.recon, w.entr, w.rep].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::validation("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr`, then a step decay by `decay_factor` every `decay_period` steps.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let k = (step - cfg.warmup_steps) / cfg.decay_period;
    cfg.base_lr * cfg.decay_factor.powi(k.min(i32::MAX as u64) as i32)
}

/// The reconstruction weight stays fixed; the entropy and consistency weights are multiplied by
/// `lambda_scale_factor` every `lambda_scale_period` steps.
pub fn lambda_schedule(step: u64, cfg: &TrainConfig) -> LossWeights {
    let k = step / cfg.lambda_scale_period;
    let f = cfg.lambda_scale_factor.powi(k.min(i32::MAX as u64) as i32);
    LossWeights { recon: cfg.lambda.recon, entr: cfg.lambda.entr * f, rep: cfg.lambda.rep * f }
}

/// A component that can be switched off for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Rqn,
    Sqn,
    Rep,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rqn" => Ok(Ablation::Rqn),
            "sqn" => Ok(Ablation::Sqn),
            "rep" => Ok(Ablation::Rep),
            _ => Err(Error::validation(format!("unknown ablation {s:?} (expected rqn, sqn or rep)"))),
        }
    }
}

/// Model and training settings together, read from flat `key = value` files.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    /// `desk` is the small synthetic-data profile; `paper` uses the full crop size and schedule.
    pub fn preset(name: &str) -> Result<Config> {
        match name {
            "paper" => Ok(Config { model: ModelConfig::default(), train: TrainConfig::default() }),
            "desk" => Ok(Config {
                model: ModelConfig {
                    crop_h: 64,
                    crop_w: 128,
                    eta: 4,
                    dim: 32,
                    enc_hidden: [16, 32, 32],
                    mask_widths: vec![32, 16],
                    layer_widths: vec![32, 16, 8],
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    base_lr: 1e-3,
                    warmup_steps: 100,
                    decay_period: 2000,
                    lambda_scale_period: 1000,
                    total_steps: 5000,
                    checkpoint_every: 1000,
                    ..TrainConfig::default()
                },
            }),
            _ => Err(Error::validation(format!("unknown preset {name:?} (expected desk or paper)"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? || self.train.set(key, value)? {
            Ok(())
        } else {
            Err(Error::validation(format!("unknown configuration key {key:?}")))
        }
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::validation(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn ablate(&mut self, a: Ablation) {
        match a {
            Ablation::Rqn => self.model.enable_rqn = false,
            Ablation::Sqn => self.model.enable_sqn = false,
            Ablation::Rep => self.train.enable_rep = false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = self.model.entries();
        m.extend(self.train.entries());
        m
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hash_entries(&self.entries())
    }

    /// Switch summary recorded in checkpoints, e.g. `rqn=on sqn=on rep=off`.
    pub fn ablation_summary(&self) -> String {
        let f = |b: bool| if b { "on" } else { "off" };
        format!("rqn={} sqn={} rep={}", f(self.model.enable_rqn), f(self.model.enable_sqn), f(self.train.enable_rep))
    }

    pub fn from_text(text: &str) -> Result<Config> {
        let mut c = Config::preset("paper")?;
        c.apply_text(text)?;
        Ok(c)
    }
}

/// Inputs of one optimizer step. With `paired`, rows `2i` and `2i + 1` are an original crop and
/// its background-replaced twin.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub crops: Tensor<T>,
    pub keys: Tensor<T>,
    pub paired: bool,
}

fn stack_images<T: Scalar>(images: &[&Image<T>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::validation("empty batch"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if !img.same_dims(first) {
            return Err(Error::validation("batch images differ in size"));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(&[images.len(), c, h, w], data))
}

impl<T: Scalar> Batch<T> {
    /// Stacks replacement pairs; both members of a pair get the same key-branch transform.
    pub fn from_pairs(pairs: &[crate::datamodel::ReplacementPair<T>], geometric: &[GeometricParams]) -> Result<Self> {
        if pairs.is_empty() || geometric.len() != pairs.len() {
            return Err(Error::validation("need one geometric transform per pair and at least one pair"));
        }
        let mut crops = Vec::new();
        let mut keys = Vec::new();
        for (p, geo) in pairs.iter().zip(geometric) {
            crops.push(p.original.crop.clone());
            crops.push(p.replaced.crop.clone());
            keys.push(geo.apply(&p.original.region_image));
            keys.push(geo.apply(&p.replaced.region_image));
        }
        Ok(Batch {
            crops: stack_images(&crops.iter().collect::<Vec<_>>())?,
            keys: stack_images(&keys.iter().collect::<Vec<_>>())?,
            paired: true,
        })
    }

    /// Independent crops, no replacement branch.
    pub fn from_crops(crops: &[RegionCrop<T>], geometric: &[GeometricParams]) -> Result<Self> {
        if crops.is_empty() || geometric.len() != crops.len() {
            return Err(Error::validation("need one geometric transform per crop and at least one crop"));
        }
        let keys: Vec<Image<T>> = crops.iter().zip(geometric).map(|(c, g)| g.apply(&c.region_image)).collect();
        Ok(Batch {
            crops: stack_images(&crops.iter().map(|c| &c.crop).collect::<Vec<_>>())?,
            keys: stack_images(&keys.iter().collect::<Vec<_>>())?,
            paired: false,
        })
    }

    /// SHA-256 of the batch pixels, used to identify inputs in diagnostics.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(T::to_le_bytes_vec(self.crops.data()));
        h.update(T::to_le_bytes_vec(self.keys.data()));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub recon: f64,
    pub entr: f64,
    pub rep: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub record: StepRecord,
    pub bundle: LossBundle,
    /// Norm of all gradients that reached key-encoder parameters; zero by construction.
    pub key_grad_norm: f64,
    pub inputs_hash: String,
}

/// Written next to the run when a step produces non-finite values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NanDump {
    pub step: u64,
    pub inputs_hash: String,
    pub recon: f64,
    pub entr: f64,
    pub rep: f64,
    pub total: f64,
    pub message: String,
}

pub struct Trainer<T: Scalar> {
    pub config: Config,
    pub model: Model<T>,
    pub adam: Adam<T>,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub crops: Vec<RegionCrop<T>>,
    /// Directory for diagnostic dumps.
    pub dump_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: Config, crops: Vec<RegionCrop<T>>) -> Result<Self> {
        config.validate()?;
        let want = (config.model.crop_h, config.model.crop_w);
        if crops.is_empty() {
            return Err(Error::validation("no training crops"));
        }
        if let Some(c) = crops.iter().find(|c| (c.crop.height, c.crop.width) != want) {
            return Err(Error::validation(format!(
                "crop {} is {}x{}, expected {}x{}",
                c.source_id, c.crop.height, c.crop.width, want.0, want.1
            )));
        }
        if config.train.enable_rep && crops.len() < 2 {
            return Err(Error::validation("background replacement needs at least two crops"));
        }
        let model = Model::new(config.model.clone(), config.train.seed)?;
        Ok(Trainer { config, model, adam: Adam::default(), step: 0, crops, dump_dir: None })
    }

    /// The batch for a given step; a pure function of the seed, the step and the crop list.
    pub fn batch_for(&self, step: u64) -> Result<Batch<T>> {
        let tc = &self.config.train;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &format!("train/batch/{step}")));
        let n = self.crops.len();
        let (h, w) = (self.config.model.crop_h, self.config.model.crop_w);
        let geo = |rng: &mut ChaCha8Rng| {
            if tc.geometric_aug {
                GeometricParams::sample(rng.random(), h, w)
            } else {
                GeometricParams::IDENTITY
            }
        };
        let color =
            |rng: &mut ChaCha8Rng| if tc.color_aug { ColorParams::sample(rng.random()) } else { ColorParams::IDENTITY };
        if tc.enable_rep {
            let mut pairs = Vec::new();
            let mut geos = Vec::new();
            for _ in 0..tc.batch_size / 2 {
                let fg = rng.random_range(0..n);
                let bg = (fg + rng.random_range(1..n)) % n;
                let cp = color(&mut rng);
                pairs.push(build_replacement_pair(&self.crops[fg], &self.crops[bg], &cp)?);
                geos.push(geo(&mut rng));
            }
            Batch::from_pairs(&pairs, &geos)
        } else {
            let mut crops = Vec::new();
            let mut geos = Vec::new();
            for _ in 0..tc.batch_size {
                let i = rng.random_range(0..n);
                let cp = color(&mut rng);
                crops.push(self.crops[i].with_pixels(cp.apply(&self.crops[i].crop))?);
                geos.push(geo(&mut rng));
            }
            Batch::from_crops(&crops, &geos)
        }
    }

    /// Runs the next step on its scheduled batch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let batch = self.batch_for(self.step)?;
        self.step_on(&batch)
    }

    /// Forward, loss, one Adam update and one momentum update on the given batch.
    pub fn step_on(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        let step = self.step;
        let lr = lr_schedule(step, &self.config.train);
        let weights = lambda_schedule(step, &self.config.train);
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &batch.crops, &batch.keys).map_err(|e| match e {
            Error::Numeric { message, .. } => {
                let nan = f64::NAN;
                let r = StepRecord {
                    step,
                    lr,
                    lambda2: weights.entr,
                    lambda3: weights.rep,
                    recon: nan,
                    entr: nan,
                    rep: nan,
                    total: nan,
                };
                self.numeric_failure(&r, &batch.hash(), &message)
            }
            other => other,
        })?;
        let target = g.constant(batch.crops.clone());
        let recon = recon_loss(&mut g, target, out.stack.recon)?;
        let entr = entropy_loss(&mut g, out.stack.alpha)?;
        let rep = if batch.paired && self.config.train.enable_rep {
            let [b, k, h, w]: [usize; 4] = g.shape(out.stack.alpha).try_into().expect("alpha is rank 4");
            let pairs = g.reshape(out.stack.alpha, &[b / 2, 2, k, h, w]);
            let a = g.narrow(pairs, 1, 0, 1);
            let a = g.reshape(a, &[b / 2, k, h, w]);
            let r = g.narrow(pairs, 1, 1, 1);
            let r = g.reshape(r, &[b / 2, k, h, w]);
            Some(consistency_loss(&mut g, a, r)?)
        } else {
            None
        };
        let total = weighted_total(&mut g, recon, entr, rep, weights);
        let value = |v| g.value(v).item().as_f64();
        let bundle = total_loss(value(recon), value(entr), rep.map_or(0.0, value), weights);
        let record = StepRecord {
            step,
            lr,
            lambda2: weights.entr,
            lambda3: weights.rep,
            recon: bundle.recon,
            entr: bundle.entr,
            rep: bundle.rep,
            total: value(total),
        };
        let inputs_hash = batch.hash();
        if !record.total.is_finite() {
            return Err(self.numeric_failure(&record, &inputs_hash, "loss is not finite"));
        }
        let grads = g.backward(total);
        let mut trainable = BTreeMap::new();
        let mut key_sq = 0.0;
        for (name, var) in g.param_vars() {
            let Some(gr) = grads.get(var) else { continue };
            if self.model.params.is_trainable(name) {
                trainable.insert(name.to_string(), gr.clone());
            } else {
                key_sq += gr.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        }
        debug_assert!(key_sq == 0.0, "gradient reached a frozen parameter");
        if trainable.values().any(|t| !t.all_finite()) {
            return Err(self.numeric_failure(&record, &inputs_hash, "gradient is not finite"));
        }
        self.adam.step(&mut self.model.params, &trainable, lr);
        self.model.momentum_step()?;
        self.step += 1;
        Ok(StepReport { record, bundle, key_grad_norm: key_sq.sqrt(), inputs_hash })
    }

    fn numeric_failure(&self, r: &StepRecord, inputs_hash: &str, message: &str) -> Error {
        let dump = NanDump {
            step: r.step,
            inputs_hash: inputs_hash.to_string(),
            recon: r.recon,
            entr: r.entr,
            rep: r.rep,
            total: r.total,
            message: message.to_string(),
        };
        let mut msg = format!("{message} (inputs {inputs_hash}, recon {}, entr {}, rep {})", r.recon, r.entr, r.rep);
        if let Some(dir) = &self.dump_dir {
            let path = dir.join("nan_dump.json");
            match serde_json::to_string_pretty(&dump)
                .map_err(|e| e.to_string())
                .and_then(|s| fs::write(&path, s).map_err(|e| e.to_string()))
            {
                Ok(()) => msg.push_str(&format!("; dump written to {}", path.display())),
                Err(e) => warn!("could not write diagnostic dump: {e}"),
            }
        }
        Error::Numeric { step: r.step, message: msg }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
        for (name, e) in self.model.params.iter() {
            tensors.push((format!("param/{name}"), &e.value));
        }
        for (name, t) in &self.adam.first {
            tensors.push((format!("adam.m/{name}"), t));
        }
        for (name, t) in &self.adam.second {
            tensors.push((format!("adam.v/{name}"), t));
        }
        let meta = CheckpointMeta {
            step: self.step,
            adam_t: self.adam.t,
            dtype: T::DTYPE.to_string(),
            config: self.config.to_text(),
            config_hash: self.config.hash(),
            model_hash: self.config.model.hash(),
            ablation: self.config.ablation_summary(),
        };
        write_checkpoint(path, &tensors, &meta)
    }

    /// Restores a run. The architecture must match the checkpoint exactly.
    pub fn resume(config: Config, crops: Vec<RegionCrop<T>>, path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let saved = ck.config()?;
        let diff = saved.model.diff(&config.model);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint {} vs requested:\n  {}",
                path.display(),
                diff.join("\n  ")
            )));
        }
        let mut t = Trainer::new(config, crops)?;
        ck.load_params(&mut t.model)?;
        for (name, (shape, data)) in &ck.tensors {
            let moment = |t: &mut BTreeMap<String, Tensor<T>>, n: &str| {
                t.insert(n.to_string(), Tensor::from_vec(shape, data.iter().map(|&v| T::cast(v)).collect()));
            };
            if let Some(n) = name.strip_prefix("adam.m/") {
                moment(&mut t.adam.first, n);
            } else if let Some(n) = name.strip_prefix("adam.v/") {
                moment(&mut t.adam.second, n);
            }
        }
        t.adam.t = ck.meta.adam_t;
        t.step = ck.meta.step;
        Ok(t)
    }
}

/// Metadata stored in the checkpoint header.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub adam_t: u64,
    pub dtype: String,
    /// Full configuration as `key = value` text.
    pub config: String,
    pub config_hash: String,
    pub model_hash: String,
    pub ablation: String,
}

const FORMAT_TAG: &str = "layerseg-checkpoint-1";

fn write_checkpoint<T: Scalar>(path: &Path, tensors: &[(String, &Tensor<T>)], meta: &CheckpointMeta) -> Result<()> {
    let dtype = match T::DTYPE {
        "f32" => safetensors::Dtype::F32,
        _ => safetensors::Dtype::F64,
    };
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> =
        tensors.iter().map(|(n, t)| (n.clone(), T::to_le_bytes_vec(t.data()), t.shape().to_vec())).collect();
    let mut views = Vec::new();
    for (n, b, s) in &bytes {
        let v =
            safetensors::tensor::TensorView::new(dtype, s.clone(), b).map_err(|e| Error::Checkpoint(e.to_string()))?;
        views.push((n.clone(), v));
    }
    let info = HashMap::from([
        ("format".to_string(), FORMAT_TAG.to_string()),
        ("step".to_string(), meta.step.to_string()),
        ("adam_t".to_string(), meta.adam_t.to_string()),
        ("dtype".to_string(), meta.dtype.clone()),
        ("config".to_string(), meta.config.clone()),
        ("config_hash".to_string(), meta.config_hash.clone()),
        ("model_hash".to_string(), meta.model_hash.clone()),
        ("ablation".to_string(), meta.ablation.clone()),
    ]);
    let data = safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    // Write then rename, so a crash never leaves a truncated checkpoint under the final name.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A checkpoint read back into memory; values are widened to `f64`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let info = header.metadata().clone().unwrap_or_default();
        let get = |k: &str| {
            info.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata {k}", path.display())))
        };
        if get("format")? != FORMAT_TAG {
            return Err(Error::Checkpoint(format!("{}: unknown format", path.display())));
        }
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad {k}"))) };
        let meta = CheckpointMeta {
            step: num("step")?,
            adam_t: num("adam_t")?,
            dtype: get("dtype")?,
            config: get("config")?,
            config_hash: get("config_hash")?,
            model_hash: get("model_hash")?,
            ablation: get("ablation")?,
        };
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let data = match view.dtype() {
                safetensors::Dtype::F32 => {
                    f32::from_le_bytes_slice(view.data()).into_iter().map(|v| v as f64).collect()
                }
                safetensors::Dtype::F64 => f64::from_le_bytes_slice(view.data()),
                d => return Err(Error::Checkpoint(format!("unsupported dtype {d:?} for {name}"))),
            };
            tensors.insert(name, (view.shape().to_vec(), data));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn config(&self) -> Result<Config> {
        Config::from_text(&self.meta.config).map_err(|e| Error::Checkpoint(format!("stored configuration: {e}")))
    }

    /// Copies every model parameter; shapes and the parameter set must match.
    pub fn load_params<T: Scalar>(&self, model: &mut Model<T>) -> Result<()> {
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        for name in &names {
            let (shape, data) = self
                .tensors
                .get(&format!("param/{name}"))
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks parameter {name}")))?;
            let cur = model.params.get(name).expect("listed parameter");
            if cur.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {name}: checkpoint {shape:?} vs model {:?}",
                    cur.shape()
                )));
            }
            model.params.set(name, Tensor::from_vec(shape, data.iter().map(|&v| T::cast(v)).collect()))?;
        }
        let extra = self.tensors.keys().filter_map(|k| k.strip_prefix("param/")).find(|n| !model.params.contains(n));
        if let Some(n) = extra {
            return Err(Error::ConfigMismatch(format!("checkpoint has unknown parameter {n}")));
        }
        Ok(())
    }

    /// Builds the model described by the checkpoint and loads its weights.
    pub fn model<T: Scalar>(&self) -> Result<(Model<T>, Config)> {
        let cfg = self.config()?;
        if cfg.model.hash() != self.meta.model_hash {
            return Err(Error::ConfigMismatch("stored model hash does not match the stored configuration".into()));
        }
        let mut m = Model::new(cfg.model.clone(), cfg.train.seed)?;
        self.load_params(&mut m)?;
        Ok((m, cfg))
    }
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} lr {:.2e} recon {:.5} entr {:.4} rep {:.4} total {:.4}",
            self.step, self.lr, self.recon, self.entr, self.rep, self.total
        )
    }
}

/// Crops every sample of a dataset at the configured size.
pub fn dataset_crops<T: Scalar>(manifest: &Path, cfg: &ModelConfig) -> Result<Vec<RegionCrop<T>>> {
    let samples = load_dataset::<T>(manifest)?;
    let cc = CropConfig::with_size(cfg.crop_h, cfg.crop_w);
    let mut crops = Vec::new();
    for s in &samples {
        crops.extend(crop_regions(s, &cc)?.crops);
    }
    Ok(crops)
}

/// File names used inside a run directory.
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:07}.safetensors")
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::validation(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Trains on pre-built crops until `total_steps`, writing the log, periodic checkpoints, the final
/// checkpoint and a loss plot into `out_dir`. With `resume`, continues from that checkpoint and
/// keeps only the log lines before its step.
pub fn run<T: Scalar>(
    config: Config,
    crops: Vec<RegionCrop<T>>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config, crops, p)?,
        None => Trainer::new(config, crops)?,
    };
    trainer.dump_dir = Some(out_dir.to_path_buf());
    let cfg_path = out_dir.join("config.txt");
    fs::write(&cfg_path, trainer.config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut kept = Vec::new();
    if resume.is_some() && log_path.exists() {
        kept = read_log(&log_path)?.into_iter().filter(|r| r.step < trainer.step).collect();
    }
    let mut log_text: String =
        kept.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect();
    fs::write(&log_path, &log_text).map_err(|e| Error::io(&log_path, e))?;
    let mut log = fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let total = trainer.config.train.total_steps;
    let every = trainer.config.train.checkpoint_every;
    let start = Instant::now();
    let first = trainer.step;
    while trainer.step < total {
        let report = trainer.train_step()?;
        let line = serde_json::to_string(&report.record).expect("record serializes") + "\n";
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        log_text.push_str(&line);
        let done = trainer.step;
        if done % 50 == 0 || done == total {
            let rate = start.elapsed().as_secs_f64() / (done - first) as f64;
            info!("{} ({rate:.3} s/step)", report.record);
        }
        if done % every == 0 && done < total {
            trainer.save_checkpoint(&out_dir.join(checkpoint_name(done)))?;
        }
    }
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    trainer.save_checkpoint(&final_path)?;
    let records: Vec<StepRecord> = log_text.lines().map(|l| serde_json::from_str(l).expect("own log parses")).collect();
    if let Err(e) = plot::loss_curves(&records, &out_dir.join("loss.png")) {
        warn!("could not draw loss plot: {e}");
    }
    Ok(final_path)
}

/// Loads the dataset behind `manifest`, crops it and trains.
pub fn train<T: Scalar>(config: Config, manifest: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    config.validate()?;
    let crops = dataset_crops::<T>(manifest, &config.model)?;
    info!("{} training crops from {}", crops.len(), manifest.display());
    run(config, crops, out_dir, resume)
}
