//! Inference, foreground-slot selection, stitching and pixel metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::datamodel::{crop_regions, load_dataset, CropConfig, Image, ImageSample, Mask, Polygon, Rect, RegionCrop};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::plot;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, Config};

/// Default binarization threshold.
pub const TAU: f64 = 0.5;

/// Slot whose mask is most concentrated inside the region: the argmax over slots of the mean α
/// inside `region` minus the mean α outside it. Ties go to the lower index. An empty side counts
/// as mean zero.
pub fn select_foreground_slot(alpha: &[f64], k: usize, region: &Mask) -> usize {
    let plane = region.len();
    assert_eq!(alpha.len(), k * plane, "alpha is not K x mask size");
    let inside = region.count();
    let outside = plane - inside;
    let mut best = (0, f64::NEG_INFINITY);
    for s in 0..k {
        let a = &alpha[s * plane..(s + 1) * plane];
        let (mut sin, mut sout) = (0.0, 0.0);
        for (v, &m) in a.iter().zip(&region.data) {
            if m != 0 {
                sin += v;
            } else {
                sout += v;
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let score = mean(sin, inside) - mean(sout, outside);
        if score > best.1 {
            best = (s, score);
        }
    }
    best.0
}

/// `alpha >= tau`; values exactly at the threshold count as foreground.
pub fn binarize(alpha: &[f64], height: usize, width: usize, tau: f64) -> Mask {
    assert_eq!(alpha.len(), height * width, "alpha size");
    Mask { height, width, data: alpha.iter().map(|&a| u8::from(a >= tau)).collect() }
}

/// Pixel confusion counts of a predicted mask against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl Counts {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Counts> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::validation(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let mut c = Counts::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    /// Foreground IoU; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn precision(&self) -> f64 {
        let d = self.tp + self.fp;
        if d == 0 {
            0.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let d = self.tp + self.fn_;
        if d == 0 {
            0.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

pub fn fg_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Counts::of(pred, gt)?.iou())
}

pub fn f1(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Counts::of(pred, gt)?.f1())
}

/// How a set of per-item counts is summarized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Averaging {
    /// Metrics of the summed pixel counts.
    #[default]
    Pooled,
    /// Mean of per-item metrics.
    PerItem,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricSummary {
    pub items: Vec<Counts>,
}

impl MetricSummary {
    pub fn pooled(&self) -> Counts {
        self.items.iter().fold(Counts::default(), |a, &b| a + b)
    }

    pub fn iou(&self, how: Averaging) -> f64 {
        match how {
            Averaging::Pooled => self.pooled().iou(),
            Averaging::PerItem => mean(self.items.iter().map(Counts::iou)),
        }
    }

    pub fn f1(&self, how: Averaging) -> f64 {
        match how {
            Averaging::Pooled => self.pooled().f1(),
            Averaging::PerItem => mean(self.items.iter().map(Counts::f1)),
        }
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        0.0
    } else {
        it.sum::<f64>() / n as f64
    }
}

/// Where a segmentation came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub config_hash: String,
    pub ablation: String,
    pub step: u64,
}

/// The reading of one crop.
#[derive(Clone, Debug)]
pub struct SegResult {
    pub binary_mask: Mask,
    pub fg_slot: usize,
    /// Row-major `H x W` foreground α.
    pub alpha_fg: Vec<f64>,
    pub provenance: Provenance,
}

/// A per-mask transform applied after binarization; receives the crop pixels as context.
pub type Postprocess = Box<dyn Fn(&Mask, &Image<f32>) -> Mask + Send + Sync>;

/// Named postprocess hooks. `identity` is always present.
pub struct HookRegistry {
    hooks: BTreeMap<String, Postprocess>,
}

impl Default for HookRegistry {
    fn default() -> Self {
        let mut hooks: BTreeMap<String, Postprocess> = BTreeMap::new();
        hooks.insert("identity".into(), Box::new(|m: &Mask, _: &Image<f32>| m.clone()));
        HookRegistry { hooks }
    }
}

impl HookRegistry {
    pub fn register(&mut self, name: impl Into<String>, hook: Postprocess) {
        self.hooks.insert(name.into(), hook);
    }

    pub fn get(&self, name: &str) -> Result<&Postprocess> {
        self.hooks.get(name).ok_or_else(|| {
            Error::validation(format!("unknown postprocess hook {name:?} (known: {})", self.names().join(", ")))
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.hooks.keys().cloned().collect()
    }
}

/// A loaded model ready for inference.
pub struct Segmenter<T: Scalar> {
    pub model: Model<T>,
    pub config: Config,
    pub provenance: Provenance,
    pub tau: f64,
    /// Crops per forward pass.
    pub batch: usize,
    pub hooks: HookRegistry,
    pub hook: String,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(model: Model<T>, config: Config, provenance: Provenance) -> Self {
        Segmenter {
            model,
            config,
            provenance,
            tau: TAU,
            batch: 16,
            hooks: HookRegistry::default(),
            hook: "identity".into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let (model, config) = ck.model::<T>()?;
        let provenance = Provenance {
            checkpoint: path.display().to_string(),
            config_hash: ck.meta.config_hash.clone(),
            ablation: ck.meta.ablation.clone(),
            step: ck.meta.step,
        };
        Ok(Segmenter::new(model, config, provenance))
    }

    pub fn crop_config(&self) -> CropConfig {
        CropConfig::with_size(self.model.cfg.crop_h, self.model.cfg.crop_w)
    }

    /// Runs the model on crops, keyed by their own region images.
    pub fn segment_crops(&self, crops: &[RegionCrop<T>]) -> Result<Vec<SegResult>> {
        let hook = self.hooks.get(&self.hook)?;
        let (h, w) = (self.model.cfg.crop_h, self.model.cfg.crop_w);
        let plane = h * w;
        let mut out = Vec::with_capacity(crops.len());
        for chunk in crops.chunks(self.batch.max(1)) {
            let stack = |f: &dyn Fn(&RegionCrop<T>) -> &Image<T>| -> Result<Tensor<T>> {
                let mut data = Vec::with_capacity(chunk.len() * 3 * plane);
                for c in chunk {
                    let img = f(c);
                    if (img.channels, img.height, img.width) != (3, h, w) {
                        return Err(Error::validation(format!(
                            "crop {} is {}x{}x{}, model expects 3x{h}x{w}",
                            c.source_id, img.channels, img.height, img.width
                        )));
                    }
                    data.extend_from_slice(&img.data);
                }
                Ok(Tensor::from_vec(&[chunk.len(), 3, h, w], data))
            };
            let x = stack(&|c| &c.crop)?;
            let keys = stack(&|c| &c.region_image)?;
            let mut g = Graph::new();
            let fwd = self.model.forward(&mut g, &x, &keys)?;
            let alpha = g.value(fwd.stack.alpha);
            let k = alpha.shape()[1];
            for (i, c) in chunk.iter().enumerate() {
                let a: Vec<f64> = alpha.data()[i * k * plane..(i + 1) * k * plane].iter().map(|v| v.as_f64()).collect();
                let fg_slot = select_foreground_slot(&a, k, &c.mask);
                let alpha_fg = a[fg_slot * plane..(fg_slot + 1) * plane].to_vec();
                let raw = binarize(&alpha_fg, h, w, self.tau);
                let binary_mask = hook(&raw, &c.crop.cast());
                out.push(SegResult { binary_mask, fg_slot, alpha_fg, provenance: self.provenance.clone() });
            }
        }
        Ok(out)
    }

    /// Segments every region of an image and stitches the crop masks back.
    pub fn infer(&self, image: &Image<T>, polygons: &[Polygon], id: &str) -> Result<Inference> {
        if polygons.is_empty() {
            warn!("{id}: no polygons, returning an empty mask");
            return Ok(Inference { regions: Vec::new(), mask: Mask::zeros(image.height, image.width) });
        }
        let sample = ImageSample::new(id, image.clone(), polygons.to_vec(), None)?;
        let crops = crop_regions(&sample, &self.crop_config())?.crops;
        let results = self.segment_crops(&crops)?;
        let mut mask = Mask::zeros(image.height, image.width);
        for (c, r) in crops.iter().zip(&results) {
            stitch_into(&mut mask, &r.binary_mask, &c.rect);
        }
        let regions = crops.iter().map(|c| c.rect).zip(results).collect();
        Ok(Inference { regions, mask })
    }
}

/// Per-region results with their source rectangles, and the full-image union.
pub struct Inference {
    pub regions: Vec<(Rect, SegResult)>,
    pub mask: Mask,
}

/// Crop cell containing offset `t` (in cell units); a point on a cell border goes to the lower cell.
fn nearest_cell(t: f64, n: usize) -> Option<usize> {
    let i = t.ceil() - 1.0;
    (i >= 0.0 && i < n as f64).then_some(i as usize)
}

/// Inverse of the crop resampling: every image pixel whose centre falls on the crop grid takes
/// the nearest crop cell; foreground is OR-ed into `dst`.
pub fn stitch_into(dst: &mut Mask, crop_mask: &Mask, rect: &Rect) {
    let (ch, cw) = (crop_mask.height, crop_mask.width);
    if rect.width() <= 0.0 || rect.height() <= 0.0 {
        return;
    }
    let (sx, sy) = (cw as f64 / rect.width(), ch as f64 / rect.height());
    let x_lo = rect.x0.floor().max(0.0) as usize;
    let y_lo = rect.y0.floor().max(0.0) as usize;
    let x_hi = (rect.x1.ceil() as usize).min(dst.width);
    let y_hi = (rect.y1.ceil() as usize).min(dst.height);
    for y in y_lo..y_hi {
        let Some(v) = nearest_cell((y as f64 + 0.5 - rect.y0) * sy, ch) else { continue };
        for x in x_lo..x_hi {
            let Some(u) = nearest_cell((x as f64 + 0.5 - rect.x0) * sx, cw) else { continue };
            if crop_mask.get(v, u) {
                dst.set(y, x, true);
            }
        }
    }
}

/// Nearest-pixel resampling of a full-image mask onto a crop grid, as used for ground truth.
pub fn recrop(mask: &Mask, rect: &Rect, height: usize, width: usize) -> Mask {
    Mask::from_fn(height, width, |v, u| {
        let (x, y) = rect.grid_point(v, u, height, width);
        mask.get((y.floor() as usize).min(mask.height - 1), (x.floor() as usize).min(mask.width - 1))
    })
}

/// Metrics of a segmenter on crops that carry ground truth.
pub fn evaluate_crops<T: Scalar>(seg: &Segmenter<T>, crops: &[RegionCrop<T>]) -> Result<MetricSummary> {
    let results = seg.segment_crops(crops)?;
    let mut items = Vec::with_capacity(crops.len());
    for (c, r) in crops.iter().zip(&results) {
        let gt = c.gt.as_ref().ok_or_else(|| Error::validation(format!("crop {} has no ground truth", c.source_id)))?;
        items.push(Counts::of(&r.binary_mask, gt)?);
    }
    Ok(MetricSummary { items })
}

/// Output file stem for an image path: its file name without extension.
pub fn stem(image: &str) -> String {
    Path::new(image).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| image.to_string())
}

#[derive(Serialize)]
struct RegionRecord<'a> {
    rect: [f64; 4],
    fg_slot: usize,
    fg_pixels: usize,
    mask: String,
    provenance: &'a Provenance,
}

#[derive(Serialize)]
struct InferRecord<'a> {
    image: String,
    mask: String,
    provenance: &'a Provenance,
    regions: Vec<RegionRecord<'a>>,
}

/// Writes `<stem>.png` (255 = text), per-region masks `<stem>_r<i>.png` and `<stem>.json`.
pub fn write_inference(out_dir: &Path, image_path: &Path, inf: &Inference, prov: &Provenance) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let s = stem(&image_path.to_string_lossy());
    let mask_path = out_dir.join(format!("{s}.png"));
    inf.mask.save_png(&mask_path)?;
    let mut regions = Vec::new();
    for (i, (rect, r)) in inf.regions.iter().enumerate() {
        let name = format!("{s}_r{i}.png");
        r.binary_mask.save_png(&out_dir.join(&name))?;
        regions.push(RegionRecord {
            rect: [rect.x0, rect.y0, rect.x1, rect.y1],
            fg_slot: r.fg_slot,
            fg_pixels: r.binary_mask.count(),
            mask: name,
            provenance: &r.provenance,
        });
    }
    let rec =
        InferRecord { image: image_path.display().to_string(), mask: format!("{s}.png"), provenance: prov, regions };
    let json_path = out_dir.join(format!("{s}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(&rec).expect("record serializes"))
        .map_err(|e| Error::io(&json_path, e))?;
    Ok(mask_path)
}

/// Reads a polygon file: a JSON array of polygons, each an array of `[x, y]` points.
pub fn read_polygons(path: &Path) -> Result<Vec<Polygon>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let polys: Vec<Polygon> =
        serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    for (i, p) in polys.iter().enumerate() {
        p.validate().map_err(|e| Error::validation(format!("{} polygon {i}: {e}", path.display())))?;
    }
    Ok(polys)
}

/// Per-image scores of predicted masks in `pred_dir` against a manifest's ground truth.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub names: Vec<String>,
    pub summary: MetricSummary,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<32} {:>8} {:>8} {:>10} {:>10} {:>10}", "image", "fgIoU", "F1", "tp", "fp", "fn");
        for (n, c) in self.names.iter().zip(&self.summary.items) {
            let _ = writeln!(s, "{:<32} {:>8.4} {:>8.4} {:>10} {:>10} {:>10}", n, c.iou(), c.f1(), c.tp, c.fp, c.fn_);
        }
        let p = self.summary.pooled();
        let _ =
            writeln!(s, "{:<32} {:>8.4} {:>8.4} {:>10} {:>10} {:>10}", "pooled", p.iou(), p.f1(), p.tp, p.fp, p.fn_);
        let (mi, mf) = (self.summary.iou(Averaging::PerItem), self.summary.f1(Averaging::PerItem));
        let _ = writeln!(s, "{:<32} {:>8.4} {:>8.4}", "per-image mean", mi, mf);
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("image\tfg_iou\tf1\ttp\tfp\tfn\n");
        for (n, c) in self.names.iter().zip(&self.summary.items) {
            let _ = writeln!(s, "{n}\t{}\t{}\t{}\t{}\t{}", c.iou(), c.f1(), c.tp, c.fp, c.fn_);
        }
        s
    }
}

pub fn evaluate_dir(pred_dir: &Path, manifest: &Path) -> Result<EvalReport> {
    let samples = load_dataset::<f32>(manifest)?;
    let mut names = Vec::new();
    let mut items = Vec::new();
    for s in &samples {
        let gt = s.gt_mask.as_ref().ok_or_else(|| Error::validation(format!("{} has no ground-truth mask", s.id)))?;
        let name = stem(&s.id);
        let path = pred_dir.join(format!("{name}.png"));
        let pred = Mask::load(&path).map_err(|e| Error::Load { record: s.id.clone(), reason: e.to_string() })?;
        items.push(Counts::of(&pred, gt).map_err(|e| Error::validation(format!("{}: {e}", s.id)))?);
        names.push(name);
    }
    if items.is_empty() {
        return Err(Error::validation("manifest has no records"));
    }
    Ok(EvalReport { names, summary: MetricSummary { items } })
}

/// Writes the text report, a `.tsv` with the raw numbers and a `.png` chart next to it.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_text()).map_err(|e| Error::io(path, e))?;
    let tsv = path.with_extension("tsv");
    fs::write(&tsv, report.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
    let pts = |f: fn(&Counts) -> f64| {
        report.summary.items.iter().enumerate().map(|(i, c)| (i as f64, f(c))).collect::<Vec<_>>()
    };
    let png = path.with_extension("png");
    if let Err(e) = plot::lines(
        "per image metrics",
        "image index",
        &[("fgiou", pts(Counts::iou)), ("f1", pts(Counts::f1))],
        false,
        &png,
    ) {
        warn!("could not draw metric plot: {e}");
    }
    Ok(())
}
