//! Deterministic synthetic scene-text images with exact ground-truth masks.
//!
//! Each image has a solid, gradient or noisy background and 1-3 words drawn from the
//! built-in bitmap font, one word per horizontal band, rotated by at most 15 degrees.
//! The polygon of a word is its rotated bounding quad padded by half a font cell.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::crop::{crop_regions, CropConfig};
use super::derive_seed;
use super::font::{word_ink, word_width, ALPHABET, GLYPH_H};
use super::image::{Image, Mask};
use super::manifest::{write_manifest, ImageSample, ManifestRecord};
use super::polygon::Polygon;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Crop sizes at which every region's foreground fraction is checked.
    pub check_sizes: Vec<(usize, usize)>,
    pub min_fg_frac: f64,
    pub max_fg_frac: f64,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 256,
            height: 160,
            check_sizes: vec![(64, 128), (128, 256)],
            min_fg_frac: 0.02,
            max_fg_frac: 0.6,
            max_attempts: 1000,
        }
    }
}

/// One rendered image with its word polygons and exact text mask.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: Image<f64>,
    pub polygons: Vec<Polygon>,
    pub mask: Mask,
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Image<f64>, [f64; 3]) {
    let base = random_color(rng);
    let mut img = Image::zeros(3, h, w);
    match rng.random_range(0..3u32) {
        0 => {
            for c in 0..3 {
                img.data[c * h * w..(c + 1) * h * w].fill(base[c]);
            }
        }
        1 => {
            let other = base.map(|v| (v + rng.random_range(-0.25..=0.25)).clamp(0.0, 1.0));
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let (cx, cy, diag) = (w as f64 / 2.0, h as f64 / 2.0, ((w * w + h * h) as f64).sqrt());
            for y in 0..h {
                for x in 0..w {
                    let t = ((x as f64 + 0.5 - cx) * phi.cos() + (y as f64 + 0.5 - cy) * phi.sin()) / diag + 0.5;
                    for c in 0..3 {
                        img.set(c, y, x, base[c] + (other[c] - base[c]) * t);
                    }
                }
            }
        }
        _ => {
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        img.set(c, y, x, (base[c] + rng.random_range(-0.08..=0.08)).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    (img, base)
}

fn text_color(rng: &mut ChaCha8Rng, bg: [f64; 3]) -> [f64; 3] {
    for _ in 0..100 {
        let c = random_color(rng);
        if (luminance(c) - luminance(bg)).abs() >= 0.45 {
            return c;
        }
    }
    if luminance(bg) > 0.5 {
        [0.0; 3]
    } else {
        [1.0; 3]
    }
}

struct Word {
    text: Vec<u8>,
    scale: f64,
    angle: f64,
    cx: f64,
    cy: f64,
}

impl Word {
    fn local_size(&self) -> (f64, f64) {
        (word_width(self.text.len()) as f64, GLYPH_H as f64)
    }

    /// Image coordinates of a point given in word-local font units.
    fn to_image(&self, u: f64, v: f64) -> [f64; 2] {
        let (lw, lh) = self.local_size();
        let (du, dv) = ((u - lw / 2.0) * self.scale, (v - lh / 2.0) * self.scale);
        let (s, c) = self.angle.sin_cos();
        [self.cx + c * du - s * dv, self.cy + s * du + c * dv]
    }

    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (lw, lh) = self.local_size();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        ((c * dx + s * dy) / self.scale + lw / 2.0, (-s * dx + c * dy) / self.scale + lh / 2.0)
    }

    fn quad(&self) -> Polygon {
        let (lw, lh) = self.local_size();
        let round = |p: [f64; 2]| p.map(|v| (v * 1000.0).round() / 1000.0);
        Polygon {
            points: [(-0.5, -0.5), (lw + 0.5, -0.5), (lw + 0.5, lh + 0.5), (-0.5, lh + 0.5)]
                .iter()
                .map(|&(u, v)| round(self.to_image(u, v)))
                .collect(),
        }
    }
}

fn place_word(rng: &mut ChaCha8Rng, w: usize, band: (f64, f64)) -> Word {
    let (y0, y1) = band;
    for _ in 0..200 {
        let len = rng.random_range(2..=6usize);
        let text: Vec<u8> = (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect();
        let scale = rng.random_range(2.5..=5.5);
        let angle = rng.random_range(-15.0f64..=15.0).to_radians();
        let (pw, ph) = ((word_width(len) + 1) as f64, (GLYPH_H + 1) as f64);
        let (s, c) = (angle.sin().abs(), angle.cos());
        let half_w = scale * (pw * c + ph * s) / 2.0;
        let half_h = scale * (pw * s + ph * c) / 2.0;
        if 2.0 * half_w > w as f64 - 4.0 || 2.0 * half_h > y1 - y0 - 2.0 {
            continue;
        }
        let cx = rng.random_range(half_w + 2.0..=w as f64 - half_w - 2.0);
        let cy = rng.random_range(y0 + half_h + 1.0..=y1 - half_h - 1.0);
        return Word { text, scale, angle, cx, cy };
    }
    // Always fits: a short, upright, small word.
    Word { text: b"AB".to_vec(), scale: 2.5, angle: 0.0, cx: w as f64 / 2.0, cy: (y0 + y1) / 2.0 }
}

fn render(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SynthSample {
    let (h, w) = (cfg.height, cfg.width);
    let (mut image, base) = background(rng, h, w);
    let ink = text_color(rng, base);
    let n_words = rng.random_range(1..=3usize);
    let band_h = h as f64 / n_words as f64;
    let mut mask = Mask::zeros(h, w);
    let mut polygons = Vec::new();
    for k in 0..n_words {
        let word = place_word(rng, w, (k as f64 * band_h, (k + 1) as f64 * band_h));
        let quad = word.quad();
        let r = quad.bbox().clamped(w, h);
        for y in r.y0.floor() as usize..(r.y1.ceil() as usize).min(h) {
            for x in r.x0.floor() as usize..(r.x1.ceil() as usize).min(w) {
                let (u, v) = word.to_local(x as f64 + 0.5, y as f64 + 0.5);
                if word_ink(&word.text, u, v) {
                    mask.set(y, x, true);
                }
            }
        }
        polygons.push(quad);
    }
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                for c in 0..3 {
                    image.set(c, y, x, ink[c]);
                }
            }
        }
    }
    SynthSample { image, polygons, mask }
}

/// Foreground fraction of every crop is within bounds and every word yields its own crop.
fn acceptable(cfg: &SynthConfig, s: &SynthSample) -> bool {
    let sample = match ImageSample::new("check", s.image.clone(), s.polygons.clone(), Some(s.mask.clone())) {
        Ok(v) => v,
        Err(_) => return false,
    };
    cfg.check_sizes.iter().all(|&(ch, cw)| {
        let Ok(set) = crop_regions(&sample, &CropConfig::with_size(ch, cw)) else { return false };
        set.skipped == 0
            && set.crops.len() == s.polygons.len()
            && set.crops.iter().all(|c| {
                let gt = c.gt.as_ref().expect("sample has gt");
                let f = gt.count() as f64 / gt.len() as f64;
                (cfg.min_fg_frac..=cfg.max_fg_frac).contains(&f)
            })
    })
}

/// Renders image `index` of the set seeded by `seed`, resampling until it passes the crop checks.
pub fn synth_sample(cfg: &SynthConfig, seed: u64, index: usize) -> Result<SynthSample> {
    for attempt in 0..cfg.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("synth/{index}/{attempt}")));
        let s = render(cfg, &mut rng);
        if acceptable(cfg, &s) {
            return Ok(s);
        }
    }
    Err(Error::Internal(format!("synthetic image {index} failed the crop checks {} times", cfg.max_attempts)))
}

pub fn synth_generate(n: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    synth_generate_with(&SynthConfig::default(), n, seed, out_dir)
}

/// Writes `img_XXXX.png`, `mask_XXXX.png` and `manifest.jsonl` into `out_dir`.
pub fn synth_generate_with(cfg: &SynthConfig, n: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::validation("synthetic set size must be at least 1"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth_sample(cfg, seed, i)?;
        let (img_name, mask_name) = (format!("img_{i:04}.png"), format!("mask_{i:04}.png"));
        s.image.save_png(&out_dir.join(&img_name))?;
        s.mask.save_png(&out_dir.join(&mask_name))?;
        records.push(ManifestRecord { image: img_name, polygons: s.polygons, mask: Some(mask_name) });
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::polygon::rasterize;
    use crate::datamodel::Rect;

    #[test]
    fn gt_is_inside_polygons() {
        let cfg = SynthConfig::default();
        for i in 0..20 {
            let s = synth_sample(&cfg, 3, i).unwrap();
            let full = Rect { x0: 0.0, y0: 0.0, x1: cfg.width as f64, y1: cfg.height as f64 };
            let refs: Vec<&Polygon> = s.polygons.iter().collect();
            let cover = rasterize(&refs, &full, cfg.height, cfg.width);
            assert!(s.mask.any());
            for (g, c) in s.mask.data.iter().zip(&cover.data) {
                assert!(*g <= *c);
            }
        }
    }

    #[test]
    fn zero_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(synth_generate(0, 1, dir.path()), Err(Error::Validation(_))));
    }
}
