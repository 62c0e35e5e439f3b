//! Seeded geometric and color augmentations.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use crate::scalar::Scalar;

/// Flip, then centred zoom-out, then integer translation; uncovered pixels are zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricParams {
    pub flip: bool,
    pub scale: f64,
    pub dx: i64,
    pub dy: i64,
}

impl GeometricParams {
    pub const IDENTITY: GeometricParams = GeometricParams { flip: false, scale: 1.0, dx: 0, dy: 0 };

    pub fn sample(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mx, my) = ((width / 10) as i64, (height / 10) as i64);
        GeometricParams {
            flip: rng.random_bool(0.5),
            scale: rng.random_range(0.8..=1.0),
            dx: rng.random_range(-mx..=mx),
            dy: rng.random_range(-my..=my),
        }
    }

    pub fn apply<T: Scalar>(&self, img: &Image<T>) -> Image<T> {
        let (h, w) = (img.height, img.width);
        let mut cur = img.clone();
        if self.flip {
            for c in 0..img.channels {
                for y in 0..h {
                    for x in 0..w {
                        cur.set(c, y, x, img.get(c, y, w - 1 - x));
                    }
                }
            }
        }
        if self.scale != 1.0 {
            let src = cur.clone();
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            for y in 0..h {
                for x in 0..w {
                    let sx = cx + (x as f64 + 0.5 - cx) / self.scale;
                    let sy = cy + (y as f64 + 0.5 - cy) / self.scale;
                    let inside = (0.0..=w as f64).contains(&sx) && (0.0..=h as f64).contains(&sy);
                    for c in 0..img.channels {
                        cur.set(c, y, x, if inside { src.sample_bilinear(c, sx, sy) } else { T::zero() });
                    }
                }
            }
        }
        if self.dx != 0 || self.dy != 0 {
            let src = cur;
            cur = Image::zeros(img.channels, h, w);
            for y in 0..h {
                let sy = y as i64 - self.dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w {
                    let sx = x as i64 - self.dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    for c in 0..img.channels {
                        cur.set(c, y, x, src.get(c, sy as usize, sx as usize));
                    }
                }
            }
        }
        cur
    }
}

/// HSV jitter: hue shift in turns, saturation and value as multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorParams {
    pub hue: f64,
    pub sat: f64,
    pub val: f64,
}

impl ColorParams {
    pub const IDENTITY: ColorParams = ColorParams { hue: 0.0, sat: 1.0, val: 1.0 };

    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ColorParams {
            hue: rng.random_range(-0.1..=0.1),
            sat: rng.random_range(0.7..=1.3),
            val: rng.random_range(0.7..=1.3),
        }
    }

    /// Transforms every pixel of a 3-channel image; output is clamped to `[0, 1]`.
    pub fn apply<T: Scalar>(&self, img: &Image<T>) -> Image<T> {
        assert_eq!(img.channels, 3, "color augmentation needs RGB");
        let mut out = img.clone();
        for y in 0..img.height {
            for x in 0..img.width {
                let rgb = [0, 1, 2].map(|c| img.get(c, y, x).as_f64());
                let [hh, s, v] = rgb_to_hsv(rgb);
                let hsv = [(hh + self.hue).rem_euclid(1.0), (s * self.sat).clamp(0.0, 1.0), v * self.val];
                let o = hsv_to_rgb(hsv);
                for c in 0..3 {
                    out.set(c, y, x, T::cast(o[c].clamp(0.0, 1.0)));
                }
            }
        }
        out
    }
}

pub fn augment_geometric<T: Scalar>(img: &Image<T>, seed: u64) -> Image<T> {
    GeometricParams::sample(seed, img.height, img.width).apply(img)
}

pub fn augment_color<T: Scalar>(img: &Image<T>, seed: u64) -> Image<T> {
    ColorParams::sample(seed).apply(img)
}

/// Hue in turns `[0, 1)`, saturation and value in `[0, 1]` for in-range input.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
