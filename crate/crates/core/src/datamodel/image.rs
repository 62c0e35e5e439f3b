//! Planar RGB images and binary masks, plus PNG/JPEG I/O.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel-planar image (`[C, H, W]`), values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::validation(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// `[1, C, H, W]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [c, h, w] | [1, c, h, w] => Image::new(c, h, w, t.data().to_vec()),
            ref s => Err(Error::validation(format!("expected a single image tensor, got {s:?}"))),
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel `i` has its centre at `i + 0.5`).
    /// Coordinates outside the image clamp to the border.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> T {
        let sx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let sy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (T::cast(sx - x0 as f64), T::cast(sy - y0 as f64));
        let one = T::one();
        let top = self.get(c, y0, x0) * (one - fx) + self.get(c, y0, x1) * fx;
        let bot = self.get(c, y1, x0) * (one - fx) + self.get(c, y1, x1) * fx;
        top * (one - fy) + bot * fy
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Image::zeros(3, h, w);
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, T::cast(p[c] as f64 / 255.0));
            }
        }
        Ok(out)
    }

    /// Writes an 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::validation("save_png expects 3 channels"));
        }
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| to_u8(self.get(c, y, x).as_f64()));
                out.put_pixel(x as u32, y as u32, Rgb(px));
            }
        }
        out.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary mask, one byte per pixel holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![1; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Mask::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn union_with(&mut self, other: &Mask) {
        assert_eq!((self.height, self.width), (other.height, other.width), "mask union dims");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// Mask as `[H, W]` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.height, self.width], self.data.iter().map(|&v| T::cast(v as f64)).collect())
    }

    /// Reads a single-channel mask; any value above 127 is foreground.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        let g = img.to_luma8();
        let (w, h) = (g.width() as usize, g.height() as usize);
        let data = g.pixels().map(|p| (p[0] > 127) as u8).collect();
        Ok(Mask { height: h, width: w, data })
    }

    /// Writes an 8-bit single-channel PNG, 255 = foreground.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = GrayImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put_pixel(x as u32, y as u32, Luma([if self.get(y, x) { 255 } else { 0 }]));
            }
        }
        out.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_at_pixel_centres_is_exact() {
        let img = Image::<f64>::new(1, 2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(img.sample_bilinear(0, 1.5, 1.5), 4.0);
        assert_eq!(img.sample_bilinear(0, 1.0, 0.5), 0.5);
        assert_eq!(img.sample_bilinear(0, -4.0, 0.5), 0.0);
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mask::zeros(4, 5);
        m.set(1, 2, true);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(Mask::load(&p).unwrap(), m);

        let img = Image::<f32>::new(3, 1, 2, vec![0.0, 1.0, 0.2, 0.4, 1.0, 0.0]).unwrap();
        let q = dir.path().join("i.png");
        img.save_png(&q).unwrap();
        let back = Image::<f32>::load(&q).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
