//! Fixed-size region crops, region images and background replacement.

use log::warn;

use super::augment::ColorParams;
use super::image::{Image, Mask};
use super::manifest::ImageSample;
use super::polygon::{rasterize, Polygon, Rect};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropConfig {
    pub height: usize,
    pub width: usize,
    /// Padding added to each side, as a fraction of the rect extent.
    pub pad_frac: f64,
    /// Polygons whose bounding rects reach this IoU share a crop.
    pub merge_iou: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig { height: 128, width: 256, pad_frac: 0.05, merge_iou: 0.5 }
    }
}

impl CropConfig {
    pub fn with_size(height: usize, width: usize) -> Self {
        CropConfig { height, width, ..Default::default() }
    }
}

#[derive(Clone, Debug)]
pub struct RegionCrop<T> {
    pub crop: Image<T>,
    pub mask: Mask,
    /// `crop` with every pixel outside `mask` set to zero.
    pub region_image: Image<T>,
    pub source_id: String,
    /// Source-image rectangle the crop was resampled from.
    pub rect: Rect,
    /// Ground-truth text mask resampled onto the crop grid, when the sample has one.
    pub gt: Option<Mask>,
}

impl<T: Scalar> RegionCrop<T> {
    /// Builds a crop from pixels and mask, deriving the region image.
    pub fn new(crop: Image<T>, mask: Mask, source_id: impl Into<String>, rect: Rect, gt: Option<Mask>) -> Result<Self> {
        let region_image = make_region_image(&crop, &mask)?;
        Ok(RegionCrop { crop, mask, region_image, source_id: source_id.into(), rect, gt })
    }

    /// Replaces the pixels, keeping mask and provenance, and recomputes the region image.
    pub fn with_pixels(&self, crop: Image<T>) -> Result<Self> {
        if !crop.same_dims(&self.crop) {
            return Err(Error::validation("replacement pixels have different dimensions"));
        }
        let region_image = apply_mask(&crop, &self.mask);
        Ok(RegionCrop { crop, region_image, ..self.clone() })
    }
}

/// The crops produced from one sample and the number of groups skipped as degenerate.
#[derive(Clone, Debug)]
pub struct CropSet<T> {
    pub crops: Vec<RegionCrop<T>>,
    pub skipped: usize,
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut j = i;
    while parent[j] != r {
        let next = parent[j];
        parent[j] = r;
        j = next;
    }
    r
}

/// Groups polygon indices by transitive bounding-rect overlap, ordered by first member.
pub fn group_polygons(rects: &[Rect], merge_iou: f64) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..rects.len()).collect();
    for i in 0..rects.len() {
        for j in i + 1..rects.len() {
            if rects[i].iou(&rects[j]) >= merge_iou {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[b.max(a)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; rects.len()];
    for i in 0..rects.len() {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

/// One resized crop per polygon group. Groups whose mask rasterizes empty are skipped and counted.
pub fn crop_regions<T: Scalar>(sample: &ImageSample<T>, cfg: &CropConfig) -> Result<CropSet<T>> {
    if sample.polygons.is_empty() {
        return Err(Error::validation(format!("sample {} has no polygons", sample.id)));
    }
    let img = &sample.image;
    let (iw, ih) = (img.width, img.height);
    let clamped: Vec<Polygon> = sample.polygons.iter().map(|p| p.clamped(iw, ih)).collect();
    let rects: Vec<Rect> = clamped.iter().map(Polygon::bbox).collect();
    let mut out = CropSet { crops: Vec::new(), skipped: 0 };

    for (gi, group) in group_polygons(&rects, cfg.merge_iou).into_iter().enumerate() {
        let bound = group.iter().map(|&i| rects[i]).reduce(|a, b| a.union(&b)).expect("non-empty group");
        let rect = bound.padded(cfg.pad_frac).clamped(iw, ih);
        let members: Vec<&Polygon> = group.iter().map(|&i| &clamped[i]).collect();
        let mask = if rect.area() > 0.0 {
            rasterize(&members, &rect, cfg.height, cfg.width)
        } else {
            Mask::zeros(cfg.height, cfg.width)
        };
        if !mask.any() {
            out.skipped += 1;
            continue;
        }
        let mut crop = Image::zeros(img.channels, cfg.height, cfg.width);
        for v in 0..cfg.height {
            for u in 0..cfg.width {
                let (x, y) = rect.grid_point(v, u, cfg.height, cfg.width);
                for c in 0..img.channels {
                    crop.set(c, v, u, img.sample_bilinear(c, x, y));
                }
            }
        }
        let gt = sample.gt_mask.as_ref().map(|g| {
            Mask::from_fn(cfg.height, cfg.width, |v, u| {
                let (x, y) = rect.grid_point(v, u, cfg.height, cfg.width);
                g.get((y.floor() as usize).min(g.height - 1), (x.floor() as usize).min(g.width - 1))
            })
        });
        out.crops.push(RegionCrop::new(crop, mask, format!("{}#{gi}", sample.id), rect, gt)?);
    }
    if out.skipped > 0 {
        warn!("{}: skipped {} degenerate region(s)", sample.id, out.skipped);
    }
    Ok(out)
}

fn apply_mask<T: Scalar>(img: &Image<T>, mask: &Mask) -> Image<T> {
    let mut out = img.clone();
    let plane = img.height * img.width;
    for (i, v) in out.data.iter_mut().enumerate() {
        if mask.data[i % plane] == 0 {
            *v = T::zero();
        }
    }
    out
}

/// `crop ⊙ M`, with pixels outside the mask exactly zero.
pub fn make_region_image<T: Scalar>(crop: &Image<T>, mask: &Mask) -> Result<Image<T>> {
    if (mask.height, mask.width) != (crop.height, crop.width) {
        return Err(Error::validation(format!(
            "mask {}x{} does not match crop {}x{}",
            mask.height, mask.width, crop.height, crop.width
        )));
    }
    if !mask.any() {
        return Err(Error::validation("region mask is empty"));
    }
    Ok(apply_mask(crop, mask))
}

/// `I' = I ⊙ M + B ⊙ (1 - M)` with `M = fg.mask`. The result keeps fg's mask and provenance.
pub fn replace_background<T: Scalar>(fg: &RegionCrop<T>, bg: &RegionCrop<T>) -> Result<RegionCrop<T>> {
    if !fg.crop.same_dims(&bg.crop) {
        return Err(Error::validation(format!(
            "background {}x{}x{} does not match foreground {}x{}x{}",
            bg.crop.channels, bg.crop.height, bg.crop.width, fg.crop.channels, fg.crop.height, fg.crop.width
        )));
    }
    let plane = fg.crop.height * fg.crop.width;
    let data = fg
        .crop
        .data
        .iter()
        .zip(&bg.crop.data)
        .enumerate()
        .map(|(i, (&a, &b))| if fg.mask.data[i % plane] != 0 { a } else { b })
        .collect();
    let crop = Image { data, ..fg.crop.clone() };
    Ok(RegionCrop { region_image: apply_mask(&crop, &fg.mask), crop, ..fg.clone() })
}

/// A color-augmented crop and the same crop with its background swapped for another crop's pixels.
#[derive(Clone, Debug)]
pub struct ReplacementPair<T> {
    pub original: RegionCrop<T>,
    pub replaced: RegionCrop<T>,
}

/// Applies one color transform to `fg`, then composites it over `bg`.
pub fn build_replacement_pair<T: Scalar>(
    fg: &RegionCrop<T>,
    bg: &RegionCrop<T>,
    color: &ColorParams,
) -> Result<ReplacementPair<T>> {
    let original = fg.with_pixels(color.apply(&fg.crop))?;
    let replaced = replace_background(&original, bg)?;
    Ok(ReplacementPair { original, replaced })
}
