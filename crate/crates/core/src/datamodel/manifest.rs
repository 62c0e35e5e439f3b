//! Line-delimited JSON manifests.
//!
//! Each non-empty line is an object `{"image": path, "polygons": [[[x, y], ...], ...], "mask": path?}`
//! with paths relative to the manifest's directory and pixel coordinates (origin top-left).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{Image, Mask};
use super::polygon::Polygon;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub polygons: Vec<Polygon>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

/// An image with its text-region polygons and optional ground-truth mask (evaluation only).
#[derive(Clone, Debug)]
pub struct ImageSample<T> {
    /// Manifest `image` field; stable key for seeds and outputs.
    pub id: String,
    pub image: Image<T>,
    pub polygons: Vec<Polygon>,
    pub gt_mask: Option<Mask>,
}

impl<T: Scalar> ImageSample<T> {
    pub fn new(id: impl Into<String>, image: Image<T>, polygons: Vec<Polygon>, gt_mask: Option<Mask>) -> Result<Self> {
        for p in &polygons {
            p.validate()?;
        }
        if let Some(m) = &gt_mask {
            if (m.height, m.width) != (image.height, image.width) {
                return Err(Error::validation(format!(
                    "mask is {}x{} but image is {}x{}",
                    m.height, m.width, image.height, image.width
                )));
            }
        }
        Ok(ImageSample { id: id.into(), image, polygons, gt_mask })
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| Error::validation(format!("manifest line {}: {e}", i + 1)))?;
        for (k, p) in rec.polygons.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::validation(format!("manifest line {} ({}), polygon {k}: {e}", i + 1, rec.image)))?;
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads every record in manifest order, failing on the first unreadable one.
pub fn load_dataset<T: Scalar>(manifest_path: &Path) -> Result<Vec<ImageSample<T>>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let records = parse_manifest(&text)?;
    let base = base_dir(manifest_path);
    records.into_iter().map(|r| load_record(&base, r)).collect()
}

pub fn load_record<T: Scalar>(base: &Path, rec: ManifestRecord) -> Result<ImageSample<T>> {
    let img_path = base.join(&rec.image);
    let image = Image::load(&img_path).map_err(|e| Error::Load { record: rec.image.clone(), reason: e.to_string() })?;
    let gt_mask = match &rec.mask {
        Some(m) => Some(
            Mask::load(&base.join(m)).map_err(|e| Error::Load { record: rec.image.clone(), reason: e.to_string() })?,
        ),
        None => None,
    };
    ImageSample::new(rec.image.clone(), image, rec.polygons, gt_mask)
        .map_err(|e| Error::Load { record: rec.image, reason: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(dir: &Path, name: &str) {
        Image::<f32>::filled(3, 8, 8, 0.5).save_png(&dir.join(name)).unwrap();
    }

    #[test]
    fn single_record_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        let m = dir.path().join("m.jsonl");
        fs::write(&m, r#"{"image":"a.png","polygons":[[[1,1],[5,1],[5,4],[1,4]]]}"#).unwrap();
        let s = load_dataset::<f32>(&m).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].polygons.len(), 1);
        assert_eq!(s[0].polygons[0].points, vec![[1.0, 1.0], [5.0, 1.0], [5.0, 4.0], [1.0, 4.0]]);
        assert!((s[0].image.get(0, 0, 0) - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn missing_polygons_key_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(&m, r#"{"image":"a.png"}"#).unwrap();
        assert!(matches!(load_dataset::<f32>(&m), Err(Error::Validation(_))));
    }

    #[test]
    fn short_polygon_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(&m, r#"{"image":"a.png","polygons":[[[1,1],[2,2]]]}"#).unwrap();
        assert!(matches!(load_dataset::<f32>(&m), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_image_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        write_png(dir.path(), "c.png");
        let m = dir.path().join("m.jsonl");
        let lines = [
            r#"{"image":"a.png","polygons":[]}"#,
            r#"{"image":"b.png","polygons":[]}"#,
            r#"{"image":"c.png","polygons":[]}"#,
        ];
        fs::write(&m, lines.join("\n")).unwrap();
        match load_dataset::<f32>(&m) {
            Err(Error::Load { record, .. }) => assert_eq!(record, "b.png"),
            other => panic!("expected load error, got {other:?}"),
        }
        assert!(dir.path().join("a.png").exists() && dir.path().join("c.png").exists());
    }
}
