//! Dataset ingestion, region crops, background replacement and augmentation.

pub mod augment;
pub mod crop;
pub mod font;
pub mod image;
pub mod manifest;
pub mod polygon;
pub mod synth;

use sha2::{Digest, Sha256};

pub use self::augment::{augment_color, augment_geometric, ColorParams, GeometricParams};
pub use self::crop::{
    build_replacement_pair, crop_regions, make_region_image, replace_background, CropConfig, CropSet, RegionCrop,
    ReplacementPair,
};
pub use self::image::{Image, Mask};
pub use self::manifest::{load_dataset, ImageSample, ManifestRecord};
pub use self::polygon::{Polygon, Rect};
pub use self::synth::{synth_generate, SynthConfig};

/// Stable per-item seed: a hash of the global seed and an item key, so results do not
/// depend on processing order.
pub fn derive_seed(global: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}
