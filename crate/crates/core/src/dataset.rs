//! Annotation manifest schema shared by synthesis, filtering, training and
//! evaluation:
//!
//! ```json
//! {"images": [{"id", "width", "height", "file"}],
//!  "annotations": [{"id", "image_id", "category"?, "visible_segmentation": RLE,
//!                   "amodal_segmentation": RLE, "origin", "pair_key"?}]}
//! ```
//!
//! RLE objects are COCO uncompressed run-length encodings `{"size": [h, w], "counts": [...]}`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{AmodalInstance, BinaryMask, MaskError, Origin, Rle};

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("{context}: {message}")]
    Invalid { context: String, message: String },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Image { path: String, message: String },
}

impl SchemaError {
    pub fn invalid(context: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid { context: context.into(), message: message.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleJson {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl RleJson {
    pub fn from_mask(m: &BinaryMask) -> Self {
        let rle = m.to_rle();
        Self { size: [rle.height, rle.width], counts: rle.counts }
    }

    pub fn to_mask(&self) -> Result<BinaryMask, MaskError> {
        Rle { height: self.size[0], width: self.size[1], counts: self.counts.clone() }.decode()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub visible_segmentation: RleJson,
    pub amodal_segmentation: RleJson,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_key: Option<u64>,
}

impl AnnotationRecord {
    pub fn from_instance(id: u64, inst: &AmodalInstance, pair_key: Option<u64>) -> Self {
        Self {
            id,
            image_id: inst.image_id,
            category: inst.category.clone(),
            visible_segmentation: RleJson::from_mask(&inst.modal_mask),
            amodal_segmentation: RleJson::from_mask(&inst.amodal_mask),
            origin: inst.origin,
            pair_key,
        }
    }

    pub fn to_instance(&self) -> Result<AmodalInstance, MaskError> {
        AmodalInstance::new(
            self.image_id,
            self.visible_segmentation.to_mask()?,
            self.amodal_segmentation.to_mask()?,
            self.category.clone(),
            self.origin,
        )
    }
}

/// Optional corpus-level metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture_weight: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub info: Option<ManifestInfo>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

impl DatasetManifest {
    /// Structural checks: unique ids, resolvable image references, RLE sizes
    /// matching their image, visible ⊆ amodal and a nonempty amodal mask.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut dims = BTreeMap::new();
        for im in &self.images {
            if dims.insert(im.id, (im.height, im.width)).is_some() {
                return Err(SchemaError::invalid(format!("image {}", im.id), "duplicate image id"));
            }
            if im.width == 0 || im.height == 0 {
                return Err(SchemaError::invalid(format!("image {}", im.id), "zero-size image"));
            }
        }
        let mut ids = BTreeSet::new();
        for (k, a) in self.annotations.iter().enumerate() {
            let ctx = format!("annotation #{k} (id {})", a.id);
            if !ids.insert(a.id) {
                return Err(SchemaError::invalid(ctx, "duplicate annotation id"));
            }
            let &(h, w) = dims
                .get(&a.image_id)
                .ok_or_else(|| SchemaError::invalid(&ctx, format!("unknown image_id {}", a.image_id)))?;
            for (label, rle) in [("visible", &a.visible_segmentation), ("amodal", &a.amodal_segmentation)] {
                if rle.size != [h, w] {
                    return Err(SchemaError::invalid(
                        &ctx,
                        format!("{label} segmentation size {:?} but image is [{h}, {w}]", rle.size),
                    ));
                }
            }
            a.to_instance().map_err(|e| SchemaError::invalid(&ctx, e.to_string()))?;
        }
        Ok(())
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn instances(&self) -> Result<Vec<AmodalInstance>, SchemaError> {
        self.annotations
            .iter()
            .enumerate()
            .map(|(k, a)| a.to_instance().map_err(|e| SchemaError::invalid(format!("annotation #{k}"), e.to_string())))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io { path: p.clone(), source })?;
        let m: Self = serde_json::from_str(&text).map_err(|source| SchemaError::Json { path: p, source })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), SchemaError> {
        std::fs::write(path, self.to_json())
            .map_err(|source| SchemaError::Io { path: path.display().to_string(), source })
    }
}

/// Resolves an image file relative to the manifest's directory.
pub fn resolve_image_path(manifest_path: &Path, rec: &ImageRecord) -> PathBuf {
    let file = Path::new(&rec.file);
    if file.is_absolute() {
        file.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(file)
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage, SchemaError> {
    image::open(path)
        .map(|im| im.to_rgb8())
        .map_err(|e| SchemaError::Image { path: path.display().to_string(), message: e.to_string() })
}

pub fn save_png(path: &Path, image: &RgbImage) -> Result<(), SchemaError> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SchemaError::Image { path: path.display().to_string(), message: e.to_string() })
}
