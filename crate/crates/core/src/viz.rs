//! Static PNG overlays: visible region in one tint, occluded remainder in
//! another, boxes outlined.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::dataset::{load_image, resolve_image_path, save_png, DatasetManifest, SchemaError};
use crate::mask::{AmodalInstance, BinaryMask, BoundingBox};

pub const VISIBLE_TINT: Rgb<u8> = Rgb([40, 200, 80]);
pub const OCCLUDED_TINT: Rgb<u8> = Rgb([230, 60, 60]);
pub const BOX_COLOR: Rgb<u8> = Rgb([250, 220, 40]);
const ALPHA: f32 = 0.5;

/// Pixel counts of the two overlay regions of one instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegionAreas {
    pub visible: usize,
    pub occluded: usize,
}

fn blend(image: &mut RgbImage, x: usize, y: usize, tint: Rgb<u8>) {
    let p = image.get_pixel_mut(x as u32, y as u32);
    for c in 0..3 {
        p.0[c] = ((1.0 - ALPHA) * p.0[c] as f32 + ALPHA * tint.0[c] as f32).round() as u8;
    }
}

pub fn draw_box(image: &mut RgbImage, b: &BoundingBox, color: Rgb<u8>) {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let x0 = b.x.floor() as i64;
    let y0 = b.y.floor() as i64;
    let x1 = b.x1().ceil() as i64 - 1;
    let y1 = b.y1().ceil() as i64 - 1;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            image.put_pixel(x as u32, y as u32, color);
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

/// Tints one instance; returns the areas of the two regions, which partition
/// the amodal mask.
pub fn overlay_instance(image: &mut RgbImage, inst: &AmodalInstance) -> RegionAreas {
    let mut areas = RegionAreas::default();
    for y in 0..inst.amodal_mask.height().min(image.height() as usize) {
        for x in 0..inst.amodal_mask.width().min(image.width() as usize) {
            if inst.modal_mask.get(x, y) {
                blend(image, x, y, VISIBLE_TINT);
                areas.visible += 1;
            } else if inst.amodal_mask.get(x, y) {
                blend(image, x, y, OCCLUDED_TINT);
                areas.occluded += 1;
            }
        }
    }
    draw_box(image, &inst.amodal_box, BOX_COLOR);
    areas
}

pub fn overlay_mask(image: &mut RgbImage, mask: &BinaryMask, b: Option<&BoundingBox>) {
    for y in 0..mask.height().min(image.height() as usize) {
        for x in 0..mask.width().min(image.width() as usize) {
            if mask.get(x, y) {
                blend(image, x, y, OCCLUDED_TINT);
            }
        }
    }
    if let Some(b) = b {
        draw_box(image, b, BOX_COLOR);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VizReport {
    pub written: Vec<PathBuf>,
}

/// Writes `overlay_<image id>.png` for each annotated image. All images are
/// resolved first; missing files are reported together.
pub fn render_manifest(manifest: &DatasetManifest, manifest_path: &Path, out_dir: &Path) -> Result<VizReport, SchemaError> {
    let mut by_image: BTreeMap<u64, Vec<AmodalInstance>> = BTreeMap::new();
    for inst in manifest.instances()? {
        by_image.entry(inst.image_id).or_default().push(inst);
    }
    let mut paths = Vec::new();
    let mut missing = Vec::new();
    for &id in by_image.keys() {
        let rec = manifest.image(id).ok_or_else(|| SchemaError::invalid("viz", format!("unknown image_id {id}")))?;
        let p = resolve_image_path(manifest_path, rec);
        if !p.is_file() {
            missing.push(p.display().to_string());
        }
        paths.push(p);
    }
    if !missing.is_empty() {
        return Err(SchemaError::invalid("missing image files", missing.join(", ")));
    }
    std::fs::create_dir_all(out_dir).map_err(|source| SchemaError::Io { path: out_dir.display().to_string(), source })?;
    let mut report = VizReport::default();
    for ((id, insts), p) in by_image.iter().zip(paths) {
        let mut im = load_image(&p)?;
        for inst in insts {
            overlay_instance(&mut im, inst);
        }
        let out = out_dir.join(format!("overlay_{id:06}.png"));
        save_png(&out, &im)?;
        report.written.push(out);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Origin;

    #[test]
    fn unoccluded_is_single_tint() {
        let m = BinaryMask::rect(20, 20, 2, 2, 6, 6);
        let inst = AmodalInstance::new(0, m.clone(), m, None, Origin::Real).unwrap();
        let mut im = RgbImage::from_pixel(20, 20, Rgb([0, 0, 0]));
        let a = overlay_instance(&mut im, &inst);
        assert_eq!(a, RegionAreas { visible: 36, occluded: 0 });
    }

    #[test]
    fn occluded_regions_partition_amodal() {
        let amodal = BinaryMask::rect(20, 20, 2, 2, 10, 6);
        let modal = BinaryMask::rect(20, 20, 2, 2, 4, 6);
        let inst = AmodalInstance::new(0, modal, amodal.clone(), None, Origin::Real).unwrap();
        let mut im = RgbImage::from_pixel(20, 20, Rgb([0, 0, 0]));
        let a = overlay_instance(&mut im, &inst);
        assert_eq!(a.visible + a.occluded, amodal.area());
        assert_eq!(a.occluded, 36);
        // interior pixels carry the two tints
        assert_eq!(*im.get_pixel(3, 4), Rgb([20, 100, 40]));
        assert_eq!(*im.get_pixel(9, 4), Rgb([115, 30, 30]));
        assert_eq!(*im.get_pixel(2, 2), BOX_COLOR);
    }

    #[test]
    fn empty_manifest_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let r = render_manifest(&DatasetManifest::default(), &dir.path().join("m.json"), &dir.path().join("out")).unwrap();
        assert!(r.written.is_empty());
    }
}
