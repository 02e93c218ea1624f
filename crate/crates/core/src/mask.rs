//! Binary masks, run-length encoding, boxes and the geometric quantities
//! (IoU, occlusion rate) the rest of the toolkit is built on.
//!
//! Dense masks are stored row-major. Run-length encodings follow the COCO
//! uncompressed convention: column-major counts that begin with a run of
//! zeros (possibly of length 0).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("mask has no set pixels")]
    Empty,
    #[error("malformed RLE: counts sum to {sum}, expected {expected}")]
    MalformedRle { sum: u64, expected: u64 },
    #[error("malformed compressed RLE string")]
    MalformedCompressed,
    #[error("bit buffer holds {got} values, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("modal mask is not contained in the amodal mask")]
    NotSubset,
}

/// Dense binary mask over an image grid.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}x{}, area {})", self.height, self.width, self.area())
    }
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    /// Builds a mask from a predicate over `(x, y)` pixel coordinates.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { height, width, bits }
    }

    /// Row-major bits.
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if bits.len() != height * width {
            return Err(MaskError::BadLength { got: bits.len(), expected: height * width });
        }
        Ok(Self { height, width, bits })
    }

    /// Axis-aligned filled rectangle `[x0, x0+w) x [y0, y0+h)`, clipped to the grid.
    pub fn rect(height: usize, width: usize, x0: i64, y0: i64, w: i64, h: i64) -> Self {
        Self::from_fn(height, width, |x, y| {
            let (x, y) = (x as i64, y as i64);
            x >= x0 && x < x0 + w && y >= y0 && y < y0 + h
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.height != other.height || self.width != other.width {
            return Err(MaskError::DimensionMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_area(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count())
    }

    /// Intersection over union. Two empty masks agree perfectly (IoU 1).
    pub fn iou(&self, other: &BinaryMask) -> Result<f64, MaskError> {
        self.check_dims(other)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            return Ok(1.0);
        }
        Ok(inter as f64 / union as f64)
    }

    /// Pixels of `self` that are not in `cover`.
    pub fn subtract(&self, cover: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_dims(cover)?;
        let bits = self.bits.iter().zip(&cover.bits).map(|(&a, &c)| a && !c).collect();
        Ok(BinaryMask { height: self.height, width: self.width, bits })
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Ok(BinaryMask { height: self.height, width: self.width, bits })
    }

    pub fn intersect(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        self.check_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        Ok(BinaryMask { height: self.height, width: self.width, bits })
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool, MaskError> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }

    /// Minimal box covering every set pixel.
    pub fn tight_bbox(&self) -> Result<BoundingBox, MaskError> {
        let (mut x0, mut y0) = (usize::MAX, usize::MAX);
        let (mut x1, mut y1) = (0usize, 0usize);
        for y in 0..self.height {
            let row = &self.bits[y * self.width..(y + 1) * self.width];
            if let Some(first) = row.iter().position(|&b| b) {
                let last = row.iter().rposition(|&b| b).unwrap_or(first);
                x0 = x0.min(first);
                x1 = x1.max(last);
                y0 = y0.min(y);
                y1 = y;
            }
        }
        if x0 == usize::MAX {
            return Err(MaskError::Empty);
        }
        Ok(BoundingBox::new(
            x0 as f64,
            y0 as f64,
            (x1 - x0 + 1) as f64,
            (y1 - y0 + 1) as f64,
        ))
    }

    /// Moves the mask content by `(dx, dy)`; pixels leaving the grid are dropped.
    pub fn shifted(&self, dx: i64, dy: i64) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |x, y| {
            let sx = x as i64 - dx;
            let sy = y as i64 - dy;
            sx >= 0
                && sy >= 0
                && (sx as usize) < self.width
                && (sy as usize) < self.height
                && self.get(sx as usize, sy as usize)
        })
    }

    /// Nearest-neighbour resampling to a new grid.
    pub fn resized(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..self.width {
            for y in 0..self.height {
                let v = self.get(x, y);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { height: self.height, width: self.width, counts }
    }
}

/// COCO-style uncompressed run-length encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn decode(&self) -> Result<BinaryMask, MaskError> {
        let expected = (self.height * self.width) as u64;
        let sum: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if sum != expected {
            return Err(MaskError::MalformedRle { sum, expected });
        }
        let mut mask = BinaryMask::zeros(self.height, self.width);
        let mut pos = 0usize;
        let mut value = false;
        for &count in &self.counts {
            if value {
                for p in pos..pos + count as usize {
                    // column-major position -> (x, y)
                    let (x, y) = (p / self.height, p % self.height);
                    mask.set(x, y, true);
                }
            }
            pos += count as usize;
            value = !value;
        }
        Ok(mask)
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    /// LEB128-like string codec used by pycocotools (`counts` as a string).
    pub fn to_compressed_string(&self) -> String {
        let mut out = String::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let mut x = c as i64;
            if i > 2 {
                x -= self.counts[i - 2] as i64;
            }
            loop {
                let mut ch = x & 0x1f;
                x >>= 5;
                let more = if ch & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    ch |= 0x20;
                }
                out.push((ch as u8 + 48) as char);
                if !more {
                    break;
                }
            }
        }
        out
    }

    pub fn from_compressed_string(height: usize, width: usize, s: &str) -> Result<Rle, MaskError> {
        let bytes = s.as_bytes();
        let mut counts: Vec<u32> = Vec::new();
        let mut p = 0usize;
        while p < bytes.len() {
            let mut x: i64 = 0;
            let mut k = 0;
            loop {
                let b = *bytes.get(p).ok_or(MaskError::MalformedCompressed)?;
                if b < 48 {
                    return Err(MaskError::MalformedCompressed);
                }
                let c = (b - 48) as i64;
                x |= (c & 0x1f) << (5 * k);
                let more = c & 0x20 != 0;
                p += 1;
                k += 1;
                if !more {
                    if c & 0x10 != 0 {
                        x |= -1i64 << (5 * k);
                    }
                    break;
                }
            }
            let m = counts.len();
            if m > 2 {
                x += counts[m - 2] as i64;
            }
            counts.push(u32::try_from(x).map_err(|_| MaskError::MalformedCompressed)?);
        }
        let rle = Rle { height, width, counts };
        let sum: u64 = rle.counts.iter().map(|&c| c as u64).sum();
        if sum != (height * width) as u64 {
            return Err(MaskError::MalformedRle { sum, expected: (height * width) as u64 });
        }
        Ok(rle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoxKind {
    #[default]
    Modal,
    Amodal,
}

/// Box in pixel-corner coordinates covering `[x, x+w) x [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_xywh(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn x1(&self) -> f64 {
        self.x + self.w
    }

    pub fn y1(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Intersects the box with the image; `None` when nothing of positive area remains.
    pub fn clamp(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let x0 = self.x.clamp(0.0, width as f64);
        let y0 = self.y.clamp(0.0, height as f64);
        let x1 = self.x1().clamp(0.0, width as f64);
        let y1 = self.y1().clamp(0.0, height as f64);
        if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
            return None;
        }
        Some(BoundingBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn is_within(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x1() <= width as f64 && self.y1() <= height as f64
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BoundingBox {
        BoundingBox::new(self.x * sx, self.y * sy, self.w * sx, self.h * sy)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x1().min(other.x1()) - self.x.max(other.x)).max(0.0);
        let iy = (self.y1().min(other.y1()) - self.y.max(other.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            return 0.0;
        }
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Real,
    SyntheticOccluded,
    SyntheticUnoccluded,
}

/// One object with paired visible and full-extent masks.
#[derive(Debug, Clone, PartialEq)]
pub struct AmodalInstance {
    pub image_id: u64,
    pub modal_mask: BinaryMask,
    pub amodal_mask: BinaryMask,
    /// `None` when the object is fully hidden.
    pub modal_box: Option<BoundingBox>,
    pub amodal_box: BoundingBox,
    pub category: Option<String>,
    pub is_occluded: bool,
    pub origin: Origin,
}

impl AmodalInstance {
    /// Derives boxes and the occlusion flag from the masks.
    pub fn new(
        image_id: u64,
        modal_mask: BinaryMask,
        amodal_mask: BinaryMask,
        category: Option<String>,
        origin: Origin,
    ) -> Result<Self, MaskError> {
        if !modal_mask.is_subset_of(&amodal_mask)? {
            return Err(MaskError::NotSubset);
        }
        let amodal_box = amodal_mask.tight_bbox()?;
        let modal_box = modal_mask.tight_bbox().ok();
        let is_occluded = modal_mask != amodal_mask;
        Ok(Self {
            image_id,
            modal_mask,
            amodal_mask,
            modal_box,
            amodal_box,
            category,
            is_occluded,
            origin,
        })
    }

    pub fn box_of(&self, kind: BoxKind) -> Option<BoundingBox> {
        match kind {
            BoxKind::Modal => self.modal_box,
            BoxKind::Amodal => Some(self.amodal_box),
        }
    }

    pub fn visible_ratio(&self) -> Result<f64, MaskError> {
        Ok(1.0 - occlusion_rate(self)?)
    }
}

pub fn mask_area(m: &BinaryMask) -> usize {
    m.area()
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    a.iou(b)
}

/// `1 - area(modal) / area(amodal)`.
pub fn occlusion_rate(inst: &AmodalInstance) -> Result<f64, MaskError> {
    let amodal = inst.amodal_mask.area();
    if amodal == 0 {
        return Err(MaskError::Empty);
    }
    Ok(1.0 - inst.modal_mask.area() as f64 / amodal as f64)
}

pub fn tight_bbox(m: &BinaryMask) -> Result<BoundingBox, MaskError> {
    m.tight_bbox()
}

pub fn rle_roundtrip(m: &BinaryMask) -> Result<BinaryMask, MaskError> {
    m.to_rle().decode()
}

pub fn subtract(amodal: &BinaryMask, cover: &BinaryMask) -> Result<BinaryMask, MaskError> {
    amodal.subtract(cover)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(h: usize, w: usize, x0: usize, y0: usize, s: usize) -> BinaryMask {
        BinaryMask::rect(h, w, x0 as i64, y0 as i64, s as i64, s as i64)
    }

    #[test]
    fn area_cases() {
        assert_eq!(mask_area(&BinaryMask::zeros(4, 4)), 0);
        assert_eq!(mask_area(&BinaryMask::full(4, 4)), 16);
        assert_eq!(mask_area(&block(4, 4, 1, 1, 2)), 4);
    }

    #[test]
    fn iou_cases() {
        let a = block(4, 4, 0, 0, 2);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let far = block(4, 4, 2, 2, 2);
        assert_eq!(mask_iou(&a, &far).unwrap(), 0.0);
        let b = block(4, 4, 1, 1, 2);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        let empty = BinaryMask::zeros(4, 4);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
        assert!(matches!(
            mask_iou(&a, &BinaryMask::zeros(3, 4)),
            Err(MaskError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn occlusion_rate_cases() {
        // 10x10 amodal, 60-pixel visible part.
        let amodal = BinaryMask::full(10, 10);
        let modal = BinaryMask::rect(10, 10, 0, 0, 6, 10);
        let inst =
            AmodalInstance::new(0, modal, amodal.clone(), None, Origin::Real).unwrap();
        assert!((occlusion_rate(&inst).unwrap() - 0.4).abs() < 1e-12);
        assert!(inst.is_occluded);

        let same = AmodalInstance::new(0, amodal.clone(), amodal.clone(), None, Origin::Real)
            .unwrap();
        assert_eq!(occlusion_rate(&same).unwrap(), 0.0);
        assert!(!same.is_occluded);

        let hidden =
            AmodalInstance::new(0, BinaryMask::zeros(10, 10), amodal, None, Origin::Real)
                .unwrap();
        assert_eq!(occlusion_rate(&hidden).unwrap(), 1.0);
        assert!(hidden.modal_box.is_none());
    }

    #[test]
    fn instance_rejects_modal_outside_amodal() {
        let amodal = block(6, 6, 0, 0, 3);
        let modal = block(6, 6, 2, 2, 3);
        assert_eq!(
            AmodalInstance::new(1, modal, amodal, None, Origin::Real).unwrap_err(),
            MaskError::NotSubset
        );
    }

    #[test]
    fn tight_bbox_cases() {
        let mut m = BinaryMask::zeros(6, 6);
        m.set(2, 3, true);
        assert_eq!(tight_bbox(&m).unwrap(), BoundingBox::new(2.0, 3.0, 1.0, 1.0));
        assert_eq!(
            tight_bbox(&BinaryMask::full(5, 7)).unwrap(),
            BoundingBox::new(0.0, 0.0, 7.0, 5.0)
        );
        assert_eq!(tight_bbox(&BinaryMask::zeros(3, 3)), Err(MaskError::Empty));
    }

    /// Box by explicit scan over every pixel.
    fn scan_bbox(m: &BinaryMask) -> (usize, usize, usize, usize) {
        let mut xs = vec![];
        let mut ys = vec![];
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        let (x0, x1) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
        let (y0, y1) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
        (x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    }

    #[test]
    fn l_shape_bbox_matches_scan() {
        // vertical bar at column 0 rows 1..=4, foot along row 4 to column 2
        let m = BinaryMask::from_fn(6, 6, |x, y| (x == 0 && (1..=4).contains(&y)) || (y == 4 && x <= 2));
        assert_eq!(scan_bbox(&m), (0, 1, 3, 4));
        assert_eq!(tight_bbox(&m).unwrap(), BoundingBox::new(0.0, 1.0, 3.0, 4.0));
    }

    #[test]
    fn rle_constant_masks() {
        assert_eq!(BinaryMask::zeros(3, 3).to_rle().counts, vec![9]);
        assert_eq!(BinaryMask::full(3, 3).to_rle().counts, vec![0, 9]);
    }

    #[test]
    fn rle_is_column_major() {
        // single pixel at x=1, y=0 on 2x2: column-major position 2
        let mut m = BinaryMask::zeros(2, 2);
        m.set(1, 0, true);
        assert_eq!(m.to_rle().counts, vec![2, 1, 1]);
    }

    #[test]
    fn malformed_rle_rejected() {
        let rle = Rle { height: 3, width: 3, counts: vec![4, 4] };
        assert_eq!(rle.decode(), Err(MaskError::MalformedRle { sum: 8, expected: 9 }));
    }

    #[test]
    fn subtract_cases() {
        let amodal = block(4, 4, 1, 1, 2);
        assert_eq!(subtract(&amodal, &BinaryMask::zeros(4, 4)).unwrap(), amodal);
        assert!(subtract(&amodal, &BinaryMask::full(4, 4)).unwrap().is_empty());
        let right_half = BinaryMask::rect(4, 4, 2, 0, 2, 4);
        let left = subtract(&amodal, &right_half).unwrap();
        assert_eq!(left.area(), 2);
        assert_eq!(left, BinaryMask::rect(4, 4, 1, 1, 1, 2));
    }

    #[test]
    fn box_clamp() {
        let b = BoundingBox::new(-3.0, 2.0, 10.0, 100.0);
        assert_eq!(b.clamp(5, 8), Some(BoundingBox::new(0.0, 2.0, 5.0, 6.0)));
        assert_eq!(BoundingBox::new(9.0, 0.0, 3.0, 3.0).clamp(5, 5), None);
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (1usize..17, 1usize..17).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), h * w)
                .prop_map(move |bits| BinaryMask::from_bits(h, w, bits).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rle_roundtrip_bit_exact(m in arb_mask()) {
            let rle = m.to_rle();
            prop_assert_eq!(rle.counts.iter().map(|&c| c as usize).sum::<usize>(), m.height() * m.width());
            prop_assert_eq!(rle.area() as usize, m.area());
            prop_assert_eq!(rle_roundtrip(&m).unwrap(), m.clone());
            let s = rle.to_compressed_string();
            let back = Rle::from_compressed_string(m.height(), m.width(), &s).unwrap();
            prop_assert_eq!(back, rle);
        }

        #[test]
        fn iou_symmetric(bits in proptest::collection::vec(any::<(bool, bool)>(), 64)) {
            let a = BinaryMask::from_bits(8, 8, bits.iter().map(|p| p.0).collect()).unwrap();
            let b = BinaryMask::from_bits(8, 8, bits.iter().map(|p| p.1).collect()).unwrap();
            prop_assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
            if !a.is_empty() {
                prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
                prop_assert_eq!(
                    tight_bbox(&subtract(&a, &BinaryMask::zeros(8, 8)).unwrap()).unwrap(),
                    tight_bbox(&a).unwrap()
                );
            }
        }

        #[test]
        fn tight_bbox_matches_scan(m in arb_mask()) {
            prop_assume!(!m.is_empty());
            let (x, y, w, h) = scan_bbox(&m);
            prop_assert_eq!(tight_bbox(&m).unwrap(), BoundingBox::new(x as f64, y as f64, w as f64, h as f64));
        }
    }
}
