//! Box and binary-mask algebra.
//!
//! Boxes are stored in normalized center form `(cx, cy, w, h)`; masks are
//! row-major bit grids at feature resolution. Boxes are rasterized onto a
//! grid with cell-center inclusion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("mask has no foreground cells")]
    NoForeground,
    #[error("invalid box {0:?}")]
    InvalidBox([f64; 4]),
    #[error("invalid run-length encoding: {0}")]
    InvalidRle(String),
}

/// Axis-aligned box in normalized `(cx, cy, w, h)` form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner form `(x_min, y_min, x_max, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corners {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Corners {
    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl BBox {
    pub const UNIT: BBox = BBox { cx: 0.5, cy: 0.5, w: 1.0, h: 1.0 };

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let b = BBox { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(GeometryError::InvalidBox([cx, cy, w, h]))
        }
    }

    pub fn is_valid(&self) -> bool {
        let finite = self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite();
        finite
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w >= 0.0
            && self.h >= 0.0
    }

    pub fn from_corners(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            cx: 0.5 * (x_min + x_max),
            cy: 0.5 * (y_min + y_max),
            w: x_max - x_min,
            h: y_max - y_min,
        }
    }

    /// Converts absolute pixel corners into a normalized box.
    pub fn from_pixel_corners(corners: [f64; 4], width: f64, height: f64) -> Self {
        let [x0, y0, x1, y1] = corners;
        BBox::from_corners(
            (x0 / width).clamp(0.0, 1.0),
            (y0 / height).clamp(0.0, 1.0),
            (x1 / width).clamp(0.0, 1.0),
            (y1 / height).clamp(0.0, 1.0),
        )
    }

    pub fn corners(&self) -> Corners {
        Corners {
            x_min: self.cx - 0.5 * self.w,
            y_min: self.cy - 0.5 * self.h,
            x_max: self.cx + 0.5 * self.w,
            y_max: self.cy + 0.5 * self.h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn contains(&self, other: &BBox) -> bool {
        let a = self.corners();
        let b = other.corners();
        const TOL: f64 = 1e-12;
        b.x_min >= a.x_min - TOL && b.y_min >= a.y_min - TOL && b.x_max <= a.x_max + TOL && b.y_max <= a.y_max + TOL
    }
}

fn intersection_area(a: &Corners, b: &Corners) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    iw * ih
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = intersection_area(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU. Degenerate boxes give an IoU term of zero; the enclosing
/// penalty is dropped when the enclosing box itself has zero area.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ca, cb) = (a.corners(), b.corners());
    let inter = intersection_area(&ca, &cb);
    let union = ca.area() + cb.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let enclosing = Corners {
        x_min: ca.x_min.min(cb.x_min),
        y_min: ca.y_min.min(cb.y_min),
        x_max: ca.x_max.max(cb.x_max),
        y_max: ca.y_max.max(cb.y_max),
    }
    .area();
    if enclosing > 0.0 {
        iou - (enclosing - union) / enclosing
    } else {
        iou
    }
}

/// Sum of absolute differences over `(cx, cy, w, h)`.
pub fn box_l1(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Grows each side by `gamma` (normalized units), clamped to the image.
pub fn expand_box(b: &BBox, gamma: f64) -> BBox {
    let c = b.corners();
    BBox::from_corners(
        (c.x_min - gamma).clamp(0.0, 1.0),
        (c.y_min - gamma).clamp(0.0, 1.0),
        (c.x_max + gamma).clamp(0.0, 1.0),
        (c.y_max + gamma).clamp(0.0, 1.0),
    )
}

/// Interval intersection; `None` when the boxes share no area.
pub fn box_intersection(a: &BBox, b: &BBox) -> Option<BBox> {
    let (ca, cb) = (a.corners(), b.corners());
    let x_min = ca.x_min.max(cb.x_min);
    let y_min = ca.y_min.max(cb.y_min);
    let x_max = ca.x_max.min(cb.x_max);
    let y_max = ca.y_max.min(cb.y_max);
    if x_max <= x_min || y_max <= y_min {
        None
    } else {
        Some(BBox::from_corners(x_min, y_min, x_max, y_max))
    }
}

/// Row-major binary grid. Serializes as [`Rle`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Rle", try_from = "Rle")]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![false; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask { height, width, bits: vec![true; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "bit count must equal height * width");
        BinaryMask { height, width, bits }
    }

    /// Cells whose logit is strictly positive (probability above 0.5).
    pub fn from_logits(height: usize, width: usize, logits: &[f64]) -> Self {
        assert_eq!(logits.len(), height * width);
        BinaryMask { height, width, bits: logits.iter().map(|&l| l > 0.0).collect() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_dims(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    fn same_dims(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), GeometryError> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(GeometryError::DimensionMismatch(self.height, self.width, other.height, other.width))
        }
    }

    pub fn iou(&self, other: &BinaryMask) -> Result<f64, GeometryError> {
        self.check_dims(other)?;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
    }

    /// Rasterizes a box with cell-center inclusion.
    pub fn from_box(b: &BBox, height: usize, width: usize) -> Self {
        let c = b.corners();
        let mut mask = BinaryMask::zeros(height, width);
        for r in 0..height {
            let y = (r as f64 + 0.5) / height as f64;
            if y < c.y_min || y > c.y_max {
                continue;
            }
            for col in 0..width {
                let x = (col as f64 + 0.5) / width as f64;
                if x >= c.x_min && x <= c.x_max {
                    mask.bits[r * width + col] = true;
                }
            }
        }
        mask
    }
}

/// Cell-wise OR.
pub fn mask_union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask, GeometryError> {
    a.check_dims(b)?;
    let bits = a.bits.iter().zip(&b.bits).map(|(&x, &y)| x || y).collect();
    Ok(BinaryMask { height: a.height, width: a.width, bits })
}

/// Cell-wise AND.
pub fn mask_intersection(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask, GeometryError> {
    a.check_dims(b)?;
    let bits = a.bits.iter().zip(&b.bits).map(|(&x, &y)| x && y).collect();
    Ok(BinaryMask { height: a.height, width: a.width, bits })
}

/// Tightest normalized box covering every foreground cell.
pub fn mask_to_box(m: &BinaryMask) -> Result<BBox, GeometryError> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for r in 0..m.height {
        for c in 0..m.width {
            if m.bits[r * m.width + c] {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(GeometryError::NoForeground);
    }
    let (h, w) = (m.height as f64, m.width as f64);
    Ok(BBox::from_corners(c0 as f64 / w, r0 as f64 / h, (c1 + 1) as f64 / w, (r1 + 1) as f64 / h))
}

/// Zeroes every cell whose center lies outside `b`; `None` yields an empty mask.
pub fn crop_mask(m: &BinaryMask, b: Option<&BBox>) -> BinaryMask {
    match b {
        None => BinaryMask::zeros(m.height, m.width),
        Some(b) => {
            let region = BinaryMask::from_box(b, m.height, m.width);
            let bits = m.bits.iter().zip(&region.bits).map(|(&x, &y)| x && y).collect();
            BinaryMask { height: m.height, width: m.width, bits }
        }
    }
}

/// COCO-style uncompressed run-length encoding: column-major runs that
/// alternate background/foreground, starting with a (possibly empty) 0-run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(m: &BinaryMask) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for c in 0..m.width {
            for r in 0..m.height {
                let v = m.bits[r * m.width + c];
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { size: [m.height, m.width], counts }
    }

    pub fn decode(&self) -> Result<BinaryMask, GeometryError> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (h * w) as u64 {
            return Err(GeometryError::InvalidRle(format!("runs cover {total} cells, expected {}", h * w)));
        }
        let mut mask = BinaryMask::zeros(h, w);
        let mut idx = 0usize;
        let mut value = false;
        for &run in &self.counts {
            for _ in 0..run {
                let (c, r) = (idx / h, idx % h);
                mask.bits[r * w + c] = value;
                idx += 1;
            }
            value = !value;
        }
        Ok(mask)
    }
}

impl From<BinaryMask> for Rle {
    fn from(m: BinaryMask) -> Rle {
        Rle::encode(&m)
    }
}

impl TryFrom<Rle> for BinaryMask {
    type Error = GeometryError;

    fn try_from(r: Rle) -> Result<BinaryMask, GeometryError> {
        r.decode()
    }
}
