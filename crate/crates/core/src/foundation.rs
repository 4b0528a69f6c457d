//! Frozen segmentation model contract and a deterministic toy implementation.
//!
//! The toy world paints flat-colored shapes on a dark canvas. Each object
//! family owns a palette; every shape in a scene uses a distinct color, so
//! instances are recovered by exact color. Features are a fixed seeded
//! projection of per-cell pixel statistics.

use std::io::{Read, Write};

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask, Rle};
use crate::tensor::{matmul, Matrix};

/// Pixels per feature cell along each axis.
pub const STRIDE: usize = 4;
/// Image sides must be positive multiples of this.
pub const SIZE_MULTIPLE: u32 = STRIDE as u32 * 4;
pub const HUMAN: usize = 0;
pub const BACKGROUND: usize = 4;
pub const NUM_INST_CLASSES: usize = 5;
pub const INST_CLASS_NAMES: [&str; NUM_INST_CLASSES] = ["human", "rectangle", "triangle", "cross", "background"];
pub const BACKGROUND_COLOR: [u8; 3] = [16, 16, 16];

const INSTANCE_LOGIT: f64 = 6.0;
const OFF_LOGIT: f64 = -4.0;
const BG_QUERY_LOGIT: f64 = 2.0;
const BG_OFF_LOGIT: f64 = -2.0;
const BG_MASK_LOGIT: f64 = -10.0;
const MASK_SHARPNESS: f64 = 10.0;
const ANCHORS_PER_SIDE: usize = 5;
const CELL_STATS: usize = 7;
const QUERY_STATS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn class(self) -> usize {
        match self {
            ShapeKind::Disk => 0,
            ShapeKind::Rectangle => 1,
            ShapeKind::Triangle => 2,
            ShapeKind::Cross => 3,
        }
    }

    pub fn palette(self) -> &'static [[u8; 3]] {
        match self {
            ShapeKind::Disk => &[[40, 80, 255], [20, 40, 200], [70, 120, 240], [10, 10, 160]],
            ShapeKind::Rectangle => &[[230, 40, 40], [180, 20, 20], [255, 100, 80], [140, 0, 30]],
            ShapeKind::Triangle => &[[40, 200, 60], [20, 140, 40], [120, 230, 100], [0, 100, 20]],
            ShapeKind::Cross => &[[240, 220, 40], [200, 170, 0], [255, 240, 120], [170, 140, 20]],
        }
    }
}

fn palette_class(color: [u8; 3]) -> Option<usize> {
    ShapeKind::ALL.iter().find(|k| k.palette().contains(&color)).map(|k| k.class())
}

/// One painted shape, in pixel units. `half_w`/`half_h` are the half extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: [u8; 3],
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
}

impl Shape {
    /// Membership test for a point in pixel coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.half_w * self.half_w,
            ShapeKind::Rectangle => dx.abs() <= self.half_w && dy.abs() <= self.half_h,
            ShapeKind::Triangle => {
                if dy.abs() > self.half_h {
                    return false;
                }
                let t = (dy + self.half_h) / (2.0 * self.half_h);
                dx.abs() <= self.half_w * t
            }
            ShapeKind::Cross => {
                (dx.abs() <= self.half_w && dy.abs() <= self.half_h / 3.0)
                    || (dy.abs() <= self.half_h && dx.abs() <= self.half_w / 3.0)
            }
        }
    }

    /// Unoccluded extent `[x0, y0, x1, y1]` in pixels.
    pub fn extent(&self) -> [f64; 4] {
        [self.cx - self.half_w, self.cy - self.half_h, self.cx + self.half_w, self.cy + self.half_h]
    }

    pub fn bbox(&self, width: u32, height: u32) -> BBox {
        BBox::from_pixel_corners(self.extent(), width as f64, height as f64)
    }
}

/// A painted scene. Later shapes are drawn on top of earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub shapes: Vec<Shape>,
}

impl Scene {
    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(self.width, self.height, Rgb(BACKGROUND_COLOR));
        for y in 0..self.height {
            for x in 0..self.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if let Some(s) = self.shapes.iter().rev().find(|s| s.contains(px, py)) {
                    img.put_pixel(x, y, Rgb(s.color));
                }
            }
        }
        img
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoundationConfig {
    pub dim: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for FoundationConfig {
    fn default() -> Self {
        FoundationConfig { dim: 32, top_k: 25, seed: 7 }
    }
}

/// Frozen products of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoundationOutput {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// Pixel embedding map, one row per cell (row-major), `cells x dim`.
    pub f_seg: Matrix,
    /// Coarser feature levels, each `(h, w, tokens x dim)`.
    pub levels: Vec<(usize, usize, Matrix)>,
    /// Decoder queries `N_k x dim`.
    pub queries: Matrix,
    pub boxes: Vec<BBox>,
    /// `N_k x NUM_INST_CLASSES`.
    pub class_logits: Matrix,
    /// `N_k x cells`.
    pub mask_logits: Matrix,
}

impl FoundationOutput {
    pub fn num_queries(&self) -> usize {
        self.boxes.len()
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn class_argmax(&self, q: usize) -> usize {
        argmax(self.class_logits.row(q))
    }

    pub fn max_class_logit(&self, q: usize) -> f64 {
        self.class_logits.row(q).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_background(&self, q: usize) -> bool {
        self.class_argmax(q) == BACKGROUND
    }

    pub fn instance_mask(&self, q: usize) -> BinaryMask {
        BinaryMask::from_logits(self.grid_h, self.grid_w, self.mask_logits.row(q))
    }

    /// All coarse levels stacked into one key/value set.
    pub fn backbone_tokens(&self) -> Matrix {
        let dim = self.dim;
        let mut data = Vec::new();
        let mut rows = 0;
        for (_, _, m) in &self.levels {
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Matrix::from_vec(rows, dim, data)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// Rule-based stand-in for a pretrained segmentation model.
#[derive(Debug, Clone)]
pub struct ToyFoundation {
    config: FoundationConfig,
    w_feat: Matrix,
    w_query: Matrix,
    w_mask: Matrix,
}

struct Instance {
    class: usize,
    color: [u8; 3],
    extent: [u32; 4],
    counts: Vec<u32>,
}

impl ToyFoundation {
    pub fn new(config: FoundationConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let w_feat = Matrix::randn(CELL_STATS, config.dim, 1.0, &mut rng);
        let w_query = Matrix::randn(QUERY_STATS, config.dim, 1.0, &mut rng);
        let w_mask = Matrix::randn(config.dim, config.dim, 1.0 / (config.dim as f64).sqrt(), &mut rng);
        ToyFoundation { config, w_feat, w_query, w_mask }
    }

    pub fn config(&self) -> &FoundationConfig {
        &self.config
    }

    /// SHA-256 over the configuration and every parameter value.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"toy-foundation-v1");
        h.update((self.config.dim as u64).to_le_bytes());
        h.update((self.config.top_k as u64).to_le_bytes());
        h.update(self.config.seed.to_le_bytes());
        for m in [&self.w_feat, &self.w_query, &self.w_mask] {
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn extract(&self, img: &RgbImage) -> Result<FoundationOutput> {
        let (w, h) = img.dimensions();
        let s = STRIDE as u32;
        if w == 0 || h == 0 || w % SIZE_MULTIPLE != 0 || h % SIZE_MULTIPLE != 0 {
            return Err(Error::UnsupportedImageSize(w, h, SIZE_MULTIPLE));
        }
        let (gh, gw) = ((h / s) as usize, (w / s) as usize);
        let cells = gh * gw;
        let dim = self.config.dim;
        let cell_px = (STRIDE * STRIDE) as f64;

        let mut stats = Matrix::zeros(cells, CELL_STATS);
        let mut instances: Vec<Instance> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x, y).0;
                let cell = (y / s) as usize * gw + (x / s) as usize;
                let row = stats.row_mut(cell);
                for c in 0..3 {
                    row[c] += p[c] as f64 / 255.0 / cell_px;
                }
                let Some(class) = palette_class(p) else { continue };
                row[3] += 1.0 / cell_px;
                let inst = match instances.iter_mut().position(|i| i.color == p) {
                    Some(k) => &mut instances[k],
                    None => {
                        instances.push(Instance { class, color: p, extent: [x, y, x, y], counts: vec![0; cells] });
                        instances.last_mut().expect("just pushed")
                    }
                };
                inst.extent = [inst.extent[0].min(x), inst.extent[1].min(y), inst.extent[2].max(x), inst.extent[3].max(y)];
                inst.counts[cell] += 1;
            }
        }
        for r in 0..gh {
            for c in 0..gw {
                let row = stats.row_mut(r * gw + c);
                row[4] = (c as f64 + 0.5) / gw as f64;
                row[5] = (r as f64 + 0.5) / gh as f64;
                row[6] = 1.0;
            }
        }
        let f_seg = matmul(&stats, &self.w_feat).map(|x| quantize(x.tanh()));
        let levels = [2usize, 4]
            .iter()
            .filter(|&&f| gh % f == 0 && gw % f == 0)
            .map(|&f| (gh / f, gw / f, avg_pool(&f_seg, gh, gw, f)))
            .collect();

        let mut queries = Vec::new();
        let mut boxes = Vec::new();
        let mut class_rows = Vec::new();
        let mut mask_rows = Vec::new();
        for inst in &instances {
            let coverage: Vec<f64> = inst.counts.iter().map(|&n| n as f64 / cell_px).collect();
            let e = inst.extent;
            let b = BBox::from_pixel_corners(
                [e[0] as f64, e[1] as f64, (e[2] + 1) as f64, (e[3] + 1) as f64],
                w as f64,
                h as f64,
            );
            let rgb = inst.color.map(|c| c as f64 / 255.0);
            let qstats = [rgb[0], rgb[1], rgb[2], b.cx, b.cy, b.w, b.h, 1.0];
            let strong: Vec<f64> = coverage.iter().map(|&c| if c > 0.5 { 1.0 } else { 0.0 }).collect();
            let weights = if strong.iter().any(|&x| x > 0.0) { strong } else { coverage.clone() };
            queries.push(self.query_vector(&f_seg, &weights, &qstats));
            boxes.push(b);
            let mut cl = vec![OFF_LOGIT; NUM_INST_CLASSES];
            cl[inst.class] = INSTANCE_LOGIT;
            class_rows.push(cl);
            mask_rows.push(coverage.iter().map(|&c| MASK_SHARPNESS * (c - 0.5)).collect::<Vec<_>>());
        }
        for ay in 0..ANCHORS_PER_SIDE {
            for ax in 0..ANCHORS_PER_SIDE {
                let side = 1.0 / ANCHORS_PER_SIDE as f64;
                let b = BBox { cx: (ax as f64 + 0.5) * side, cy: (ay as f64 + 0.5) * side, w: side, h: side };
                let region = BinaryMask::from_box(&b, gh, gw);
                let weights: Vec<f64> = region.bits().iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
                let qstats = [0.0, 0.0, 0.0, b.cx, b.cy, b.w, b.h, 1.0];
                queries.push(self.query_vector(&f_seg, &weights, &qstats));
                boxes.push(b);
                let mut cl = vec![BG_OFF_LOGIT; NUM_INST_CLASSES];
                cl[BACKGROUND] = BG_QUERY_LOGIT;
                class_rows.push(cl);
                mask_rows.push(vec![BG_MASK_LOGIT; cells]);
            }
        }

        let mut order: Vec<usize> = (0..boxes.len()).collect();
        let max_logit = |i: usize| class_rows[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        order.sort_by(|&a, &b| max_logit(b).total_cmp(&max_logit(a)).then(a.cmp(&b)));
        order.truncate(self.config.top_k);

        let gather = |rows: &Vec<Vec<f64>>, width: usize| {
            let mut data = Vec::with_capacity(order.len() * width);
            for &i in &order {
                data.extend(rows[i].iter().map(|&x| quantize(x)));
            }
            Matrix::from_vec(order.len(), width, data)
        };
        Ok(FoundationOutput {
            grid_h: gh,
            grid_w: gw,
            dim,
            f_seg,
            levels,
            queries: gather(&queries, dim),
            boxes: order.iter().map(|&i| quantize_box(boxes[i])).collect(),
            class_logits: gather(&class_rows, NUM_INST_CLASSES),
            mask_logits: gather(&mask_rows, cells),
        })
    }

    fn query_vector(&self, f_seg: &Matrix, weights: &[f64], qstats: &[f64; QUERY_STATS]) -> Vec<f64> {
        let dim = self.config.dim;
        let total: f64 = weights.iter().sum();
        let mut pooled = vec![0.0; dim];
        if total > 0.0 {
            for (cell, &wt) in weights.iter().enumerate() {
                if wt > 0.0 {
                    for (p, v) in pooled.iter_mut().zip(f_seg.row(cell)) {
                        *p += wt * v / total;
                    }
                }
            }
        }
        let proj = matmul(&Matrix::row_vector(qstats.to_vec()), &self.w_query);
        pooled.iter().zip(&proj.data).map(|(p, q)| 0.5 * p + 0.5 * q.tanh()).collect()
    }

    /// Mask logits for an arbitrary query: `(q W_mask) . f_seg[p]` per cell.
    pub fn instance_mask_from_query(&self, q: &[f64], f_seg: &Matrix) -> Vec<f64> {
        let e = matmul(&Matrix::row_vector(q.to_vec()), &self.w_mask);
        (0..f_seg.rows).map(|p| e.data.iter().zip(f_seg.row(p)).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn mask_projection(&self) -> &Matrix {
        &self.w_mask
    }
}

fn quantize_box(b: BBox) -> BBox {
    BBox { cx: quantize(b.cx), cy: quantize(b.cy), w: quantize(b.w), h: quantize(b.h) }
}

fn avg_pool(f: &Matrix, gh: usize, gw: usize, factor: usize) -> Matrix {
    let (oh, ow) = (gh / factor, gw / factor);
    let mut out = Matrix::zeros(oh * ow, f.cols);
    let scale = 1.0 / (factor * factor) as f64;
    for r in 0..gh {
        for c in 0..gw {
            let dst = (r / factor) * ow + c / factor;
            let src = f.row(r * gw + c).to_vec();
            for (o, v) in out.row_mut(dst).iter_mut().zip(src) {
                *o += v * scale;
            }
        }
    }
    out.map(quantize)
}

const CACHE_MAGIC: &[u8; 8] = b"S2HFOUND";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    num_queries: usize,
    num_classes: usize,
    levels: Vec<(usize, usize)>,
}

fn write_f32s(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

/// Serializes one output: magic, version, JSON header, little-endian
/// `f32` arrays, then the thresholded instance masks as RLE.
pub fn write_output(w: &mut impl Write, out: &FoundationOutput) -> Result<()> {
    let header = CacheHeader {
        grid_h: out.grid_h,
        grid_w: out.grid_w,
        dim: out.dim,
        num_queries: out.num_queries(),
        num_classes: out.class_logits.cols,
        levels: out.levels.iter().map(|(h, w, _)| (*h, *w)).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    write_f32s(w, &out.f_seg.data)?;
    for (_, _, m) in &out.levels {
        write_f32s(w, &m.data)?;
    }
    write_f32s(w, &out.queries.data)?;
    let box_data: Vec<f64> = out.boxes.iter().flat_map(|b| b.to_array()).collect();
    write_f32s(w, &box_data)?;
    write_f32s(w, &out.class_logits.data)?;
    write_f32s(w, &out.mask_logits.data)?;
    for q in 0..out.num_queries() {
        let rle = Rle::encode(&out.instance_mask(q));
        w.write_all(&(rle.counts.len() as u32).to_le_bytes())?;
        for c in rle.counts {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_output(r: &mut impl Read) -> Result<FoundationOutput> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format("not a foundation cache record".into()));
    }
    let version = read_u32(r)?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported foundation cache version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let hd: CacheHeader = serde_json::from_slice(&json)?;
    let cells = hd.grid_h * hd.grid_w;
    let f_seg = Matrix::from_vec(cells, hd.dim, read_f32s(r, cells * hd.dim)?);
    let mut levels = Vec::new();
    for &(h, w) in &hd.levels {
        levels.push((h, w, Matrix::from_vec(h * w, hd.dim, read_f32s(r, h * w * hd.dim)?)));
    }
    let n = hd.num_queries;
    let queries = Matrix::from_vec(n, hd.dim, read_f32s(r, n * hd.dim)?);
    let boxes = read_f32s(r, n * 4)?.chunks_exact(4).map(|c| BBox { cx: c[0], cy: c[1], w: c[2], h: c[3] }).collect();
    let class_logits = Matrix::from_vec(n, hd.num_classes, read_f32s(r, n * hd.num_classes)?);
    let mask_logits = Matrix::from_vec(n, cells, read_f32s(r, n * cells)?);
    let out = FoundationOutput { grid_h: hd.grid_h, grid_w: hd.grid_w, dim: hd.dim, f_seg, levels, queries, boxes, class_logits, mask_logits };
    for q in 0..n {
        let k = read_u32(r)? as usize;
        let counts = (0..k).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        let mask = Rle { size: [hd.grid_h, hd.grid_w], counts }.decode()?;
        if mask != out.instance_mask(q) {
            return Err(Error::Format(format!("mask record {q} disagrees with stored logits")));
        }
    }
    Ok(out)
}
