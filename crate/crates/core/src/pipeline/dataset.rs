//! HOI datasets: annotation loaders and the synthetic scene generator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::criterion::GroundTruthHOI;
use crate::error::{Error, Result};
use crate::evalinfer::{HoiTable, Triplet};
use crate::foundation::{Scene, Shape, ShapeKind};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Hico,
    Vcoco,
    Synth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categories {
    pub objects: Vec<String>,
    pub verbs: Vec<String>,
    /// `(verb, object)` per HOI class id; empty when the format has none.
    pub hoi: Vec<(usize, usize)>,
    /// Role names per verb (V-COCO); empty otherwise.
    pub verb_roles: Vec<Vec<String>>,
}

impl Categories {
    pub fn hoi_id(&self, verb: usize, object: usize) -> Option<usize> {
        self.hoi.iter().position(|&p| p == (verb, object))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    File(PathBuf),
    Synth(Scene),
}

/// One annotated human-object pair with all its verbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAnnotation {
    pub human_box: BBox,
    /// Absent for agent-only roles.
    pub object_box: Option<BBox>,
    pub object_class: Option<usize>,
    pub verbs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub id: String,
    pub source: ImageSource,
    pub width: u32,
    pub height: u32,
    pub pairs: Vec<PairAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiDataset {
    pub format: DatasetFormat,
    pub categories: Categories,
    pub images: Vec<AnnotatedImage>,
}

impl HoiDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Number of (pair, verb) instances.
    pub fn num_instances(&self) -> usize {
        self.images.iter().flat_map(|i| &i.pairs).map(|p| p.verbs.len()).sum()
    }

    pub fn load_image(&self, i: usize) -> Result<RgbImage> {
        match &self.images[i].source {
            ImageSource::Synth(scene) => Ok(scene.render()),
            ImageSource::File(path) => Ok(image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8()),
        }
    }

    /// Training targets for image `i`: pairs with an object, pseudo-labels unset.
    pub fn ground_truth(&self, i: usize) -> Vec<GroundTruthHOI> {
        let nv = self.categories.verbs.len();
        self.images[i]
            .pairs
            .iter()
            .filter_map(|p| {
                let (ob, oc) = (p.object_box?, p.object_class?);
                let mut verbs = vec![false; nv];
                p.verbs.iter().for_each(|&v| verbs[v] = true);
                Some(GroundTruthHOI { human_box: p.human_box, object_box: ob, object_class: oc, verbs, pseudo: None })
            })
            .collect()
    }

    /// One triplet per (pair, verb) with an object.
    pub fn triplets(&self, i: usize) -> Vec<Triplet> {
        self.images[i]
            .pairs
            .iter()
            .filter_map(|p| Some((p.object_box?, p.object_class?, p)))
            .flat_map(|(ob, oc, p)| p.verbs.iter().map(move |&verb| Triplet { human_box: p.human_box, object_box: ob, object_class: oc, verb }))
            .collect()
    }

    /// Training instance count per HOI class.
    pub fn hoi_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.categories.hoi.len()];
        for p in self.images.iter().flat_map(|i| &i.pairs) {
            if let Some(o) = p.object_class {
                for &v in &p.verbs {
                    if let Some(h) = self.categories.hoi_id(v, o) {
                        counts[h] += 1;
                    }
                }
            }
        }
        counts
    }

    pub fn hoi_table(&self) -> HoiTable {
        HoiTable::with_counts(self.categories.hoi.clone(), &self.hoi_counts())
    }

    /// Drops every verb whose HOI class is listed, then every pair left
    /// without verbs.
    pub fn without_hois(&self, unseen: &[usize]) -> HoiDataset {
        let mut out = self.clone();
        for img in &mut out.images {
            for p in &mut img.pairs {
                let obj = p.object_class;
                p.verbs.retain(|&v| obj.and_then(|o| self.categories.hoi_id(v, o)).is_none_or(|h| !unseen.contains(&h)));
            }
            img.pairs.retain(|p| !p.verbs.is_empty());
        }
        out
    }

    /// Contiguous sub-range of images.
    pub fn slice(&self, range: std::ops::Range<usize>) -> HoiDataset {
        HoiDataset { format: self.format, categories: self.categories.clone(), images: self.images[range].to_vec() }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    objects: Vec<String>,
    verbs: Vec<String>,
    #[serde(default)]
    hoi_classes: Vec<[usize; 2]>,
    #[serde(default)]
    roles: Vec<Vec<String>>,
    #[serde(default)]
    image_root: Option<PathBuf>,
    images: Vec<RawImage>,
}

#[derive(Debug, Deserialize)]
struct RawImage {
    file_name: String,
    width: u32,
    height: u32,
    #[serde(default)]
    annotations: Vec<RawBox>,
    #[serde(default)]
    hoi_annotation: Vec<RawHoi>,
}

#[derive(Debug, Deserialize)]
struct RawBox {
    bbox: [f64; 4],
    category_id: usize,
}

#[derive(Debug, Deserialize)]
struct RawHoi {
    subject_id: usize,
    #[serde(default)]
    object_id: Option<i64>,
    category_id: usize,
    #[serde(default)]
    hoi_category_id: Option<usize>,
}

/// Loads a HICO-style or V-COCO-style annotation file. Boxes are pixel
/// corners `[x0, y0, x1, y1]`; every id is zero-based. V-COCO pairs may
/// omit the object (`object_id` null or negative).
pub fn load_annotations(path: &Path, format: DatasetFormat) -> Result<HoiDataset> {
    let text = std::fs::read_to_string(path)?;
    let raw: RawFile = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let root = raw.image_root.as_ref().map_or_else(|| base.to_path_buf(), |r| base.join(r));
    parse_raw(raw, format, &root)
}

pub fn parse_annotations(json: &str, format: DatasetFormat, image_root: &Path) -> Result<HoiDataset> {
    parse_raw(serde_json::from_str(json)?, format, image_root)
}

fn parse_raw(raw: RawFile, format: DatasetFormat, root: &Path) -> Result<HoiDataset> {
    if format == DatasetFormat::Synth {
        return Err(Error::Config("synth datasets are generated, not loaded".into()));
    }
    if raw.objects.is_empty() || raw.verbs.is_empty() {
        return Err(Error::EmptyCategories);
    }
    let (n_obj, n_verb) = (raw.objects.len(), raw.verbs.len());
    let bad_table: Vec<usize> = raw.hoi_classes.iter().enumerate().filter(|(_, p)| p[0] >= n_verb || p[1] >= n_obj).map(|(i, _)| i).collect();
    if !bad_table.is_empty() {
        return Err(Error::Annotation { indices: bad_table, reason: "hoi class refers to an unknown verb or object".into() });
    }
    if format == DatasetFormat::Hico && raw.hoi_classes.is_empty() {
        return Err(Error::Config("hico annotations need a hoi_classes table".into()));
    }
    if format == DatasetFormat::Vcoco && !raw.roles.is_empty() && raw.roles.len() != n_verb {
        return Err(Error::Config("roles must list one entry per verb".into()));
    }
    let categories = Categories {
        objects: raw.objects,
        verbs: raw.verbs,
        hoi: raw.hoi_classes.iter().map(|p| (p[0], p[1])).collect(),
        verb_roles: raw.roles,
    };

    let mut bad: Vec<usize> = Vec::new();
    let mut reasons: Vec<String> = Vec::new();
    let mut images = Vec::with_capacity(raw.images.len());
    for (ii, img) in raw.images.into_iter().enumerate() {
        let mut problems = Vec::new();
        if img.width == 0 || img.height == 0 {
            problems.push("zero image size".to_string());
        }
        let (w, h) = (img.width as f64, img.height as f64);
        let boxes: Vec<Option<BBox>> = img
            .annotations
            .iter()
            .enumerate()
            .map(|(bi, b)| {
                let [x0, y0, x1, y1] = b.bbox;
                if !(x0 <= x1 && y0 <= y1 && x0 >= 0.0 && y0 >= 0.0 && x1 <= w && y1 <= h) {
                    problems.push(format!("box {bi} outside the image or inverted"));
                    return None;
                }
                if b.category_id >= n_obj {
                    problems.push(format!("box {bi} has object category {} out of range", b.category_id));
                    return None;
                }
                Some(BBox::from_pixel_corners(b.bbox, w, h))
            })
            .collect();
        let mut grouped: BTreeMap<(usize, Option<usize>), Vec<usize>> = BTreeMap::new();
        for (hi, r) in img.hoi_annotation.iter().enumerate() {
            if r.subject_id >= boxes.len() {
                problems.push(format!("hoi {hi} subject {} out of range", r.subject_id));
                continue;
            }
            if r.category_id >= n_verb {
                problems.push(format!("hoi {hi} verb {} out of range", r.category_id));
                continue;
            }
            let object = match r.object_id {
                Some(o) if o >= 0 => {
                    if o as usize >= boxes.len() {
                        problems.push(format!("hoi {hi} object {o} out of range"));
                        continue;
                    }
                    Some(o as usize)
                }
                _ if format == DatasetFormat::Hico => {
                    problems.push(format!("hoi {hi} has no object"));
                    continue;
                }
                _ => None,
            };
            if let Some(o) = object {
                let oc = img.annotations[o].category_id;
                if format == DatasetFormat::Hico {
                    match categories.hoi_id(r.category_id, oc) {
                        None => {
                            problems.push(format!("hoi {hi} pair (verb {}, object {oc}) not in the hoi table", r.category_id));
                            continue;
                        }
                        Some(id) if r.hoi_category_id.is_some_and(|given| given != id) => {
                            problems.push(format!("hoi {hi} hoi_category_id disagrees with the table"));
                            continue;
                        }
                        _ => {}
                    }
                }
            }
            let verbs = grouped.entry((r.subject_id, object)).or_default();
            if !verbs.contains(&r.category_id) {
                verbs.push(r.category_id);
            }
        }
        if !problems.is_empty() {
            bad.push(ii);
            reasons.push(format!("image {ii}: {}", problems.join(", ")));
            continue;
        }
        let pairs = grouped
            .into_iter()
            .filter_map(|((s, o), mut verbs)| {
                verbs.sort_unstable();
                Some(PairAnnotation {
                    human_box: boxes[s]?,
                    object_box: o.and_then(|o| boxes[o]),
                    object_class: o.map(|o| img.annotations[o].category_id),
                    verbs,
                })
            })
            .collect();
        images.push(AnnotatedImage {
            id: img.file_name.clone(),
            source: ImageSource::File(root.join(&img.file_name)),
            width: img.width,
            height: img.height,
            pairs,
        });
    }
    if !bad.is_empty() {
        return Err(Error::Annotation { indices: bad, reason: reasons.join("; ") });
    }
    Ok(HoiDataset { format, categories, images })
}

pub const SYNTH_OBJECTS: [&str; 4] = ["person", "book", "kite", "cup"];
pub const SYNTH_VERBS: [&str; 3] = ["hold", "near", "over"];
pub const HOLD: usize = 0;
pub const NEAR: usize = 1;
pub const OVER: usize = 2;
pub const SYNTH_SIZE: u32 = 64;

const OBJECT_KINDS: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Cross];

/// Object names, verbs, and the nine (verb, object) classes over the
/// non-person objects.
pub fn synth_categories() -> Categories {
    let hoi = (1..SYNTH_OBJECTS.len()).flat_map(|o| (0..SYNTH_VERBS.len()).map(move |v| (v, o))).collect();
    Categories {
        objects: SYNTH_OBJECTS.iter().map(|s| s.to_string()).collect(),
        verbs: SYNTH_VERBS.iter().map(|s| s.to_string()).collect(),
        hoi,
        verb_roles: Vec::new(),
    }
}

fn overlaps(a: [f64; 4], b: [f64; 4], margin: f64) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

fn place_object(rng: &mut ChaCha8Rng, human: &Shape, verb: usize, kind: ShapeKind, color: [u8; 3]) -> Shape {
    let r = human.half_w;
    let hw = rng.gen_range(5.0..8.0);
    let hh = rng.gen_range(5.0..8.0);
    let (cx, cy) = match verb {
        HOLD => {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let d = r * rng.gen_range(0.5..0.9);
            (human.cx + d * theta.cos(), human.cy + d * theta.sin())
        }
        OVER => {
            let gap = rng.gen_range(1.0..10.0);
            (human.cx + rng.gen_range(-0.5..0.5) * r, human.cy - r - gap - hh)
        }
        _ => {
            let gap = rng.gen_range(1.0..8.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (human.cx + side * (r + gap + hw), human.cy + rng.gen_range(-0.5..0.5) * r)
        }
    };
    Shape { kind, color, cx, cy, half_w: hw, half_h: hh }
}

/// Visible pixel extent of every shape colour in a rendered scene.
fn visible_box(img: &RgbImage, color: [u8; 3]) -> Option<BBox> {
    let mut e: Option<[u32; 4]> = None;
    for (x, y, p) in img.enumerate_pixels() {
        if p.0 == color {
            e = Some(match e {
                None => [x, y, x, y],
                Some([a, b, c, d]) => [a.min(x), b.min(y), c.max(x), d.max(y)],
            });
        }
    }
    let [x0, y0, x1, y1] = e?;
    Some(BBox::from_pixel_corners([x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64], img.width() as f64, img.height() as f64))
}

/// One scripted scene: a human disk plus one or two objects, each placed
/// to realise one verb. Objects never touch each other, and only "hold"
/// objects overlap the human.
pub fn synth_scene(rng: &mut ChaCha8Rng) -> (Scene, Vec<PairAnnotation>) {
    let size = SYNTH_SIZE as f64;
    loop {
        let r = rng.gen_range(8.0..11.0);
        let human = Shape {
            kind: ShapeKind::Disk,
            color: *ShapeKind::Disk.palette().choose(rng).expect("palette"),
            cx: rng.gen_range(r + 2.0..size - r - 2.0),
            cy: rng.gen_range(r + 2.0..size - r - 2.0),
            half_w: r,
            half_h: r,
        };
        let n = rng.gen_range(1..=2);
        let mut objects: Vec<(Shape, usize)> = Vec::new();
        for _ in 0..40 {
            if objects.len() == n {
                break;
            }
            let verb = rng.gen_range(0..SYNTH_VERBS.len());
            let kind = *OBJECT_KINDS.choose(rng).expect("kinds");
            let used: Vec<[u8; 3]> = objects.iter().map(|(s, _)| s.color).collect();
            let free: Vec<[u8; 3]> = kind.palette().iter().copied().filter(|c| !used.contains(c)).collect();
            let color = *free.choose(rng).expect("palette has four colours");
            let s = place_object(rng, &human, verb, kind, color);
            let e = s.extent();
            let inside = e[0] >= 1.0 && e[1] >= 1.0 && e[2] <= size - 1.0 && e[3] <= size - 1.0;
            let clear = objects.iter().all(|(o, _)| !overlaps(o.extent(), e, 3.0));
            let human_ok = verb == HOLD || disk_gap(&human, &s) > 0.5;
            if inside && clear && human_ok {
                objects.push((s, verb));
            }
        }
        if objects.is_empty() {
            continue;
        }
        let mut shapes = vec![human];
        shapes.extend(objects.iter().map(|(s, _)| *s));
        let scene = Scene { width: SYNTH_SIZE, height: SYNTH_SIZE, shapes };
        let img = scene.render();
        let Some(hb) = visible_box(&img, human.color) else { continue };
        let pairs: Option<Vec<PairAnnotation>> = objects
            .iter()
            .map(|(s, verb)| {
                Some(PairAnnotation { human_box: hb, object_box: Some(visible_box(&img, s.color)?), object_class: Some(s.kind.class()), verbs: vec![*verb] })
            })
            .collect();
        if let Some(pairs) = pairs {
            return (scene, pairs);
        }
    }
}

/// Smallest distance from the disk edge to the object's box; negative
/// when they intersect.
fn disk_gap(disk: &Shape, s: &Shape) -> f64 {
    let e = s.extent();
    let dx = (e[0] - disk.cx).max(0.0).max(disk.cx - e[2]);
    let dy = (e[1] - disk.cy).max(0.0).max(disk.cy - e[3]);
    (dx * dx + dy * dy).sqrt() - disk.half_w
}

/// `n_images` deterministic scenes from `seed`.
pub fn synth_dataset(seed: u64, n_images: usize) -> HoiDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n_images)
        .map(|i| {
            let (scene, pairs) = synth_scene(&mut rng);
            AnnotatedImage { id: format!("synth-{seed}-{i}"), source: ImageSource::Synth(scene), width: SYNTH_SIZE, height: SYNTH_SIZE, pairs }
        })
        .collect();
    HoiDataset { format: DatasetFormat::Synth, categories: synth_categories(), images }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foundation::{FoundationConfig, ToyFoundation};
    use crate::geometry::iou;

    #[test]
    fn synth_is_deterministic_and_annotated() {
        let a = synth_dataset(0, 32);
        assert_eq!(a, synth_dataset(0, 32));
        assert_ne!(a, synth_dataset(1, 32));
        assert_eq!(a.len(), 32);
        assert!(a.images.iter().all(|i| !i.pairs.is_empty() && i.pairs.len() <= 2));
        assert_eq!(a.categories.hoi.len(), 9);
    }

    #[test]
    fn scripted_geometry_holds() {
        let d = synth_dataset(3, 64);
        for img in &d.images {
            let ImageSource::Synth(scene) = &img.source else { panic!() };
            let human = scene.shapes[0];
            for (p, s) in img.pairs.iter().zip(&scene.shapes[1..]) {
                let gap = disk_gap(&human, s);
                match p.verbs[0] {
                    HOLD => assert!(gap < 0.0),
                    OVER => assert!(s.extent()[3] < human.cy - human.half_w),
                    NEAR => assert!(gap > 0.0),
                    _ => unreachable!(),
                }
            }
        }
    }

    #[test]
    fn foundation_boxes_match_gt_boxes() {
        let d = synth_dataset(5, 16);
        let fm = ToyFoundation::new(FoundationConfig::default());
        for i in 0..d.len() {
            let f = fm.extract(&d.load_image(i).unwrap()).unwrap();
            for t in d.triplets(i) {
                assert!(f.boxes.iter().any(|b| iou(b, &t.human_box) > 0.999));
                assert!(f.boxes.iter().any(|b| iou(b, &t.object_box) > 0.999));
            }
        }
    }

    const MINIMAL: &str = r#"{
        "objects": ["person", "cup"], "verbs": ["hold"], "hoi_classes": [[0, 1]],
        "images": [{"file_name": "a.png", "width": 100, "height": 50,
            "annotations": [{"bbox": [0, 0, 50, 50], "category_id": 0}, {"bbox": [40, 10, 60, 30], "category_id": 1}],
            "hoi_annotation": [{"subject_id": 0, "object_id": 1, "category_id": 0}]}]
    }"#;

    #[test]
    fn minimal_hico_fixture() {
        let d = parse_annotations(MINIMAL, DatasetFormat::Hico, Path::new("/data")).unwrap();
        assert_eq!(d.num_instances(), 1);
        let p = &d.images[0].pairs[0];
        assert_eq!(p.human_box, BBox { cx: 0.25, cy: 0.5, w: 0.5, h: 1.0 });
        assert_eq!(p.object_class, Some(1));
        assert_eq!(d.images[0].source, ImageSource::File(PathBuf::from("/data/a.png")));
        assert_eq!(d.hoi_counts(), vec![1]);
        assert!(d.without_hois(&[0]).images[0].pairs.is_empty());
    }

    #[test]
    fn malformed_records_are_listed() {
        let bad = MINIMAL.replace("\"object_id\": 1", "\"object_id\": 7").replace("[40, 10, 60, 30], \"category_id\": 1", "[40, 10, 60, 30], \"category_id\": 9");
        match parse_annotations(&bad, DatasetFormat::Hico, Path::new(".")) {
            Err(Error::Annotation { indices, reason }) => {
                assert_eq!(indices, vec![0]);
                assert!(reason.contains("object 7") && reason.contains("category 9"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn vcoco_allows_missing_objects() {
        let v = MINIMAL.replace("\"object_id\": 1", "\"object_id\": -1");
        let d = parse_annotations(&v, DatasetFormat::Vcoco, Path::new(".")).unwrap();
        assert_eq!(d.images[0].pairs[0].object_box, None);
        assert!(d.ground_truth(0).is_empty());
        assert!(parse_annotations(&v, DatasetFormat::Hico, Path::new(".")).is_err());
    }
}
