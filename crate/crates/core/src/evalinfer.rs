//! Quadruplet assembly, scoring, mAP evaluation and zero-shot splits.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::decoder::{Branch, HeadOutputs};
use crate::foundation::FoundationOutput;
use crate::geometry::{iou, BBox, BinaryMask};
use crate::tensor::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadruplet {
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verb: usize,
    pub score: f64,
    pub union_mask: BinaryMask,
    pub intersection_mask: Option<BinaryMask>,
    /// Row of the decoder output this came from.
    pub query_index: usize,
}

/// `(max_k p_k)^lambda * sigmoid(verb_logit)`.
pub fn score(class_probs: &[f64], verb_logit: f64, lambda: f64) -> f64 {
    let m = class_probs.iter().copied().fold(0.0, f64::max);
    m.powf(lambda) * sigmoid(verb_logit)
}

/// Softmax over all columns (the last is "no object"), then the object part.
pub fn object_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e[..e.len() - 1].iter().map(|x| x / s).collect()
}

fn argmax(xs: &[f64]) -> usize {
    crate::foundation::argmax(xs)
}

/// Rows that carry a real, foreground foundation query.
pub fn row_is_live(f: &FoundationOutput, heads: &HeadOutputs, i: usize) -> bool {
    heads.rows[i].query.is_some_and(|q| !f.is_background(q))
}

/// The quadruplet a single row predicts for verb `verb`.
pub fn quadruplet_for_row(f: &FoundationOutput, heads: &HeadOutputs, i: usize, verb: usize, lambda: f64) -> Quadruplet {
    let info = heads.rows[i];
    let own = info.query.map_or(BBox::UNIT, |q| f.boxes[q]);
    let counterpart = heads.counterpart_box(i);
    let (human_box, object_box) = match info.branch {
        Branch::Object => (counterpart, own),
        Branch::Human => (own, counterpart),
    };
    let probs = object_probs(heads.class_logits.row(i));
    let mask = |m: &crate::tensor::Matrix| BinaryMask::from_logits(f.grid_h, f.grid_w, m.row(i));
    Quadruplet {
        human_box,
        object_box,
        object_class: argmax(&probs),
        verb,
        score: score(&probs, heads.verb_logits.get(i, verb), lambda),
        union_mask: mask(&heads.union_logits),
        intersection_mask: heads.inter_logits.as_ref().map(mask),
        query_index: i,
    }
}

/// Every (live row, verb) candidate above `floor`, sorted by score
/// descending with ties broken by (row, verb), truncated to `top_k`.
pub fn assemble(f: &FoundationOutput, heads: &HeadOutputs, lambda: f64, top_k: usize, floor: f64) -> Vec<Quadruplet> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..heads.rows.len() {
        if !row_is_live(f, heads, i) {
            continue;
        }
        let probs = object_probs(heads.class_logits.row(i));
        for v in 0..heads.verb_logits.cols {
            let s = score(&probs, heads.verb_logits.get(i, v), lambda);
            if s >= floor {
                cands.push((s, i, v));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.truncate(top_k);
    cands.into_iter().map(|(_, i, v)| quadruplet_for_row(f, heads, i, v, lambda)).collect()
}

/// One labelled triplet for recall checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verb: usize,
}

/// Whether a prediction above `threshold` covers the triplet (both boxes
/// IoU > 0.5, same verb and object class).
pub fn triplet_hit(preds: &[Quadruplet], t: &Triplet, threshold: f64) -> bool {
    preds.iter().any(|q| {
        q.score >= threshold
            && q.verb == t.verb
            && q.object_class == t.object_class
            && iou(&q.human_box, &t.human_box) > 0.5
            && iou(&q.object_box, &t.object_box) > 0.5
    })
}

/// Fraction of triplets covered, over all images.
pub fn triplet_recall(preds: &[Vec<Quadruplet>], gts: &[Vec<Triplet>], threshold: f64) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        for t in g {
            total += 1;
            hit += triplet_hit(p, t, threshold) as usize;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// All-points interpolated AP of a ranked list of hit flags.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut rec = vec![0.0];
    let mut prec = vec![0.0];
    let mut tp = 0usize;
    for (i, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        rec.push(tp as f64 / n_gt as f64);
        prec.push(tp as f64 / (i + 1) as f64);
    }
    rec.push(1.0);
    prec.push(0.0);
    for i in (0..prec.len() - 1).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..rec.len() {
        if rec[i] != rec[i - 1] {
            ap += (rec[i] - rec[i - 1]) * prec[i];
        }
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiTable {
    /// `(verb, object)` per HOI class id.
    pub pairs: Vec<(usize, usize)>,
    pub rare: Vec<bool>,
}

impl HoiTable {
    pub fn lookup(&self, verb: usize, object: usize) -> Option<usize> {
        self.pairs.iter().position(|&p| p == (verb, object))
    }

    /// Rare means fewer than ten training instances.
    pub fn with_counts(pairs: Vec<(usize, usize)>, counts: &[usize]) -> Self {
        let rare = counts.iter().map(|&c| c < 10).collect();
        HoiTable { pairs, rare }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoiDetection {
    pub image: usize,
    pub hoi: usize,
    pub human_box: BBox,
    pub object_box: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoiGt {
    pub image: usize,
    pub hoi: usize,
    pub human_box: BBox,
    pub object_box: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HicoMode {
    Default,
    /// Object categories present in each image.
    KnownObject(Vec<HashSet<usize>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// Means over classes with at least one GT; `None` when there are none.
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub nonrare: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Greedy ranking match: each detection takes the GT with the largest
/// overlap; it is a hit if the overlap passes and that GT is still free.
fn match_ranked(n_dets: usize, scores: &[f64], gt_count: usize, overlap: impl Fn(usize, usize) -> f64, pass: impl Fn(f64) -> bool) -> Vec<bool> {
    let mut used = vec![false; gt_count];
    ranked(scores)
        .into_iter()
        .take(n_dets)
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for g in 0..gt_count {
                let ov = overlap(d, g);
                if best.is_none_or(|(_, b)| ov > b) {
                    best = Some((g, ov));
                }
            }
            match best {
                Some((g, ov)) if pass(ov) && !used[g] => {
                    used[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// `None` for an empty partition.
fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// HICO-style mAP. A detection matches when both boxes have IoU > 0.5
/// with a GT of the same class in the same image.
pub fn hico_map(dets: &[HoiDetection], gts: &[HoiGt], table: &HoiTable, mode: &HicoMode) -> MapReport {
    let n = table.pairs.len();
    let mut per_class = vec![None; n];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let cg: Vec<&HoiGt> = gts.iter().filter(|g| g.hoi == c).collect();
        if cg.is_empty() {
            continue;
        }
        let object = table.pairs[c].1;
        let cd: Vec<&HoiDetection> = dets
            .iter()
            .filter(|d| d.hoi == c)
            .filter(|d| match mode {
                HicoMode::Default => true,
                HicoMode::KnownObject(present) => present.get(d.image).is_some_and(|s| s.contains(&object)),
            })
            .collect();
        let scores: Vec<f64> = cd.iter().map(|d| d.score).collect();
        let tp = match_ranked(
            cd.len(),
            &scores,
            cg.len(),
            |d, g| {
                let (d, g) = (cd[d], cg[g]);
                if d.image != g.image {
                    return f64::NEG_INFINITY;
                }
                iou(&d.human_box, &g.human_box).min(iou(&d.object_box, &g.object_box))
            },
            |ov| ov > 0.5,
        );
        *slot = Some(average_precision(&tp, cg.len()));
    }
    let pick = |want: Option<bool>| mean((0..n).filter(|&c| want.is_none_or(|r| table.rare[c] == r)).filter_map(|c| per_class[c]));
    MapReport { full: pick(None), rare: pick(Some(true)), nonrare: pick(Some(false)), per_class }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleDetection {
    pub image: usize,
    pub verb: usize,
    pub human_box: BBox,
    pub object_box: Option<BBox>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleGt {
    pub image: usize,
    pub verb: usize,
    pub human_box: BBox,
    pub object_box: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleReport {
    pub map: Option<f64>,
    pub per_verb: Vec<Option<f64>>,
}

/// V-COCO-style role AP. For a GT without an object, scenario 1 needs the
/// detection to have no object box either; scenario 2 ignores it.
pub fn vcoco_role_ap(dets: &[RoleDetection], gts: &[RoleGt], num_verbs: usize, scenario: Scenario) -> RoleReport {
    let mut per_verb = vec![None; num_verbs];
    for (v, slot) in per_verb.iter_mut().enumerate() {
        let vg: Vec<&RoleGt> = gts.iter().filter(|g| g.verb == v).collect();
        if vg.is_empty() {
            continue;
        }
        let vd: Vec<&RoleDetection> = dets.iter().filter(|d| d.verb == v).collect();
        let scores: Vec<f64> = vd.iter().map(|d| d.score).collect();
        let tp = match_ranked(
            vd.len(),
            &scores,
            vg.len(),
            |d, g| {
                let (d, g) = (vd[d], vg[g]);
                if d.image != g.image {
                    return f64::NEG_INFINITY;
                }
                let obj = match (g.object_box, d.object_box, scenario) {
                    (Some(go), Some(dob), _) => iou(&dob, &go),
                    (Some(_), None, _) => 0.0,
                    (None, None, _) | (None, _, Scenario::S2) => 1.0,
                    (None, Some(_), Scenario::S1) => 0.0,
                };
                iou(&d.human_box, &g.human_box).min(obj)
            },
            |ov| ov >= 0.5,
        );
        *slot = Some(average_precision(&tp, vg.len()));
    }
    RoleReport { map: mean(per_verb.iter().filter_map(|x| *x)), per_verb }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZeroShotKind {
    #[serde(rename = "rf-uc")]
    RareFirst,
    #[serde(rename = "nf-uc")]
    NonRareFirst,
    #[serde(rename = "uo")]
    UnseenObject,
}

/// `(seen, unseen)` HOI ids. The composition splits hold out `n_unseen`
/// classes by ascending (rare first) or descending (non-rare first)
/// training count, ties by id; the object split holds out every class
/// whose object is listed.
pub fn zero_shot_split(table: &HoiTable, counts: &[usize], kind: ZeroShotKind, unseen_objects: &[usize], n_unseen: usize) -> (Vec<usize>, Vec<usize>) {
    let n = table.pairs.len();
    let unseen: HashSet<usize> = match kind {
        ZeroShotKind::UnseenObject => (0..n).filter(|&c| unseen_objects.contains(&table.pairs[c].1)).collect(),
        ZeroShotKind::RareFirst | ZeroShotKind::NonRareFirst => {
            let mut order: Vec<usize> = (0..n).collect();
            if kind == ZeroShotKind::RareFirst {
                order.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then(a.cmp(&b)));
            } else {
                order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
            }
            order.into_iter().take(n_unseen).collect()
        }
    };
    let seen = (0..n).filter(|c| !unseen.contains(c)).collect();
    let mut unseen: Vec<usize> = unseen.into_iter().collect();
    unseen.sort_unstable();
    (seen, unseen)
}

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: String,
    pub quadruplets: Vec<Quadruplet>,
}
