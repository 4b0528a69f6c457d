//! Union / intersection mask pseudo-labels from frozen instance masks.

use serde::{Deserialize, Serialize};

use crate::foundation::{FoundationOutput, BACKGROUND, HUMAN};
use crate::geometry::{box_intersection, box_l1, crop_mask, expand_box, giou, mask_to_box, mask_union, BBox, BinaryMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoLabelConfig {
    pub gamma: f64,
    pub beta_b: f64,
    pub beta_u: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig { gamma: 0.1, beta_b: 5.0, beta_u: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub union: BinaryMask,
    /// `None` exactly when `intersection_box` is `None`.
    pub intersection: Option<BinaryMask>,
    pub intersection_box: Option<BBox>,
    pub human_query: usize,
    pub object_query: usize,
    pub gamma: f64,
}

/// `beta_b * L1 + beta_u * (1 - giou)`.
pub fn match_cost(gt: &BBox, candidate: &BBox, beta_b: f64, beta_u: f64) -> f64 {
    beta_b * box_l1(gt, candidate) + beta_u * (1.0 - giou(gt, candidate))
}

/// Position of the cheapest candidate; ties go to the lowest position.
/// `None` when there are no candidates.
pub fn match_instance(gt: &BBox, candidates: &[BBox], beta_b: f64, beta_u: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let cost = match_cost(gt, c, beta_b, beta_u);
        if best.is_none_or(|(_, b)| cost < b) {
            best = Some((i, cost));
        }
    }
    best.map(|(i, _)| i)
}

/// Builds the union mask and its crop to the overlap of the expanded
/// instance boxes. `None` when either mask is empty.
pub fn build_pseudo_label(human: &BinaryMask, object: &BinaryMask, human_query: usize, object_query: usize, gamma: f64) -> Option<PseudoLabel> {
    let hb = mask_to_box(human).ok()?;
    let ob = mask_to_box(object).ok()?;
    let union = mask_union(human, object).ok()?;
    let region = box_intersection(&expand_box(&hb, gamma), &expand_box(&ob, gamma));
    let crop = region.map(|b| crop_mask(&union, Some(&b)));
    let (intersection, intersection_box) = match (crop, region) {
        (Some(m), Some(b)) if m.area() > 0 => (Some(m), Some(b)),
        _ => (None, None),
    };
    Some(PseudoLabel { union, intersection, intersection_box, human_query, object_query, gamma })
}

/// Mask-derived boxes of the queries allowed to stand for an instance.
pub fn candidates(f: &FoundationOutput, allowed: impl Fn(usize) -> bool) -> Vec<(usize, BBox)> {
    (0..f.num_queries())
        .filter(|&q| allowed(f.class_argmax(q)))
        .filter_map(|q| mask_to_box(&f.instance_mask(q)).ok().map(|b| (q, b)))
        .collect()
}

/// Pseudo-label for one GT pair. Humans are matched only against
/// human-classed queries; objects against `object_class` when given, or any
/// foreground query otherwise.
pub fn pseudo_label_for_pair(
    f: &FoundationOutput,
    human_box: &BBox,
    object_box: &BBox,
    object_class: Option<usize>,
    cfg: &PseudoLabelConfig,
) -> Option<PseudoLabel> {
    let humans = candidates(f, |c| c == HUMAN);
    let objects = candidates(f, |c| match object_class {
        Some(k) => c == k,
        None => c != BACKGROUND,
    });
    let hb: Vec<BBox> = humans.iter().map(|c| c.1).collect();
    let ob: Vec<BBox> = objects.iter().map(|c| c.1).collect();
    let sh = humans[match_instance(human_box, &hb, cfg.beta_b, cfg.beta_u)?].0;
    let so = objects[match_instance(object_box, &ob, cfg.beta_b, cfg.beta_u)?].0;
    build_pseudo_label(&f.instance_mask(sh), &f.instance_mask(so), sh, so, cfg.gamma)
}
