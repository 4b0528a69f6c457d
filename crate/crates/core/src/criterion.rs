//! Hungarian matching of predictions to ground-truth pairs and the
//! training loss.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::decoder::{Alignment, Branch, HeadVars};
use crate::error::{Error, Result};
use crate::foundation::FoundationOutput;
use crate::geometry::{box_l1, giou, BBox, BinaryMask};
use crate::pseudolabel::PseudoLabel;
use crate::tensor::{sigmoid, softplus, Matrix};

/// Cost added to rows that may never be matched (background queries).
pub const FORBIDDEN_COST: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthHOI {
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: usize,
    pub verbs: Vec<bool>,
    pub pseudo: Option<PseudoLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub verb: f64,
    pub class: f64,
    pub bbox: f64,
    pub giou: f64,
    pub union_mask: f64,
    pub inter_mask: f64,
    /// Whether the intersection-mask term enters the matching cost.
    pub inter_in_cost: bool,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { verb: 5.0, class: 4.0, bbox: 5.0, giou: 2.0, union_mask: 2.0, inter_mask: 0.1, inter_in_cost: false }
    }
}

impl CostWeights {
    pub fn scaled(&self, s: f64) -> Self {
        CostWeights {
            verb: self.verb * s,
            class: self.class * s,
            bbox: self.bbox * s,
            giou: self.giou * s,
            union_mask: self.union_mask * s,
            inter_mask: self.inter_mask * s,
            inter_in_cost: self.inter_in_cost,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub verb: f64,
    pub class: f64,
    pub bbox: f64,
    pub giou: f64,
    pub union_mask: f64,
    pub inter_mask: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub eos_coef: f64,
    pub use_union: bool,
    pub use_inter: bool,
    pub num_points: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            verb: 5.0,
            class: 5.0,
            bbox: 3.0,
            giou: 4.0,
            union_mask: 2.0,
            inter_mask: 0.1,
            focal_alpha: 0.5,
            focal_gamma: 2.0,
            eos_coef: 0.1,
            use_union: true,
            use_inter: true,
            num_points: 1024,
        }
    }
}

/// Per-row context that does not come from the decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowContext {
    pub branch: Branch,
    pub own_box: BBox,
    pub matchable: bool,
}

pub fn row_contexts(f: &FoundationOutput, align: &Alignment) -> Vec<RowContext> {
    align
        .rows()
        .into_iter()
        .map(|r| match r.query {
            Some(q) => RowContext { branch: r.branch, own_box: f.boxes[q], matchable: !f.is_background(q) },
            None => RowContext { branch: r.branch, own_box: BBox::UNIT, matchable: false },
        })
        .collect()
}

/// Borrowed prediction values for cost construction.
#[derive(Debug, Clone, Copy)]
pub struct PredView<'a> {
    pub verb_logits: &'a Matrix,
    pub class_logits: &'a Matrix,
    pub boxes: &'a Matrix,
    pub union_logits: Option<&'a Matrix>,
    pub inter_logits: Option<&'a Matrix>,
}

impl<'a> PredView<'a> {
    pub fn from_graph(g: &'a Graph, h: &HeadVars) -> Self {
        PredView {
            verb_logits: g.value(h.verb_logits),
            class_logits: g.value(h.class_logits),
            boxes: g.value(h.boxes),
            union_logits: h.union_logits.map(|v| g.value(v)),
            inter_logits: h.inter_logits.map(|v| g.value(v)),
        }
    }
}

fn row_box(m: &Matrix, i: usize) -> BBox {
    let r = m.row(i);
    BBox { cx: r[0], cy: r[1], w: r[2], h: r[3] }
}

/// `(human box, object box)` implied by a row.
pub fn pair_boxes(ctx: &RowContext, counterpart: BBox) -> (BBox, BBox) {
    match ctx.branch {
        Branch::Object => (counterpart, ctx.own_box),
        Branch::Human => (ctx.own_box, counterpart),
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Averaged positive / negative verb agreement, negated.
pub fn verb_cost(logits: &[f64], target: &[bool]) -> f64 {
    let p: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let n_pos = target.iter().filter(|&&t| t).count() as f64;
    let n_neg = target.len() as f64 - n_pos;
    let pos: f64 = p.iter().zip(target).filter(|(_, &t)| t).map(|(p, _)| p).sum();
    let neg: f64 = p.iter().zip(target).filter(|(_, &t)| !t).map(|(p, _)| 1.0 - p).sum();
    -(pos / (n_pos + 1e-4) + neg / (n_neg + 1e-4)) / 2.0
}

/// Mean sigmoid cross-entropy plus dice over the sampled points.
pub fn mask_cost(logits: &[f64], target: &BinaryMask, points: &[usize]) -> f64 {
    let bits = target.bits();
    let k = points.len().max(1) as f64;
    let (mut ce, mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0, 0.0);
    for &c in points {
        let x = logits[c];
        let t = if bits[c] { 1.0 } else { 0.0 };
        ce += softplus(x) - t * x;
        let p = sigmoid(x);
        inter += p * t;
        ps += p;
        ts += t;
    }
    ce / k + 1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0)
}

/// Matching cost between every prediction row and every target.
pub fn cost_matrix(pred: &PredView, rows: &[RowContext], targets: &[GroundTruthHOI], w: &CostWeights, points: &[usize]) -> Matrix {
    let mut cost = Matrix::zeros(rows.len(), targets.len());
    for (i, ctx) in rows.iter().enumerate() {
        let probs = softmax(pred.class_logits.row(i));
        let (hb, ob) = pair_boxes(ctx, row_box(pred.boxes, i));
        for (j, t) in targets.iter().enumerate() {
            let mut c = w.verb * verb_cost(pred.verb_logits.row(i), &t.verbs);
            c += w.class * -probs[t.object_class];
            c += w.bbox * box_l1(&hb, &t.human_box).max(box_l1(&ob, &t.object_box));
            c += w.giou * (1.0 - giou(&hb, &t.human_box)).max(1.0 - giou(&ob, &t.object_box));
            if let Some(p) = &t.pseudo {
                if let Some(u) = pred.union_logits {
                    c += w.union_mask * mask_cost(u.row(i), &p.union, points);
                }
                if let (true, Some(m), Some(target)) = (w.inter_in_cost, pred.inter_logits, &p.intersection) {
                    c += w.inter_mask * mask_cost(m.row(i), target, points);
                }
            }
            if !ctx.matchable {
                c += FORBIDDEN_COST;
            }
            cost.set(i, j, c);
        }
    }
    cost
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(prediction, target)` pairs, ordered by target.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Exact minimum-cost assignment of every target (column) to a distinct
/// prediction (row). Needs at least as many rows as columns.
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let (p, n) = (cost.rows, cost.cols);
    if p < n {
        return Err(Error::TooFewPredictions { rows: p, cols: n });
    }
    // Potentials method on the transposed problem: targets are the rows.
    let m = p;
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut owner = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost.get(j - 1, i0 - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (j - 1, owner[j] - 1)).collect();
    pairs.sort_by_key(|&(_, t)| t);
    let unmatched = (1..=m).filter(|&j| owner[j] == 0).map(|j| j - 1).collect();
    Ok(Assignment { pairs, unmatched })
}

pub fn assignment_cost(cost: &Matrix, a: &Assignment) -> f64 {
    a.pairs.iter().map(|&(p, t)| cost.get(p, t)).sum()
}

/// Point indices for mask terms: every cell when `k >= cells`, otherwise
/// `k` distinct cells drawn from `seed`.
pub fn sample_points(cells: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= cells {
        return (0..cells).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, cells, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Weighted loss terms of one layer, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub verb: Var,
    pub class: Var,
    pub bbox: Var,
    pub giou: Var,
    pub union_mask: Option<Var>,
    pub inter_mask: Option<Var>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub verb: f64,
    pub class: f64,
    pub bbox: f64,
    pub giou: f64,
    pub union_mask: f64,
    pub inter_mask: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.verb += o.verb;
        self.class += o.class;
        self.bbox += o.bbox;
        self.giou += o.giou;
        self.union_mask += o.union_mask;
        self.inter_mask += o.inter_mask;
        self.total += o.total;
    }

    pub fn scale(&mut self, s: f64) {
        for x in [&mut self.verb, &mut self.class, &mut self.bbox, &mut self.giou, &mut self.union_mask, &mut self.inter_mask, &mut self.total] {
            *x *= s;
        }
    }
}

fn constant_scalar(g: &mut Graph, x: f64) -> Var {
    g.constant(Matrix::scalar(x))
}

/// Sigmoid focal loss summed over all entries.
fn focal_sum(g: &mut Graph, logits: Var, targets: &Matrix, alpha: f64, gamma: f64) -> Var {
    let sp_pos = g.softplus(logits);
    let neg = g.scale(logits, -1.0);
    let sp_neg = g.softplus(neg);
    // (1-p)^gamma = exp(-gamma * softplus(x)), p^gamma = exp(-gamma * softplus(-x))
    let one_minus_p_g = {
        let t = g.scale(sp_pos, -gamma);
        g.unary(t, crate::autodiff::Unary::Exp)
    };
    let p_g = {
        let t = g.scale(sp_neg, -gamma);
        g.unary(t, crate::autodiff::Unary::Exp)
    };
    let pos_w = g.constant(targets.map(|t| alpha * t));
    let neg_w = g.constant(targets.map(|t| (1.0 - alpha) * (1.0 - t)));
    let a = g.mul(one_minus_p_g, sp_neg);
    let a = g.mul(a, pos_w);
    let b = g.mul(p_g, sp_pos);
    let b = g.mul(b, neg_w);
    let s = g.add(a, b);
    g.sum(s)
}

/// `sum(1 - giou)` between predicted and constant target boxes (`n x 4`).
fn giou_loss_sum(g: &mut Graph, pred: Var, target: &Matrix) -> Var {
    let n = target.rows;
    let corners = |g: &mut Graph, b: Var| {
        let cx = g.slice_cols(b, 0, 1);
        let cy = g.slice_cols(b, 1, 1);
        let w = g.slice_cols(b, 2, 1);
        let h = g.slice_cols(b, 3, 1);
        let hw = g.scale(w, 0.5);
        let hh = g.scale(h, 0.5);
        (g.sub(cx, hw), g.sub(cy, hh), g.add(cx, hw), g.add(cy, hh), w, h)
    };
    let t = g.constant(target.clone());
    let (px0, py0, px1, py1, pw, ph) = corners(g, pred);
    let (tx0, ty0, tx1, ty1, tw, th) = corners(g, t);
    let ix0 = g.max(px0, tx0);
    let iy0 = g.max(py0, ty0);
    let ix1 = g.min(px1, tx1);
    let iy1 = g.min(py1, ty1);
    let iw = g.sub(ix1, ix0);
    let iw = g.relu(iw);
    let ih = g.sub(iy1, iy0);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let pa = g.mul(pw, ph);
    let ta = g.mul(tw, th);
    let sum_a = g.add(pa, ta);
    let union = g.sub(sum_a, inter);
    let iou = g.div(inter, union);
    let ex0 = g.min(px0, tx0);
    let ey0 = g.min(py0, ty0);
    let ex1 = g.max(px1, tx1);
    let ey1 = g.max(py1, ty1);
    let ew = g.sub(ex1, ex0);
    let eh = g.sub(ey1, ey0);
    let enc = g.mul(ew, eh);
    let gap = g.sub(enc, union);
    let penalty = g.div(gap, enc);
    let gi = g.sub(iou, penalty);
    let s = g.sum(gi);
    let ones = constant_scalar(g, n as f64);
    g.sub(ones, s)
}

/// Point-sampled BCE and dice summed over mask rows.
fn mask_loss_sum(g: &mut Graph, logits: Var, rows: &[usize], targets: &[&BinaryMask], points: &[usize]) -> (Var, Var) {
    let picked = g.gather_rows(logits, rows);
    let x = g.gather_cols(picked, points);
    let mut t = Matrix::zeros(rows.len(), points.len());
    for (r, m) in targets.iter().enumerate() {
        let bits = m.bits();
        for (k, &c) in points.iter().enumerate() {
            if bits[c] {
                t.set(r, k, 1.0);
            }
        }
    }
    let k = points.len().max(1) as f64;
    let t_sum = Matrix::from_vec(rows.len(), 1, (0..rows.len()).map(|r| t.row(r).iter().sum()).collect());
    let tv = g.constant(t);
    let sp = g.softplus(x);
    let tx = g.mul(tv, x);
    let ce = g.sub(sp, tx);
    let ce = g.sum(ce);
    let ce = g.scale(ce, 1.0 / k);
    let p = g.sigmoid(x);
    let pt = g.mul(p, tv);
    let num = g.sum_cols(pt);
    let num = g.scale(num, 2.0);
    let num = g.add_scalar(num, 1.0);
    let den = g.sum_cols(p);
    let ts = g.constant(t_sum);
    let den = g.add(den, ts);
    let den = g.add_scalar(den, 1.0);
    let ratio = g.div(num, den);
    let rs = g.sum(ratio);
    let n = constant_scalar(g, rows.len() as f64);
    let dice = g.sub(n, rs);
    (ce, dice)
}

/// Loss of one layer under a fixed assignment.
pub fn layer_loss(
    g: &mut Graph,
    heads: &HeadVars,
    rows: &[RowContext],
    targets: &[GroundTruthHOI],
    assignment: &Assignment,
    w: &LossWeights,
    points: &[usize],
) -> (Var, LossBreakdown) {
    let (n_rows, n_verbs) = g.shape(heads.verb_logits);
    let n_classes = g.shape(heads.class_logits).1;
    let no_object = n_classes - 1;
    let norm = targets.len().max(1) as f64;

    let mut verb_t = Matrix::zeros(n_rows, n_verbs);
    let mut class_w = Matrix::zeros(n_rows, n_classes);
    for r in 0..n_rows {
        class_w.set(r, no_object, w.eos_coef);
    }
    for &(p, t) in &assignment.pairs {
        for (v, &on) in targets[t].verbs.iter().enumerate() {
            verb_t.set(p, v, if on { 1.0 } else { 0.0 });
        }
        class_w.set(p, no_object, 0.0);
        class_w.set(p, targets[t].object_class, 1.0);
    }
    let weight_total: f64 = class_w.sum();

    let verb = focal_sum(g, heads.verb_logits, &verb_t, w.focal_alpha, w.focal_gamma);
    let verb = g.scale(verb, 1.0 / norm);

    let ls = g.log_softmax_rows(heads.class_logits);
    let cw = g.constant(class_w);
    let picked = g.mul(ls, cw);
    let class = g.sum(picked);
    let class = g.scale(class, -1.0 / weight_total);

    let matched: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
    let mut box_t = Matrix::zeros(matched.len(), 4);
    for (k, &(p, t)) in assignment.pairs.iter().enumerate() {
        let gt = &targets[t];
        let b = match rows[p].branch {
            Branch::Object => gt.human_box,
            Branch::Human => gt.object_box,
        };
        box_t.row_mut(k).copy_from_slice(&b.to_array());
    }
    let pb = g.gather_rows(heads.boxes, &matched);
    let tb = g.constant(box_t.clone());
    let d = g.sub(pb, tb);
    let d = g.abs(d);
    let bbox = g.sum(d);
    let bbox = g.scale(bbox, 1.0 / norm);
    let gi = giou_loss_sum(g, pb, &box_t);
    let gi = g.scale(gi, 1.0 / norm);

    let mask_term = |g: &mut Graph, logits: Option<Var>, pick: &dyn Fn(&PseudoLabel) -> Option<&BinaryMask>, weight: f64| {
        let logits = logits?;
        let mut rws = Vec::new();
        let mut tgs = Vec::new();
        for &(p, t) in &assignment.pairs {
            if let Some(m) = targets[t].pseudo.as_ref().and_then(pick) {
                rws.push(p);
                tgs.push(m);
            }
        }
        if rws.is_empty() {
            return None;
        }
        let (ce, dice) = mask_loss_sum(g, logits, &rws, &tgs, points);
        let s = g.add(ce, dice);
        Some(g.scale(s, weight / rws.len() as f64))
    };
    let union_mask = if w.use_union { mask_term(g, heads.union_logits, &|p| Some(&p.union), w.union_mask) } else { None };
    let inter_mask = if w.use_inter { mask_term(g, heads.inter_logits, &|p| p.intersection.as_ref(), w.inter_mask) } else { None };

    let terms = LossVars {
        verb: g.scale(verb, w.verb),
        class: g.scale(class, w.class),
        bbox: g.scale(bbox, w.bbox),
        giou: g.scale(gi, w.giou),
        union_mask,
        inter_mask,
    };
    let mut total = g.add(terms.verb, terms.class);
    total = g.add(total, terms.bbox);
    total = g.add(total, terms.giou);
    for m in [terms.union_mask, terms.inter_mask].into_iter().flatten() {
        total = g.add(total, m);
    }
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let breakdown = LossBreakdown {
        verb: val(Some(terms.verb)),
        class: val(Some(terms.class)),
        bbox: val(Some(terms.bbox)),
        giou: val(Some(terms.giou)),
        union_mask: val(terms.union_mask),
        inter_mask: val(terms.inter_mask),
        total: g.value(total).item(),
    };
    (total, breakdown)
}

/// Matches every layer independently and sums the layer losses.
pub fn total_loss(
    g: &mut Graph,
    layers: &[HeadVars],
    rows: &[RowContext],
    targets: &[GroundTruthHOI],
    cw: &CostWeights,
    lw: &LossWeights,
    points: &[usize],
) -> Result<(Var, LossBreakdown, Vec<Assignment>)> {
    let mut assignments = Vec::with_capacity(layers.len());
    for h in layers {
        let cost = cost_matrix(&PredView::from_graph(g, h), rows, targets, cw, points);
        assignments.push(hungarian(&cost)?);
    }
    let (v, b) = loss_with_assignments(g, layers, rows, targets, &assignments, lw, points);
    Ok((v, b, assignments))
}

pub fn loss_with_assignments(
    g: &mut Graph,
    layers: &[HeadVars],
    rows: &[RowContext],
    targets: &[GroundTruthHOI],
    assignments: &[Assignment],
    lw: &LossWeights,
    points: &[usize],
) -> (Var, LossBreakdown) {
    let mut total: Option<Var> = None;
    let mut breakdown = LossBreakdown::default();
    for (h, a) in layers.iter().zip(assignments) {
        let (v, b) = layer_loss(g, h, rows, targets, a, lw, points);
        breakdown.add(&b);
        total = Some(match total {
            Some(t) => g.add(t, v),
            None => v,
        });
    }
    (total.expect("at least one layer"), breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use proptest::prelude::*;

    fn brute_force_min(cost: &Matrix) -> f64 {
        fn rec(cost: &Matrix, t: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if t == cost.cols {
                *best = best.min(acc);
                return;
            }
            for p in 0..cost.rows {
                if !used[p] {
                    used[p] = true;
                    rec(cost, t + 1, used, acc + cost.get(p, t), best);
                    used[p] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.rows], 0.0, &mut best);
        best
    }

    #[test]
    fn hungarian_small_cases() {
        let a = hungarian(&Matrix::scalar(3.0)).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        let m = Matrix::from_rows(&[vec![0.1, 5.0, 5.0], vec![5.0, 0.1, 5.0], vec![5.0, 5.0, 0.1]]);
        assert_eq!(hungarian(&m).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(matches!(hungarian(&Matrix::zeros(1, 2)), Err(Error::TooFewPredictions { .. })));
        let empty = hungarian(&Matrix::zeros(3, 0)).unwrap();
        assert!(empty.pairs.is_empty() && empty.unmatched.len() == 3);
    }

    proptest! {
        #[test]
        fn hungarian_equals_brute_force(rows in 1usize..6, extra in 0usize..3, seed in any::<u64>()) {
            let p = rows + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = Matrix::uniform(p, rows, 10.0, &mut rng).map(|x| x.round());
            let a = hungarian(&cost).unwrap();
            prop_assert_eq!(a.pairs.len(), rows);
            prop_assert_eq!(a.pairs.len() + a.unmatched.len(), p);
            prop_assert_eq!(assignment_cost(&cost, &a), brute_force_min(&cost));
        }

        #[test]
        fn scaling_weights_keeps_assignment(seed in any::<u64>(), s in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = Matrix::uniform(6, 4, 1.0, &mut rng);
            let a = hungarian(&cost).unwrap();
            let b = hungarian(&cost.map(|x| x * s)).unwrap();
            prop_assert_eq!(assignment_cost(&cost, &a), assignment_cost(&cost, &b));
        }
    }

    #[test]
    fn dense_points_when_budget_exceeds_cells() {
        assert_eq!(sample_points(10, 1024, 0), (0..10).collect::<Vec<_>>());
        let s = sample_points(100, 10, 3);
        assert_eq!(s.len(), 10);
        assert_eq!(s, sample_points(100, 10, 3));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sampled_dice_with_all_points_equals_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Matrix::randn(1, 36, 2.0, &mut rng);
        let target = BinaryMask::from_bits(6, 6, (0..36).map(|i| i % 3 == 0).collect());
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(logits.clone());
        let (_, dice) = mask_loss_sum(&mut g, x, &[0], &[&target], &sample_points(36, 1024, 0));
        let p: Vec<f64> = logits.data.iter().map(|&x| sigmoid(x)).collect();
        let t: Vec<f64> = target.bits().iter().map(|&b| b as u8 as f64).collect();
        let inter: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
        let dense = 1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + t.iter().sum::<f64>() + 1.0);
        assert!((g.value(dice).item() - dense).abs() < 1e-12);
    }

    #[test]
    fn verb_cost_prefers_agreeing_logits() {
        let t = [true, false, false];
        let good = verb_cost(&[10.0, -10.0, -10.0], &t);
        let bad = verb_cost(&[-10.0, 10.0, 10.0], &t);
        assert!(good < bad);
        assert!((good + 1.0).abs() < 1e-3);
    }
}
