//! Independent oracles and check routines shared by the integration tests
//! and the acceptance suite.
#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seg2hoi_core::autodiff::Graph;
use seg2hoi_core::criterion::{hungarian, loss_with_assignments, sample_points, total_loss};
use seg2hoi_core::decoder::{Alignment, Decoder, DecoderConfig, MaskRequest};
use seg2hoi_core::evalinfer::{hico_map, vcoco_role_ap, HicoMode, HoiDetection, HoiGt, HoiTable, RoleDetection, RoleGt, Scenario};
use seg2hoi_core::foundation::{FoundationConfig, ToyFoundation};
use seg2hoi_core::geometry::{BBox, BinaryMask};
use seg2hoi_core::openvocab::{retrieve_text, retrieve_visual};
use seg2hoi_core::pipeline::train::{build_pseudo_labels, extract_all, init_decoder, prepare, PreparedImage};
use seg2hoi_core::pipeline::{synth_dataset, TrainConfig};
use seg2hoi_core::pseudolabel::{build_pseudo_label, match_instance};
use seg2hoi_core::tensor::Matrix;

pub fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox { cx, cy, w, h }
}

// ---------------------------------------------------------------- matching

/// Minimum total cost over every injective target -> prediction map.
pub fn brute_force_assignment(cost: &Matrix) -> f64 {
    fn go(cost: &Matrix, col: usize, used: &mut [bool], acc: f64) -> f64 {
        if col == cost.cols {
            return acc;
        }
        let mut best = f64::INFINITY;
        for r in 0..cost.rows {
            if !used[r] {
                used[r] = true;
                best = best.min(go(cost, col + 1, used, acc + cost.get(r, col)));
                used[r] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.rows], 0.0)
}

/// Hungarian totals against exhaustive search on seeded random matrices
/// with up to 7 rows. Returns the number of mismatches.
pub fn hungarian_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let rows = rng.gen_range(1..=7);
        let cols = rng.gen_range(1..=rows);
        let mut cost = Matrix::zeros(rows, cols);
        for x in cost.data.iter_mut() {
            *x = rng.gen_range(0..1000) as f64 / 8.0;
        }
        let a = hungarian(&cost).expect("rows >= cols");
        let total: f64 = a.pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
        let distinct: HashSet<usize> = a.pairs.iter().map(|p| p.0).collect();
        if total != brute_force_assignment(&cost) || distinct.len() != cols {
            bad += 1;
        }
    }
    bad
}

// ---------------------------------------------------------------- evaluator

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ax1, ay0, ay1) = (a.cx - a.w / 2.0, a.cx + a.w / 2.0, a.cy - a.h / 2.0, a.cy + a.h / 2.0);
    let (bx0, bx1, by0, by1) = (b.cx - b.w / 2.0, b.cx + b.w / 2.0, b.cy - b.h / 2.0, b.cy + b.h / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// AP from the full PR curve: each true positive at rank k adds
/// `1/n_gt` times the best precision at any rank >= k.
pub fn oracle_ap(hits: &[bool], n_gt: usize) -> f64 {
    let precision: Vec<f64> = (0..hits.len()).map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64).collect();
    (0..hits.len()).filter(|&k| hits[k]).map(|k| precision[k..].iter().cloned().fold(0.0, f64::max) / n_gt as f64).sum()
}

/// Rank by score (stable on ties), give each detection its highest-overlap
/// GT, and count a hit when that GT is free and the overlap passes.
fn oracle_hits(scores: &[f64], n_gt: usize, overlap: impl Fn(usize, usize) -> f64, pass: impl Fn(f64) -> bool) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut taken = vec![false; n_gt];
    let mut hits = Vec::new();
    for d in order {
        let ovs: Vec<f64> = (0..n_gt).map(|g| overlap(d, g)).collect();
        let best = (0..n_gt).fold(None, |acc: Option<usize>, g| match acc {
            Some(b) if ovs[b] >= ovs[g] => Some(b),
            _ => Some(g),
        });
        let hit = matches!(best, Some(g) if pass(ovs[g]) && !taken[g]);
        if let (true, Some(g)) = (hit, best) {
            taken[g] = true;
        }
        hits.push(hit);
    }
    hits
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMap {
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub nonrare: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

fn mean_of(xs: Vec<f64>) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn oracle_hico(dets: &[HoiDetection], gts: &[HoiGt], table: &HoiTable, known: Option<&[HashSet<usize>]>) -> OracleMap {
    let mut per_class = Vec::new();
    for c in 0..table.pairs.len() {
        let cg: Vec<&HoiGt> = gts.iter().filter(|g| g.hoi == c).collect();
        if cg.is_empty() {
            per_class.push(None);
            continue;
        }
        let obj = table.pairs[c].1;
        let cd: Vec<&HoiDetection> = dets.iter().filter(|d| d.hoi == c && known.is_none_or(|k| k[d.image].contains(&obj))).collect();
        let scores: Vec<f64> = cd.iter().map(|d| d.score).collect();
        let hits = oracle_hits(
            &scores,
            cg.len(),
            |d, g| if cd[d].image == cg[g].image { oracle_iou(&cd[d].human_box, &cg[g].human_box).min(oracle_iou(&cd[d].object_box, &cg[g].object_box)) } else { -1.0 },
            |ov| ov > 0.5,
        );
        per_class.push(Some(oracle_ap(&hits, cg.len())));
    }
    let part = |f: &dyn Fn(usize) -> bool| mean_of((0..per_class.len()).filter(|&c| f(c)).filter_map(|c| per_class[c]).collect());
    OracleMap { full: part(&|_| true), rare: part(&|c| table.rare[c]), nonrare: part(&|c| !table.rare[c]), per_class }
}

pub fn oracle_role(dets: &[RoleDetection], gts: &[RoleGt], n_verbs: usize, s2: bool) -> (Option<f64>, Vec<Option<f64>>) {
    let mut per = Vec::new();
    for v in 0..n_verbs {
        let vg: Vec<&RoleGt> = gts.iter().filter(|g| g.verb == v).collect();
        if vg.is_empty() {
            per.push(None);
            continue;
        }
        let vd: Vec<&RoleDetection> = dets.iter().filter(|d| d.verb == v).collect();
        let scores: Vec<f64> = vd.iter().map(|d| d.score).collect();
        let hits = oracle_hits(
            &scores,
            vg.len(),
            |d, g| {
                let (d, g) = (vd[d], vg[g]);
                if d.image != g.image {
                    return -1.0;
                }
                let obj = match (g.object_box, d.object_box) {
                    (Some(a), Some(b)) => oracle_iou(&a, &b),
                    (Some(_), None) => 0.0,
                    (None, None) => 1.0,
                    (None, Some(_)) => {
                        if s2 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                oracle_iou(&d.human_box, &g.human_box).min(obj)
            },
            |ov| ov >= 0.5,
        );
        per.push(Some(oracle_ap(&hits, vg.len())));
    }
    let m = mean_of(per.iter().filter_map(|x| *x).collect());
    (m, per)
}

pub enum EvalFixture {
    Hico { name: &'static str, dets: Vec<HoiDetection>, gts: Vec<HoiGt>, table: HoiTable, known: Option<Vec<HashSet<usize>>> },
    Role { name: &'static str, dets: Vec<RoleDetection>, gts: Vec<RoleGt>, verbs: usize, s2: bool },
}

fn hd(image: usize, hoi: usize, h: BBox, o: BBox, score: f64) -> HoiDetection {
    HoiDetection { image, hoi, human_box: h, object_box: o, score }
}

fn hg(image: usize, hoi: usize, h: BBox, o: BBox) -> HoiGt {
    HoiGt { image, hoi, human_box: h, object_box: o }
}

fn rd(image: usize, verb: usize, h: BBox, o: Option<BBox>, score: f64) -> RoleDetection {
    RoleDetection { image, verb, human_box: h, object_box: o, score }
}

fn rg(image: usize, verb: usize, h: BBox, o: Option<BBox>) -> RoleGt {
    RoleGt { image, verb, human_box: h, object_box: o }
}

/// Five hand-built cases: duplicates, misses and a cross-image detection;
/// known-object filtering; IoU exactly at the threshold with tied scores;
/// role AP in scenario 1; and the scenario 2 objectless role.
pub fn evaluator_fixtures() -> Vec<EvalFixture> {
    let h1 = bx(0.3, 0.5, 0.2, 0.4);
    let o1 = bx(0.6, 0.5, 0.2, 0.2);
    let o2 = bx(0.8, 0.2, 0.1, 0.1);
    let h2 = bx(0.5, 0.5, 0.3, 0.3);
    let o3 = bx(0.2, 0.2, 0.1, 0.1);
    let far = bx(0.9, 0.9, 0.1, 0.1);

    let basic = EvalFixture::Hico {
        name: "hico-default",
        gts: vec![hg(0, 0, h1, o1), hg(0, 0, h1, o2), hg(1, 0, h2, o3), hg(1, 1, h2, o1), hg(2, 2, h1, o3)],
        dets: vec![
            hd(0, 0, h1, o1, 0.9),
            hd(0, 0, h1, o1, 0.85),
            hd(0, 0, h1, bx(0.64, 0.5, 0.2, 0.2), 0.8),
            hd(1, 0, h2, o3, 0.7),
            hd(1, 0, h1, o1, 0.95),
            hd(0, 0, h1, o2, 0.3),
            hd(1, 1, h2, far, 0.6),
            hd(0, 3, h1, o1, 0.99),
            hd(2, 2, h1, o3, 0.2),
            hd(2, 2, h1, o3, 0.1),
        ],
        table: HoiTable { pairs: vec![(0, 0), (1, 0), (0, 1), (2, 1)], rare: vec![true, false, false, true] },
        known: None,
    };

    let known = EvalFixture::Hico {
        name: "hico-known-object",
        gts: vec![hg(0, 0, h1, o1), hg(1, 0, h2, o3), hg(1, 1, h2, o1)],
        dets: vec![
            hd(2, 0, h1, o1, 0.99),
            hd(0, 0, h1, o1, 0.5),
            hd(1, 0, h2, o3, 0.4),
            hd(2, 1, h2, o1, 0.9),
            hd(0, 1, h2, o1, 0.8),
            hd(1, 1, h2, o1, 0.3),
        ],
        table: HoiTable { pairs: vec![(0, 0), (1, 1)], rare: vec![false, true] },
        known: Some(vec![HashSet::from([0]), HashSet::from([0, 1]), HashSet::new()]),
    };

    let full = bx(0.5, 0.5, 1.0, 1.0);
    let half = bx(0.25, 0.5, 0.5, 1.0);
    let threshold = EvalFixture::Hico {
        name: "hico-threshold-ties",
        gts: vec![hg(0, 0, full, full), hg(0, 0, h1, o1), hg(1, 0, h2, o3)],
        dets: vec![hd(0, 0, half, full, 0.7), hd(0, 0, h1, o1, 0.7), hd(1, 0, h2, o3, 0.7), hd(0, 0, full, full, 0.6), hd(1, 0, h2, o3, 0.7)],
        table: HoiTable { pairs: vec![(0, 0)], rare: vec![false] },
        known: None,
    };

    let s1 = EvalFixture::Role {
        name: "vcoco-s1",
        gts: vec![rg(0, 0, h1, Some(o1)), rg(0, 0, h2, None), rg(1, 0, h2, Some(o3)), rg(1, 1, h1, Some(o2))],
        dets: vec![
            rd(0, 0, h1, Some(o1), 0.9),
            rd(0, 0, h2, Some(o1), 0.8),
            rd(0, 0, h2, None, 0.4),
            rd(1, 0, h2, Some(o3), 0.6),
            rd(1, 1, h1, None, 0.7),
            rd(1, 1, h1, Some(o2), 0.5),
        ],
        verbs: 3,
        s2: false,
    };

    let s2 = EvalFixture::Role {
        name: "vcoco-s2-no-object-role",
        gts: vec![rg(0, 0, h1, None), rg(0, 0, h2, Some(o3)), rg(1, 0, h1, None)],
        dets: vec![rd(0, 0, h1, Some(far), 0.9), rd(0, 0, h2, Some(o3), 0.8), rd(1, 0, h1, None, 0.7), rd(1, 0, h2, Some(o3), 0.75)],
        verbs: 1,
        s2: true,
    };

    vec![basic, known, threshold, s1, s2]
}

fn opt_diff(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

/// Largest absolute gap between evaluator and oracle over every reported
/// number of the fixture.
pub fn evaluator_gap(f: &EvalFixture) -> (String, f64) {
    match f {
        EvalFixture::Hico { name, dets, gts, table, known } => {
            let mode = known.clone().map_or(HicoMode::Default, HicoMode::KnownObject);
            let got = hico_map(dets, gts, table, &mode);
            let want = oracle_hico(dets, gts, table, known.as_deref());
            let mut gap = opt_diff(got.full, want.full).max(opt_diff(got.rare, want.rare)).max(opt_diff(got.nonrare, want.nonrare));
            for (a, b) in got.per_class.iter().zip(&want.per_class) {
                gap = gap.max(opt_diff(*a, *b));
            }
            (name.to_string(), gap)
        }
        EvalFixture::Role { name, dets, gts, verbs, s2 } => {
            let got = vcoco_role_ap(dets, gts, *verbs, if *s2 { Scenario::S2 } else { Scenario::S1 });
            let (m, per) = oracle_role(dets, gts, *verbs, *s2);
            let mut gap = opt_diff(got.map, m);
            for (a, b) in got.per_verb.iter().zip(&per) {
                gap = gap.max(opt_diff(*a, *b));
            }
            (name.to_string(), gap)
        }
    }
}

// ---------------------------------------------------------------- pseudo-labels

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::zeros(h, w);
    let r0 = rng.gen_range(0..h);
    let c0 = rng.gen_range(0..w);
    let r1 = rng.gen_range(r0..h);
    let c1 = rng.gen_range(c0..w);
    let density: f64 = rng.gen_range(0.3..1.0);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if rng.gen_bool(density) {
                m.set(r, c, true);
            }
        }
    }
    m.set(r0, c0, true);
    m
}

/// `[x0, y0, x1, y1]` of the set cells in normalized units.
fn oracle_box(m: &BinaryMask) -> Option<[f64; 4]> {
    let (h, w) = (m.height(), m.width());
    let cells: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| m.get(r, c)).collect();
    if cells.is_empty() {
        return None;
    }
    let r0 = cells.iter().map(|c| c.0).min().unwrap();
    let r1 = cells.iter().map(|c| c.0).max().unwrap();
    let c0 = cells.iter().map(|c| c.1).min().unwrap();
    let c1 = cells.iter().map(|c| c.1).max().unwrap();
    Some([c0 as f64 / w as f64, r0 as f64 / h as f64, (c1 + 1) as f64 / w as f64, (r1 + 1) as f64 / h as f64])
}

/// Failures found over `pairs` random mask pairs (empty means all hold).
pub fn pseudo_label_failures(pairs: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fails = Vec::new();
    for case in 0..pairs {
        let (h, w) = (rng.gen_range(4..20), rng.gen_range(4..20));
        let a = random_mask(&mut rng, h, w);
        let b = random_mask(&mut rng, h, w);
        let g1: f64 = rng.gen_range(0.0..0.3);
        let g2: f64 = g1 + rng.gen_range(0.0..0.3);
        let (Some(p1), Some(p2)) = (build_pseudo_label(&a, &b, 0, 1, g1), build_pseudo_label(&a, &b, 0, 1, g2)) else {
            fails.push(format!("case {case}: non-empty masks gave no label"));
            continue;
        };
        let union_ok = (0..h).all(|r| (0..w).all(|c| p1.union.get(r, c) == (a.get(r, c) || b.get(r, c))));
        if !union_ok {
            fails.push(format!("case {case}: union is not the cell-wise OR"));
        }
        for p in [&p1, &p2] {
            if p.intersection.is_some() != p.intersection_box.is_some() {
                fails.push(format!("case {case}: intersection mask and box disagree on emptiness"));
            }
            if let Some(m) = &p.intersection {
                if !m.is_subset_of(&p.union) || m.area() == 0 {
                    fails.push(format!("case {case}: intersection not a non-empty subset of the union"));
                }
            }
        }
        let (ba, bb) = (oracle_box(&a).unwrap(), oracle_box(&b).unwrap());
        let region = |g: f64| {
            let e = |x: [f64; 4]| [(x[0] - g).max(0.0), (x[1] - g).max(0.0), (x[2] + g).min(1.0), (x[3] + g).min(1.0)];
            let (ea, eb) = (e(ba), e(bb));
            let r = [ea[0].max(eb[0]), ea[1].max(eb[1]), ea[2].min(eb[2]), ea[3].min(eb[3])];
            (r[2] > r[0] && r[3] > r[1]).then_some(r)
        };
        let expected = region(g1).and_then(|r| {
            let mut m = BinaryMask::zeros(h, w);
            for rr in 0..h {
                for cc in 0..w {
                    let (x, y) = ((cc as f64 + 0.5) / w as f64, (rr as f64 + 0.5) / h as f64);
                    if p1.union.get(rr, cc) && x >= r[0] && x <= r[2] && y >= r[1] && y <= r[3] {
                        m.set(rr, cc, true);
                    }
                }
            }
            (m.area() > 0).then_some(m)
        });
        if expected != p1.intersection {
            fails.push(format!("case {case}: intersection differs from the rasterized oracle"));
        }
        match (&p1.intersection, &p2.intersection) {
            (Some(m1), Some(m2)) if !m1.is_subset_of(m2) => fails.push(format!("case {case}: intersection shrank as gamma grew")),
            (Some(_), None) => fails.push(format!("case {case}: intersection vanished as gamma grew")),
            _ => {}
        }
        let gt = bx(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4));
        let mut cands: Vec<BBox> = (0..rng.gen_range(0..6)).map(|_| bx(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5))).collect();
        let pos = rng.gen_range(0..=cands.len());
        cands.insert(pos, gt);
        if rng.gen_bool(0.3) {
            cands.push(gt);
        }
        if match_instance(&gt, &cands, 5.0, 2.0) != Some(pos) {
            fails.push(format!("case {case}: exact box at {pos} was not selected"));
        }
    }
    let apart_a = BinaryMask::from_box(&bx(0.1, 0.1, 0.2, 0.2), 16, 16);
    let apart_b = BinaryMask::from_box(&bx(0.9, 0.9, 0.2, 0.2), 16, 16);
    match build_pseudo_label(&apart_a, &apart_b, 0, 1, 0.05) {
        Some(p) if p.intersection.is_none() && p.intersection_box.is_none() && p.union.area() == apart_a.area() + apart_b.area() => {}
        _ => fails.push("separated masks must give an Empty intersection".into()),
    }
    if build_pseudo_label(&BinaryMask::zeros(8, 8), &apart_a.clone(), 0, 1, 0.1).is_some() {
        fails.push("an empty instance mask must give no label".into());
    }
    fails
}

// ---------------------------------------------------------------- decoder

/// Small config used for the gradient and invariance checks.
pub fn small_config(layers: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.decoder = DecoderConfig { dim: 16, heads: 2, layers, num_object_queries: 4, max_human_slots: 8, human_replicas: 8, ffn_hidden: 32, ..DecoderConfig::default() };
    cfg.foundation = FoundationConfig { dim: 16, ..FoundationConfig::default() };
    cfg.loss.num_points = 64;
    cfg
}

pub fn small_setup(cfg: &TrainConfig, seed: u64) -> (Decoder, PreparedImage) {
    let ds = synth_dataset(seed, 1);
    let fm = ToyFoundation::new(cfg.foundation);
    let outs = extract_all(&fm, &ds).unwrap();
    let labels = build_pseudo_labels(&ds, &outs, &cfg.pseudo);
    let img = prepare(&ds, outs, &labels, &cfg.decoder).remove(0);
    let (mut dec, _, _) = init_decoder(&cfg.decoder, &ds.categories).unwrap();
    dec.jitter(0.05, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
    (dec, img)
}

/// Largest relative error between the analytic directional derivative of
/// the full training loss and a central difference, over `directions`
/// random unit directions. The matching is held at the base point.
pub fn gradient_check(directions: usize, seed: u64) -> f64 {
    let cfg = small_config(2);
    let (mut dec, img) = small_setup(&cfg, seed);
    let masks = MaskRequest { union: true, intersection: true };
    let points = sample_points(img.foundation.cells(), cfg.loss.num_points, seed);
    let (grads, assignments) = {
        let mut g = Graph::new(&dec.store);
        let heads = dec.forward(&mut g, &img.foundation, &img.align, masks);
        let (loss, _, a) = total_loss(&mut g, &heads, &img.rows, &img.targets, &cfg.cost, &cfg.loss, &points).unwrap();
        (g.backward(loss), a)
    };
    let loss_at = |dec: &Decoder| {
        let mut g = Graph::new(&dec.store);
        let heads = dec.forward(&mut g, &img.foundation, &img.align, masks);
        let (loss, _) = loss_with_assignments(&mut g, &heads, &img.rows, &img.targets, &assignments, &cfg.loss, &points);
        g.value(loss).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut dir: Vec<Matrix> = dec.store.values().iter().map(|m| Matrix::randn(m.rows, m.cols, 1.0, &mut rng)).collect();
        let norm = dir.iter().flat_map(|m| m.data.iter()).map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|m| m.scale_assign(1.0 / norm));
        let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g.data.iter().zip(&d.data).map(|(a, b)| a * b).sum::<f64>()).sum();
        dec.store.axpy(eps, &dir);
        let up = loss_at(&dec);
        dec.store.axpy(-2.0 * eps, &dir);
        let down = loss_at(&dec);
        dec.store.axpy(eps, &dir);
        let numeric = (up - down) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Every output row of a valid query, flattened, in row order.
pub fn row_outputs(dec: &Decoder, f: &seg2hoi_core::foundation::FoundationOutput, align: &Alignment) -> Vec<Vec<f64>> {
    let out = dec.predict(f, align);
    (0..out.rows.len())
        .map(|i| {
            let mut v = Vec::new();
            v.extend_from_slice(out.verb_logits.row(i));
            v.extend_from_slice(out.class_logits.row(i));
            v.extend_from_slice(out.boxes.row(i));
            v.extend_from_slice(out.union_logits.row(i));
            if let Some(m) = &out.inter_logits {
                v.extend_from_slice(m.row(i));
            }
            v
        })
        .collect()
}

fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

/// `(padding gap, permutation gap)`: max-abs change of the valid rows when
/// padded human slots are appended, and when both branches' queries are
/// shuffled (compared after undoing the shuffle).
pub fn padding_and_permutation(seed: u64) -> (f64, f64) {
    let cfg = small_config(2);
    let (dec, img) = small_setup(&cfg, seed);
    let f = &img.foundation;
    let base = img.align.clone();
    let reference = row_outputs(&dec, f, &base);

    let mut padded = base.clone();
    padded.human.extend(std::iter::repeat_n(None, 7));
    let pad_rows = row_outputs(&dec, f, &padded);
    let n_valid = base.object.len() + base.human.len();
    let pad_gap = max_abs(&reference, &pad_rows[..n_valid]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut po: Vec<usize> = (0..base.object.len()).collect();
    let mut ph: Vec<usize> = (0..base.human.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut po[..], &mut rng);
    rand::seq::SliceRandom::shuffle(&mut ph[..], &mut rng);
    let mut perm = base.clone();
    perm.object = po.iter().map(|&i| base.object[i]).collect();
    perm.human = ph.iter().map(|&i| base.human[i]).collect();
    let perm_rows = row_outputs(&dec, f, &perm);
    let no = base.object.len();
    let mut unshuffled = vec![Vec::new(); reference.len()];
    for (k, &i) in po.iter().enumerate() {
        unshuffled[i] = perm_rows[k].clone();
    }
    for (k, &i) in ph.iter().enumerate() {
        unshuffled[no + i] = perm_rows[no + k].clone();
    }
    (pad_gap, max_abs(&reference, &unshuffled))
}

// ---------------------------------------------------------------- retrieval

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|x| x * x).sum::<f64>()).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot / n
    }
}

fn oracle_argmax(scores: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(i, s) in scores {
        if best.is_none() || s > best.unwrap().1 {
            best = Some((i, s));
        }
    }
    best.map(|b| b.0)
}

/// Mismatches of both retrieval rules against an exhaustive scan.
pub fn retrieval_mismatches(instances: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let (n, d) = (rng.gen_range(1..40), rng.gen_range(2..24));
        let eu = Matrix::randn(n, d, 1.0, &mut rng);
        let eo = Matrix::randn(n, d, 1.0, &mut rng);
        let ev = Matrix::randn(n, d, 1.0, &mut rng);
        let prompt: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let allowed: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        let live: Vec<usize> = (0..n).filter(|&i| allowed[i]).collect();
        let vis = oracle_argmax(&live.iter().map(|&i| (i, oracle_cos(eu.row(i), &prompt))).collect::<Vec<_>>());
        let txt = oracle_argmax(&live.iter().map(|&i| (i, oracle_cos(eo.row(i), &prompt) * oracle_cos(ev.row(i), &prompt))).collect::<Vec<_>>());
        if retrieve_visual(&prompt, &eu, |i| allowed[i]) != vis || retrieve_text(&prompt, &eo, &ev, |i| allowed[i]) != txt {
            bad += 1;
        }
    }
    bad
}
