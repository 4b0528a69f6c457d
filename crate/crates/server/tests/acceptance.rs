//! Acceptance suite: one PASS/FAIL line per criterion.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use seg2hoi::api::QuadrupletResponse;
use seg2hoi::{router, AppState, Limits};
use seg2hoi_core::foundation::ToyFoundation;
use seg2hoi_core::geometry::Rle;
use seg2hoi_core::model::{evaluate, phrase, Model};
use seg2hoi_core::pipeline::dataset::{synth_dataset, HoiDataset, HOLD};
use seg2hoi_core::pipeline::run::{fit_prepared, train_dataset};
use seg2hoi_core::pipeline::train::{build_pseudo_labels, extract_all, MetricRecord, TrainSummary};
use seg2hoi_core::pipeline::TrainConfig;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Suite {
    failed: Vec<String>,
}

impl Suite {
    fn report(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(name.to_string());
        }
    }
}

struct OverfitRun {
    seed: u64,
    model: Model,
    summary: TrainSummary,
    final_epoch_loss: f64,
    hash_before: String,
    hash_after: String,
    elapsed: Duration,
}

fn overfit_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.train.seed = seed;
    cfg.decoder.seed = seed;
    cfg
}

fn train_logged(cfg: &TrainConfig, ds: &HoiDataset, fm: &ToyFoundation, outputs: &[seg2hoi_core::foundation::FoundationOutput]) -> (Model, TrainSummary, f64) {
    let labels = build_pseudo_labels(ds, outputs, &cfg.pseudo);
    let mut last_epoch = f64::NAN;
    let (model, summary) = fit_prepared(cfg, ds, fm.clone(), outputs.to_vec(), &labels, &mut |r| {
        if let MetricRecord::Epoch { loss, .. } = r {
            last_epoch = loss.total;
        }
    })
    .unwrap();
    (model, summary, last_epoch)
}

fn overfit(seed: u64) -> OverfitRun {
    let t = Instant::now();
    let cfg = overfit_config(seed);
    let ds = train_dataset(&cfg, Path::new(".")).unwrap();
    let fm = ToyFoundation::new(cfg.foundation);
    let hash_before = fm.param_hash();
    let outputs = extract_all(&fm, &ds).unwrap();
    let (model, summary, final_epoch_loss) = train_logged(&cfg, &ds, &fm, &outputs);
    let hash_after = model.foundation.param_hash();
    OverfitRun { seed, model, summary, final_epoch_loss, hash_before, hash_after, elapsed: t.elapsed() }
}

fn recall_on(model: &Model, ds: &HoiDataset, cfg: &TrainConfig) -> f64 {
    evaluate(model, ds, &cfg.eval, None).unwrap().0.recall
}

/// Fraction of (scene, annotated phrase) instances whose text prompt
/// returns that verb and object.
fn text_prompt_rate(model: &Model, ds: &HoiDataset) -> (usize, usize) {
    let (mut ok, mut total) = (0, 0);
    for i in 0..ds.len() {
        let a = model.analyze(&ds.load_image(i).unwrap()).unwrap();
        let mut phrases: Vec<(usize, usize)> = ds.triplets(i).iter().map(|t| (t.verb, t.object_class)).collect();
        phrases.sort_unstable();
        phrases.dedup();
        for (verb, object) in phrases {
            total += 1;
            let q = model.prompt_text(&a, &phrase(&ds.categories, verb, object), 0.5).unwrap();
            if q.is_some_and(|q| q.verb == verb && q.object_class == object) {
                ok += 1;
            }
        }
    }
    (ok, total)
}

fn png_b64(img: &image::RgbImage) -> String {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

async fn post(state: Arc<AppState>, uri: &str, body: &Value) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(Method::POST).uri(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(body.to_string())).unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

/// Problems found in one endpoint's response, empty when it round-trips.
fn check_response(status: StatusCode, body: &[u8], again: &[u8]) -> Vec<String> {
    let mut problems = Vec::new();
    if status != StatusCode::OK {
        return vec![format!("status {status}: {}", String::from_utf8_lossy(body))];
    }
    if body != again {
        problems.push("identical requests gave different bodies".into());
    }
    let raw: Value = match serde_json::from_slice(body) {
        Ok(v) => v,
        Err(e) => return vec![format!("not JSON: {e}")],
    };
    let parsed: QuadrupletResponse = match serde_json::from_value(raw.clone()) {
        Ok(r) => r,
        Err(e) => return vec![format!("schema: {e}")],
    };
    if serde_json::to_vec(&parsed).ok().as_deref() != Some(body) {
        problems.push("body does not re-serialize byte-identically".into());
    }
    for (k, q) in raw["quadruplets"].as_array().unwrap().iter().enumerate() {
        for key in ["human_box", "object_box", "object_class", "verb", "score", "union_mask", "intersection_mask", "query_index"] {
            if q.get(key).is_none() {
                problems.push(format!("quadruplet {k} lacks {key}"));
            }
        }
        let typed = &parsed.quadruplets[k];
        let masks = [("union_mask", Some(&typed.union_mask)), ("intersection_mask", typed.intersection_mask.as_ref())];
        for (key, rle) in masks {
            let Some(rle) = rle else { continue };
            let reencoded = rle.decode().map(|m| serde_json::to_string(&Rle::encode(&m)).unwrap());
            if reencoded.ok() != serde_json::to_string(rle).ok() {
                problems.push(format!("quadruplet {k} {key} does not re-encode byte-identically"));
            }
            if rle.size != [parsed.meta.mask_height, parsed.meta.mask_width] {
                problems.push(format!("quadruplet {k} {key} has size {:?}", rle.size));
            }
        }
    }
    problems
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    println!("acceptance suite ({} mode)", if seg2hoi_core::par::is_parallel() { "parallel" } else { "sequential" });

    let t = Instant::now();
    let mismatches = support::hungarian_mismatches(1000, 1);
    let el = t.elapsed();
    suite.report("criterion 1 (hungarian oracle)", mismatches == 0 && el < Duration::from_secs(60), format!("{mismatches} mismatches over 1000 matrices in {el:.2?}"));

    let t = Instant::now();
    let worst = support::gradient_check(100, 3);
    let el = t.elapsed();
    suite.report("criterion 2 (gradient check)", worst < 1e-4 && el < Duration::from_secs(300), format!("worst relative error {worst:.2e} over 100 directions in {el:.2?}"));

    let train_ds = synth_dataset(0, 32);
    let runs: Vec<OverfitRun> = SEEDS.iter().map(|&s| overfit(s)).collect();
    let mut ok3 = true;
    let mut lines = Vec::new();
    for r in &runs {
        let recall = recall_on(&r.model, &train_ds, &overfit_config(r.seed));
        let ratio = r.summary.first_loss.unwrap() / r.final_epoch_loss;
        ok3 &= recall >= 0.9 && r.summary.steps <= 2000 && ratio >= 5.0 && r.elapsed < Duration::from_secs(1800);
        lines.push(format!("seed {} recall {recall:.3} steps {} loss {:.3}->{:.4} ({ratio:.1}x) {:.1?}", r.seed, r.summary.steps, r.summary.first_loss.unwrap(), r.final_epoch_loss, r.elapsed));
    }
    suite.report("criterion 3 (overfit run)", ok3, lines.join("; "));

    let t = Instant::now();
    let big = TrainConfig::parse("data.synth_images = 256\ntrain.epochs = 62\ntrain.lr_drop_epochs = [49]\nloss.use_inter = false").unwrap();
    let big_ds = train_dataset(&big, Path::new(".")).unwrap();
    let fm = ToyFoundation::new(big.foundation);
    let big_outputs = extract_all(&fm, &big_ds).unwrap();
    let held_out = synth_dataset(1000, 32);
    let mut with = Vec::new();
    let mut without = Vec::new();
    for &seed in &SEEDS {
        for (union, acc) in [(true, &mut with), (false, &mut without)] {
            let mut cfg = big.clone();
            cfg.train.seed = seed;
            cfg.decoder.seed = seed;
            cfg.loss.use_union = union;
            let (model, summary, _) = train_logged(&cfg, &big_ds, &fm, &big_outputs);
            assert!(summary.steps <= 2000);
            acc.push(recall_on(&model, &held_out, &cfg));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mw, mo) = (mean(&with), mean(&without));
    suite.report(
        "criterion 4 (union-mask ablation)",
        mw >= mo,
        format!("held-out recall with union {mw:.3} {with:?}, without {mo:.3} {without:?}; trained on 256 images, {:.1?}", t.elapsed()),
    );

    let fixtures = support::evaluator_fixtures();
    let gaps: Vec<(String, f64)> = fixtures.iter().map(support::evaluator_gap).collect();
    let ok5 = fixtures.len() == 5 && gaps.iter().all(|g| g.1 <= 1e-9);
    suite.report("criterion 5 (evaluator oracle)", ok5, gaps.iter().map(|(n, g)| format!("{n} {g:.1e}")).collect::<Vec<_>>().join(", "));

    let fails = support::pseudo_label_failures(500, 6);
    suite.report("criterion 6 (pseudo-label invariants)", fails.is_empty(), format!("{} failures over 500 mask pairs {:?}", fails.len(), fails.iter().take(3).collect::<Vec<_>>()));

    let (pad, perm) = SEEDS.iter().map(|&s| support::padding_and_permutation(s)).fold((0.0f64, 0.0f64), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    suite.report("criterion 7 (padding/permutation)", pad < 1e-6 && perm <= 1e-12, format!("padding gap {pad:.2e}, permutation gap {perm:.2e}"));

    let ok8 = runs.iter().all(|r| r.hash_before == r.hash_after);
    suite.report("criterion 8 (frozen foundation)", ok8, format!("hash {} unchanged across {} runs", &runs[0].hash_before[..16], runs.len()));

    let mism = support::retrieval_mismatches(200, 9);
    let (ok, total) = text_prompt_rate(&runs[0].model, &train_ds);
    let (hok, htotal) = text_prompt_rate(&runs[0].model, &held_out);
    let rate = ok as f64 / total as f64;
    suite.report(
        "criterion 9 (retrieval)",
        mism == 0 && rate >= 0.9,
        format!("{mism} oracle mismatches over 200; text prompts {ok}/{total} ({rate:.3}) on the overfit scenes; held-out scenes {hok}/{htotal} (informational)"),
    );

    let state = Arc::new(AppState::new(runs[0].model.clone(), Limits::default()).unwrap());
    let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
    let mut problems = Vec::new();
    let mut hold_top = (0, 0);
    rt.block_on(async {
        for i in 0..4 {
            let b64 = png_b64(&train_ds.load_image(i).unwrap());
            let t0 = &train_ds.triplets(i)[0];
            let (cx, cy) = (t0.object_box.cx, t0.object_box.cy);
            let point = [(cx * 64.0) as u32, (cy * 64.0) as u32];
            let requests = [
                ("/v1/detect", json!({"image": b64, "top_k": 20})),
                ("/v1/prompt/visual", json!({"image": b64, "points": [point]})),
                ("/v1/prompt/text", json!({"image": b64, "text": phrase(&train_ds.categories, t0.verb, t0.object_class)})),
            ];
            for (uri, body) in &requests {
                let (status, a) = post(state.clone(), uri, body).await;
                let (_, b) = post(state.clone(), uri, body).await;
                problems.extend(check_response(status, &a, &b).into_iter().map(|p| format!("image {i} {uri}: {p}")));
            }
        }
        for i in 0..train_ds.len() {
            let ts = train_ds.triplets(i);
            if ts.len() != 1 || ts[0].verb != HOLD {
                continue;
            }
            let body = json!({"image": png_b64(&train_ds.load_image(i).unwrap()), "top_k": 1});
            let (_, bytes) = post(state.clone(), "/v1/detect", &body).await;
            let r: QuadrupletResponse = serde_json::from_slice(&bytes).unwrap();
            hold_top.1 += 1;
            if r.quadruplets.first().is_some_and(|q| q.verb.name == "hold") {
                hold_top.0 += 1;
            }
        }
    });
    suite.report("criterion 10 (service round-trip)", problems.is_empty(), format!("12 requests, {} problems {:?}", problems.len(), problems.iter().take(3).collect::<Vec<_>>()));
    suite.report("detect example (overlap scene tops with hold)", hold_top.1 > 0 && hold_top.0 == hold_top.1, format!("{}/{} single-pair overlap scenes", hold_top.0, hold_top.1));

    if suite.failed.is_empty() {
        println!("all acceptance checks passed");
    } else {
        println!("failed: {}", suite.failed.join(", "));
        std::process::exit(1);
    }
}
