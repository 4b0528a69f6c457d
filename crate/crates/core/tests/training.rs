use seg2hoi_core::foundation::ToyFoundation;
use seg2hoi_core::model::{evaluate, Model};
use seg2hoi_core::pipeline::run::{eval_dataset, fit, train_dataset};
use seg2hoi_core::pipeline::train::MetricRecord;
use seg2hoi_core::pipeline::TrainConfig;

fn quick(epochs: usize, extra: &str) -> TrainConfig {
    TrainConfig::parse(&format!("data.synth_images = 8\ndata.eval_synth_images = 4\ntrain.epochs = {epochs}\ntrain.lr_drop_epochs = [25]\n{extra}")).unwrap()
}

fn run(cfg: &TrainConfig) -> (Model, seg2hoi_core::pipeline::train::TrainSummary, Vec<MetricRecord>) {
    let ds = train_dataset(cfg, std::path::Path::new(".")).unwrap();
    let mut log = Vec::new();
    let (model, summary) = fit(cfg, &ds, &mut |r| log.push(r.clone())).unwrap();
    (model, summary, log)
}

#[test]
fn short_run_reduces_loss_and_logs_every_step() {
    let cfg = quick(30, "");
    let (_, summary, log) = run(&cfg);
    assert_eq!(summary.steps, 30);
    let (first, last) = (summary.first_loss.unwrap(), summary.last_loss.unwrap());
    assert!(last < 0.7 * first, "first {first} last {last}");
    let steps = log.iter().filter(|r| matches!(r, MetricRecord::Step { .. })).count();
    let epochs: Vec<f64> = log
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Epoch { lr, .. } => Some(*lr),
            _ => None,
        })
        .collect();
    assert_eq!(steps, summary.steps);
    assert_eq!(epochs.len(), 30);
    assert_eq!(epochs[24], 1e-3);
    assert!((epochs[25] - 2e-4).abs() < 1e-15);
}

#[test]
fn same_seed_same_checkpoint() {
    let cfg = quick(5, "");
    let a = run(&cfg).0.hash().unwrap();
    let b = run(&cfg).0.hash().unwrap();
    assert_eq!(a, b);
    let c = run(&quick(5, "train.seed = 1")).0.hash().unwrap();
    assert_ne!(a, c);
}

#[test]
fn foundation_is_untouched_by_training() {
    let cfg = quick(5, "");
    let before = ToyFoundation::new(cfg.foundation).param_hash();
    let (model, _, _) = run(&cfg);
    assert_eq!(model.foundation.param_hash(), before);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = quick(5, "");
    let (model, _, _) = run(&cfg);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.bin");
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded.hash().unwrap(), model.hash().unwrap());
    let ds = eval_dataset(&cfg, tmp.path()).unwrap();
    let img = ds.load_image(0).unwrap();
    let (a, b) = (model.analyze(&img).unwrap(), loaded.analyze(&img).unwrap());
    assert_eq!(model.detect(&a, 0.5, 20, 0.0), loaded.detect(&b, 0.5, 20, 0.0));
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let (model, _, _) = run(&quick(1, ""));
    let bytes = model.to_bytes().unwrap();
    assert!(Model::read(&mut &bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn evaluation_reports_every_image() {
    let cfg = quick(30, "");
    let (model, _, _) = run(&cfg);
    let ds = eval_dataset(&cfg, std::path::Path::new(".")).unwrap();
    let (report, preds) = evaluate(&model, &ds, &cfg.eval, None).unwrap();
    assert_eq!(report.images, 4);
    assert_eq!(preds.len(), 4);
    assert!((0.0..=1.0).contains(&report.recall));
    let hico = report.hico.unwrap();
    assert!((0.0..=1.0).contains(&hico.full.unwrap()));
    assert_eq!(report.ap_role_s1, None);
    assert!(preds.iter().all(|p| p.quadruplets.len() <= cfg.eval.top_k));
    assert!(preds.iter().all(|p| p.quadruplets.windows(2).all(|w| w[0].score >= w[1].score)));
}
