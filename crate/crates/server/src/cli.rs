//! Subcommand implementations behind the `seg2hoi` binary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use seg2hoi_core::foundation::ToyFoundation;
use seg2hoi_core::model::{evaluate, EvalReport, Model};
use seg2hoi_core::pipeline::run::{build_caches, eval_dataset, fit_prepared, foundation_cache_dir, output_dir, train_dataset, CHECKPOINT_FILE, METRICS_FILE, PSEUDO_LABEL_FILE};
use seg2hoi_core::pipeline::train::TrainSummary;
use seg2hoi_core::pipeline::TrainConfig;

use crate::api::{PromptKind, PromptRequest, QuadrupletResponse};
use crate::service::{answer, AppState, Limits};

pub fn load_config(path: &Path) -> Result<(TrainConfig, PathBuf)> {
    let cfg = TrainConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub images: usize,
    pub foundation_dir: PathBuf,
    pub pseudo_labels: PathBuf,
    pub matched_pairs: usize,
    pub unmatchable_pairs: usize,
}

pub fn cache(config: &Path) -> Result<CacheReport> {
    let (cfg, base) = load_config(config)?;
    let ds = train_dataset(&cfg, &base)?;
    let out = output_dir(&cfg, &base);
    let (_, labels) = build_caches(&cfg, &ds, &out)?;
    let matched = labels.iter().flatten().filter(|l| l.is_some()).count();
    let total: usize = labels.iter().map(Vec::len).sum();
    Ok(CacheReport {
        images: ds.len(),
        foundation_dir: foundation_cache_dir(&out, &ToyFoundation::new(cfg.foundation)),
        pseudo_labels: out.join("cache").join(PSEUDO_LABEL_FILE),
        matched_pairs: matched,
        unmatchable_pairs: total - matched,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub metrics: PathBuf,
    pub summary: TrainSummary,
    pub foundation_hash_before: String,
    pub foundation_hash_after: String,
}

/// Trains, writing the checkpoint, the metrics log and the resolved
/// config into the output directory.
pub fn train(config: &Path) -> Result<TrainReport> {
    let (cfg, base) = load_config(config)?;
    let ds = train_dataset(&cfg, &base)?;
    let out = output_dir(&cfg, &base);
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_flat_string()?)?;
    let fm = ToyFoundation::new(cfg.foundation);
    let before = fm.param_hash();
    let (outputs, labels) = build_caches(&cfg, &ds, &out)?;

    let metrics = out.join(METRICS_FILE);
    let mut log = BufWriter::new(fs::File::create(&metrics)?);
    let mut log_err = None;
    let result = fit_prepared(&cfg, &ds, fm, outputs, &labels, &mut |r| {
        let line = serde_json::to_string(r).map_err(anyhow::Error::from).and_then(|s| writeln!(log, "{s}").map_err(Into::into));
        if let (Err(e), None) = (line, &log_err) {
            log_err = Some(e);
        }
    });
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e.context("writing metrics log"));
    }
    let (model, summary) = result?;
    let after = model.foundation.param_hash();
    if after != before {
        bail!("foundation parameters changed during training");
    }
    let checkpoint = out.join(CHECKPOINT_FILE);
    model.save(&checkpoint)?;
    let report = TrainReport { checkpoint, checkpoint_hash: model.hash()?, metrics, summary, foundation_hash_before: before, foundation_hash_after: after };
    fs::write(out.join("train_summary.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Evaluates on the configured evaluation split; writes `eval.json` and
/// `predictions.json` into `out` (default: the run's output directory).
pub fn eval(config: &Path, checkpoint: &Path, out: Option<&Path>) -> Result<EvalReport> {
    let (cfg, base) = load_config(config)?;
    let model = Model::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let ds = eval_dataset(&cfg, &base)?;
    if ds.categories != model.categories {
        bail!("evaluation categories differ from the checkpoint's");
    }
    let rarity = train_dataset(&cfg, &base)?.hoi_table();
    let (report, preds) = evaluate(&model, &ds, &cfg.eval, Some(&rarity))?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| output_dir(&cfg, &base));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("eval.json"), serde_json::to_vec_pretty(&report)?)?;
    serde_json::to_writer(BufWriter::new(fs::File::create(dir.join("predictions.json"))?), &preds)?;
    Ok(report)
}

/// Full detection on one PNG, in the service's response schema.
pub fn infer(image: &Path, checkpoint: &Path, out: &Path, top_k: usize, lambda: f64) -> Result<QuadrupletResponse> {
    let model = Model::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let img = image::open(image).with_context(|| format!("reading image {}", image.display()))?.to_rgb8();
    let state = AppState::new(model, Limits::default())?;
    let req = PromptRequest { top_k: Some(top_k), lambda: Some(lambda), ..PromptRequest::default() };
    let resp = answer(&state, &req, &img, PromptKind::Detect).map_err(|e| anyhow::anyhow!("{}", e.message))?;
    fs::write(out, serde_json::to_vec(&resp)?)?;
    Ok(resp)
}

pub async fn serve(checkpoint: &Path, host: &str, port: u16) -> Result<()> {
    let model = Model::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let state = Arc::new(AppState::new(model, Limits::default())?);
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    tracing::info!(addr = %listener.local_addr()?, checkpoint = %state.checkpoint, "serving");
    axum::serve(listener, crate::router(state)).await?;
    Ok(())
}
