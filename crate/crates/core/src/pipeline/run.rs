//! End-to-end steps driven by a [`TrainConfig`]: dataset loading, the
//! on-disk foundation and pseudo-label caches, and a full training run.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::foundation::{read_output, write_output, FoundationOutput, ToyFoundation};
use crate::model::Model;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::dataset::{load_annotations, synth_dataset, DatasetFormat, HoiDataset};
use crate::pipeline::train::{build_pseudo_labels, extract_all, init_decoder, prepare, train, MetricRecord, PseudoLabelCache, TrainSummary};
use crate::pseudolabel::PseudoLabel;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const PSEUDO_LABEL_FILE: &str = "pseudo_labels.json";

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Training split. Relative paths resolve against `base`.
pub fn train_dataset(cfg: &TrainConfig, base: &Path) -> Result<HoiDataset> {
    match cfg.data.format {
        DatasetFormat::Synth => Ok(synth_dataset(cfg.data.synth_seed, cfg.data.synth_images)),
        f => load_annotations(&resolve(base, &cfg.data.annotations), f),
    }
}

/// Evaluation split; hico/vcoco need `data.eval_annotations`.
pub fn eval_dataset(cfg: &TrainConfig, base: &Path) -> Result<HoiDataset> {
    match cfg.data.format {
        DatasetFormat::Synth => Ok(synth_dataset(cfg.data.eval_synth_seed, cfg.data.eval_synth_images.max(1))),
        f if cfg.data.eval_annotations.is_empty() => Err(Error::Config(format!("data.eval_annotations is required for {f:?}"))),
        f => load_annotations(&resolve(base, &cfg.data.eval_annotations), f),
    }
}

pub fn output_dir(cfg: &TrainConfig, base: &Path) -> PathBuf {
    resolve(base, &cfg.output.dir)
}

/// Directory holding cached foundation outputs for one parameter hash.
pub fn foundation_cache_dir(out: &Path, fm: &ToyFoundation) -> PathBuf {
    out.join("cache").join(format!("foundation-{}", &fm.param_hash()[..16]))
}

fn cache_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("{i:06}.bin"))
}

pub fn write_foundation_cache(dir: &Path, outputs: &[FoundationOutput]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, o) in outputs.iter().enumerate() {
        let mut w = BufWriter::new(fs::File::create(cache_file(dir, i))?);
        write_output(&mut w, o)?;
    }
    Ok(())
}

/// Cached outputs when every file is present, else `None`.
pub fn read_foundation_cache(dir: &Path, n: usize) -> Result<Option<Vec<FoundationOutput>>> {
    if !(0..n).all(|i| cache_file(dir, i).is_file()) {
        return Ok(None);
    }
    (0..n).map(|i| read_output(&mut BufReader::new(fs::File::open(cache_file(dir, i))?))).collect::<Result<Vec<_>>>().map(Some)
}

/// Cached labels when the file matches the foundation and config.
pub fn read_pseudo_cache(path: &Path, fm: &ToyFoundation, cfg: &TrainConfig) -> Result<Option<Vec<Vec<Option<PseudoLabel>>>>> {
    if !path.is_file() {
        return Ok(None);
    }
    let c: PseudoLabelCache = serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
    Ok((c.foundation_hash == fm.param_hash() && c.config == cfg.pseudo).then_some(c.labels))
}

pub fn write_pseudo_cache(path: &Path, fm: &ToyFoundation, cfg: &TrainConfig, labels: &[Vec<Option<PseudoLabel>>]) -> Result<()> {
    let c = PseudoLabelCache { foundation_hash: fm.param_hash(), config: cfg.pseudo, labels: labels.to_vec() };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    serde_json::to_writer(BufWriter::new(fs::File::create(path)?), &c)?;
    Ok(())
}

/// Foundation outputs and pseudo-labels, from the caches under `out`
/// when present and valid, otherwise computed and written there.
pub fn build_caches(cfg: &TrainConfig, ds: &HoiDataset, out: &Path) -> Result<(Vec<FoundationOutput>, Vec<Vec<Option<PseudoLabel>>>)> {
    let fm = ToyFoundation::new(cfg.foundation);
    let dir = foundation_cache_dir(out, &fm);
    let outputs = match read_foundation_cache(&dir, ds.len())? {
        Some(o) => o,
        None => {
            let o = extract_all(&fm, ds)?;
            write_foundation_cache(&dir, &o)?;
            o
        }
    };
    let path = out.join("cache").join(PSEUDO_LABEL_FILE);
    let labels = match read_pseudo_cache(&path, &fm, cfg)? {
        Some(l) if l.len() == ds.len() => l,
        _ => {
            let l = build_pseudo_labels(ds, &outputs, &cfg.pseudo);
            write_pseudo_cache(&path, &fm, cfg, &l)?;
            l
        }
    };
    Ok((outputs, labels))
}

/// Trains a fresh decoder on in-memory data; nothing touches the disk.
pub fn fit(cfg: &TrainConfig, ds: &HoiDataset, log: &mut dyn FnMut(&MetricRecord)) -> Result<(Model, TrainSummary)> {
    cfg.validate()?;
    let fm = ToyFoundation::new(cfg.foundation);
    let outputs = extract_all(&fm, ds)?;
    let labels = build_pseudo_labels(ds, &outputs, &cfg.pseudo);
    fit_prepared(cfg, ds, fm, outputs, &labels, log)
}

pub fn fit_prepared(
    cfg: &TrainConfig,
    ds: &HoiDataset,
    fm: ToyFoundation,
    outputs: Vec<FoundationOutput>,
    labels: &[Vec<Option<PseudoLabel>>],
    log: &mut dyn FnMut(&MetricRecord),
) -> Result<(Model, TrainSummary)> {
    let data = prepare(ds, outputs, labels, &cfg.decoder);
    let (mut decoder, _, _) = init_decoder(&cfg.decoder, &ds.categories)?;
    let summary = train(cfg, &mut decoder, &data, log)?;
    Ok((Model::new(decoder, fm, ds.categories.clone())?, summary))
}
