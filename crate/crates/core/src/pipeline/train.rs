//! Decoder training: cached foundation outputs, pseudo-labels, AdamW and
//! the per-step loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::criterion::{row_contexts, sample_points, total_loss, GroundTruthHOI, LossBreakdown, RowContext};
use crate::decoder::{align_queries, Alignment, ClassifierMode, Decoder, DecoderConfig, MaskRequest};
use crate::error::{Error, Result};
use crate::foundation::{FoundationOutput, ToyFoundation};
use crate::openvocab::{build_text_bank, TextClassifierBank, ToyEmbedder};
use crate::par;
use crate::pipeline::config::{OptimConfig, TrainConfig};
use crate::pipeline::dataset::{Categories, DatasetFormat, HoiDataset};
use crate::pseudolabel::{pseudo_label_for_pair, PseudoLabel, PseudoLabelConfig};
use crate::tensor::Matrix;

pub const EMBEDDER_SEED: u64 = 0x5eed;

/// Everything the loss needs for one image.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub foundation: FoundationOutput,
    pub align: Alignment,
    pub rows: Vec<RowContext>,
    pub targets: Vec<GroundTruthHOI>,
}

pub fn extract_all(fm: &ToyFoundation, ds: &HoiDataset) -> Result<Vec<FoundationOutput>> {
    par::map_range(ds.len(), |i| fm.extract(&ds.load_image(i)?)).into_iter().collect()
}

/// Instance class the frozen model uses for a dataset object class, when
/// known. Synthetic object ids coincide with instance classes.
pub fn instance_class_map(format: DatasetFormat) -> fn(usize) -> Option<usize> {
    match format {
        DatasetFormat::Synth => Some,
        _ => |_| None,
    }
}

/// Pseudo-label per (image, ground-truth pair); `None` marks an
/// unmatchable pair.
pub fn build_pseudo_labels(ds: &HoiDataset, outputs: &[FoundationOutput], cfg: &PseudoLabelConfig) -> Vec<Vec<Option<PseudoLabel>>> {
    let class_map = instance_class_map(ds.format);
    par::map_range(ds.len(), |i| {
        ds.ground_truth(i)
            .iter()
            .map(|gt| pseudo_label_for_pair(&outputs[i], &gt.human_box, &gt.object_box, class_map(gt.object_class), cfg))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelCache {
    pub foundation_hash: String,
    pub config: PseudoLabelConfig,
    pub labels: Vec<Vec<Option<PseudoLabel>>>,
}

pub fn prepare(ds: &HoiDataset, outputs: Vec<FoundationOutput>, labels: &[Vec<Option<PseudoLabel>>], dcfg: &DecoderConfig) -> Vec<PreparedImage> {
    outputs
        .into_iter()
        .enumerate()
        .map(|(i, f)| {
            let align = align_queries(&f, dcfg).compact();
            let rows = row_contexts(&f, &align);
            let mut targets = ds.ground_truth(i);
            for (t, p) in targets.iter_mut().zip(&labels[i]) {
                t.pseudo = p.clone();
            }
            PreparedImage { foundation: f, align, rows, targets }
        })
        .collect()
}

/// Toy embedder over the category vocabulary and its text bank.
pub fn text_bank(categories: &Categories, dim: usize) -> Result<(ToyEmbedder, TextClassifierBank)> {
    let vocab: Vec<String> = categories.objects.iter().chain(&categories.verbs).cloned().collect();
    let embedder = ToyEmbedder::new(dim, EMBEDDER_SEED, &vocab);
    let bank = build_text_bank(&categories.objects, &categories.verbs, &embedder)?;
    Ok((embedder, bank))
}

/// Fresh decoder sized to the categories.
pub fn init_decoder(config: &DecoderConfig, categories: &Categories) -> Result<(Decoder, ToyEmbedder, TextClassifierBank)> {
    let mut cfg = config.clone();
    cfg.num_objects = categories.objects.len();
    cfg.num_verbs = categories.verbs.len();
    let (embedder, bank) = text_bank(categories, cfg.dim)?;
    let text = (cfg.classifier == ClassifierMode::Text).then(|| bank.rows());
    Ok((Decoder::new(cfg, text)?, embedder, bank))
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(params: &[Matrix], cfg: &OptimConfig) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        AdamW { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                p.data[k] -= lr * (self.weight_decay * p.data[k] + mhat / (vhat.sqrt() + self.eps));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step { step: usize, epoch: usize, lr: f64, loss: LossBreakdown },
    Epoch { epoch: usize, lr: f64, steps: usize, loss: LossBreakdown },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Loss and parameter gradients for one image.
pub fn image_gradients(decoder: &Decoder, img: &PreparedImage, cfg: &TrainConfig, point_seed: u64) -> Result<(Vec<Matrix>, LossBreakdown)> {
    let mut g = Graph::new(&decoder.store);
    let masks = MaskRequest { union: cfg.loss.use_union, intersection: cfg.loss.use_inter && decoder.config.intersection_mask };
    let heads = decoder.forward(&mut g, &img.foundation, &img.align, masks);
    let points = sample_points(img.foundation.cells(), cfg.loss.num_points, point_seed);
    let (loss, breakdown, _) = total_loss(&mut g, &heads, &img.rows, &img.targets, &cfg.cost, &cfg.loss, &points)?;
    Ok((g.backward(loss), breakdown))
}

/// Runs the configured epochs. Batches are shuffled per epoch from the
/// seed; per-image gradients are summed in batch order, so the result
/// does not depend on the thread count.
pub fn train(cfg: &TrainConfig, decoder: &mut Decoder, data: &[PreparedImage], log: &mut dyn FnMut(&MetricRecord)) -> Result<TrainSummary> {
    let oc = &cfg.train;
    let mut opt = AdamW::new(decoder.store.values(), oc);
    let mut step = 0usize;
    let mut summary = TrainSummary { steps: 0, first_loss: None, last_loss: None };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..oc.epochs {
        let lr = oc.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(oc.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        let mut epoch_steps = 0;
        for batch in order.chunks(oc.batch_size) {
            let dec: &Decoder = decoder;
            let results = par::map(batch, |&i| image_gradients(dec, &data[i], cfg, mix(mix(oc.seed, step as u64), i as u64)));
            let mut grads = decoder.store.zeros_like();
            let mut loss = LossBreakdown::default();
            for r in results {
                let (g, b) = r?;
                for (acc, x) in grads.iter_mut().zip(&g) {
                    acc.add_assign(x);
                }
                loss.add(&b);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(inv));
            loss.scale(inv);
            let grad_finite = grads.iter().all(|g| g.data.iter().all(|x| x.is_finite()));
            if !loss.total.is_finite() || !grad_finite {
                let detail = serde_json::to_string(&MetricRecord::Step { step, epoch, lr, loss }).unwrap_or_default();
                return Err(Error::Diverged { step, detail: format!("non-finite loss or gradient; last breakdown {detail}") });
            }
            opt.step(decoder.store.values_mut(), &grads, lr);
            log(&MetricRecord::Step { step, epoch, lr, loss });
            summary.first_loss.get_or_insert(loss.total);
            summary.last_loss = Some(loss.total);
            epoch_loss.add(&loss);
            epoch_steps += 1;
            step += 1;
        }
        if epoch_steps > 0 {
            epoch_loss.scale(1.0 / epoch_steps as f64);
        }
        log(&MetricRecord::Epoch { epoch, lr, steps: epoch_steps, loss: epoch_loss });
    }
    summary.steps = step;
    Ok(summary)
}

/// Mean loss over a dataset without updating anything.
pub fn evaluate_loss(cfg: &TrainConfig, decoder: &Decoder, data: &[PreparedImage], point_seed: u64) -> Result<LossBreakdown> {
    let results = par::map_range(data.len(), |i| {
        let mut g = Graph::new(&decoder.store);
        let masks = MaskRequest { union: cfg.loss.use_union, intersection: cfg.loss.use_inter && decoder.config.intersection_mask };
        let heads = decoder.forward(&mut g, &data[i].foundation, &data[i].align, masks);
        let points = sample_points(data[i].foundation.cells(), cfg.loss.num_points, mix(point_seed, i as u64));
        total_loss(&mut g, &heads, &data[i].rows, &data[i].targets, &cfg.cost, &cfg.loss, &points).map(|r| r.1)
    });
    let mut total = LossBreakdown::default();
    for r in results {
        total.add(&r?);
    }
    total.scale(1.0 / data.len().max(1) as f64);
    Ok(total)
}
