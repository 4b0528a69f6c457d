//! A trained model bundle: checkpoint I/O, detection, prompt retrieval and
//! dataset evaluation.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{align_queries, ClassifierMode, Decoder, DecoderConfig, HeadOutputs};
use crate::error::{Error, Result};
use crate::evalinfer::{
    assemble, hico_map, quadruplet_for_row, row_is_live, triplet_recall, vcoco_role_ap, HicoMode, HoiDetection, HoiGt, HoiTable, ImagePredictions, MapReport,
    Quadruplet, RoleDetection, RoleGt, Scenario,
};
use crate::foundation::{argmax, FoundationConfig, FoundationOutput, ToyFoundation, STRIDE};
use crate::openvocab::{retrieve_text, retrieve_visual, visual_prompt, Embedder, TextClassifierBank, ToyEmbedder, EMBEDDER_VERSION};
use crate::par;
use crate::pipeline::config::EvalConfig;
use crate::pipeline::dataset::{Categories, DatasetFormat, HoiDataset};
use crate::pipeline::train::text_bank;
use crate::tensor::cosine;

const MAGIC: &[u8; 8] = b"S2HCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    decoder: DecoderConfig,
    foundation: FoundationConfig,
    foundation_hash: String,
    categories: Categories,
    embedder: String,
    params: Vec<(String, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub decoder: Decoder,
    pub foundation: ToyFoundation,
    pub categories: Categories,
    pub embedder: ToyEmbedder,
    pub bank: TextClassifierBank,
}

/// Frozen products plus decoder heads for one image.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub foundation: FoundationOutput,
    pub heads: HeadOutputs,
}

impl Model {
    pub fn new(decoder: Decoder, foundation: ToyFoundation, categories: Categories) -> Result<Self> {
        if foundation.config().dim != decoder.config.dim {
            return Err(Error::Config(format!("foundation dim {} differs from decoder dim {}", foundation.config().dim, decoder.config.dim)));
        }
        let (embedder, bank) = text_bank(&categories, decoder.config.dim)?;
        Ok(Model { decoder, foundation, categories, embedder, bank })
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let store = &self.decoder.store;
        let header = Header {
            version: VERSION,
            decoder: self.decoder.config.clone(),
            foundation: *self.foundation.config(),
            foundation_hash: self.foundation.param_hash(),
            categories: self.categories.clone(),
            embedder: EMBEDDER_VERSION.to_string(),
            params: store.names().iter().zip(store.values()).map(|(n, m)| (n.clone(), m.rows, m.cols)).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for m in store.values() {
            for x in &m.data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    /// Reads a checkpoint and checks it against a rebuilt foundation.
    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", u32::from_le_bytes(b4))));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        if len > 64 << 20 {
            return Err(Error::Format("checkpoint header too large".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let h: Header = serde_json::from_slice(&json)?;
        if h.embedder != EMBEDDER_VERSION {
            return Err(Error::Checkpoint(format!("embedder {} differs from {EMBEDDER_VERSION}", h.embedder)));
        }
        let foundation = ToyFoundation::new(h.foundation);
        if foundation.param_hash() != h.foundation_hash {
            return Err(Error::Checkpoint("foundation parameters differ from the ones used for training".into()));
        }
        let (_, bank) = text_bank(&h.categories, h.decoder.dim)?;
        let text = (h.decoder.classifier == ClassifierMode::Text).then(|| bank.rows());
        let mut decoder = Decoder::new(h.decoder, text)?;
        let store = &mut decoder.store;
        let expected: Vec<(String, usize, usize)> = store.names().iter().zip(store.values()).map(|(n, m)| (n.clone(), m.rows, m.cols)).collect();
        if expected != h.params {
            return Err(Error::Checkpoint("parameter layout does not match the decoder config".into()));
        }
        for m in store.values_mut() {
            for x in m.data.iter_mut() {
                r.read_exact(&mut b8)?;
                *x = f64::from_le_bytes(b8);
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        Model::new(decoder, foundation, h.categories)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    pub fn heads(&self, f: &FoundationOutput) -> HeadOutputs {
        let align = align_queries(f, &self.decoder.config).compact();
        self.decoder.predict(f, &align)
    }

    pub fn analyze(&self, img: &RgbImage) -> Result<Analysis> {
        let foundation = self.foundation.extract(img)?;
        let heads = self.heads(&foundation);
        Ok(Analysis { foundation, heads })
    }

    pub fn detect(&self, a: &Analysis, lambda: f64, top_k: usize, floor: f64) -> Vec<Quadruplet> {
        assemble(&a.foundation, &a.heads, lambda, top_k, floor)
    }

    /// The row's most confident verb.
    fn row_quadruplet(&self, a: &Analysis, row: usize, lambda: f64) -> Quadruplet {
        let verb = argmax(a.heads.verb_logits.row(row));
        quadruplet_for_row(&a.foundation, &a.heads, row, verb, lambda)
    }

    /// Quadruplet of the row whose union embedding best matches the
    /// pooled features under the points. `None` when no row is live.
    pub fn prompt_visual(&self, a: &Analysis, points: &[(u32, u32)], lambda: f64) -> Option<Quadruplet> {
        let prompt = visual_prompt(&a.foundation, points, STRIDE);
        let row = retrieve_visual(&prompt, &a.heads.union_emb, |i| row_is_live(&a.foundation, &a.heads, i))?;
        Some(self.row_quadruplet(a, row, lambda))
    }

    /// Quadruplet of the row whose object and verb embeddings jointly best
    /// match the embedded text. Rows dissimilar to the prompt on either
    /// factor are skipped unless no row qualifies. Needs the text
    /// classifier mode.
    pub fn prompt_text(&self, a: &Analysis, text: &str, lambda: f64) -> Result<Option<Quadruplet>> {
        let (Some(eo), Some(ev)) = (&a.heads.object_emb, &a.heads.verb_emb) else {
            return Err(Error::Config("text prompts need the text classifier mode".into()));
        };
        let prompt = self.embedder.embed(text);
        let live = |i: usize| row_is_live(&a.foundation, &a.heads, i);
        let agrees = |i: usize| live(i) && cosine(eo.row(i), &prompt) >= 0.0 && cosine(ev.row(i), &prompt) >= 0.0;
        let row = retrieve_text(&prompt, eo, ev, agrees).or_else(|| retrieve_text(&prompt, eo, ev, live));
        Ok(row.map(|r| self.row_quadruplet(a, r, lambda)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hico: Option<MapReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_role_s1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_role_s2: Option<f64>,
}

/// Runs detection on every image and scores it with the dataset's
/// protocol: HICO-style mAP when a HOI table exists, role AP for V-COCO,
/// and triplet recall always.
/// `rarity` gives the rare/non-rare split (from training counts); the
/// evaluation split's own counts are used when absent.
pub fn evaluate(model: &Model, ds: &HoiDataset, cfg: &EvalConfig, rarity: Option<&HoiTable>) -> Result<(EvalReport, Vec<ImagePredictions>)> {
    let preds: Vec<Vec<Quadruplet>> = par::map_range(ds.len(), |i| -> Result<Vec<Quadruplet>> {
        let a = model.analyze(&ds.load_image(i)?)?;
        Ok(model.detect(&a, cfg.lambda, cfg.top_k, cfg.score_floor))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let gts: Vec<_> = (0..ds.len()).map(|i| ds.triplets(i)).collect();
    let recall = triplet_recall(&preds, &gts, cfg.recall_threshold);

    let cats = &ds.categories;
    let hico = (!cats.hoi.is_empty()).then(|| {
        let mut dets = Vec::new();
        let mut hgts = Vec::new();
        let mut present = Vec::new();
        for (i, (p, g)) in preds.iter().zip(&gts).enumerate() {
            dets.extend(p.iter().filter_map(|q| {
                let hoi = cats.hoi_id(q.verb, q.object_class)?;
                Some(HoiDetection { image: i, hoi, human_box: q.human_box, object_box: q.object_box, score: q.score })
            }));
            hgts.extend(g.iter().filter_map(|t| {
                let hoi = cats.hoi_id(t.verb, t.object_class)?;
                Some(HoiGt { image: i, hoi, human_box: t.human_box, object_box: t.object_box })
            }));
            present.push(g.iter().map(|t| t.object_class).collect::<HashSet<_>>());
        }
        let mode = if cfg.known_object { HicoMode::KnownObject(present) } else { HicoMode::Default };
        let own;
        let table = match rarity {
            Some(t) => t,
            None => {
                own = ds.hoi_table();
                &own
            }
        };
        hico_map(&dets, &hgts, table, &mode)
    });

    let (s1, s2) = if ds.format == DatasetFormat::Vcoco {
        let mut dets = Vec::new();
        let mut rgts = Vec::new();
        for (i, p) in preds.iter().enumerate() {
            dets.extend(p.iter().map(|q| RoleDetection { image: i, verb: q.verb, human_box: q.human_box, object_box: Some(q.object_box), score: q.score }));
            for pair in &ds.images[i].pairs {
                rgts.extend(pair.verbs.iter().map(|&verb| RoleGt { image: i, verb, human_box: pair.human_box, object_box: pair.object_box }));
            }
        }
        let n = cats.verbs.len();
        (vcoco_role_ap(&dets, &rgts, n, Scenario::S1).map, vcoco_role_ap(&dets, &rgts, n, Scenario::S2).map)
    } else {
        (None, None)
    };

    let dump = preds.into_iter().enumerate().map(|(i, quadruplets)| ImagePredictions { image_id: ds.images[i].id.clone(), quadruplets }).collect();
    Ok((EvalReport { images: ds.len(), recall, hico, ap_role_s1: s1, ap_role_s2: s2 }, dump))
}

/// Text prompt naming a (verb, object) pair.
pub fn phrase(categories: &Categories, verb: usize, object: usize) -> String {
    format!("person {} {}", categories.verbs[verb], categories.objects[object])
}

/// Pre-extracted foundation output and heads; exposed for tests.
pub fn analysis_from(model: &Model, foundation: FoundationOutput) -> Analysis {
    let heads = model.heads(&foundation);
    Analysis { foundation, heads }
}
