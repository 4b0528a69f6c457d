//! Wire types shared by the HTTP service and the `infer` command.

use serde::{Deserialize, Serialize};

use seg2hoi_core::evalinfer::Quadruplet;
use seg2hoi_core::foundation::STRIDE;
use seg2hoi_core::geometry::{BBox, Rle};
use seg2hoi_core::model::Model;
use seg2hoi_core::pipeline::dataset::Categories;

pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Body of every prompt endpoint. Exactly one of `image_id` / `image`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<PromptKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    /// Base64 PNG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Detect,
    Visual,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrupletJson {
    pub human_box: BBox,
    pub object_box: BBox,
    pub object_class: Label,
    pub verb: Label,
    pub score: f64,
    pub union_mask: Rle,
    pub intersection_mask: Option<Rle>,
    pub query_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMeta {
    pub model: String,
    pub version: String,
    pub checkpoint: String,
    pub image_width: u32,
    pub image_height: u32,
    /// Masks are at `image / mask_stride`.
    pub mask_stride: usize,
    pub mask_height: usize,
    pub mask_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrupletResponse {
    pub quadruplets: Vec<QuadrupletJson>,
    pub meta: ResponseMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUpload {
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub object: String,
    pub verb: String,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub model: String,
    pub version: String,
    pub checkpoint: String,
    pub objects: Vec<String>,
    pub verbs: Vec<String>,
    pub templates: Templates,
    pub classifier: String,
    pub mask_stride: usize,
    pub size_multiple: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

pub fn quadruplet_json(q: &Quadruplet, categories: &Categories) -> QuadrupletJson {
    QuadrupletJson {
        human_box: q.human_box,
        object_box: q.object_box,
        object_class: Label { id: q.object_class, name: categories.objects[q.object_class].clone() },
        verb: Label { id: q.verb, name: categories.verbs[q.verb].clone() },
        score: q.score,
        union_mask: Rle::encode(&q.union_mask),
        intersection_mask: q.intersection_mask.as_ref().map(Rle::encode),
        query_index: q.query_index,
    }
}

pub fn response(model: &Model, checkpoint: &str, width: u32, height: u32, qs: &[Quadruplet]) -> QuadrupletResponse {
    QuadrupletResponse {
        quadruplets: qs.iter().map(|q| quadruplet_json(q, &model.categories)).collect(),
        meta: ResponseMeta {
            model: "seg2hoi".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            checkpoint: checkpoint.into(),
            image_width: width,
            image_height: height,
            mask_stride: STRIDE,
            mask_height: height as usize / STRIDE,
            mask_width: width as usize / STRIDE,
        },
    }
}
