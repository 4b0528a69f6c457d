//! The trainable two-branch HOI decoder.
//!
//! Object and human queries are taken from the frozen model's outputs,
//! refined by stacked self / counterpart / backbone attention, turned into
//! relation features and decoded by six heads. Heads share weights across
//! layers so every layer can be supervised.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::foundation::{FoundationOutput, HUMAN};
use crate::geometry::BBox;
use crate::tensor::Matrix;

pub const VERB_BIAS_INIT: f64 = -4.6;
pub const WH_EPS: f64 = 1e-6;
pub const SINUSOID_TEMPERATURE: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierMode {
    Linear,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_object_queries: usize,
    pub human_replicas: usize,
    pub max_human_slots: usize,
    pub ffn_hidden: usize,
    pub num_verbs: usize,
    pub num_objects: usize,
    pub classifier: ClassifierMode,
    pub temperature: f64,
    pub intersection_mask: bool,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dim: 32,
            heads: 4,
            layers: 3,
            num_object_queries: 8,
            human_replicas: 4,
            max_human_slots: 60,
            ffn_hidden: 64,
            num_verbs: 3,
            num_objects: 4,
            classifier: ClassifierMode::Text,
            temperature: 0.07,
            intersection_mask: true,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return bad("decoder.dim must be a positive multiple of 4");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad("decoder.heads must divide decoder.dim");
        }
        if self.num_object_queries == 0 || self.human_replicas == 0 || self.max_human_slots == 0 {
            return bad("query counts must be positive");
        }
        if self.num_verbs == 0 || self.num_objects == 0 {
            return bad("category counts must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("decoder.temperature must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Matrix::uniform(fan_in, fan_out, bound, rng));
        let b = store.add(format!("{name}.b"), Matrix::zeros(1, fan_out));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        let b = g.param(self.b);
        g.add_row(y, b)
    }
}

/// Linear layers with ReLU in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims.windows(2).enumerate().map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng)).collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Mha {
    fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Mha {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
        }
    }
}

/// Multi-head scaled dot-product attention. Returns `None` when no key is
/// valid, which callers treat as a zero update.
pub fn attention(g: &mut Graph, mha: &Mha, heads: usize, query: Var, key: Var, value: Var, key_valid: &[bool]) -> Option<Var> {
    if !key_valid.iter().any(|&v| v) {
        return None;
    }
    let q = mha.q.forward(g, query);
    let k = mha.k.forward(g, key);
    let v = mha.v.forward(g, value);
    let dim = g.shape(q).1;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
        };
        let s = g.matmul_nt(qh, kh);
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s, Some(key_valid));
        outs.push(g.matmul(a, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    Some(mha.o.forward(g, cat))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchLayer {
    pub self_attn: Mha,
    pub cross_attn: Mha,
    pub backbone_attn: Mha,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub object: BranchLayer,
    pub human: BranchLayer,
}

/// Parameter handles for every trainable tensor of the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub pd_proj: Linear,
    pub ref_mlp: Mlp,
    pub replica: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub ffn_object: Mlp,
    pub ffn_human: Mlp,
    pub verb: Linear,
    pub self_class: Linear,
    pub inter_class: Linear,
    pub box_mlp: Mlp,
    pub union_mlp: Mlp,
    pub inter_object_mlp: Mlp,
    pub inter_human_mlp: Mlp,
    pub verb_bias: Option<ParamId>,
    pub no_object: Option<ParamId>,
}

/// Text classifier rows used in text-embedding mode (unit-norm, `n x dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRows {
    pub verbs: Matrix,
    pub objects: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub handles: DecoderParams,
    pub store: ParamStore,
    pub text: Option<TextRows>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Object,
    Human,
}

/// Which foundation queries feed each branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Foundation indices of the object-branch queries.
    pub object: Vec<usize>,
    /// Foundation index and replica number of each human slot; `None` is padding.
    pub human: Vec<Option<(usize, usize)>>,
}

impl Alignment {
    pub fn num_rows(&self) -> usize {
        self.object.len() + self.human.len()
    }

    /// Drops padded human slots.
    pub fn compact(&self) -> Alignment {
        Alignment { object: self.object.clone(), human: self.human.iter().filter(|h| h.is_some()).cloned().collect() }
    }

    pub fn row(&self, i: usize) -> RowInfo {
        if i < self.object.len() {
            RowInfo { branch: Branch::Object, query: Some(self.object[i]) }
        } else {
            RowInfo { branch: Branch::Human, query: self.human[i - self.object.len()].map(|(q, _)| q) }
        }
    }

    pub fn rows(&self) -> Vec<RowInfo> {
        (0..self.num_rows()).map(|i| self.row(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowInfo {
    pub branch: Branch,
    /// Foundation query index; `None` for padded slots.
    pub query: Option<usize>,
}

/// Top-`N_o` queries by max class logit for the object branch; every
/// human-classified query replicated for the human branch, capped and
/// padded to `max_human_slots`.
pub fn align_queries(f: &FoundationOutput, config: &DecoderConfig) -> Alignment {
    let mut order: Vec<usize> = (0..f.num_queries()).collect();
    order.sort_by(|&a, &b| f.max_class_logit(b).total_cmp(&f.max_class_logit(a)).then(a.cmp(&b)));
    order.truncate(config.num_object_queries);
    let mut human = Vec::with_capacity(config.max_human_slots);
    'outer: for q in (0..f.num_queries()).filter(|&q| f.class_argmax(q) == HUMAN) {
        for r in 0..config.human_replicas {
            if human.len() == config.max_human_slots {
                break 'outer;
            }
            human.push(Some((q, r)));
        }
    }
    human.resize(config.max_human_slots, None);
    Alignment { object: order, human }
}

/// Interleaved `(sin, cos)` encoding of a scalar into `d` channels.
pub fn sinusoid(x: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let freq = SINUSOID_TEMPERATURE.powf(-((2 * i) as f64) / d as f64);
        let a = 2.0 * std::f64::consts::PI * x * freq;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

/// Pre-projection input for the self-attention position:
/// `sinusoid(cx) ++ sinusoid(cy) ++ [w, h]`.
pub fn pd_features(b: &BBox, dim: usize) -> Vec<f64> {
    let mut v = sinusoid(b.cx, dim / 2);
    v.extend(sinusoid(b.cy, dim / 2));
    v.push(b.w);
    v.push(b.h);
    v
}

/// Graph-side state of one branch.
#[derive(Debug, Clone)]
pub struct BundleVars {
    pub content: Var,
    pub p1: Var,
    pub p2: Var,
    pub valid: Vec<bool>,
}

/// Head outputs for one layer, as graph nodes. Row order is object-branch
/// rows then human-branch rows.
#[derive(Debug, Clone)]
pub struct HeadVars {
    pub verb_logits: Var,
    /// Self-class rows then interacting-class rows, `N_f x (N_obj + 1)`;
    /// the last column is "no object".
    pub class_logits: Var,
    pub boxes: Var,
    pub union_emb: Var,
    pub union_logits: Option<Var>,
    pub inter_logits: Option<Var>,
    pub verb_emb: Option<Var>,
    pub object_emb: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct MaskRequest {
    pub union: bool,
    pub intersection: bool,
}

/// Plain-value head outputs of the final layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOutputs {
    pub rows: Vec<RowInfo>,
    pub num_object_rows: usize,
    pub verb_logits: Matrix,
    pub class_logits: Matrix,
    pub boxes: Matrix,
    pub union_emb: Matrix,
    pub union_logits: Matrix,
    pub inter_logits: Option<Matrix>,
    pub verb_emb: Option<Matrix>,
    pub object_emb: Option<Matrix>,
}

impl HeadOutputs {
    pub fn self_class(&self) -> Matrix {
        self.class_logits.select_rows(&(0..self.num_object_rows).collect::<Vec<_>>())
    }

    pub fn inter_class(&self) -> Matrix {
        self.class_logits.select_rows(&(self.num_object_rows..self.rows.len()).collect::<Vec<_>>())
    }

    pub fn counterpart_box(&self, i: usize) -> BBox {
        let r = self.boxes.row(i);
        BBox { cx: r[0], cy: r[1], w: r[2], h: r[3] }
    }
}

impl Decoder {
    pub fn new(config: DecoderConfig, text: Option<TextRows>) -> Result<Self> {
        config.validate()?;
        if config.classifier == ClassifierMode::Text {
            let t = text.as_ref().ok_or_else(|| Error::Config("text classifier mode needs text rows".into()))?;
            if t.verbs.shape() != (config.num_verbs, config.dim) || t.objects.shape() != (config.num_objects, config.dim) {
                return Err(Error::Config("text rows do not match decoder dimensions".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let d = config.dim;
        let pd_proj = Linear::new(&mut s, "pos.pd", d + 2, d, &mut rng);
        let ref_mlp = Mlp::new(&mut s, "pos.ref", &[d, d, 2], &mut rng);
        let replica = s.add("replica", Matrix::randn(config.human_replicas, d, 0.1, &mut rng));
        let layers = (0..config.layers)
            .map(|l| {
                let mut branch = |b: &str| BranchLayer {
                    self_attn: Mha::new(&mut s, &format!("layer{l}.{b}.self"), d, &mut rng),
                    cross_attn: Mha::new(&mut s, &format!("layer{l}.{b}.cross"), d, &mut rng),
                    backbone_attn: Mha::new(&mut s, &format!("layer{l}.{b}.backbone"), d, &mut rng),
                };
                DecoderLayer { object: branch("object"), human: branch("human") }
            })
            .collect();
        let hid = config.ffn_hidden;
        let ffn_object = Mlp::new(&mut s, "ffn.object", &[d, hid, d], &mut rng);
        let ffn_human = Mlp::new(&mut s, "ffn.human", &[d, hid, d], &mut rng);
        let text_mode = config.classifier == ClassifierMode::Text;
        let (verb_out, class_out) = if text_mode { (d, d) } else { (config.num_verbs, config.num_objects + 1) };
        let verb = Linear::new(&mut s, "head.verb", 2 * d, verb_out, &mut rng);
        let self_class = Linear::new(&mut s, "head.self_class", 2 * d, class_out, &mut rng);
        let inter_class = Linear::new(&mut s, "head.inter_class", d, class_out, &mut rng);
        let box_mlp = Mlp::new(&mut s, "head.box", &[d, d, d, 4], &mut rng);
        let union_mlp = Mlp::new(&mut s, "head.union", &[2 * d, d, d, d], &mut rng);
        let inter_object_mlp = Mlp::new(&mut s, "head.inter_object", &[d, d, d, d], &mut rng);
        let inter_human_mlp = Mlp::new(&mut s, "head.inter_human", &[2 * d, d, d, d], &mut rng);
        let (verb_bias, no_object) = if text_mode {
            let vb = s.add("head.verb_bias", Matrix::filled(1, config.num_verbs, VERB_BIAS_INIT));
            let no = s.add("head.no_object", Matrix::randn(1, d, 1.0, &mut rng));
            (Some(vb), Some(no))
        } else {
            s.get_mut(verb.b).data.iter_mut().for_each(|x| *x = VERB_BIAS_INIT);
            (None, None)
        };
        let handles = DecoderParams {
            pd_proj,
            ref_mlp,
            replica,
            layers,
            ffn_object,
            ffn_human,
            verb,
            self_class,
            inter_class,
            box_mlp,
            union_mlp,
            inter_object_mlp,
            inter_human_mlp,
            verb_bias,
            no_object,
        };
        Ok(Decoder { config, handles, store: s, text: if text_mode { text } else { None } })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Content plus the two positional embeddings for a branch.
    pub fn bundle(&self, g: &mut Graph, f: &FoundationOutput, slots: &[Option<(usize, Option<usize>)>]) -> BundleVars {
        let d = self.config.dim;
        let n = slots.len();
        let mut qd = Matrix::zeros(n, d);
        let mut pd_in = Matrix::zeros(n, d + 2);
        let mut phi_x = Matrix::zeros(n, d / 2);
        let mut phi_y = Matrix::zeros(n, d / 2);
        let mut inv_w = Matrix::zeros(n, 1);
        let mut inv_h = Matrix::zeros(n, 1);
        let mut replica_onehot = Matrix::zeros(n, self.config.human_replicas);
        let mut valid = vec![false; n];
        for (i, slot) in slots.iter().enumerate() {
            let Some((q, replica)) = *slot else { continue };
            valid[i] = true;
            let b = f.boxes[q];
            qd.row_mut(i).copy_from_slice(f.queries.row(q));
            pd_in.row_mut(i).copy_from_slice(&pd_features(&b, d));
            phi_x.row_mut(i).copy_from_slice(&sinusoid(b.cx, d / 2));
            phi_y.row_mut(i).copy_from_slice(&sinusoid(b.cy, d / 2));
            inv_w.data[i] = 1.0 / b.w.max(WH_EPS);
            inv_h.data[i] = 1.0 / b.h.max(WH_EPS);
            if let Some(r) = replica {
                replica_onehot.set(i, r, 1.0);
            }
        }
        let qd = g.constant(qd);
        let content = if slots.iter().any(|s| matches!(s, Some((_, Some(_))))) {
            let oh = g.constant(replica_onehot);
            let rep = g.param(self.handles.replica);
            let add = g.matmul(oh, rep);
            g.add(qd, add)
        } else {
            qd
        };
        let pd_in = g.constant(pd_in);
        let p1 = self.handles.pd_proj.forward(g, pd_in);
        let refs = self.handles.ref_mlp.forward(g, qd);
        let refs = g.sigmoid(refs);
        let w_ref = g.slice_cols(refs, 0, 1);
        let h_ref = g.slice_cols(refs, 1, 1);
        let (iw, ih) = (g.constant(inv_w), g.constant(inv_h));
        let sx = g.mul(w_ref, iw);
        let sy = g.mul(h_ref, ih);
        let (px, py) = (g.constant(phi_x), g.constant(phi_y));
        let bx = g.mul_col(px, sx);
        let by = g.mul_col(py, sy);
        let p2 = g.concat_cols(&[bx, by]);
        BundleVars { content, p1, p2, valid }
    }

    /// One decoder layer: self-attention, counterpart cross-attention and
    /// backbone cross-attention per branch, each with a residual.
    pub fn decoder_layer(&self, g: &mut Graph, layer: usize, obj: &BundleVars, hum: &BundleVars, backbone: Var) -> (Var, Var) {
        let lw = self.handles.layers[layer];
        let heads = self.config.heads;
        let n_tokens = g.shape(backbone).0;
        let tokens_valid = vec![true; n_tokens];

        let self_step = |g: &mut Graph, b: &BundleVars, w: &Mha| {
            let qk = g.add(b.content, b.p1);
            match attention(g, w, heads, qk, qk, b.content, &b.valid) {
                Some(u) => g.add(b.content, u),
                None => b.content,
            }
        };
        let q_o = self_step(g, obj, &lw.object.self_attn);
        let q_h = self_step(g, hum, &lw.human.self_attn);

        let qo2 = g.add(q_o, obj.p2);
        let qh2 = g.add(q_h, hum.p2);
        let new_o = match attention(g, &lw.object.cross_attn, heads, qo2, qh2, q_h, &hum.valid) {
            Some(u) => g.add(q_o, u),
            None => q_o,
        };
        let new_h = match attention(g, &lw.human.cross_attn, heads, qh2, qo2, q_o, &obj.valid) {
            Some(u) => g.add(q_h, u),
            None => q_h,
        };

        let backbone_step = |g: &mut Graph, q: Var, p2: Var, w: &Mha| {
            let qq = g.add(q, p2);
            match attention(g, w, heads, qq, backbone, backbone, &tokens_valid) {
                Some(u) => g.add(q, u),
                None => q,
            }
        };
        let out_o = backbone_step(g, new_o, obj.p2, &lw.object.backbone_attn);
        let out_h = backbone_step(g, new_h, hum.p2, &lw.human.backbone_attn);
        (out_o, out_h)
    }

    /// `R^o_h = FFN(Q_o)`, `R^h_o = FFN(Q_h)`.
    pub fn relation_features(&self, g: &mut Graph, q_o: Var, q_h: Var) -> (Var, Var) {
        let r_oh = self.handles.ffn_object.forward(g, q_o);
        let r_ho = self.handles.ffn_human.forward(g, q_h);
        (r_oh, r_ho)
    }

    /// The six heads (plus embeddings) over relation features.
    pub fn predict_heads(&self, g: &mut Graph, r_oh: Var, r_ho: Var, qd_o: Var, qd_h: Var, f_seg: Var, masks: MaskRequest) -> HeadVars {
        let h = &self.handles;
        let r = g.concat_rows(&[r_oh, r_ho]);
        let qd = g.concat_rows(&[qd_o, qd_h]);
        let rq = g.concat_cols(&[r, qd]);
        let roq = g.concat_cols(&[r_oh, qd_o]);

        let verb_out = h.verb.forward(g, rq);
        let self_out = h.self_class.forward(g, roq);
        let inter_out = h.inter_class.forward(g, r_ho);
        let class_out = g.concat_rows(&[self_out, inter_out]);

        let (verb_logits, class_logits, verb_emb, object_emb) = match (&self.text, h.verb_bias, h.no_object) {
            (Some(text), Some(vb), Some(no)) => {
                let inv_tau = 1.0 / self.config.temperature;
                let ev = g.normalize_rows(verb_out, 1e-12);
                let tv = g.constant(text.verbs.clone());
                let cv = g.matmul_nt(ev, tv);
                let cv = g.scale(cv, inv_tau);
                let vb = g.param(vb);
                let cv = g.add_row(cv, vb);
                let eo = g.normalize_rows(class_out, 1e-12);
                let to = g.constant(text.objects.clone());
                let no = g.param(no);
                let no = g.normalize_rows(no, 1e-12);
                let bank = g.concat_rows(&[to, no]);
                let co = g.matmul_nt(eo, bank);
                let co = g.scale(co, inv_tau);
                (cv, co, Some(verb_out), Some(class_out))
            }
            _ => (verb_out, class_out, None, None),
        };

        let boxes = h.box_mlp.forward(g, r);
        let boxes = g.sigmoid(boxes);
        let union_emb = h.union_mlp.forward(g, rq);
        let union_logits = masks.union.then(|| g.matmul_nt(union_emb, f_seg));
        let inter_logits = masks.intersection.then(|| {
            let so = g.add(r_oh, qd_o);
            let eo = h.inter_object_mlp.forward(g, so);
            let ch = g.concat_cols(&[r_ho, qd_h]);
            let eh = h.inter_human_mlp.forward(g, ch);
            let e = g.concat_rows(&[eo, eh]);
            g.matmul_nt(e, f_seg)
        });
        HeadVars { verb_logits, class_logits, boxes, union_emb, union_logits, inter_logits, verb_emb, object_emb }
    }

    /// Full forward pass; returns heads after every layer (last = final).
    pub fn forward(&self, g: &mut Graph, f: &FoundationOutput, align: &Alignment, masks: MaskRequest) -> Vec<HeadVars> {
        let obj_slots: Vec<_> = align.object.iter().map(|&q| Some((q, None))).collect();
        let hum_slots: Vec<_> = align.human.iter().map(|s| s.map(|(q, r)| (q, Some(r)))).collect();
        let obj = self.bundle(g, f, &obj_slots);
        let hum = self.bundle(g, f, &hum_slots);
        let qd_o = g.constant(f.queries.select_rows(&align.object));
        let hum_rows: Vec<usize> = align.human.iter().map(|s| s.map_or(0, |(q, _)| q)).collect();
        let mut qd_h_m = f.queries.select_rows(&hum_rows);
        for (i, s) in align.human.iter().enumerate() {
            if s.is_none() {
                qd_h_m.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let qd_h = g.constant(qd_h_m);
        let backbone = g.constant(f.backbone_tokens());
        let f_seg = g.constant(f.f_seg.clone());

        let mut o = obj.clone();
        let mut hb = hum.clone();
        let mut outs = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (qo, qh) = self.decoder_layer(g, l, &o, &hb, backbone);
            o.content = qo;
            hb.content = qh;
            let (r_oh, r_ho) = self.relation_features(g, qo, qh);
            outs.push(self.predict_heads(g, r_oh, r_ho, qd_o, qd_h, f_seg, masks));
        }
        outs
    }

    /// Inference on one image: final-layer heads as plain matrices.
    pub fn predict(&self, f: &FoundationOutput, align: &Alignment) -> HeadOutputs {
        let mut g = Graph::new(&self.store);
        let masks = MaskRequest { union: true, intersection: self.config.intersection_mask };
        let outs = self.forward(&mut g, f, align, masks);
        let last = outs.last().expect("decoder has at least one layer");
        let value = |v: Var| g.value(v).clone();
        HeadOutputs {
            rows: align.rows(),
            num_object_rows: align.object.len(),
            verb_logits: value(last.verb_logits),
            class_logits: value(last.class_logits),
            boxes: value(last.boxes),
            union_emb: value(last.union_emb),
            union_logits: value(last.union_logits.expect("union requested")),
            inter_logits: last.inter_logits.map(value),
            verb_emb: last.verb_emb.map(value),
            object_emb: last.object_emb.map(value),
        }
    }

    /// Perturbs a copy of every parameter by `N(0, std)`; used by tests.
    pub fn jitter<R: Rng>(&mut self, std: f64, rng: &mut R) {
        for m in self.store.values_mut() {
            let noise = Matrix::randn(m.rows, m.cols, std, rng);
            m.add_assign(&noise);
        }
    }
}
