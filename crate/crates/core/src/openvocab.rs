//! Text-embedding classifier banks and prompt-based retrieval.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::TextRows;
use crate::error::{Error, Result};
use crate::foundation::FoundationOutput;
use crate::tensor::{cosine, Matrix};

pub const OBJECT_TEMPLATE: &str = "A photo of a person and a/an {}";
pub const VERB_TEMPLATE: &str = "A photo of a person {}";
pub const EMBEDDER_VERSION: &str = "toy-embedder-v1";

/// Weight of words shared by every templated sentence.
pub const TEMPLATE_WORD_WEIGHT: f64 = 0.2;

const STOPWORDS: &[&str] = &["a", "an", "the", "of", "and", "photo", "image", "picture", "with", "is", "are", "on", "in", "at", "to"];

/// Maps text to a fixed-width vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Bag-of-words embedder: vocabulary words get orthonormal vectors (while
/// the dimension allows), other words a hashed Gaussian vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEmbedder {
    dim: usize,
    seed: u64,
    vocab: Vec<String>,
    #[serde(skip)]
    table: HashMap<String, Vec<f64>>,
}

impl ToyEmbedder {
    pub fn new(dim: usize, seed: u64, vocabulary: &[String]) -> Self {
        let mut vocab: Vec<String> = Vec::new();
        for phrase in vocabulary {
            for w in tokenize(phrase) {
                if !vocab.contains(&w) {
                    vocab.push(w);
                }
            }
        }
        let mut e = ToyEmbedder { dim, seed, vocab, table: HashMap::new() };
        e.build_table();
        e
    }

    fn build_table(&mut self) {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for w in &self.vocab {
            let mut v = hashed_vector(w, self.dim, self.seed);
            if basis.len() < self.dim {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
                normalize(&mut v);
                basis.push(v.clone());
            }
            self.table.insert(w.clone(), v);
        }
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    fn word_vector(&self, w: &str) -> Vec<f64> {
        self.table.get(w).cloned().unwrap_or_else(|| hashed_vector(w, self.dim, self.seed))
    }

    /// Resolves an inflected token to a vocabulary word where possible.
    fn stem(&self, w: &str) -> String {
        if self.table.contains_key(w) {
            return w.to_string();
        }
        if let Some(base) = w.strip_suffix("ing") {
            let mut options = vec![base.to_string(), format!("{base}e")];
            let b = base.as_bytes();
            if b.len() >= 2 && b[b.len() - 1] == b[b.len() - 2] {
                options.push(base[..base.len() - 1].to_string());
            }
            if let Some(v) = options.iter().find(|o| self.table.contains_key(o.as_str())) {
                return v.clone();
            }
            return base.to_string();
        }
        w.to_string()
    }
}

impl Embedder for ToyEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let template = template_words();
        let mut out = vec![0.0; self.dim];
        for w in tokenize(text) {
            let w = self.stem(&w);
            let weight = if template.contains(&w) { TEMPLATE_WORD_WEIGHT } else { 1.0 };
            for (o, x) in out.iter_mut().zip(self.word_vector(&w)) {
                *o += weight * x;
            }
        }
        normalize(&mut out);
        out
    }
}

impl ToyEmbedder {
    /// Rebuilds the lookup table after deserialization.
    pub fn restore(mut self) -> Self {
        self.build_table();
        self
    }
}

/// Non-stopwords that appear in both templates.
pub fn template_words() -> Vec<String> {
    let v = tokenize(VERB_TEMPLATE);
    tokenize(OBJECT_TEMPLATE).into_iter().filter(|w| v.contains(w)).collect()
}

/// Lowercase alphanumeric words with stopwords removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

fn hashed_vector(word: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(EMBEDDER_VERSION.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(word.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(s);
    let mut v = Matrix::randn(1, dim, 1.0, &mut rng).data;
    normalize(&mut v);
    v
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `hold` -> `holding`, `ride` -> `riding`, `sit_on` -> `sitting on`.
pub fn gerund(verb: &str) -> String {
    let words: Vec<&str> = verb.split(['_', ' ']).filter(|w| !w.is_empty()).collect();
    let Some((first, rest)) = words.split_first() else { return String::new() };
    let b = first.as_bytes();
    let vowel = |c: u8| b"aeiou".contains(&c);
    let head = if first.ends_with("ing") {
        first.to_string()
    } else if first.ends_with('e') && !first.ends_with("ee") && first.len() > 2 {
        format!("{}ing", &first[..first.len() - 1])
    } else if b.len() == 3 && !vowel(b[0]) && vowel(b[1]) && !vowel(b[2]) && !b"wxy".contains(&b[2]) {
        format!("{first}{}ing", b[2] as char)
    } else {
        format!("{first}ing")
    };
    std::iter::once(head).chain(rest.iter().map(|s| s.to_string())).collect::<Vec<_>>().join(" ")
}

pub fn object_sentence(name: &str) -> String {
    OBJECT_TEMPLATE.replace("{}", &name.replace('_', " "))
}

pub fn verb_sentence(name: &str) -> String {
    VERB_TEMPLATE.replace("{}", &gerund(name))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextClassifierBank {
    pub objects: Matrix,
    pub verbs: Matrix,
    pub object_sentences: Vec<String>,
    pub verb_sentences: Vec<String>,
}

impl TextClassifierBank {
    pub fn rows(&self) -> TextRows {
        TextRows { verbs: self.verbs.clone(), objects: self.objects.clone() }
    }
}

pub fn build_text_bank(object_names: &[String], verb_names: &[String], embedder: &dyn Embedder) -> Result<TextClassifierBank> {
    if object_names.is_empty() || verb_names.is_empty() {
        return Err(Error::EmptyCategories);
    }
    let object_sentences: Vec<String> = object_names.iter().map(|n| object_sentence(n)).collect();
    let verb_sentences: Vec<String> = verb_names.iter().map(|n| verb_sentence(n)).collect();
    let embed_all = |s: &[String]| {
        let rows: Vec<Vec<f64>> = s.iter().map(|t| embedder.embed(t)).collect();
        Matrix::from_rows(&rows)
    };
    Ok(TextClassifierBank { objects: embed_all(&object_sentences), verbs: embed_all(&verb_sentences), object_sentences, verb_sentences })
}

/// Row-wise cosine similarity `E x T^T`, zero for zero-norm rows.
pub fn similarity_logits(e: &Matrix, bank: &Matrix, temperature: Option<f64>) -> Matrix {
    let mut out = Matrix::zeros(e.rows, bank.rows);
    let scale = temperature.map_or(1.0, |t| 1.0 / t);
    for i in 0..e.rows {
        for j in 0..bank.rows {
            out.set(i, j, cosine(e.row(i), bank.row(j)) * scale);
        }
    }
    out
}

/// Mean of `f_seg` over the distinct cells under the given pixels.
pub fn visual_prompt(f: &FoundationOutput, points: &[(u32, u32)], stride: usize) -> Vec<f64> {
    let mut cells: Vec<usize> = points
        .iter()
        .map(|&(x, y)| ((y as usize / stride).min(f.grid_h - 1)) * f.grid_w + (x as usize / stride).min(f.grid_w - 1))
        .collect();
    cells.sort_unstable();
    cells.dedup();
    let mut out = vec![0.0; f.dim];
    for &c in &cells {
        for (o, v) in out.iter_mut().zip(f.f_seg.row(c)) {
            *o += v / cells.len() as f64;
        }
    }
    out
}

/// First index of the maximum over `candidates`; `None` if empty.
fn argmax_over(candidates: impl Iterator<Item = usize>, score: impl Fn(usize) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in candidates {
        let s = score(i);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// `argmax_i cos(E_U[i], prompt)` over the allowed rows.
pub fn retrieve_visual(prompt: &[f64], e_u: &Matrix, allowed: impl Fn(usize) -> bool) -> Option<usize> {
    argmax_over((0..e_u.rows).filter(|&i| allowed(i)), |i| cosine(e_u.row(i), prompt))
}

/// `argmax_i cos(E_o[i], prompt) * cos(E_v[i], prompt)` over the allowed rows.
pub fn retrieve_text(prompt: &[f64], e_o: &Matrix, e_v: &Matrix, allowed: impl Fn(usize) -> bool) -> Option<usize> {
    argmax_over((0..e_o.rows).filter(|&i| allowed(i)), |i| cosine(e_o.row(i), prompt) * cosine(e_v.row(i), prompt))
}
