//! Trainable image and recipe encoders mapping into the joint space.
//!
//! Both sides end in the same head: a two-layer tanh perceptron followed by
//! L2 normalization. The image side feeds raw features into the head. The
//! recipe side feeds the concatenation of three mean-pooled sections: title
//! word buckets, the ingredient set and the multiset of action occurrences.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RecipeRecord;
use crate::dictionaries::LabelKind;
use crate::embedding::{EmbeddingError, EmbeddingVec};
use crate::impl_tensors;
use crate::tensor::{gaussian_matrix, TensorError, TensorFile, ENCODER_FORMAT};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("unknown {kind} label `{label}`")]
    UnknownLabel { label: String, kind: LabelKind },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub raw_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Width of the label and title-word embedding tables.
    pub label_dim: usize,
    pub title_buckets: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            raw_dim: 64,
            embed_dim: 64,
            hidden_dim: 128,
            label_dim: 64,
            title_buckets: 256,
        }
    }
}

/// Ingredient and action label ids known to the recipe encoder.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    ingredients: Vec<String>,
    actions: Vec<String>,
    #[serde(skip)]
    ing_index: HashMap<String, usize>,
    #[serde(skip)]
    act_index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(ingredients: BTreeSet<String>, actions: BTreeSet<String>) -> Self {
        let mut v = Self {
            ingredients: ingredients.into_iter().collect(),
            actions: actions.into_iter().collect(),
            ..Default::default()
        };
        v.reindex();
        v
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a RecipeRecord>) -> Self {
        let mut ing = BTreeSet::new();
        let mut act = BTreeSet::new();
        for r in records {
            ing.extend(r.ingredients.iter().cloned());
            act.extend(r.action_occurrences().cloned());
        }
        Self::new(ing, act)
    }

    fn reindex(&mut self) {
        self.ing_index = self.ingredients.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        self.act_index = self.actions.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
    }

    pub fn len(&self, kind: LabelKind) -> usize {
        match kind {
            LabelKind::Ingredient => self.ingredients.len(),
            LabelKind::Action => self.actions.len(),
        }
    }

    pub fn index(&self, label: &str, kind: LabelKind) -> Result<usize, EncoderError> {
        let map = match kind {
            LabelKind::Ingredient => &self.ing_index,
            LabelKind::Action => &self.act_index,
        };
        map.get(label).copied().ok_or_else(|| EncoderError::UnknownLabel {
            label: label.to_string(),
            kind,
        })
    }
}

/// Pre-resolved, sorted table indices of one recipe's three sections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecipeTokens {
    pub title: Vec<usize>,
    pub ingredients: Vec<usize>,
    pub actions: Vec<usize>,
}

fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn title_buckets(title: &str, buckets: usize) -> Vec<usize> {
    let mut out: Vec<usize> = title
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| (fnv1a(w) % buckets as u64) as usize)
        .collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}
impl_tensors!(ImageEncoder { w1, b1, w2, b2 });

#[derive(Debug, Clone, PartialEq)]
pub struct RecipeEncoder {
    pub ing_table: Array2<f64>,
    pub act_table: Array2<f64>,
    pub tok_table: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}
impl_tensors!(RecipeEncoder { ing_table, act_table, tok_table, w1, b1, w2, b2 });

impl ImageEncoder {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: gaussian_matrix(rng, cfg.hidden_dim, cfg.raw_dim, cfg.raw_dim),
            b1: Array1::zeros(cfg.hidden_dim),
            w2: gaussian_matrix(rng, cfg.embed_dim, cfg.hidden_dim, cfg.hidden_dim),
            b2: Array1::zeros(cfg.embed_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> HeadCache {
        head_forward(&self.w1, &self.b1, &self.w2, &self.b2, features.to_owned())
    }

    /// Accumulates parameter gradients for `d_out` (gradient w.r.t. the
    /// normalized embeddings).
    pub fn backward(&self, cache: &HeadCache, d_out: &Array2<f64>, grads: &mut ImageEncoder) {
        head_backward(
            &self.w1,
            &self.w2,
            cache,
            d_out,
            (&mut grads.w1, &mut grads.b1, &mut grads.w2, &mut grads.b2),
            false,
        );
    }
}

impl RecipeEncoder {
    fn init(cfg: &EncoderConfig, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Self {
        let e = cfg.label_dim;
        Self {
            ing_table: gaussian_matrix(rng, vocab.ingredients.len(), e, 1),
            act_table: gaussian_matrix(rng, vocab.actions.len(), e, 1),
            tok_table: gaussian_matrix(rng, cfg.title_buckets, e, 1),
            w1: gaussian_matrix(rng, cfg.hidden_dim, 3 * e, 3 * e),
            b1: Array1::zeros(cfg.hidden_dim),
            w2: gaussian_matrix(rng, cfg.embed_dim, cfg.hidden_dim, cfg.hidden_dim),
            b2: Array1::zeros(cfg.embed_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ing_table: Array2::zeros(self.ing_table.raw_dim()),
            act_table: Array2::zeros(self.act_table.raw_dim()),
            tok_table: Array2::zeros(self.tok_table.raw_dim()),
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.len()),
        }
    }

    fn label_dim(&self) -> usize {
        self.ing_table.ncols()
    }

    /// Mean-pooled `[title | ingredients | actions]` input rows.
    pub fn pool(&self, batch: &[&RecipeTokens]) -> Array2<f64> {
        let e = self.label_dim();
        let mut u = Array2::zeros((batch.len(), 3 * e));
        for (row, toks) in batch.iter().enumerate() {
            for (slot, (idx, table)) in [
                (&toks.title, &self.tok_table),
                (&toks.ingredients, &self.ing_table),
                (&toks.actions, &self.act_table),
            ]
            .into_iter()
            .enumerate()
            {
                if idx.is_empty() {
                    continue;
                }
                let inv = 1.0 / idx.len() as f64;
                let mut dst = u.slice_mut(s![row, slot * e..(slot + 1) * e]);
                for &i in idx.iter() {
                    dst.scaled_add(inv, &table.row(i));
                }
            }
        }
        u
    }

    pub fn forward(&self, batch: &[&RecipeTokens]) -> HeadCache {
        head_forward(&self.w1, &self.b1, &self.w2, &self.b2, self.pool(batch))
    }

    pub fn backward(&self, batch: &[&RecipeTokens], cache: &HeadCache, d_out: &Array2<f64>, grads: &mut RecipeEncoder) {
        let d_in = head_backward(
            &self.w1,
            &self.w2,
            cache,
            d_out,
            (&mut grads.w1, &mut grads.b1, &mut grads.w2, &mut grads.b2),
            true,
        )
        .expect("input gradient requested");
        let e = self.label_dim();
        for (row, toks) in batch.iter().enumerate() {
            for (slot, idx) in [&toks.title, &toks.ingredients, &toks.actions].into_iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                let inv = 1.0 / idx.len() as f64;
                let src = d_in.slice(s![row, slot * e..(slot + 1) * e]);
                let table = match slot {
                    0 => &mut grads.tok_table,
                    1 => &mut grads.ing_table,
                    _ => &mut grads.act_table,
                };
                for &i in idx.iter() {
                    table.row_mut(i).scaled_add(inv, &src);
                }
            }
        }
    }
}

/// Activations of the shared two-layer head, kept for the backward pass.
pub struct HeadCache {
    pub input: Array2<f64>,
    pub hidden: Array2<f64>,
    pub norms: Vec<f64>,
    pub out: Array2<f64>,
}

const NORM_FLOOR: f64 = 1e-12;

fn head_forward(w1: &Array2<f64>, b1: &Array1<f64>, w2: &Array2<f64>, b2: &Array1<f64>, input: Array2<f64>) -> HeadCache {
    let mut hidden = input.dot(&w1.t());
    hidden += b1;
    hidden.mapv_inplace(f64::tanh);
    let mut z = hidden.dot(&w2.t());
    z += b2;
    let mut norms = Vec::with_capacity(z.nrows());
    for mut row in z.rows_mut() {
        let n = row.dot(&row).sqrt().max(NORM_FLOOR);
        row /= n;
        norms.push(n);
    }
    HeadCache {
        input,
        hidden,
        norms,
        out: z,
    }
}

type HeadGrads<'a> = (
    &'a mut Array2<f64>,
    &'a mut Array1<f64>,
    &'a mut Array2<f64>,
    &'a mut Array1<f64>,
);

fn head_backward(
    w1: &Array2<f64>,
    w2: &Array2<f64>,
    cache: &HeadCache,
    d_out: &Array2<f64>,
    grads: HeadGrads<'_>,
    want_input: bool,
) -> Option<Array2<f64>> {
    let (gw1, gb1, gw2, gb2) = grads;
    let mut dz = d_out.clone();
    for ((mut dz_row, e_row), &n) in dz.rows_mut().into_iter().zip(cache.out.rows()).zip(&cache.norms) {
        let proj = e_row.dot(&dz_row);
        dz_row.scaled_add(-proj, &e_row);
        dz_row /= n;
    }
    *gw2 += &dz.t().dot(&cache.hidden);
    *gb2 += &dz.sum_axis(Axis(0));
    let mut da = dz.dot(w2);
    da.zip_mut_with(&cache.hidden, |g, &h| *g *= 1.0 - h * h);
    *gw1 += &da.t().dot(&cache.input);
    *gb1 += &da.sum_axis(Axis(0));
    want_input.then(|| da.dot(w1))
}

/// Parameters of both encoders plus the vocabulary they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub image: ImageEncoder,
    pub recipe: RecipeEncoder,
    pub init_seed: u64,
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, vocab: Vocabulary, init_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let image = ImageEncoder::init(&config, &mut rng);
        let recipe = RecipeEncoder::init(&config, &vocab, &mut rng);
        Self {
            config,
            vocab,
            image,
            recipe,
            init_seed,
        }
    }

    pub fn tokens(&self, record: &RecipeRecord) -> Result<RecipeTokens, EncoderError> {
        let mut ingredients = record
            .ingredients
            .iter()
            .map(|l| self.vocab.index(l, LabelKind::Ingredient))
            .collect::<Result<Vec<_>, _>>()?;
        ingredients.sort_unstable();
        ingredients.dedup();
        let mut actions = record
            .action_occurrences()
            .map(|l| self.vocab.index(l, LabelKind::Action))
            .collect::<Result<Vec<_>, _>>()?;
        actions.sort_unstable();
        Ok(RecipeTokens {
            title: title_buckets(&record.title, self.config.title_buckets),
            ingredients,
            actions,
        })
    }

    pub fn label_tokens(&self, label: &str, kind: LabelKind) -> Result<RecipeTokens, EncoderError> {
        let i = self.vocab.index(label, kind)?;
        let (ingredients, actions) = match kind {
            LabelKind::Ingredient => (vec![i], vec![]),
            LabelKind::Action => (vec![], vec![i]),
        };
        Ok(RecipeTokens {
            title: vec![],
            ingredients,
            actions,
        })
    }

    pub fn save(&self, w: impl Write) -> Result<(), EncoderError> {
        let mut file = TensorFile::new(ENCODER_FORMAT);
        let meta = |v: Result<serde_json::Value, serde_json::Error>| v.map_err(|e| EncoderError::Meta(e.to_string()));
        file.meta.insert("config".into(), meta(serde_json::to_value(self.config))?);
        file.meta.insert("vocab".into(), meta(serde_json::to_value(&self.vocab))?);
        file.meta.insert("init_seed".into(), self.init_seed.into());
        file.insert_module("image", &self.image);
        file.insert_module("recipe", &self.recipe);
        file.write_to(w)?;
        Ok(())
    }

    pub fn load(r: impl Read) -> Result<Self, EncoderError> {
        let file = TensorFile::read_from(r, ENCODER_FORMAT)?;
        let get = |k: &str| {
            file.meta
                .get(k)
                .cloned()
                .ok_or_else(|| EncoderError::Meta(format!("missing `{k}`")))
        };
        let config: EncoderConfig = serde_json::from_value(get("config")?).map_err(|e| EncoderError::Meta(e.to_string()))?;
        let mut vocab: Vocabulary = serde_json::from_value(get("vocab")?).map_err(|e| EncoderError::Meta(e.to_string()))?;
        vocab.reindex();
        let init_seed = get("init_seed")?.as_u64().ok_or_else(|| EncoderError::Meta("init_seed".into()))?;
        let mut params = Self::init(config, vocab, init_seed);
        file.restore_module("image", &mut params.image)?;
        file.restore_module("recipe", &mut params.recipe)?;
        Ok(params)
    }
}

/// Embeds raw image features.
pub fn encode_image(params: &EncoderParams, features: &[f64]) -> Result<EmbeddingVec, EncoderError> {
    if features.len() != params.config.raw_dim {
        return Err(EncoderError::Dimension {
            expected: params.config.raw_dim,
            actual: features.len(),
        });
    }
    let x = ArrayView2::from_shape((1, features.len()), features).expect("row view");
    let cache = params.image.forward(x);
    Ok(finish(cache))
}

fn finish(cache: HeadCache) -> EmbeddingVec {
    let zero = cache.norms[0] <= NORM_FLOOR;
    let values = cache.out.row(0).to_vec();
    if zero {
        EmbeddingVec::new(values).expect("finite")
    } else {
        EmbeddingVec::normalize(values).expect("finite")
    }
}

/// Embeds a recipe from its title words, ingredient set and action occurrences.
pub fn encode_recipe(params: &EncoderParams, record: &RecipeRecord) -> Result<EmbeddingVec, EncoderError> {
    let toks = params.tokens(record)?;
    Ok(finish(params.recipe.forward(&[&toks])))
}

/// Embeds a single label as the recipe consisting of that label alone.
pub fn encode_label(params: &EncoderParams, label: &str, kind: LabelKind) -> Result<EmbeddingVec, EncoderError> {
    let toks = params.label_tokens(label, kind)?;
    Ok(finish(params.recipe.forward(&[&toks])))
}

/// Row-wise batch embedding of many images; rows are unit-norm.
pub fn encode_images(params: &EncoderParams, features: ArrayView2<f64>) -> Array2<f64> {
    params.image.forward(features).out
}

pub fn encode_recipes(params: &EncoderParams, tokens: &[&RecipeTokens]) -> Array2<f64> {
    params.recipe.forward(tokens).out
}
