//! Culture-specific debiasing: an ingredient classifier and an action
//! generator whose predictions select frozen dictionary embeddings that are
//! added to the image embedding before scoring.

mod classifier;
mod compose;
mod generator;
mod losses;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classifier::{ClassifierCache, ClassifierConfig, LabelClassifier};
pub use compose::{
    action_weights, compose_e_act, compose_e_ing, ingredient_action_vectors, select_ingredients, ActionPrediction,
    IngredientActions, IngredientPrediction, SIMPLEX_TOL,
};
pub use generator::{ActionGenerator, Decoded, GeneratorCache, GeneratorConfig};
pub use losses::{
    asymmetric_loss, asymmetric_loss_grad, generation_loss, generation_loss_logit_grad, sigmoid, softmax_rows,
    PROB_EPS,
};

use crate::corpus::{CultureTag, RecipeRecord};
use crate::dictionaries::LabelDictionary;
use crate::embedding::{EmbeddingError, EmbeddingVec};
use crate::tensor::{TensorError, TensorFile};

pub const DEBIAS_FORMAT: &str = "debias-v1";

#[derive(Debug, Error)]
pub enum DebiasError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("gold action `{0}` is outside the generator vocabulary")]
    GoldOutOfVocabulary(String),
    #[error("label `{0}` is not in the dictionary")]
    OutOfDictionary(String),
    #[error("action prediction covers ingredients {covered:?} but {selected:?} were selected")]
    Coverage { selected: Vec<usize>, covered: Vec<usize> },
    #[error("no debiasing module for culture `{0}`")]
    MissingCulture(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

/// Which debiasing terms enter the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Baseline,
    Ingredient,
    Action,
    Both,
}

impl ScoreMode {
    pub const ALL: [ScoreMode; 4] = [ScoreMode::Baseline, ScoreMode::Ingredient, ScoreMode::Action, ScoreMode::Both];

    pub fn uses_ingredients(self) -> bool {
        matches!(self, ScoreMode::Ingredient | ScoreMode::Both)
    }

    pub fn uses_actions(self) -> bool {
        matches!(self, ScoreMode::Action | ScoreMode::Both)
    }

    /// The classifier runs whenever any debiasing term is active, since
    /// action generation is conditioned on the selected ingredients.
    pub fn uses_classifier(self) -> bool {
        self != ScoreMode::Baseline
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::Baseline => "baseline",
            ScoreMode::Ingredient => "ingredient",
            ScoreMode::Action => "action",
            ScoreMode::Both => "both",
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim_start_matches('+').to_ascii_lowercase().as_str() {
            "baseline" => Ok(ScoreMode::Baseline),
            "ingredient" => Ok(ScoreMode::Ingredient),
            "action" => Ok(ScoreMode::Action),
            "both" => Ok(ScoreMode::Both),
            _ => Err(format!("unknown mode `{s}` (baseline, ingredient, action, both)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DebiasConfig {
    pub threshold: f64,
    pub t_max: usize,
    pub fallback: bool,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub classifier: ClassifierConfig,
    pub generator: GeneratorConfig,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            t_max: 4,
            fallback: true,
            gamma_plus: 1.0,
            gamma_minus: 1.0,
            classifier: ClassifierConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl DebiasConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err("threshold must lie in (0, 1)".into());
        }
        if self.t_max == 0 {
            return Err("t_max must be at least 1".into());
        }
        if self.gamma_plus < 0.0 || self.gamma_minus < 0.0 {
            return Err("gammas must be nonnegative".into());
        }
        if self.classifier.token_width == 0 || self.classifier.attention_dim == 0 || self.generator.hidden_dim == 0 {
            return Err("classifier and generator widths must be positive".into());
        }
        Ok(())
    }
}

/// The two debiasing vectors for one image and the predictions behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasOutput {
    pub e_ing: EmbeddingVec,
    pub e_act: EmbeddingVec,
    pub ingredients: IngredientPrediction,
    pub actions: ActionPrediction,
}

impl DebiasOutput {
    /// Zero debiasing, as used by the baseline mode.
    pub fn zeros(dim: usize) -> Self {
        Self {
            e_ing: EmbeddingVec::zeros(dim),
            e_act: EmbeddingVec::zeros(dim),
            ingredients: select_ingredients(Array1::zeros(0), 0.5, false),
            actions: ActionPrediction::default(),
        }
    }
}

/// Everything retained from a training forward pass for the backward pass.
pub struct DebiasTrace {
    pub cls: ClassifierCache,
    pub ingredients: IngredientPrediction,
    gens: Vec<(GeneratorCache, Vec<usize>)>,
    e_act_k: Vec<Array1<f64>>,
    e_ing: Array1<f64>,
    e_act: Array1<f64>,
    mode: ScoreMode,
    /// Sum of the active debiasing terms.
    pub offset: Array1<f64>,
}

/// Gradient accumulators matching [`CultureDebias`]'s trainable parts.
pub struct DebiasGrads {
    pub classifier: LabelClassifier,
    pub generator: ActionGenerator,
}

/// Supervision for one recipe, in dictionary indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DebiasTargets {
    pub ingredients: Vec<bool>,
    /// `(ingredient index, action indices)` for in-dictionary ingredients
    /// with at least one in-dictionary action.
    pub sequences: Vec<(usize, Vec<usize>)>,
}

/// Classifier, generator and frozen dictionaries for one culture.
#[derive(Debug, Clone, PartialEq)]
pub struct CultureDebias {
    pub culture: CultureTag,
    pub classifier: LabelClassifier,
    pub generator: ActionGenerator,
    pub ingredients: LabelDictionary,
    pub actions: LabelDictionary,
}

impl CultureDebias {
    pub fn init(ingredients: LabelDictionary, actions: LabelDictionary, cfg: &DebiasConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = ingredients.dim();
        let classifier = LabelClassifier::init(&cfg.classifier, d, ingredients.size(), &mut rng);
        let generator = ActionGenerator::init(&cfg.generator, d, actions.size(), cfg.t_max, &mut rng);
        Self {
            culture: ingredients.culture().clone(),
            classifier,
            generator,
            ingredients,
            actions,
        }
    }

    pub fn zero_grads(&self) -> DebiasGrads {
        DebiasGrads {
            classifier: self.classifier.zeros_like(),
            generator: self.generator.zeros_like(),
        }
    }

    pub fn predict_ingredients(&self, e_i: ArrayView1<f64>, threshold: f64, fallback: bool) -> IngredientPrediction {
        select_ingredients(self.classifier.probabilities(e_i), threshold, fallback)
    }

    /// Greedy action sequence for dictionary ingredient `ingredient`.
    pub fn generate_actions(&self, e_i: ArrayView1<f64>, ingredient: usize) -> Decoded {
        self.generator.decode(e_i, self.ingredients.matrix().row(ingredient))
    }

    /// Inference-time debiasing of one image embedding under `mode`.
    pub fn infer(&self, e_i: ArrayView1<f64>, cfg: &DebiasConfig, mode: ScoreMode) -> Result<DebiasOutput, DebiasError> {
        let d = self.ingredients.dim();
        if e_i.len() != d {
            return Err(DebiasError::Shape(format!("image embedding has dim {}, expected {d}", e_i.len())));
        }
        if !mode.uses_classifier() {
            return Ok(DebiasOutput::zeros(d));
        }
        let ingredients = self.predict_ingredients(e_i, cfg.threshold, cfg.fallback);
        let e_ing = if mode.uses_ingredients() {
            compose_e_ing(&ingredients, &self.ingredients)?
        } else {
            EmbeddingVec::zeros(d)
        };
        let (actions, e_act) = if mode.uses_actions() {
            let per_ingredient = ingredients
                .selected
                .iter()
                .map(|&k| {
                    let dec = self.generate_actions(e_i, k);
                    IngredientActions::new(k, dec.actions, dec.probs)
                })
                .collect();
            let actions = ActionPrediction { per_ingredient };
            let e_act = compose_e_act(&ingredients, &actions, &self.actions)?;
            (actions, e_act)
        } else {
            (ActionPrediction::default(), EmbeddingVec::zeros(d))
        };
        Ok(DebiasOutput {
            e_ing,
            e_act,
            ingredients,
            actions,
        })
    }

    /// `e_Ing + e_Act` under `mode` for every row of `e_images`.
    pub fn offsets(&self, e_images: &Array2<f64>, cfg: &DebiasConfig, mode: ScoreMode) -> Result<Array2<f64>, DebiasError> {
        let mut out = Array2::zeros(e_images.raw_dim());
        if mode == ScoreMode::Baseline {
            return Ok(out);
        }
        for (i, row) in e_images.rows().into_iter().enumerate() {
            let o = self.infer(row, cfg, mode)?;
            let mut dst = out.row_mut(i);
            dst += &ArrayView1::from(o.e_ing.as_slice());
            dst += &ArrayView1::from(o.e_act.as_slice());
        }
        Ok(out)
    }

    /// Differentiable forward pass for training.
    pub fn forward(&self, e_i: ArrayView1<f64>, cfg: &DebiasConfig, mode: ScoreMode) -> DebiasTrace {
        let d = e_i.len();
        let cls = self.classifier.forward(e_i);
        let ingredients = select_ingredients(cls.probs.clone(), cfg.threshold, cfg.fallback);
        let mut e_ing = Array1::zeros(d);
        if mode.uses_ingredients() {
            for (&l, &w) in ingredients.selected.iter().zip(&ingredients.weights) {
                e_ing.scaled_add(w, &self.ingredients.matrix().row(l));
            }
        }
        let mut gens = Vec::new();
        let mut e_act_k = Vec::new();
        let mut e_act = Array1::zeros(d);
        if mode.uses_actions() {
            for (&k, &w) in ingredients.selected.iter().zip(&ingredients.weights) {
                let e_k = self.ingredients.matrix().row(k);
                let dec = self.generator.decode(e_i, e_k);
                let cache = self.generator.forward(e_i, e_k, &dec.actions[..dec.actions.len() - 1]);
                let mut v = Array1::zeros(d);
                for (a, wa) in action_weights(&dec.actions, &cache.probs) {
                    v.scaled_add(wa, &self.actions.matrix().row(a));
                }
                e_act.scaled_add(w, &v);
                e_act_k.push(v);
                gens.push((cache, dec.actions));
            }
        }
        let offset = &e_ing + &e_act;
        DebiasTrace {
            cls,
            ingredients,
            gens,
            e_act_k,
            e_ing,
            e_act,
            mode,
            offset,
        }
    }

    /// Back-propagates `g`, the gradient with respect to the trace's offset,
    /// plus any extra classifier logit gradient. Returns the gradient with
    /// respect to the image embedding.
    pub fn backward(
        &self,
        trace: &DebiasTrace,
        g: ArrayView1<f64>,
        extra_logits: Option<&Array1<f64>>,
        grads: &mut DebiasGrads,
    ) -> Array1<f64> {
        let ing = &trace.ingredients;
        let mass = ing.selected_mass;
        let mut d_probs = Array1::zeros(ing.probs.len());
        let mut d_e = Array1::zeros(g.len());
        if trace.mode.uses_ingredients() && mass > 0.0 {
            let base = g.dot(&trace.e_ing);
            for &l in &ing.selected {
                d_probs[l] += (g.dot(&self.ingredients.matrix().row(l)) - base) / mass;
            }
        }
        if trace.mode.uses_actions() {
            let base = g.dot(&trace.e_act);
            for (j, &k) in ing.selected.iter().enumerate() {
                let g_k = g.dot(&trace.e_act_k[j]);
                if mass > 0.0 {
                    d_probs[k] += (g_k - base) / mass;
                }
                let (cache, actions) = &trace.gens[j];
                let n = actions.len();
                let chosen: f64 = actions.iter().enumerate().map(|(t, &a)| cache.probs[[t, a]]).sum();
                let mut d_logits = Array2::zeros(cache.probs.raw_dim());
                for (t, &a) in actions.iter().enumerate() {
                    let dp = ing.weights[j] * (g.dot(&self.actions.matrix().row(a)) - g_k) / chosen;
                    let pa = cache.probs[[t, a]];
                    let mut row = d_logits.row_mut(t);
                    row.scaled_add(-dp * pa, &cache.probs.row(t));
                    row[a] += dp * pa;
                }
                debug_assert_eq!(d_logits.nrows(), n);
                d_e += &self.generator.backward(cache, &d_logits, &mut grads.generator);
            }
        }
        let mut d_logits = &d_probs * &trace.cls.probs.mapv(|p| p * (1.0 - p));
        if let Some(extra) = extra_logits {
            d_logits += extra;
        }
        if trace.mode.uses_classifier() {
            d_e += &self.classifier.backward(&trace.cls, d_logits.view(), &mut grads.classifier);
        }
        d_e
    }

    /// Gold ingredient vector and action sequences restricted to the
    /// dictionaries; labels outside them carry no supervision.
    pub fn targets(&self, recipe: &RecipeRecord) -> DebiasTargets {
        let mut ingredients = vec![false; self.ingredients.size()];
        let mut sequences = Vec::new();
        for label in &recipe.ingredients {
            let Some(k) = self.ingredients.index_of(label) else {
                continue;
            };
            ingredients[k] = true;
            let acts: Vec<usize> = recipe
                .actions_per_ingredient
                .get(label)
                .map(|seq| seq.iter().filter_map(|a| self.actions.index_of(a)).collect())
                .unwrap_or_default();
            if !acts.is_empty() {
                sequences.push((k, acts));
            }
        }
        DebiasTargets { ingredients, sequences }
    }

    /// Asymmetric classification loss and its logit gradient.
    pub fn classification_loss(
        &self,
        probs: &Array1<f64>,
        gold: &[bool],
        cfg: &DebiasConfig,
    ) -> Result<(f64, Array1<f64>), DebiasError> {
        let loss = asymmetric_loss(probs.view(), gold, cfg.gamma_plus, cfg.gamma_minus)?;
        let dp = asymmetric_loss_grad(probs.view(), gold, cfg.gamma_plus, cfg.gamma_minus)?;
        let d_logits = Array1::from_iter(dp.iter().zip(probs).map(|(g, &p)| g * p * (1.0 - p)));
        Ok((loss, d_logits))
    }

    /// Teacher-forced generation loss over gold sequences. Gradients scaled
    /// by `scale` are accumulated into `grads`; returns the unscaled loss
    /// and the scaled gradient with respect to the image embedding.
    pub fn generation_step(
        &self,
        e_i: ArrayView1<f64>,
        sequences: &[(usize, Vec<usize>)],
        scale: f64,
        grads: &mut DebiasGrads,
    ) -> Result<(f64, Array1<f64>), DebiasError> {
        let mut d_e = Array1::zeros(e_i.len());
        if sequences.is_empty() {
            return Ok((0.0, d_e));
        }
        let mut caches = Vec::with_capacity(sequences.len());
        let mut gold = Vec::with_capacity(sequences.len());
        for (k, acts) in sequences {
            if let Some(&bad) = acts.iter().find(|&&a| a >= self.generator.num_actions()) {
                return Err(DebiasError::GoldOutOfVocabulary(format!("#{bad}")));
            }
            let targets = self.generator.targets(acts);
            let cache = self
                .generator
                .forward(e_i, self.ingredients.matrix().row(*k), &targets[..targets.len() - 1]);
            caches.push(cache);
            gold.push(targets);
        }
        let tables: Vec<Array2<f64>> = caches.iter().map(|c| c.probs.clone()).collect();
        let loss = generation_loss(&tables, &gold)?;
        if scale != 0.0 {
            for (cache, targets) in caches.iter().zip(&gold) {
                let d_logits = generation_loss_logit_grad(&cache.probs, targets, gold.len()) * scale;
                d_e += &self.generator.backward(cache, &d_logits, &mut grads.generator);
            }
        }
        Ok((loss, d_e))
    }

    /// Maps a gold action sequence given as labels to generator indices.
    pub fn encode_gold(&self, actions: &[String]) -> Result<Vec<usize>, DebiasError> {
        actions
            .iter()
            .map(|a| {
                self.actions
                    .index_of(a)
                    .ok_or_else(|| DebiasError::GoldOutOfVocabulary(a.clone()))
            })
            .collect()
    }
}

/// Writes every culture's classifier and generator into one `debias-v1`
/// container. Dictionaries are stored separately.
pub fn save_debias(
    modules: &BTreeMap<CultureTag, CultureDebias>,
    cfg: &DebiasConfig,
    w: impl Write,
) -> Result<(), DebiasError> {
    let mut file = TensorFile::new(DEBIAS_FORMAT);
    let cfg_value = serde_json::to_value(cfg).map_err(|e| DebiasError::Meta(e.to_string()))?;
    file.meta.insert("config".into(), cfg_value);
    file.meta.insert("threshold".into(), cfg.threshold.into());
    file.meta.insert("t_max".into(), cfg.t_max.into());
    let cultures: Vec<&str> = modules.keys().map(|c| c.as_str()).collect();
    file.meta.insert("cultures".into(), serde_json::json!(cultures));
    for (culture, m) in modules {
        file.insert_module(&format!("{culture}.classifier"), &m.classifier);
        file.insert_module(&format!("{culture}.generator"), &m.generator);
    }
    file.write_to(w)?;
    Ok(())
}

/// Restores modules saved by [`save_debias`] around the given dictionaries.
pub fn load_debias(
    r: impl Read,
    mut dictionaries: BTreeMap<CultureTag, (LabelDictionary, LabelDictionary)>,
) -> Result<(DebiasConfig, BTreeMap<CultureTag, CultureDebias>), DebiasError> {
    let file = TensorFile::read_from(r, DEBIAS_FORMAT)?;
    let cfg: DebiasConfig = serde_json::from_value(
        file.meta
            .get("config")
            .cloned()
            .ok_or_else(|| DebiasError::Meta("missing `config`".into()))?,
    )
    .map_err(|e| DebiasError::Meta(e.to_string()))?;
    let cultures: Vec<CultureTag> = serde_json::from_value(
        file.meta
            .get("cultures")
            .cloned()
            .ok_or_else(|| DebiasError::Meta("missing `cultures`".into()))?,
    )
    .map_err(|e| DebiasError::Meta(e.to_string()))?;
    let mut modules = BTreeMap::new();
    for culture in cultures {
        let (ing, act) = dictionaries
            .remove(&culture)
            .ok_or_else(|| DebiasError::MissingCulture(culture.to_string()))?;
        let mut m = CultureDebias::init(ing, act, &cfg, 0);
        file.restore_module(&format!("{culture}.classifier"), &mut m.classifier)?;
        file.restore_module(&format!("{culture}.generator"), &mut m.generator)?;
        modules.insert(culture, m);
    }
    Ok((cfg, modules))
}

/// Selected-label weights as a single vector over the dictionary; used when
/// reporting predictions.
pub fn dense_weights(pred: &IngredientPrediction) -> Array1<f64> {
    let mut w = Array1::zeros(pred.probs.len());
    for (&i, &x) in pred.selected.iter().zip(&pred.weights) {
        w[i] = x;
    }
    w
}
