//! Seeded generator for corpora whose image features under-represent
//! low-visibility ingredients and cooking actions.
//!
//! Every label owns a random signature direction in feature space. An image
//! is the sum of the signatures of its recipe's ingredients and action
//! occurrences, each scaled by the label's visibility, plus Gaussian noise.
//! The recipe side always carries every label in full.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::record::{CultureTag, ImageRecord, Pair, RecipeRecord, Sections};
use super::CorpusError;
use crate::dictionaries::LabelKind;
use crate::tensor::standard_normal;

/// Splits a label pool into a low-visibility share and a high-visibility
/// remainder, each drawn uniformly from its band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilityBands {
    pub low_fraction: f64,
    pub low: [f64; 2],
    pub high: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub cultures: Vec<String>,
    /// Pairs generated per culture.
    pub n_pairs: usize,
    pub ingredient_vocab: usize,
    pub action_vocab: usize,
    pub ingredient_overlap: f64,
    pub action_overlap: f64,
    pub ingredient_visibility: VisibilityBands,
    /// Low band models preservative actions, high band transformative ones.
    pub action_visibility: VisibilityBands,
    pub visibility_overrides: BTreeMap<String, f64>,
    pub noise_sigma: f64,
    pub feature_dim: usize,
    pub dishes_per_culture: usize,
    pub core_ingredients: usize,
    pub min_ingredients: usize,
    pub max_ingredients: usize,
    pub max_actions: usize,
    /// Zipf exponent of label popularity within a culture.
    pub popularity_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            cultures: ["Indonesia", "Malaysia", "Thailand", "Vietnam", "India"]
                .map(String::from)
                .to_vec(),
            n_pairs: 2000,
            ingredient_vocab: 120,
            action_vocab: 40,
            ingredient_overlap: 0.3,
            action_overlap: 0.5,
            ingredient_visibility: VisibilityBands {
                low_fraction: 0.35,
                low: [0.0, 0.2],
                high: [0.6, 1.0],
            },
            action_visibility: VisibilityBands {
                low_fraction: 0.5,
                low: [0.0, 0.15],
                high: [0.5, 0.9],
            },
            visibility_overrides: BTreeMap::new(),
            noise_sigma: 0.15,
            feature_dim: 64,
            dishes_per_culture: 40,
            core_ingredients: 4,
            min_ingredients: 5,
            max_ingredients: 9,
            max_actions: 4,
            popularity_exponent: 0.8,
            seed: 7,
        }
    }
}

fn config_err(field: &str, reason: impl Into<String>) -> CorpusError {
    CorpusError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.cultures.is_empty() {
            return Err(config_err("cultures", "at least one culture required"));
        }
        if self.cultures.iter().collect::<BTreeSet<_>>().len() != self.cultures.len() {
            return Err(config_err("cultures", "duplicate culture"));
        }
        for (field, v) in [
            ("ingredient_vocab", self.ingredient_vocab),
            ("action_vocab", self.action_vocab),
            ("feature_dim", self.feature_dim),
            ("dishes_per_culture", self.dishes_per_culture),
            ("max_actions", self.max_actions),
            ("min_ingredients", self.min_ingredients),
        ] {
            if v == 0 {
                return Err(config_err(field, "must be positive"));
            }
        }
        for (field, v) in [
            ("ingredient_overlap", self.ingredient_overlap),
            ("action_overlap", self.action_overlap),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(field, format!("{v} is outside [0, 1]")));
            }
        }
        for (field, b) in [
            ("ingredient_visibility", &self.ingredient_visibility),
            ("action_visibility", &self.action_visibility),
        ] {
            let in_unit = |x: f64| (0.0..=1.0).contains(&x);
            if !in_unit(b.low_fraction)
                || !b.low.iter().chain(&b.high).all(|&x| in_unit(x))
                || b.low[0] > b.low[1]
                || b.high[0] > b.high[1]
            {
                return Err(config_err(field, "fractions and bands must lie in [0, 1] with lo <= hi"));
            }
        }
        if let Some((label, v)) = self
            .visibility_overrides
            .iter()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(config_err("visibility_overrides", format!("`{label}` = {v} is outside [0, 1]")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(config_err("noise_sigma", "must be finite and >= 0"));
        }
        if self.max_ingredients < self.min_ingredients {
            return Err(config_err("max_ingredients", "smaller than min_ingredients"));
        }
        if self.max_ingredients > self.ingredient_vocab {
            return Err(config_err("max_ingredients", "exceeds ingredient_vocab"));
        }
        if self.core_ingredients > self.max_ingredients {
            return Err(config_err("core_ingredients", "exceeds max_ingredients"));
        }
        if !(self.popularity_exponent >= 0.0) {
            return Err(config_err("popularity_exponent", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionClass {
    Transformative,
    Preservative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelInfo {
    pub kind: LabelKind,
    pub visibility: f64,
    /// Only set for actions.
    pub class: Option<ActionClass>,
    pub signature: Vec<f64>,
}

/// What the generator drew for one pair, before any formatting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawLog {
    pub id: String,
    pub dish: String,
    pub ingredients: Vec<String>,
    pub actions: Vec<(String, Vec<String>)>,
}

impl DrawLog {
    /// Multiset of every drawn label (ingredients once, actions per occurrence).
    pub fn label_multiset(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for l in self
            .ingredients
            .iter()
            .chain(self.actions.iter().flat_map(|(_, s)| s))
        {
            *out.entry(l.clone()).or_insert(0) += 1;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub pairs: Vec<Pair>,
    pub draw_log: Vec<DrawLog>,
    pub labels: BTreeMap<String, LabelInfo>,
    /// Per culture, per kind: the culture's label vocabulary.
    pub vocabularies: BTreeMap<String, (Vec<String>, Vec<String>)>,
    pub dishes: BTreeMap<String, Vec<String>>,
}

impl SyntheticCorpus {
    pub fn vocabulary(&self, culture: &str, kind: LabelKind) -> &[String] {
        let (ing, act) = &self.vocabularies[culture];
        match kind {
            LabelKind::Ingredient => ing,
            LabelKind::Action => act,
        }
    }

    /// Noise-free image features of a recipe under this corpus' signatures.
    pub fn render_clean(&self, recipe: &RecipeRecord) -> Vec<f64> {
        let dim = self.labels.values().next().map_or(0, |l| l.signature.len());
        let mut out = vec![0.0; dim];
        for l in recipe.ingredients.iter().chain(recipe.action_occurrences()) {
            let info = &self.labels[l];
            for (o, s) in out.iter_mut().zip(&info.signature) {
                *o += info.visibility * s;
            }
        }
        out
    }
}

/// Multiset of labels carried by a recipe record.
pub fn recipe_label_multiset(recipe: &RecipeRecord) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for l in recipe.ingredients.iter().chain(recipe.action_occurrences()) {
        *out.entry(l.clone()).or_insert(0) += 1;
    }
    out
}

const SYLLABLES: [&str; 24] = [
    "ka", "lu", "mi", "ba", "so", "ren", "da", "pa", "ti", "nga", "ro", "chu", "me", "sa", "tam", "goi",
    "la", "ko", "ran", "bi", "pho", "dal", "ke", "nu",
];

const MODIFIERS: [&str; 8] = [
    "spicy", "homestyle", "quick", "classic", "easy", "special", "simple", "village",
];

fn culture_code(culture: &str) -> String {
    culture
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_lowercase()
}

struct Pool {
    shared: Vec<String>,
    own: BTreeMap<String, Vec<String>>,
}

fn make_pool(prefix: &str, cultures: &[String], vocab: usize, overlap: f64) -> Pool {
    let n_shared = ((vocab as f64) * overlap).round() as usize;
    let shared = (0..n_shared).map(|i| format!("{prefix}_sh_{i:03}")).collect();
    let own = cultures
        .iter()
        .map(|c| {
            let code = culture_code(c);
            let labels = (0..vocab - n_shared)
                .map(|i| format!("{prefix}_{code}_{i:03}"))
                .collect();
            (c.clone(), labels)
        })
        .collect();
    Pool { shared, own }
}

fn assign_visibility(
    labels: &[String],
    bands: &VisibilityBands,
    kind: LabelKind,
    dim: usize,
    rng: &mut ChaCha8Rng,
    out: &mut BTreeMap<String, LabelInfo>,
) {
    let n_low = ((labels.len() as f64) * bands.low_fraction).round() as usize;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let mut is_low = vec![false; labels.len()];
    for &i in order.iter().take(n_low) {
        is_low[i] = true;
    }
    let sig_scale = 1.0 / (dim as f64).sqrt();
    for (label, low) in labels.iter().zip(is_low) {
        let band = if low { bands.low } else { bands.high };
        let visibility = band[0] + (band[1] - band[0]) * rng.random::<f64>();
        let signature = (0..dim).map(|_| standard_normal(rng) * sig_scale).collect();
        let class = match kind {
            LabelKind::Action if low => Some(ActionClass::Preservative),
            LabelKind::Action => Some(ActionClass::Transformative),
            LabelKind::Ingredient => None,
        };
        out.insert(
            label.clone(),
            LabelInfo {
                kind,
                visibility,
                class,
                signature,
            },
        );
    }
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(exponent)).collect()
}

struct CultureModel {
    code: String,
    ingredients: Vec<String>,
    ingredient_pop: WeightedIndex<f64>,
    actions: Vec<String>,
    action_pop: WeightedIndex<f64>,
    preferred_actions: BTreeMap<String, Vec<String>>,
    dishes: Vec<(String, Vec<String>)>,
}

fn dish_name(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    loop {
        let n = rng.random_range(2..=3);
        let name: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if taken.insert(name.clone()) {
            return name;
        }
    }
}

fn popular_distinct(
    rng: &mut ChaCha8Rng,
    labels: &[String],
    pop: &WeightedIndex<f64>,
    count: usize,
    already: &mut Vec<String>,
) {
    while already.len() < count {
        let l = &labels[pop.sample(rng)];
        if !already.contains(l) {
            already.push(l.clone());
        }
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticCorpus, CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ing_pool = make_pool("ing", &config.cultures, config.ingredient_vocab, config.ingredient_overlap);
    let act_pool = make_pool("act", &config.cultures, config.action_vocab, config.action_overlap);

    let mut labels = BTreeMap::new();
    for (pool, kind, bands) in [
        (&ing_pool, LabelKind::Ingredient, &config.ingredient_visibility),
        (&act_pool, LabelKind::Action, &config.action_visibility),
    ] {
        assign_visibility(&pool.shared, bands, kind, config.feature_dim, &mut rng, &mut labels);
        for own in pool.own.values() {
            assign_visibility(own, bands, kind, config.feature_dim, &mut rng, &mut labels);
        }
    }
    for (label, &v) in &config.visibility_overrides {
        match labels.get_mut(label) {
            Some(info) => info.visibility = v,
            None => return Err(config_err("visibility_overrides", format!("unknown label `{label}`"))),
        }
    }

    let mut taken_names = BTreeSet::new();
    let mut models = Vec::with_capacity(config.cultures.len());
    let mut vocabularies = BTreeMap::new();
    for culture in &config.cultures {
        let mut ingredients: Vec<String> = ing_pool.shared.iter().chain(&ing_pool.own[culture]).cloned().collect();
        let mut actions: Vec<String> = act_pool.shared.iter().chain(&act_pool.own[culture]).cloned().collect();
        vocabularies.insert(culture.clone(), (ingredients.clone(), actions.clone()));
        // popularity rank order
        ingredients.shuffle(&mut rng);
        actions.shuffle(&mut rng);
        let ingredient_pop = WeightedIndex::new(zipf_weights(ingredients.len(), config.popularity_exponent))
            .expect("non-empty vocabulary");
        let action_pop = WeightedIndex::new(zipf_weights(actions.len(), config.popularity_exponent))
            .expect("non-empty vocabulary");
        let n_pref = 3.min(actions.len());
        let mut preferred_actions = BTreeMap::new();
        for ing in &ingredients {
            let mut pref = Vec::new();
            popular_distinct(&mut rng, &actions, &action_pop, n_pref, &mut pref);
            preferred_actions.insert(ing.clone(), pref);
        }
        let mut dishes = Vec::with_capacity(config.dishes_per_culture);
        for _ in 0..config.dishes_per_culture {
            let name = dish_name(&mut rng, &mut taken_names);
            let mut core = Vec::new();
            popular_distinct(&mut rng, &ingredients, &ingredient_pop, config.core_ingredients, &mut core);
            dishes.push((name, core));
        }
        models.push(CultureModel {
            code: culture_code(culture),
            ingredients,
            ingredient_pop,
            actions,
            action_pop,
            preferred_actions,
            dishes,
        });
    }

    let mut pairs = Vec::with_capacity(config.n_pairs * config.cultures.len());
    let mut draw_log = Vec::with_capacity(pairs.capacity());
    for (culture, model) in config.cultures.iter().zip(&models) {
        for n in 0..config.n_pairs {
            let id = format!("{}-{n:05}", model.code);
            let (dish, core) = model.dishes.choose(&mut rng).unwrap();
            let mut ingredients: Vec<String> = core.iter().filter(|_| rng.random::<f64>() < 0.85).cloned().collect();
            if ingredients.is_empty() {
                ingredients.push(core[0].clone());
            }
            let target = rng
                .random_range(config.min_ingredients..=config.max_ingredients)
                .max(ingredients.len());
            popular_distinct(&mut rng, &model.ingredients, &model.ingredient_pop, target, &mut ingredients);

            let mut actions = Vec::with_capacity(ingredients.len());
            for ing in &ingredients {
                let len = rng.random_range(1..=config.max_actions);
                let pref = &model.preferred_actions[ing];
                let seq: Vec<String> = (0..len)
                    .map(|_| {
                        if rng.random::<f64>() < 0.75 {
                            pref.choose(&mut rng).unwrap().clone()
                        } else {
                            model.actions[model.action_pop.sample(&mut rng)].clone()
                        }
                    })
                    .collect();
                actions.push((ing.clone(), seq));
            }

            let title = if rng.random::<f64>() < 0.5 {
                format!("{} {dish}", MODIFIERS.choose(&mut rng).unwrap())
            } else {
                dish.clone()
            };
            let recipe = RecipeRecord {
                id: id.clone(),
                title: title.clone(),
                culture: CultureTag::new(culture.clone()),
                ingredients: ingredients.clone(),
                actions_per_ingredient: actions.iter().cloned().collect(),
                title_keywords: [dish.clone()].into(),
                sections: Sections {
                    title_text: vec![title],
                    ingredient_lines: ingredients.clone(),
                    instruction_lines: actions
                        .iter()
                        .flat_map(|(ing, seq)| seq.iter().map(move |a| format!("{a} {ing}")))
                        .collect(),
                },
            };

            let mut features = vec![0.0; config.feature_dim];
            for l in recipe.ingredients.iter().chain(recipe.action_occurrences()) {
                let info = &labels[l];
                for (f, s) in features.iter_mut().zip(&info.signature) {
                    *f += info.visibility * s;
                }
            }
            if config.noise_sigma > 0.0 {
                for f in features.iter_mut() {
                    *f += config.noise_sigma * standard_normal(&mut rng);
                }
            }
            draw_log.push(DrawLog {
                id: id.clone(),
                dish: dish.clone(),
                ingredients,
                actions,
            });
            pairs.push(Pair {
                image: ImageRecord {
                    id: format!("{id}/image"),
                    pair_id: id,
                    features,
                },
                recipe,
            });
        }
    }
    let dishes = config
        .cultures
        .iter()
        .zip(&models)
        .map(|(c, m)| (c.clone(), m.dishes.iter().map(|(n, _)| n.clone()).collect()))
        .collect();
    Ok(SyntheticCorpus {
        pairs,
        draw_log,
        labels,
        vocabularies,
        dishes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::record::{CorpusSchema, CultureSet};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            cultures: vec!["A".into(), "B".into()],
            n_pairs: 50,
            ingredient_vocab: 100,
            action_vocab: 20,
            ingredient_overlap: 0.39,
            feature_dim: 16,
            dishes_per_culture: 5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.pairs, b.pairs);
        let mut other = small();
        other.seed += 1;
        assert_ne!(generate_synthetic(&other).unwrap().pairs, a.pairs);
    }

    #[test]
    fn records_satisfy_invariants() {
        let cfg = small();
        let c = generate_synthetic(&cfg).unwrap();
        let schema = CorpusSchema {
            cultures: CultureSet::new(cfg.cultures.clone()),
            max_actions: cfg.max_actions,
        };
        for p in &c.pairs {
            p.recipe.validate(&schema).unwrap();
            assert_eq!(p.image.features.len(), cfg.feature_dim);
        }
        assert_eq!(c.pairs.len(), 100);
    }

    #[test]
    fn full_visibility_without_noise_reconstructs_signatures() {
        let mut cfg = small();
        cfg.noise_sigma = 0.0;
        cfg.ingredient_visibility = VisibilityBands {
            low_fraction: 0.0,
            low: [1.0, 1.0],
            high: [1.0, 1.0],
        };
        cfg.action_visibility = cfg.ingredient_visibility;
        let c = generate_synthetic(&cfg).unwrap();
        for p in &c.pairs {
            let mut expect = vec![0.0; cfg.feature_dim];
            for l in p.recipe.ingredients.iter().chain(p.recipe.action_occurrences()) {
                for (e, s) in expect.iter_mut().zip(&c.labels[l].signature) {
                    *e += s;
                }
            }
            for (x, y) in p.image.features.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invisible_ingredient_leaves_no_trace() {
        let mut cfg = small();
        cfg.noise_sigma = 0.0;
        cfg.visibility_overrides.insert("ing_a_010".into(), 0.0);
        let c = generate_synthetic(&cfg).unwrap();
        let pair = c
            .pairs
            .iter()
            .find(|p| !p.recipe.ingredients.contains(&"ing_a_010".to_string()))
            .unwrap();
        let base = pair.recipe.clone();
        let mut with = base.clone();
        with.ingredients.push("ing_a_010".into());
        assert_eq!(c.render_clean(&base), c.render_clean(&with));
        assert_eq!(c.render_clean(&base), pair.image.features);
    }

    #[test]
    fn overlap_fraction_matches_within_one_label() {
        let cfg = small();
        let c = generate_synthetic(&cfg).unwrap();
        let a: BTreeSet<_> = c.vocabulary("A", LabelKind::Ingredient).iter().collect();
        let b: BTreeSet<_> = c.vocabulary("B", LabelKind::Ingredient).iter().collect();
        let shared = a.intersection(&b).count() as f64;
        let frac = shared / cfg.ingredient_vocab as f64;
        assert!((frac - 0.39).abs() <= 1.0 / cfg.ingredient_vocab as f64, "{frac}");
    }

    #[test]
    fn draw_log_round_trips_label_multiset() {
        let c = generate_synthetic(&small()).unwrap();
        for (p, log) in c.pairs.iter().zip(&c.draw_log) {
            assert_eq!(p.recipe.id, log.id);
            assert_eq!(recipe_label_multiset(&p.recipe), log.label_multiset());
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small();
        cfg.ingredient_vocab = 0;
        assert!(matches!(generate_synthetic(&cfg), Err(CorpusError::Config { .. })));
        let mut cfg = small();
        cfg.action_overlap = 1.5;
        let err = generate_synthetic(&cfg).unwrap_err();
        assert!(err.to_string().contains("action_overlap"));
    }

    #[test]
    fn low_visibility_share_is_honored() {
        let c = generate_synthetic(&SyntheticConfig::default()).unwrap();
        for culture in c.vocabularies.keys() {
            let vocab = c.vocabulary(culture, LabelKind::Ingredient);
            let low = vocab.iter().filter(|l| c.labels[*l].visibility <= 0.2).count();
            assert!(low as f64 >= 0.3 * vocab.len() as f64);
        }
    }
}
