//! Three-step training: encoder pre-training with the triplet loss, frozen
//! dictionary construction, then end-to-end training of encoders and the
//! per-culture debiasing modules.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scoring::{score_matrix, triplet_loss};
use super::{RetrievalError, TrainConfig};
use crate::corpus::{Corpus, CorpusSplit, CultureTag, Pair};
use crate::debias::{CultureDebias, DebiasGrads, DebiasTargets, ScoreMode};
use crate::dictionaries::{build_dictionary, LabelDictionary, LabelKind};
use crate::encoders::{EncoderParams, RecipeTokens, Vocabulary};
use crate::eval::{row_ranks, RankMetrics};
use crate::tensor::{Adam, Tensors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Initialized,
    Pretrained,
    DictionariesBuilt,
    Finetuned,
}

/// Mean loss terms over an epoch or a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub triplet: f64,
    pub cls: f64,
    pub gen: f64,
}

impl LossComponents {
    pub fn total(&self, lambda_cls: f64, lambda_gen: f64) -> f64 {
        self.triplet + lambda_cls * self.cls + lambda_gen * self.gen
    }
}

/// One row of the per-epoch metric log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based count over all training epochs.
    pub epoch: usize,
    /// 1 for encoder pre-training, 3 for end-to-end training.
    pub step: u8,
    pub triplet: f64,
    pub cls: f64,
    pub gen: f64,
    pub total: f64,
    pub val_med_r: Option<f64>,
    pub val_r1: Option<f64>,
}

/// Encoder inputs for a fixed list of pairs.
pub struct PairData<'a> {
    pub pairs: Vec<&'a Pair>,
    pub features: Array2<f64>,
    pub tokens: Vec<RecipeTokens>,
}

impl<'a> PairData<'a> {
    pub fn new(encoder: &EncoderParams, pairs: Vec<&'a Pair>) -> Result<Self, RetrievalError> {
        let dim = encoder.config.raw_dim;
        let mut features = Array2::zeros((pairs.len(), dim));
        let mut tokens = Vec::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            if p.image.features.len() != dim {
                return Err(crate::encoders::EncoderError::Dimension {
                    expected: dim,
                    actual: p.image.features.len(),
                }
                .into());
            }
            features.row_mut(i).assign(&ndarray::ArrayView1::from(&p.image.features));
            tokens.push(encoder.tokens(&p.recipe)?);
        }
        Ok(Self { pairs, features, tokens })
    }

    pub fn from_ids(encoder: &EncoderParams, corpus: &'a Corpus, ids: &[String]) -> Result<Self, RetrievalError> {
        Self::new(encoder, corpus.resolve_all(ids)?)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn cultures(&self) -> Vec<&CultureTag> {
        self.pairs.iter().map(|p| &p.recipe.culture).collect()
    }

    /// Rows `rows` as a new table.
    pub fn subset(&self, rows: &[usize]) -> PairData<'a> {
        PairData {
            pairs: rows.iter().map(|&r| self.pairs[r]).collect(),
            features: self.features.select(Axis(0), rows),
            tokens: rows.iter().map(|&r| self.tokens[r].clone()).collect(),
        }
    }
}

/// Parameters, frozen dictionaries and optimizer state of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoder: EncoderParams,
    /// Per-culture debiasing modules; empty before dictionaries are built.
    pub debias: BTreeMap<CultureTag, CultureDebias>,
    pub adam: Adam,
    pub stage: Stage,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    /// Fresh encoders over the label vocabulary of the whole corpus.
    pub fn new(config: TrainConfig, corpus: &Corpus) -> Result<Self, RetrievalError> {
        config.validate()?;
        let vocab = Vocabulary::from_records(corpus.pairs().iter().map(|p| &p.recipe));
        Ok(Self {
            encoder: EncoderParams::init(config.encoder, vocab, config.seed),
            debias: BTreeMap::new(),
            adam: Adam::new(config.adam),
            stage: Stage::Initialized,
            step: 0,
            log: Vec::new(),
            config,
        })
    }

    /// Step 1: encoders only, triplet loss with the plain score.
    pub fn pretrain(&mut self, corpus: &Corpus, split: &CorpusSplit) -> Result<(), RetrievalError> {
        let train = PairData::from_ids(&self.encoder, corpus, &split.train)?;
        let val = self.val_data(corpus, split)?;
        for _ in 0..self.config.schedule.pretrain_epochs {
            self.run_epoch(&train, None, val.as_ref(), 1)?;
        }
        self.stage = Stage::Pretrained;
        Ok(())
    }

    /// Step 2: per-culture dictionaries from the current recipe encoder,
    /// and freshly initialized classifiers and generators around them.
    pub fn build_dictionaries(&mut self, corpus: &Corpus, split: &CorpusSplit) -> Result<(), RetrievalError> {
        let train = corpus.resolve_all(&split.train)?;
        let mut by_culture: BTreeMap<&CultureTag, Vec<&crate::corpus::RecipeRecord>> = BTreeMap::new();
        for p in &train {
            by_culture.entry(&p.recipe.culture).or_default().push(&p.recipe);
        }
        self.debias.clear();
        for (i, (culture, records)) in by_culture.into_iter().enumerate() {
            let build = |kind, size| {
                build_dictionary(&records, kind, size, &self.encoder).map_err(|source| RetrievalError::Dictionary {
                    culture: culture.to_string(),
                    kind,
                    source,
                })
            };
            let ing = build(LabelKind::Ingredient, self.config.ingredient_dict_size)?;
            let act = build(LabelKind::Action, self.config.action_dict_size)?;
            info!("{culture}: {} ingredient and {} action entries", ing.size(), act.size());
            let seed = self.config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1);
            self.debias
                .insert(culture.clone(), CultureDebias::init(ing, act, &self.config.debias, seed));
        }
        self.stage = Stage::DictionariesBuilt;
        Ok(())
    }

    /// Step 3: end-to-end training under the configured mode with the
    /// dictionaries held fixed.
    pub fn finetune(&mut self, corpus: &Corpus, split: &CorpusSplit) -> Result<(), RetrievalError> {
        let mode = self.config.scoring.mode;
        let train = PairData::from_ids(&self.encoder, corpus, &split.train)?;
        let val = self.val_data(corpus, split)?;
        let targets = if mode.uses_classifier() {
            Some(self.targets(&train)?)
        } else {
            None
        };
        for _ in 0..self.config.schedule.finetune_epochs {
            self.run_epoch(&train, targets.as_deref(), val.as_ref(), 3)?;
        }
        self.stage = Stage::Finetuned;
        Ok(())
    }

    fn val_data<'a>(&self, corpus: &'a Corpus, split: &CorpusSplit) -> Result<Option<PairData<'a>>, RetrievalError> {
        let n = self.config.val_size.min(split.val.len());
        if n < 2 {
            return Ok(None);
        }
        Ok(Some(PairData::from_ids(&self.encoder, corpus, &split.val[..n])?))
    }

    fn targets(&self, data: &PairData) -> Result<Vec<DebiasTargets>, RetrievalError> {
        data.pairs
            .iter()
            .map(|p| Ok(self.module(&p.recipe.culture)?.targets(&p.recipe)))
            .collect()
    }

    pub fn module(&self, culture: &CultureTag) -> Result<&CultureDebias, RetrievalError> {
        self.debias
            .get(culture)
            .ok_or_else(|| crate::debias::DebiasError::MissingCulture(culture.to_string()).into())
    }

    pub fn dictionaries(&self) -> BTreeMap<CultureTag, (&LabelDictionary, &LabelDictionary)> {
        self.debias
            .iter()
            .map(|(c, m)| (c.clone(), (&m.ingredients, &m.actions)))
            .collect()
    }

    fn run_epoch(
        &mut self,
        data: &PairData,
        targets: Option<&[DebiasTargets]>,
        val: Option<&PairData>,
        step: u8,
    ) -> Result<(), RetrievalError> {
        let epoch = self.log.len() + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ ((epoch as u64) << 20) ^ 0x5eed);
        order.shuffle(&mut rng);
        let mode = match step {
            1 => ScoreMode::Baseline,
            _ => self.config.scoring.mode,
        };
        let mut sum = LossComponents::default();
        let mut batches = 0usize;
        for rows in order.chunks(self.config.batch_size) {
            if rows.len() < 2 {
                continue;
            }
            let l = self.train_batch(data, rows, mode, targets)?;
            sum.triplet += l.triplet;
            sum.cls += l.cls;
            sum.gen += l.gen;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let mean = LossComponents {
            triplet: sum.triplet / n,
            cls: sum.cls / n,
            gen: sum.gen / n,
        };
        let (val_med_r, val_r1) = match val {
            Some(v) => {
                let m = self.evaluate_pairs(v, mode)?;
                (Some(m.med_r), Some(m.r1))
            }
            None => (None, None),
        };
        let s = &self.config.scoring;
        let rec = EpochRecord {
            epoch,
            step,
            triplet: mean.triplet,
            cls: mean.cls,
            gen: mean.gen,
            total: mean.total(s.lambda_cls, s.lambda_gen),
            val_med_r,
            val_r1,
        };
        info!(
            "epoch {epoch} (step {step}): loss {:.4} triplet {:.4} cls {:.4} gen {:.4} val medR {:?} R@1 {:?}",
            rec.total, rec.triplet, rec.cls, rec.gen, rec.val_med_r, rec.val_r1
        );
        self.log.push(rec);
        Ok(())
    }

    /// One optimizer step on `rows` of `data`; returns the batch's loss terms.
    fn train_batch(
        &mut self,
        data: &PairData,
        rows: &[usize],
        mode: ScoreMode,
        targets: Option<&[DebiasTargets]>,
    ) -> Result<LossComponents, RetrievalError> {
        let cfg = self.config;
        let b = rows.len();
        let features = data.features.select(Axis(0), rows);
        let toks: Vec<&RecipeTokens> = rows.iter().map(|&r| &data.tokens[r]).collect();
        let img_cache = self.encoder.image.forward(features.view());
        let rec_cache = self.encoder.recipe.forward(&toks);
        let e_i = &img_cache.out;
        let e_r = &rec_cache.out;

        let mut queries = e_i.clone();
        let mut traces = Vec::new();
        if mode.uses_classifier() {
            for (i, &r) in rows.iter().enumerate() {
                let culture = &data.pairs[r].recipe.culture;
                let trace = self.module(culture)?.forward(e_i.row(i), &cfg.debias, mode);
                queries.row_mut(i).scaled_add(1.0, &trace.offset);
                traces.push(trace);
            }
        }
        let scores = score_matrix(&queries, e_r);
        let (triplet, d_scores) = triplet_loss(&scores, cfg.scoring.margin)?;
        let mut d_e_i = d_scores.dot(e_r);
        let d_e_r = d_scores.t().dot(&queries);

        let mut losses = LossComponents {
            triplet,
            ..Default::default()
        };
        let mut grads: BTreeMap<CultureTag, DebiasGrads> = BTreeMap::new();
        if mode.uses_classifier() {
            let targets = targets.ok_or_else(|| RetrievalError::Supervision(format!("mode {mode} needs targets")))?;
            let inv_b = 1.0 / b as f64;
            let mut gen_terms = 0usize;
            let mut positives = 0usize;
            for (i, &r) in rows.iter().enumerate() {
                let culture = &data.pairs[r].recipe.culture;
                let module = self.module(culture)?;
                let g = grads.entry(culture.clone()).or_insert_with(|| module.zero_grads());
                let t = &targets[r];
                let trace = &traces[i];
                positives += t.ingredients.iter().filter(|&&x| x).count();
                let (l_cls, d_cls) = module.classification_loss(&trace.cls.probs, &t.ingredients, &cfg.debias)?;
                losses.cls += l_cls * inv_b;
                let extra = d_cls * (cfg.scoring.lambda_cls * inv_b);
                let grad_row = d_e_i.row(i).to_owned();
                let d = module.backward(trace, grad_row.view(), Some(&extra), g);
                d_e_i.row_mut(i).scaled_add(1.0, &d);
                if mode.uses_actions() && !t.sequences.is_empty() {
                    let (l_gen, d) =
                        module.generation_step(e_i.row(i), &t.sequences, cfg.scoring.lambda_gen * inv_b, g)?;
                    losses.gen += l_gen * inv_b;
                    gen_terms += 1;
                    d_e_i.row_mut(i).scaled_add(1.0, &d);
                }
            }
            if positives == 0 {
                return Err(RetrievalError::Supervision(
                    "no batch recipe has an ingredient in its culture's dictionary".into(),
                ));
            }
            if mode.uses_actions() && gen_terms == 0 {
                return Err(RetrievalError::Supervision(
                    "no batch recipe has an action sequence in its culture's dictionary".into(),
                ));
            }
        }

        let mut g_img = self.encoder.image.zeros_like();
        self.encoder.image.backward(&img_cache, &d_e_i, &mut g_img);
        let mut g_rec = self.encoder.recipe.zeros_like();
        self.encoder.recipe.backward(&toks, &rec_cache, &d_e_r, &mut g_rec);
        if !(g_img.is_finite() && g_rec.is_finite()) {
            return Err(RetrievalError::NonFinite("encoder gradient"));
        }
        self.adam.step("image", &mut self.encoder.image, &g_img);
        self.adam.step("recipe", &mut self.encoder.recipe, &g_rec);
        for (culture, g) in &grads {
            let module = self.debias.get_mut(culture).expect("module exists");
            self.adam.step(&format!("{culture}.classifier"), &mut module.classifier, &g.classifier);
            if mode.uses_actions() {
                self.adam.step(&format!("{culture}.generator"), &mut module.generator, &g.generator);
            }
        }
        self.step += 1;
        debug!("step {}: triplet {:.4}", self.step, triplet);
        Ok(losses)
    }

    /// Loss terms of one batch under `mode`, without updating anything.
    pub fn batch_losses(&self, data: &PairData, rows: &[usize], mode: ScoreMode) -> Result<LossComponents, RetrievalError> {
        let sub = data.subset(rows);
        let e_i = self.embed_images(&sub);
        let e_r = self.embed_recipes(&sub);
        let routes = sub.cultures();
        let queries = self.queries(&e_i, &routes, mode)?;
        let (triplet, _) = triplet_loss(&score_matrix(&queries, &e_r), self.config.scoring.margin)?;
        let mut out = LossComponents {
            triplet,
            ..Default::default()
        };
        if !mode.uses_classifier() {
            return Ok(out);
        }
        let inv_b = 1.0 / rows.len() as f64;
        let mut have_seq = false;
        for (i, p) in sub.pairs.iter().enumerate() {
            let module = self.module(&p.recipe.culture)?;
            let t = module.targets(&p.recipe);
            let probs = module.classifier.probabilities(e_i.row(i));
            out.cls += module.classification_loss(&probs, &t.ingredients, &self.config.debias)?.0 * inv_b;
            if mode.uses_actions() && !t.sequences.is_empty() {
                have_seq = true;
                let mut scratch = module.zero_grads();
                out.gen += module.generation_step(e_i.row(i), &t.sequences, 0.0, &mut scratch)?.0 * inv_b;
            }
        }
        if mode.uses_actions() && !have_seq {
            return Err(RetrievalError::Supervision("no gold action sequences in batch".into()));
        }
        Ok(out)
    }

    pub fn embed_images(&self, data: &PairData) -> Array2<f64> {
        self.encoder.image.forward(data.features.view()).out
    }

    pub fn embed_recipes(&self, data: &PairData) -> Array2<f64> {
        let toks: Vec<&RecipeTokens> = data.tokens.iter().collect();
        self.encoder.recipe.forward(&toks).out
    }

    /// Image embeddings plus the debiasing offsets of the module selected by
    /// each row's route.
    pub fn queries(&self, e_images: &Array2<f64>, routes: &[&CultureTag], mode: ScoreMode) -> Result<Array2<f64>, RetrievalError> {
        let mut q = e_images.clone();
        if mode == ScoreMode::Baseline {
            return Ok(q);
        }
        let mut rows_by_culture: BTreeMap<&CultureTag, Vec<usize>> = BTreeMap::new();
        for (i, c) in routes.iter().enumerate() {
            rows_by_culture.entry(*c).or_default().push(i);
        }
        for (culture, rows) in rows_by_culture {
            let module = self.module(culture)?;
            let offsets = module.offsets(&e_images.select(Axis(0), &rows), &self.config.debias, mode)?;
            for (k, &i) in rows.iter().enumerate() {
                q.row_mut(i).scaled_add(1.0, &offsets.row(k));
            }
        }
        Ok(q)
    }

    /// Image-to-recipe metrics over all rows of `data` with oracle routing.
    pub fn evaluate_pairs(&self, data: &PairData, mode: ScoreMode) -> Result<RankMetrics, RetrievalError> {
        let e_i = self.embed_images(data);
        let e_r = self.embed_recipes(data);
        let q = self.queries(&e_i, &data.cultures(), mode)?;
        Ok(RankMetrics::from_ranks(&row_ranks(&score_matrix(&q, &e_r)))?)
    }

    /// Micro-averaged F1 of the thresholded ingredient classifier against
    /// the in-dictionary gold ingredients, routing by true culture.
    pub fn ingredient_f1(&self, data: &PairData) -> Result<f64, RetrievalError> {
        let e_i = self.embed_images(data);
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (i, p) in data.pairs.iter().enumerate() {
            let m = self.module(&p.recipe.culture)?;
            let pred = m.predict_ingredients(e_i.row(i), self.config.debias.threshold, false);
            for (k, &gold) in m.targets(&p.recipe).ingredients.iter().enumerate() {
                match (pred.selected.binary_search(&k).is_ok(), gold) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
        }
        Ok(2.0 * tp as f64 / (2 * tp + fp + fn_).max(1) as f64)
    }

    /// Cultures with a trained module, in order.
    pub fn cultures(&self) -> BTreeSet<CultureTag> {
        self.debias.keys().cloned().collect()
    }

    /// Classifier probabilities over one culture's dictionary.
    pub fn ingredient_probs(&self, culture: &CultureTag, e_i: &Array1<f64>) -> Result<Array1<f64>, RetrievalError> {
        Ok(self.module(culture)?.classifier.probabilities(e_i.view()))
    }
}

/// Runs all three steps with the configured schedule.
pub fn train(corpus: &Corpus, split: &CorpusSplit, config: TrainConfig) -> Result<TrainState, RetrievalError> {
    let mut state = TrainState::new(config, corpus)?;
    state.pretrain(corpus, split)?;
    state.build_dictionaries(corpus, split)?;
    state.finetune(corpus, split)?;
    Ok(state)
}
