use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{normalize_title, Corpus, CultureTag};
use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitProtocol {
    Standard,
    ZeroShot,
    Multicultural,
}

/// Train and validation shares; the test split takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.15 }
    }
}

impl SplitFractions {
    fn check(&self) -> Result<(), CorpusError> {
        let ok = (0.0..=1.0).contains(&self.train)
            && (0.0..=1.0).contains(&self.val)
            && self.train + self.val <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(CorpusError::Split(format!(
                "fractions train={} val={} must be in [0,1] and sum to at most 1",
                self.train, self.val
            )))
        }
    }

    fn cut(&self, n: usize) -> (usize, usize) {
        let n_train = ((n as f64) * self.train).round() as usize;
        let n_val = ((n as f64) * self.val).round() as usize;
        let n_train = n_train.min(n);
        (n_train, n_val.min(n - n_train))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub protocol: SplitProtocol,
    pub excluded_keywords: BTreeSet<String>,
}

impl CorpusSplit {
    /// Checks pairwise disjointness, id resolution and, for zero-shot splits,
    /// that no train/val record matches an excluded keyword.
    pub fn validate(&self, corpus: &Corpus) -> Result<(), CorpusError> {
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                corpus.resolve(id)?;
                if let Some(prev) = owner.insert(id, name) {
                    return Err(CorpusError::Split(format!(
                        "id `{id}` appears in both {prev} and {name}"
                    )));
                }
            }
        }
        if self.protocol == SplitProtocol::ZeroShot {
            for id in self.train.iter().chain(&self.val) {
                let r = &corpus.resolve(id)?.recipe;
                if let Some(k) = self.excluded_keywords.iter().find(|k| r.matches_keyword(k)) {
                    return Err(CorpusError::Split(format!(
                        "record `{id}` in train/val matches excluded keyword `{k}`"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn shuffled(mut ids: Vec<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    ids.shuffle(rng);
    ids
}

fn cut_into(ids: Vec<String>, fractions: SplitFractions, split: &mut CorpusSplit) {
    let (n_train, n_val) = fractions.cut(ids.len());
    let mut it = ids.into_iter();
    split.train.extend(it.by_ref().take(n_train));
    split.val.extend(it.by_ref().take(n_val));
    split.test.extend(it);
}

fn empty(protocol: SplitProtocol) -> CorpusSplit {
    CorpusSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        protocol,
        excluded_keywords: BTreeSet::new(),
    }
}

/// Seeded random partition of the whole corpus.
pub fn build_standard_split(corpus: &Corpus, fractions: SplitFractions, seed: u64) -> Result<CorpusSplit, CorpusError> {
    fractions.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<String> = corpus.pairs().iter().map(|p| p.id().to_string()).collect();
    let mut split = empty(SplitProtocol::Standard);
    cut_into(shuffled(ids, &mut rng), fractions, &mut split);
    Ok(split)
}

/// Partition stratified by culture; with `dedup_seed`, the test split is
/// deduplicated by title.
pub fn build_multicultural_split(
    corpus: &Corpus,
    fractions: SplitFractions,
    seed: u64,
    dedup_seed: Option<u64>,
) -> Result<CorpusSplit, CorpusError> {
    fractions.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_culture: BTreeMap<&CultureTag, Vec<String>> = BTreeMap::new();
    for p in corpus.pairs() {
        by_culture
            .entry(&p.recipe.culture)
            .or_default()
            .push(p.id().to_string());
    }
    let mut split = empty(SplitProtocol::Multicultural);
    for (_, ids) in by_culture {
        cut_into(shuffled(ids, &mut rng), fractions, &mut split);
    }
    if let Some(s) = dedup_seed {
        split.test = dedup_test_set(&split.test, corpus, s)?;
    }
    Ok(split)
}

/// Moves every record whose title or search keywords contain an excluded
/// keyword into the test split; the rest is partitioned by `fractions`.
pub fn build_zero_shot_split(
    corpus: &Corpus,
    excluded_keywords: &BTreeSet<String>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    fractions.check()?;
    if excluded_keywords.is_empty() {
        return Err(CorpusError::Split("excluded keyword set is empty".into()));
    }
    if let Some(k) = excluded_keywords
        .iter()
        .find(|k| k.is_empty() || k.to_lowercase() != **k)
    {
        return Err(CorpusError::Split(format!(
            "keyword `{k}` must be non-empty and lowercase"
        )));
    }
    let (excluded, kept): (Vec<_>, Vec<_>) = corpus
        .pairs()
        .iter()
        .partition(|p| excluded_keywords.iter().any(|k| p.recipe.matches_keyword(k)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept: Vec<String> = kept.iter().map(|p| p.id().to_string()).collect();
    let mut split = empty(SplitProtocol::ZeroShot);
    split.excluded_keywords = excluded_keywords.clone();
    cut_into(shuffled(kept, &mut rng), fractions, &mut split);
    if split.train.is_empty() {
        return Err(CorpusError::Split(format!(
            "keywords exclude the entire training set ({} of {} records match)",
            excluded.len(),
            corpus.len()
        )));
    }
    split.test.extend(excluded.iter().map(|p| p.id().to_string()));
    Ok(split)
}

/// Keeps one record per group of identical (trimmed, lowercased) titles,
/// chosen uniformly with a seeded generator. Survivors keep input order.
pub fn dedup_test_set(test: &[String], corpus: &Corpus, seed: u64) -> Result<Vec<String>, CorpusError> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of: HashMap<String, usize> = HashMap::new();
    for (i, id) in test.iter().enumerate() {
        let title = normalize_title(&corpus.resolve(id)?.recipe.title);
        let g = *group_of.entry(title).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = HashSet::with_capacity(groups.len());
    for members in &groups {
        let pick = if members.len() == 1 {
            0
        } else {
            rng.random_range(0..members.len())
        };
        keep.insert(members[pick]);
    }
    Ok(test
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, id)| id.clone())
        .collect())
}
