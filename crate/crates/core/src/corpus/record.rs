use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::CorpusError;

/// Cuisine/culture tag of a record, e.g. `Indonesia`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CultureTag(pub String);

impl CultureTag {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CultureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered set of admissible cultures; the position of a culture is its
/// class index for routing and confusion matrices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CultureSet(Vec<CultureTag>);

impl CultureSet {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = BTreeSet::new();
        let tags = names
            .into_iter()
            .map(|n| CultureTag::new(n))
            .filter(|t| seen.insert(t.clone()))
            .collect();
        Self(tags)
    }

    /// The five cultures of the multicultural benchmark.
    pub fn southeast_asian() -> Self {
        Self::new(["Indonesia", "Malaysia", "Thailand", "Vietnam", "India"])
    }

    pub fn contains(&self, tag: &CultureTag) -> bool {
        self.0.contains(tag)
    }

    pub fn index_of(&self, tag: &CultureTag) -> Option<usize> {
        self.0.iter().position(|t| t == tag)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CultureTag> {
        self.0.iter()
    }

    pub fn get(&self, i: usize) -> Option<&CultureTag> {
        self.0.get(i)
    }
}

/// Validation context for records: admissible cultures and the maximum
/// length of a per-ingredient action sequence.
#[derive(Debug, Clone)]
pub struct CorpusSchema {
    pub cultures: CultureSet,
    pub max_actions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sections {
    pub title_text: Vec<String>,
    pub ingredient_lines: Vec<String>,
    pub instruction_lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecipeRecord {
    pub id: String,
    pub title: String,
    pub culture: CultureTag,
    /// Ingredient label ids, duplicate-free, in recipe order.
    pub ingredients: Vec<String>,
    pub actions_per_ingredient: BTreeMap<String, Vec<String>>,
    pub title_keywords: BTreeSet<String>,
    pub sections: Sections,
}

impl RecipeRecord {
    pub fn validate(&self, schema: &CorpusSchema) -> Result<(), CorpusError> {
        let invalid = |reason: String| CorpusError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if self.ingredients.is_empty() {
            return Err(invalid("ingredient list is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for ing in &self.ingredients {
            if !seen.insert(ing.as_str()) {
                return Err(invalid(format!("ingredient `{ing}` listed twice")));
            }
        }
        for (ing, seq) in &self.actions_per_ingredient {
            if !seen.contains(ing.as_str()) {
                return Err(invalid(format!(
                    "actions given for `{ing}` which is not an ingredient"
                )));
            }
            if seq.is_empty() || seq.len() > schema.max_actions {
                return Err(invalid(format!(
                    "action sequence for `{ing}` has length {}, allowed 1..={}",
                    seq.len(),
                    schema.max_actions
                )));
            }
        }
        if !schema.cultures.contains(&self.culture) {
            return Err(CorpusError::UnknownCulture {
                id: self.id.clone(),
                culture: self.culture.0.clone(),
            });
        }
        Ok(())
    }

    /// Every action occurrence across ingredients, in ingredient order.
    pub fn action_occurrences(&self) -> impl Iterator<Item = &String> {
        self.ingredients
            .iter()
            .filter_map(|i| self.actions_per_ingredient.get(i))
            .flatten()
    }

    pub fn normalized_title(&self) -> String {
        normalize_title(&self.title)
    }

    /// Case-insensitive substring match against the title and search keywords.
    pub fn matches_keyword(&self, keyword: &str) -> bool {
        let k = keyword.to_lowercase();
        self.title.to_lowercase().contains(&k)
            || self.title_keywords.iter().any(|t| t.to_lowercase().contains(&k))
    }
}

pub fn normalize_title(title: &str) -> String {
    title.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pair_id: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub recipe: RecipeRecord,
    pub image: ImageRecord,
}

impl Pair {
    pub fn id(&self) -> &str {
        &self.recipe.id
    }
}

/// Validated pairs with an id index.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pairs: Vec<Pair>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(pairs: Vec<Pair>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            if p.image.pair_id != p.recipe.id {
                return Err(CorpusError::InvalidRecord {
                    id: p.image.id.clone(),
                    reason: format!("image pair_id `{}` does not match recipe", p.image.pair_id),
                });
            }
            if let Some(first) = index.insert(p.recipe.id.clone(), i) {
                return Err(CorpusError::DuplicateId {
                    id: p.recipe.id.clone(),
                    first_line: first + 1,
                    second_line: i + 1,
                });
            }
        }
        Ok(Self { pairs, index })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<Pair> {
        self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Pair> {
        self.index.get(id).map(|&i| &self.pairs[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn resolve(&self, id: &str) -> Result<&Pair, CorpusError> {
        self.get(id)
            .ok_or_else(|| CorpusError::UnknownId(id.to_string()))
    }

    pub fn resolve_all<'a>(&'a self, ids: &[String]) -> Result<Vec<&'a Pair>, CorpusError> {
        ids.iter().map(|id| self.resolve(id)).collect()
    }

    pub fn cultures(&self) -> BTreeSet<CultureTag> {
        self.pairs.iter().map(|p| p.recipe.culture.clone()).collect()
    }
}
