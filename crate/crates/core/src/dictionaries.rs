//! Frozen, culture-specific ingredient and action embedding dictionaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CultureTag, RecipeRecord};
use crate::embedding::{EmbeddingVec, UNIT_NORM_TOL};
use crate::encoders::{encode_label, EncoderError, EncoderParams};

pub const DICTIONARY_FORMAT: &str = "dict-v1";

/// Dictionary size used unless configured otherwise.
pub const DEFAULT_DICTIONARY_SIZE: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Ingredient,
    Action,
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelKind::Ingredient => "ingredient",
            LabelKind::Action => "action",
        })
    }
}

impl std::str::FromStr for LabelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ingredient" => Ok(LabelKind::Ingredient),
            "action" => Ok(LabelKind::Action),
            _ => Err(format!("unknown label kind `{s}` (ingredient, action)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("dictionary size must be at least 1")]
    ZeroSize,
    #[error("no training records given")]
    NoRecords,
    #[error("records span several cultures ({0:?}); dictionaries are per culture")]
    MixedCultures(Vec<String>),
    #[error("requested {requested} {kind} labels but only {available} distinct labels are available")]
    TooFewLabels {
        kind: LabelKind,
        requested: usize,
        available: usize,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("dictionary io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dictionary file line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Returned by [`LabelDictionary::lookup`] when the label has no entry.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("label `{0}` is not in the dictionary")]
pub struct OutOfDictionary(pub String);

/// Frozen map from label id to its embedding snapshot. There is no mutating
/// API: entries are fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDictionary {
    kind: LabelKind,
    culture: CultureTag,
    labels: Vec<String>,
    embeddings: Array2<f64>,
    index: HashMap<String, usize>,
}

impl LabelDictionary {
    /// Freezes `rows` in the given order. All embeddings must share one dimension.
    pub fn from_embeddings(kind: LabelKind, culture: CultureTag, rows: Vec<(String, EmbeddingVec)>) -> Self {
        let dim = rows.first().map_or(0, |(_, e)| e.dim());
        let mut embeddings = Array2::zeros((rows.len(), dim));
        let mut labels = Vec::with_capacity(rows.len());
        for (i, (label, e)) in rows.into_iter().enumerate() {
            embeddings.row_mut(i).assign(&ndarray::ArrayView1::from(e.as_slice()));
            labels.push(label);
        }
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self {
            kind,
            culture,
            labels,
            embeddings,
            index,
        }
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn culture(&self) -> &CultureTag {
        &self.culture
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    /// Labels in dictionary order (descending frequency at build time).
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// `size x dim` matrix of stored embeddings, one row per label.
    pub fn matrix(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.embeddings.row(i).to_slice().expect("standard layout")
    }

    pub fn lookup(&self, label: &str) -> Result<EmbeddingVec, OutOfDictionary> {
        match self.index_of(label) {
            Some(i) => Ok(EmbeddingVec::from_unit(self.row(i).to_vec()).expect("finite snapshot")),
            None => Err(OutOfDictionary(label.to_string())),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), DictionaryError> {
        let header = serde_json::json!({
            "format": DICTIONARY_FORMAT,
            "kind": self.kind,
            "culture": self.culture,
            "size": self.size(),
            "dim": self.dim(),
        });
        writeln!(w, "{header}")?;
        for (i, label) in self.labels.iter().enumerate() {
            let row = serde_json::json!([label, self.row(i)]);
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, DictionaryError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            format: String,
            kind: LabelKind,
            culture: CultureTag,
            size: usize,
            dim: usize,
        }
        let perr = |line: usize, message: String| DictionaryError::Parse { line, message };
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| perr(1, "missing header".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| perr(1, e.to_string()))?;
        if header.format != DICTIONARY_FORMAT {
            return Err(perr(1, format!("unsupported format `{}`", header.format)));
        }
        let mut rows = Vec::with_capacity(header.size);
        for (i, text) in lines.enumerate() {
            let line = i + 2;
            let text = text?;
            if text.trim().is_empty() {
                continue;
            }
            let (label, values): (String, Vec<f64>) = serde_json::from_str(&text).map_err(|e| perr(line, e.to_string()))?;
            if values.len() != header.dim {
                return Err(perr(line, format!("expected {} values, found {}", header.dim, values.len())));
            }
            let e = EmbeddingVec::new(values).map_err(|e| perr(line, e.to_string()))?;
            if (e.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(perr(line, format!("embedding of `{label}` is not unit norm")));
            }
            rows.push((label, e));
        }
        if rows.len() != header.size {
            return Err(perr(0, format!("header declares {} entries, found {}", header.size, rows.len())));
        }
        Ok(Self::from_embeddings(header.kind, header.culture, rows))
    }
}

/// Document frequency of each label of `kind`: the number of records that
/// contain it at least once. Sorted by descending count, then label id.
pub fn label_frequencies<'a>(records: impl IntoIterator<Item = &'a RecipeRecord>, kind: LabelKind) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let labels: BTreeSet<&str> = match kind {
            LabelKind::Ingredient => r.ingredients.iter().map(String::as_str).collect(),
            LabelKind::Action => r.action_occurrences().map(String::as_str).collect(),
        };
        for l in labels {
            *counts.entry(l).or_insert(0) += 1;
        }
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().map(|(l, c)| (l.to_string(), c)).collect();
    // stable sort keeps the lexicographic order among equal counts
    out.sort_by(|a, b| b.1.cmp(&a.1));
    out
}

/// Builds the `size` most frequent labels of `kind` in one culture's
/// training records, embedded by the recipe encoder at its current state.
pub fn build_dictionary(
    records: &[&RecipeRecord],
    kind: LabelKind,
    size: usize,
    params: &EncoderParams,
) -> Result<LabelDictionary, DictionaryError> {
    build_dictionary_filtered(records, kind, size, params, |_| true)
}

/// As [`build_dictionary`], restricted to labels accepted by `keep`.
pub fn build_dictionary_filtered(
    records: &[&RecipeRecord],
    kind: LabelKind,
    size: usize,
    params: &EncoderParams,
    keep: impl Fn(&str) -> bool,
) -> Result<LabelDictionary, DictionaryError> {
    if size == 0 {
        return Err(DictionaryError::ZeroSize);
    }
    let first = records.first().ok_or(DictionaryError::NoRecords)?;
    let cultures: BTreeSet<&str> = records.iter().map(|r| r.culture.as_str()).collect();
    if cultures.len() > 1 {
        return Err(DictionaryError::MixedCultures(cultures.into_iter().map(String::from).collect()));
    }
    let freq: Vec<(String, usize)> = label_frequencies(records.iter().copied(), kind)
        .into_iter()
        .filter(|(l, _)| keep(l))
        .collect();
    if freq.len() < size {
        return Err(DictionaryError::TooFewLabels {
            kind,
            requested: size,
            available: freq.len(),
        });
    }
    let rows = freq
        .into_iter()
        .take(size)
        .map(|(label, _)| {
            let e = encode_label(params, &label, kind)?;
            Ok((label, e))
        })
        .collect::<Result<Vec<_>, DictionaryError>>()?;
    Ok(LabelDictionary::from_embeddings(kind, first.culture.clone(), rows))
}
