//! Data model, `jsonl-v1` ingestion, split construction and the synthetic
//! visibility-biased corpus generator.

mod io;
mod record;
mod split;
mod synth;

use thiserror::Error;

pub use io::{load_corpus, parse_line, read_corpus, write_corpus, CorpusFormat};
pub use record::{
    normalize_title, CorpusSchema, Corpus, CultureSet, CultureTag, ImageRecord, Pair, RecipeRecord,
    Sections,
};
pub use split::{
    build_multicultural_split, build_standard_split, build_zero_shot_split, dedup_test_set,
    CorpusSplit, SplitFractions, SplitProtocol,
};
pub use synth::{
    generate_synthetic, recipe_label_multiset, ActionClass, DrawLog, LabelInfo, SyntheticConfig, SyntheticCorpus,
    VisibilityBands,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown corpus format `{0}` (supported: jsonl-v1)")]
    UnknownFormat(String),
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate id `{id}` on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("record `{id}`: unknown culture `{culture}`")]
    UnknownCulture { id: String, culture: String },
    #[error("record `{id}`: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("unknown pair id `{0}`")]
    UnknownId(String),
    #[error("invalid split request: {0}")]
    Split(String),
    #[error("invalid synthetic config: field `{field}`: {reason}")]
    Config { field: String, reason: String },
}

impl CorpusError {
    pub(crate) fn at_line(self, line: usize) -> Self {
        CorpusError::AtLine {
            line,
            source: Box::new(self),
        }
    }
}
