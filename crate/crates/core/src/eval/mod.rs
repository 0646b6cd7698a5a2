//! Retrieval metrics and evaluation protocols: repeated gallery sampling,
//! culture routing, zero-shot categories and report rendering.

mod metrics;
mod protocol;
mod report;
mod routing;
mod zero_shot;

use thiserror::Error;

pub use metrics::{column_ranks, median_rank, rank_gallery, rank_of, recall_at, row_ranks, RankMetrics};
pub use protocol::{
    evaluate, sample_indices, sample_seed, AggregateRow, DenseScorer, Direction, EvalSpec, PairScorer,
    RetrievalReport, RunRow, SliceRow, DEFAULT_RUNS,
};
pub use report::{parse_rendered, read_csv, render, write_csv, ParsedTable, ReportFile, ZeroShotTable, REPORT_FORMAT};
pub use routing::{
    route_and_evaluate, ConfusionMatrix, CultureClassifier, RoutePredictor, RouterMode, RouterTraining, ROUTER_FORMAT,
};
pub use zero_shot::{zero_shot_report, ZeroShotRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("truth `{0}` is not in the gallery")]
    TruthAbsent(String),
    #[error("no ranks to summarize")]
    Empty,
    #[error("gallery size {size} exceeds the {available} available test pairs")]
    SizeTooLarge { size: usize, available: usize },
    #[error("invalid evaluation request: {0}")]
    Config(String),
    #[error("no trained module for culture `{0}`")]
    UnknownCulture(String),
    #[error("report format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Retrieval(#[from] Box<crate::retrieval::RetrievalError>),
}

impl From<crate::retrieval::RetrievalError> for EvalError {
    fn from(e: crate::retrieval::RetrievalError) -> Self {
        EvalError::Retrieval(Box::new(e))
    }
}
