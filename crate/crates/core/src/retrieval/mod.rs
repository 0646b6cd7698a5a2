//! Scoring, the training objective and the three-step training procedure.

mod checkpoint;
mod scoring;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{dictionary_path, load_checkpoint, save_checkpoint, save_dictionaries, STATE_FORMAT};
pub use scoring::{score, score_matrix, triplet_loss};
pub use train::{train, EpochRecord, LossComponents, PairData, Stage, TrainState};

use crate::corpus::CorpusError;
use crate::debias::{DebiasConfig, DebiasError, ScoreMode};
use crate::dictionaries::{DictionaryError, LabelKind};
use crate::embedding::EmbeddingError;
use crate::encoders::{EncoderConfig, EncoderError};
use crate::eval::EvalError;
use crate::tensor::AdamConfig;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("mode {0} needs debiasing output")]
    MissingDebias(ScoreMode),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("building the {kind} dictionary for {culture}: {source}")]
    Dictionary {
        culture: String,
        kind: LabelKind,
        #[source]
        source: DictionaryError,
    },
    #[error(transparent)]
    Debias(#[from] DebiasError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("missing supervision: {0}")]
    Supervision(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: non-finite {0}")]
    NonFinite(&'static str),
}

/// Terms of the score and weights of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub mode: ScoreMode,
    pub margin: f64,
    pub lambda_cls: f64,
    pub lambda_gen: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            mode: ScoreMode::Both,
            margin: 0.3,
            lambda_cls: 0.001,
            lambda_gen: 0.001,
        }
    }
}

/// Epochs of encoder pre-training and of end-to-end training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            pretrain_epochs: 20,
            finetune_epochs: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scoring: ScoringConfig,
    pub schedule: Schedule,
    pub encoder: EncoderConfig,
    pub debias: DebiasConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub ingredient_dict_size: usize,
    pub action_dict_size: usize,
    pub seed: u64,
    /// Validation pairs scored after each epoch; zero disables the check.
    pub val_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scoring: ScoringConfig::default(),
            schedule: Schedule::default(),
            encoder: EncoderConfig::default(),
            debias: DebiasConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 64,
            ingredient_dict_size: crate::dictionaries::DEFAULT_DICTIONARY_SIZE,
            action_dict_size: crate::dictionaries::DEFAULT_DICTIONARY_SIZE,
            seed: 1,
            val_size: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: &str| Err(RetrievalError::Config(m.to_string()));
        let s = &self.scoring;
        if !(s.margin > 0.0) {
            return bad("scoring.margin must be positive");
        }
        if !(s.lambda_cls >= 0.0 && s.lambda_gen >= 0.0) {
            return bad("scoring lambdas must be nonnegative");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.ingredient_dict_size == 0 || self.action_dict_size == 0 {
            return bad("dictionary sizes must be at least 1");
        }
        let e = &self.encoder;
        if e.raw_dim == 0 || e.embed_dim == 0 || e.hidden_dim == 0 || e.label_dim == 0 || e.title_buckets == 0 {
            return bad("encoder dimensions must be positive");
        }
        if !(self.adam.learning_rate > 0.0) {
            return bad("adam.learning_rate must be positive");
        }
        self.debias.validate().map_err(RetrievalError::Config)?;
        if e.embed_dim % self.debias.classifier.token_width != 0 {
            return bad("debias.classifier.token_width must divide encoder.embed_dim");
        }
        Ok(())
    }
}
