//! Run configuration: one TOML file holding every knob of a run.

use std::collections::BTreeSet;
use std::path::Path;

use recipe_debias::corpus::{CorpusSchema, CultureSet, SplitFractions, SplitProtocol, SyntheticConfig};
use recipe_debias::eval::{RouterTraining, DEFAULT_RUNS};
use recipe_debias::retrieval::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: String,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub protocol: SplitProtocol,
    pub train: f64,
    pub val: f64,
    pub seed: u64,
    /// Deduplicate the test split by title (multicultural protocol only).
    pub dedup: bool,
    /// Categories held out of training under the zero-shot protocol.
    pub zero_shot_keywords: BTreeSet<String>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let f = SplitFractions::default();
        Self {
            protocol: SplitProtocol::Multicultural,
            train: f.train,
            val: f.val,
            seed: 11,
            dedup: false,
            zero_shot_keywords: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sizes: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
    pub router: RouterTraining,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1000],
            runs: DEFAULT_RUNS,
            seed: 3,
            router: RouterTraining::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.config_version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config_version `{}` is not supported (expected `{CONFIG_VERSION}`)",
                self.config_version
            )));
        }
        self.synthetic.validate()?;
        self.train.validate()?;
        let s = &self.split;
        if !(0.0..=1.0).contains(&s.train) || !(0.0..=1.0).contains(&s.val) || s.train + s.val > 1.0 {
            return Err(CliError::Config("split.train and split.val must be fractions summing to at most 1".into()));
        }
        if s.protocol == SplitProtocol::ZeroShot && s.zero_shot_keywords.is_empty() {
            return Err(CliError::Config("split.zero_shot_keywords is required by the zero-shot protocol".into()));
        }
        if self.eval.runs == 0 || self.eval.sizes.is_empty() || self.eval.sizes.contains(&0) {
            return Err(CliError::Config("eval.runs and eval.sizes must be positive".into()));
        }
        Ok(())
    }

    /// Canonical TOML of the resolved config, as stored in run directories.
    pub fn snapshot(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::snapshot`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.snapshot().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn schema(&self) -> CorpusSchema {
        CorpusSchema {
            cultures: CultureSet::new(self.synthetic.cultures.iter().cloned()),
            max_actions: self.synthetic.max_actions,
        }
    }

    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.split.train,
            val: self.split.val,
        }
    }
}
