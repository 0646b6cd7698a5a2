//! Median rank per unseen dish category.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::metrics::{median_rank, row_ranks};
use super::protocol::PairScorer;
use super::EvalError;
use crate::corpus::RecipeRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRow {
    pub keyword: String,
    pub queries: usize,
    /// `None` when no query matches the keyword.
    pub med_r: Option<f64>,
}

/// Ranks every query image against the full gallery, then reports the
/// median rank of the queries whose recipe matches each keyword.
pub fn zero_shot_report(
    scorer: &dyn PairScorer,
    recipes: &[&RecipeRecord],
    keywords: &BTreeSet<String>,
) -> Result<Vec<ZeroShotRow>, EvalError> {
    if recipes.len() != scorer.len() {
        return Err(EvalError::Config(format!(
            "{} recipes for a scorer over {} pairs",
            recipes.len(),
            scorer.len()
        )));
    }
    let all: Vec<usize> = (0..scorer.len()).collect();
    let ranks = if all.is_empty() {
        vec![]
    } else {
        row_ranks(&scorer.scores(&all))
    };
    keywords
        .iter()
        .map(|k| {
            let rs: Vec<usize> = recipes
                .iter()
                .zip(&ranks)
                .filter(|(r, _)| r.matches_keyword(k))
                .map(|(_, &rank)| rank)
                .collect();
            let med_r = if rs.is_empty() { None } else { Some(median_rank(&rs)?) };
            Ok(ZeroShotRow {
                keyword: k.clone(),
                queries: rs.len(),
                med_r,
            })
        })
        .collect()
}
