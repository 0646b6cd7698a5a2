//! Repeated seeded sampling of test galleries and the per-run report rows.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{column_ranks, row_ranks, RankMetrics};
use super::EvalError;

/// Default number of sampling runs per gallery size.
pub const DEFAULT_RUNS: usize = 10;

/// Scores every sampled query against every sampled candidate; row `i`
/// and column `i` of the result belong to the same pair.
pub trait PairScorer {
    fn len(&self) -> usize;
    fn scores(&self, rows: &[usize]) -> Array2<f64>;
}

/// Precomputed debiased image queries and recipe embeddings.
pub struct DenseScorer {
    pub queries: Array2<f64>,
    pub recipes: Array2<f64>,
}

impl PairScorer for DenseScorer {
    fn len(&self) -> usize {
        self.queries.nrows()
    }

    fn scores(&self, rows: &[usize]) -> Array2<f64> {
        let q = self.queries.select(ndarray::Axis(0), rows);
        let r = self.recipes.select(ndarray::Axis(0), rows);
        q.dot(&r.t())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    ImageToRecipe,
    RecipeToImage,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ImageToRecipe => "image-to-recipe",
            Direction::RecipeToImage => "recipe-to-image",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image-to-recipe" => Ok(Direction::ImageToRecipe),
            "recipe-to-image" => Ok(Direction::RecipeToImage),
            _ => Err(format!("unknown direction `{s}`")),
        }
    }
}

/// Metrics of one sampled gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub protocol: String,
    pub mode: String,
    pub direction: Direction,
    pub size: usize,
    pub run: usize,
    pub med_r: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl RunRow {
    pub fn metrics(&self) -> RankMetrics {
        RankMetrics {
            med_r: self.med_r,
            r1: self.r1,
            r5: self.r5,
            r10: self.r10,
        }
    }
}

/// Metrics of the queries of one slice (e.g. a culture) within one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRow {
    pub slice: String,
    pub protocol: String,
    pub mode: String,
    pub direction: Direction,
    pub size: usize,
    pub run: usize,
    pub queries: usize,
    pub med_r: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Mean over runs for one (protocol, mode, direction, size, slice) key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub protocol: String,
    pub mode: String,
    pub direction: Direction,
    pub size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<String>,
    pub runs: usize,
    pub med_r: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub rows: Vec<RunRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slices: Vec<SliceRow>,
}

type Key = (String, String, Direction, usize, Option<String>);

fn aggregate(items: impl Iterator<Item = (Key, RankMetrics)>) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<Key, Vec<RankMetrics>> = BTreeMap::new();
    for (k, m) in items {
        groups.entry(k).or_default().push(m);
    }
    groups
        .into_iter()
        .map(|((protocol, mode, direction, size, slice), ms)| {
            let mean = RankMetrics::mean(&ms).expect("non-empty group");
            AggregateRow {
                protocol,
                mode,
                direction,
                size,
                slice,
                runs: ms.len(),
                med_r: mean.med_r,
                r1: mean.r1,
                r5: mean.r5,
                r10: mean.r10,
            }
        })
        .collect()
}

impl RetrievalReport {
    pub fn extend(&mut self, other: RetrievalReport) {
        self.rows.extend(other.rows);
        self.slices.extend(other.slices);
    }

    /// Means over runs of the main rows.
    pub fn aggregates(&self) -> Vec<AggregateRow> {
        aggregate(self.rows.iter().map(|r| {
            (
                (r.protocol.clone(), r.mode.clone(), r.direction, r.size, None),
                r.metrics(),
            )
        }))
    }

    /// Means over runs of the slice rows.
    pub fn slice_aggregates(&self) -> Vec<AggregateRow> {
        aggregate(self.slices.iter().map(|r| {
            (
                (r.protocol.clone(), r.mode.clone(), r.direction, r.size, Some(r.slice.clone())),
                RankMetrics {
                    med_r: r.med_r,
                    r1: r.r1,
                    r5: r.r5,
                    r10: r.r10,
                },
            )
        }))
    }

    /// Mean metrics for one key, if present.
    pub fn mean_of(&self, mode: &str, direction: Direction, size: usize) -> Option<RankMetrics> {
        let ms: Vec<RankMetrics> = self
            .rows
            .iter()
            .filter(|r| r.mode == mode && r.direction == direction && r.size == size)
            .map(RunRow::metrics)
            .collect();
        RankMetrics::mean(&ms)
    }

    pub fn max_runs(&self) -> usize {
        self.rows.iter().map(|r| r.run + 1).max().unwrap_or(0)
    }
}

/// Sampling parameters shared by all evaluation entry points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub protocol: String,
    pub mode: String,
    pub sizes: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
}

/// Seed of the gallery sample for one (size, run).
pub fn sample_seed(master: u64, size: usize, run: usize) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((size as u64) << 24)
        .wrapping_add(run as u64)
}

/// Uniform sample of `m` distinct indices out of `n`.
pub fn sample_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, n, m).into_vec()
}

/// Samples are drawn jointly: the sampled pairs serve as both the queries
/// and the gallery. `slices[i]`, when given, names the slice of pair `i`.
pub fn evaluate(scorer: &dyn PairScorer, spec: &EvalSpec, slices: Option<&[String]>) -> Result<RetrievalReport, EvalError> {
    let n = scorer.len();
    if spec.runs == 0 {
        return Err(EvalError::Config("runs must be at least 1".into()));
    }
    if spec.sizes.is_empty() {
        return Err(EvalError::Config("no gallery sizes given".into()));
    }
    for &m in &spec.sizes {
        if m == 0 || m > n {
            return Err(EvalError::SizeTooLarge { size: m, available: n });
        }
    }
    let mut report = RetrievalReport::default();
    for &m in &spec.sizes {
        for run in 0..spec.runs {
            let idx = sample_indices(n, m, sample_seed(spec.seed, m, run));
            let scores = scorer.scores(&idx);
            for (direction, ranks) in [
                (Direction::ImageToRecipe, row_ranks(&scores)),
                (Direction::RecipeToImage, column_ranks(&scores)),
            ] {
                let mt = RankMetrics::from_ranks(&ranks)?;
                report.rows.push(RunRow {
                    protocol: spec.protocol.clone(),
                    mode: spec.mode.clone(),
                    direction,
                    size: m,
                    run,
                    med_r: mt.med_r,
                    r1: mt.r1,
                    r5: mt.r5,
                    r10: mt.r10,
                });
                let Some(names) = slices else { continue };
                let mut by_slice: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                for (k, &i) in idx.iter().enumerate() {
                    by_slice.entry(names[i].as_str()).or_default().push(ranks[k]);
                }
                for (slice, rs) in by_slice {
                    let mt = RankMetrics::from_ranks(&rs)?;
                    report.slices.push(SliceRow {
                        slice: slice.to_string(),
                        protocol: spec.protocol.clone(),
                        mode: spec.mode.clone(),
                        direction,
                        size: m,
                        run,
                        queries: rs.len(),
                        med_r: mt.med_r,
                        r1: mt.r1,
                        r5: mt.r5,
                        r10: mt.r10,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Perfect(usize);
    impl PairScorer for Perfect {
        fn len(&self) -> usize {
            self.0
        }
        fn scores(&self, rows: &[usize]) -> Array2<f64> {
            Array2::from_shape_fn((rows.len(), rows.len()), |(i, j)| if i == j { 1.0 } else { 0.0 })
        }
    }

    fn spec(sizes: Vec<usize>, runs: usize) -> EvalSpec {
        EvalSpec {
            protocol: "standard".into(),
            mode: "baseline".into(),
            sizes,
            runs,
            seed: 42,
        }
    }

    #[test]
    fn perfect_scorer_is_perfect_everywhere() {
        let r = evaluate(&Perfect(300), &spec(vec![10, 100, 300], 3), None).unwrap();
        assert_eq!(r.rows.len(), 3 * 3 * 2);
        for row in &r.rows {
            assert_eq!((row.med_r, row.r1, row.r10), (1.0, 100.0, 100.0));
        }
    }

    #[test]
    fn oversized_gallery_is_rejected() {
        assert!(matches!(
            evaluate(&Perfect(5), &spec(vec![6], 1), None),
            Err(EvalError::SizeTooLarge { size: 6, available: 5 })
        ));
    }

    #[test]
    fn aggregates_are_run_means() {
        let r = evaluate(&Perfect(50), &spec(vec![20], 4), None).unwrap();
        let agg = r.aggregates();
        assert_eq!(agg.len(), 2);
        assert!(agg.iter().all(|a| a.runs == 4 && a.med_r == 1.0));
    }

    #[test]
    fn same_seed_same_samples() {
        assert_eq!(sample_indices(100, 10, 3), sample_indices(100, 10, 3));
        assert_ne!(sample_seed(1, 100, 0), sample_seed(1, 100, 1));
        let s = sample_indices(100, 100, 9);
        let mut sorted = s.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        // chi-square over 50 cells, 49 dof: 99.9% quantile is about 85.4
        let (n, m, trials) = (50, 10, 5000);
        let mut counts = vec![0usize; n];
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..trials {
            for i in sample_indices(n, m, rng.random()) {
                counts[i] += 1;
            }
        }
        let expect = (trials * m) as f64 / n as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        assert!(chi2 < 85.4, "chi2 {chi2}");
    }

    #[test]
    fn slices_partition_queries() {
        let names: Vec<String> = (0..40).map(|i| if i % 3 == 0 { "a".into() } else { "b".into() }).collect();
        let r = evaluate(&Perfect(40), &spec(vec![25], 2), Some(&names)).unwrap();
        for run in 0..2 {
            let q: usize = r
                .slices
                .iter()
                .filter(|s| s.run == run && s.direction == Direction::ImageToRecipe)
                .map(|s| s.queries)
                .sum();
            assert_eq!(q, 25);
        }
    }
}
