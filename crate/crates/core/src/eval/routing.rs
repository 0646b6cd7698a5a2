//! Culture routing for query images: oracle tags or a linear softmax
//! classifier over the image embedding, with a confusion matrix.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::protocol::{evaluate, DenseScorer, EvalSpec, RetrievalReport};
use super::EvalError;
use crate::corpus::CultureTag;
use crate::debias::{softmax_rows, ScoreMode};
use crate::impl_tensors;
use crate::retrieval::{PairData, TrainState};
use crate::tensor::{Adam, AdamConfig, Tensors};

/// Predicts the culture of a query from its image embedding.
pub trait RoutePredictor {
    fn predict(&self, e_i: ArrayView1<f64>) -> CultureTag;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterMode {
    Oracle,
    Classifier,
}

impl std::str::FromStr for RouterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(RouterMode::Oracle),
            "classifier" => Ok(RouterMode::Classifier),
            _ => Err(format!("unknown router `{s}` (oracle, classifier)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: Array2<f64>,
    b: Array1<f64>,
}
impl_tensors!(Linear { w, b });

/// Linear softmax culture classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CultureClassifier {
    cultures: Vec<CultureTag>,
    head: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RouterTraining {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-2,
            seed: 5,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StoredRouter {
    format: String,
    cultures: Vec<CultureTag>,
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

pub const ROUTER_FORMAT: &str = "router-v1";

impl CultureClassifier {
    /// Cross-entropy training on `(embedding row, culture)` examples.
    pub fn train(e_images: &Array2<f64>, labels: &[CultureTag], cfg: &RouterTraining) -> Result<Self, EvalError> {
        if labels.is_empty() || labels.len() != e_images.nrows() {
            return Err(EvalError::Config("router needs one culture per training embedding".into()));
        }
        let mut cultures: Vec<CultureTag> = labels.to_vec();
        cultures.sort();
        cultures.dedup();
        let index: BTreeMap<&CultureTag, usize> = cultures.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let y: Vec<usize> = labels.iter().map(|c| index[c]).collect();
        let (k, d) = (cultures.len(), e_images.ncols());
        let mut head = Linear {
            w: Array2::zeros((k, d)),
            b: Array1::zeros(k),
        };
        let mut adam = Adam::new(AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        });
        let mut order: Vec<usize> = (0..y.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for rows in order.chunks(cfg.batch_size.max(1)) {
                let x = e_images.select(Axis(0), rows);
                let mut p = softmax_rows((x.dot(&head.w.t()) + &head.b).view());
                for (r, &row) in rows.iter().enumerate() {
                    p[[r, y[row]]] -= 1.0;
                }
                p /= rows.len() as f64;
                let grads = Linear {
                    w: p.t().dot(&x),
                    b: p.sum_axis(Axis(0)),
                };
                adam.step("router", &mut head, &grads);
            }
        }
        Ok(Self { cultures, head })
    }

    pub fn cultures(&self) -> &[CultureTag] {
        &self.cultures
    }

    pub fn probabilities(&self, e_i: ArrayView1<f64>) -> Array1<f64> {
        let logits = self.head.w.dot(&e_i) + &self.head.b;
        softmax_rows(logits.insert_axis(Axis(0)).view()).row(0).to_owned()
    }

    pub fn save(&self, w: impl Write) -> Result<(), EvalError> {
        let stored = StoredRouter {
            format: ROUTER_FORMAT.into(),
            cultures: self.cultures.clone(),
            w: self.head.w.rows().into_iter().map(|r| r.to_vec()).collect(),
            b: self.head.b.to_vec(),
        };
        serde_json::to_writer(w, &stored).map_err(|e| EvalError::Format(e.to_string()))
    }

    pub fn load(r: impl Read) -> Result<Self, EvalError> {
        let s: StoredRouter = serde_json::from_reader(r).map_err(|e| EvalError::Format(e.to_string()))?;
        if s.format != ROUTER_FORMAT {
            return Err(EvalError::Format(format!("unsupported router format `{}`", s.format)));
        }
        let k = s.cultures.len();
        let d = s.w.first().map_or(0, Vec::len);
        if s.w.len() != k || s.b.len() != k || s.w.iter().any(|r| r.len() != d) {
            return Err(EvalError::Format("router weight shapes disagree".into()));
        }
        let w = Array2::from_shape_vec((k, d), s.w.concat()).expect("checked shape");
        let head = Linear { w, b: Array1::from(s.b) };
        if !head.is_finite() {
            return Err(EvalError::Format("non-finite router weights".into()));
        }
        Ok(Self {
            cultures: s.cultures,
            head,
        })
    }
}

impl RoutePredictor for CultureClassifier {
    fn predict(&self, e_i: ArrayView1<f64>) -> CultureTag {
        let p = self.probabilities(e_i);
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        self.cultures[best].clone()
    }
}

/// Row-normalized `true culture x predicted culture` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub cultures: Vec<CultureTag>,
    pub counts: Vec<Vec<usize>>,
    /// Counts divided by their row total; all-zero for unpopulated rows.
    pub rates: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn from_pairs(cultures: Vec<CultureTag>, truth: &[&CultureTag], predicted: &[CultureTag]) -> Result<Self, EvalError> {
        let index: BTreeMap<&CultureTag, usize> = cultures.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let k = cultures.len();
        let mut counts = vec![vec![0usize; k]; k];
        for (t, p) in truth.iter().zip(predicted) {
            let ti = *index.get(t).ok_or_else(|| EvalError::UnknownCulture(t.to_string()))?;
            let pi = *index.get(p).ok_or_else(|| EvalError::UnknownCulture(p.to_string()))?;
            counts[ti][pi] += 1;
        }
        let rates = counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
            })
            .collect();
        Ok(Self { cultures, counts, rates })
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        let diag: usize = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        if total == 0 {
            0.0
        } else {
            diag as f64 / total as f64
        }
    }
}

/// Evaluates `mode` on `data` after routing every query: by its true
/// culture when `router` is `None`, by the predictor otherwise. Slices are
/// per true culture. The confusion matrix is filled only for a predictor.
pub fn route_and_evaluate(
    state: &TrainState,
    data: &PairData,
    router: Option<&dyn RoutePredictor>,
    mode: ScoreMode,
    spec: &EvalSpec,
) -> Result<(RetrievalReport, Option<ConfusionMatrix>), EvalError> {
    let truth = data.cultures();
    let known = state.cultures();
    for c in &truth {
        if !known.contains(*c) {
            return Err(EvalError::UnknownCulture(c.to_string()));
        }
    }
    let e_i = state.embed_images(data);
    let e_r = state.embed_recipes(data);
    let (routes, confusion) = match router {
        None => (truth.iter().map(|c| (*c).clone()).collect::<Vec<_>>(), None),
        Some(r) => {
            let predicted: Vec<CultureTag> = e_i.rows().into_iter().map(|row| r.predict(row)).collect();
            for p in &predicted {
                if mode != ScoreMode::Baseline && !known.contains(p) {
                    return Err(EvalError::UnknownCulture(p.to_string()));
                }
            }
            let cm = ConfusionMatrix::from_pairs(known.iter().cloned().collect(), &truth, &predicted)?;
            (predicted, Some(cm))
        }
    };
    let route_refs: Vec<&CultureTag> = routes.iter().collect();
    let queries = state.queries(&e_i, &route_refs, mode)?;
    let names: Vec<String> = truth.iter().map(|c| c.to_string()).collect();
    let report = evaluate(
        &DenseScorer {
            queries,
            recipes: e_r,
        },
        spec,
        Some(&names),
    )?;
    Ok((report, confusion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn classifier_separates_clustered_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cultures = [CultureTag::new("India"), CultureTag::new("Thailand"), CultureTag::new("Vietnam")];
        let mut x = Array2::zeros((300, 6));
        let mut y = Vec::new();
        for i in 0..300 {
            let c = i % 3;
            for j in 0..6 {
                x[[i, j]] = rng.random_range(-0.3..0.3) + if j == c { 1.0 } else { 0.0 };
            }
            y.push(cultures[c].clone());
        }
        let clf = CultureClassifier::train(&x, &y, &RouterTraining::default()).unwrap();
        let predicted: Vec<CultureTag> = x.rows().into_iter().map(|r| clf.predict(r)).collect();
        let truth: Vec<&CultureTag> = y.iter().collect();
        let cm = ConfusionMatrix::from_pairs(cultures.to_vec(), &truth, &predicted).unwrap();
        assert!(cm.accuracy() > 0.95);
        for row in &cm.rates {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mut buf = Vec::new();
        clf.save(&mut buf).unwrap();
        assert_eq!(CultureClassifier::load(buf.as_slice()).unwrap(), clf);
    }

    struct Always(CultureTag);
    impl RoutePredictor for Always {
        fn predict(&self, _: ArrayView1<f64>) -> CultureTag {
            self.0.clone()
        }
    }

    #[test]
    fn hard_wired_router_fills_one_column() {
        let cultures = vec![CultureTag::new("a"), CultureTag::new("b"), CultureTag::new("c")];
        let truth: Vec<&CultureTag> = cultures.iter().cycle().take(9).collect();
        let r = Always(CultureTag::new("b"));
        let predicted: Vec<CultureTag> = (0..9).map(|_| r.predict(ArrayView1::from(&[0.0][..]))).collect();
        let cm = ConfusionMatrix::from_pairs(cultures.clone(), &truth, &predicted).unwrap();
        for row in &cm.rates {
            assert_eq!(row, &vec![0.0, 1.0, 0.0]);
        }
    }
}
