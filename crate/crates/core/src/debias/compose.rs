//! Ingredient selection and the two probability-weighted dictionary sums.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use super::DebiasError;
use crate::dictionaries::LabelDictionary;
use crate::embedding::EmbeddingVec;

/// Tolerance on simplex sums.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Classifier output over one dictionary and the selection it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct IngredientPrediction {
    pub probs: Array1<f64>,
    /// Selected dictionary indices, ascending.
    pub selected: Vec<usize>,
    /// Normalized weights aligned with `selected`.
    pub weights: Vec<f64>,
    /// Mass of the selected probabilities before normalization; zero when
    /// the selection came from the argmax fallback.
    pub selected_mass: f64,
}

impl IngredientPrediction {
    pub fn fallback_used(&self) -> bool {
        !self.selected.is_empty() && self.selected_mass == 0.0
    }

    pub fn weight_of(&self, index: usize) -> Option<f64> {
        self.selected.iter().position(|&s| s == index).map(|i| self.weights[i])
    }

    pub fn weights_by_label<'d>(&self, dict: &'d LabelDictionary) -> BTreeMap<&'d str, f64> {
        self.selected.iter().zip(&self.weights).map(|(&i, &w)| (dict.label(i), w)).collect()
    }
}

/// Selects labels with probability strictly above `threshold`, weighting them
/// by normalized probability. With `fallback`, an empty selection becomes the
/// single argmax label with weight one.
pub fn select_ingredients(probs: Array1<f64>, threshold: f64, fallback: bool) -> IngredientPrediction {
    let selected: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > threshold).collect();
    if selected.is_empty() {
        if fallback && !probs.is_empty() {
            let mut best = 0;
            for i in 1..probs.len() {
                if probs[i] > probs[best] {
                    best = i;
                }
            }
            return IngredientPrediction {
                probs,
                selected: vec![best],
                weights: vec![1.0],
                selected_mass: 0.0,
            };
        }
        return IngredientPrediction {
            probs,
            selected,
            weights: vec![],
            selected_mass: 0.0,
        };
    }
    let mass: f64 = selected.iter().map(|&i| probs[i]).sum();
    let weights = selected.iter().map(|&i| probs[i] / mass).collect();
    IngredientPrediction {
        probs,
        selected,
        weights,
        selected_mass: mass,
    }
}

/// Decoded actions for one selected ingredient.
#[derive(Debug, Clone, PartialEq)]
pub struct IngredientActions {
    pub ingredient: usize,
    pub actions: Vec<usize>,
    /// One row per emitted action over the action dictionary plus `END`.
    pub probs: Array2<f64>,
    /// `(action index, weight)` ascending by action, summing to one.
    pub weights: Vec<(usize, f64)>,
}

/// Per-ingredient action weights: each action's chosen-step probabilities
/// are summed, then normalized over the sequence.
pub fn action_weights(actions: &[usize], probs: &Array2<f64>) -> Vec<(usize, f64)> {
    let mut mass: BTreeMap<usize, f64> = BTreeMap::new();
    for (t, &a) in actions.iter().enumerate() {
        *mass.entry(a).or_insert(0.0) += probs[[t, a]];
    }
    let total: f64 = mass.values().sum();
    mass.into_iter().map(|(a, m)| (a, m / total)).collect()
}

impl IngredientActions {
    pub fn new(ingredient: usize, actions: Vec<usize>, probs: Array2<f64>) -> Self {
        let weights = action_weights(&actions, &probs);
        Self {
            ingredient,
            actions,
            probs,
            weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActionPrediction {
    /// Aligned with the selected ingredients of the matching prediction.
    pub per_ingredient: Vec<IngredientActions>,
}

/// `sum_l w_l D[l]` over the selected labels; zero for an empty selection.
pub fn compose_e_ing(pred: &IngredientPrediction, dict: &LabelDictionary) -> Result<EmbeddingVec, DebiasError> {
    let mut out = Array1::zeros(dict.dim());
    for (&i, &w) in pred.selected.iter().zip(&pred.weights) {
        if i >= dict.size() {
            return Err(DebiasError::OutOfDictionary(format!("#{i}")));
        }
        out.scaled_add(w, &dict.matrix().row(i));
    }
    Ok(EmbeddingVec::new(out.to_vec())?)
}

/// Per-ingredient action vectors `sum_a w_ka D_act[a]`.
pub fn ingredient_action_vectors(act: &ActionPrediction, dict_act: &LabelDictionary) -> Result<Vec<Array1<f64>>, DebiasError> {
    act.per_ingredient
        .iter()
        .map(|ia| {
            let mut v = Array1::zeros(dict_act.dim());
            for &(a, w) in &ia.weights {
                if a >= dict_act.size() {
                    return Err(DebiasError::OutOfDictionary(format!("action #{a}")));
                }
                v.scaled_add(w, &dict_act.matrix().row(a));
            }
            Ok(v)
        })
        .collect()
}

/// `sum_k w_k sum_a w_ka D_act[a]` over the selected ingredients.
pub fn compose_e_act(
    ing: &IngredientPrediction,
    act: &ActionPrediction,
    dict_act: &LabelDictionary,
) -> Result<EmbeddingVec, DebiasError> {
    let covered: Vec<usize> = act.per_ingredient.iter().map(|a| a.ingredient).collect();
    if covered != ing.selected {
        return Err(DebiasError::Coverage {
            selected: ing.selected.clone(),
            covered,
        });
    }
    let per = ingredient_action_vectors(act, dict_act)?;
    let mut out = Array1::zeros(dict_act.dim());
    for (v, &w) in per.iter().zip(&ing.weights) {
        out.scaled_add(w, v);
    }
    Ok(EmbeddingVec::new(out.to_vec())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CultureTag;
    use crate::dictionaries::{LabelDictionary, LabelKind};
    use ndarray::arr1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_dict(rng: &mut ChaCha8Rng, kind: LabelKind, n: usize, d: usize) -> LabelDictionary {
        let rows = (0..n)
            .map(|i| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                (format!("l{i:03}"), EmbeddingVec::normalize(v).unwrap())
            })
            .collect();
        LabelDictionary::from_embeddings(kind, CultureTag::new("Thailand"), rows)
    }

    #[test]
    fn worked_threshold_example() {
        let p = select_ingredients(arr1(&[0.9, 0.6, 0.3]), 0.5, true);
        assert_eq!(p.selected, vec![0, 1]);
        assert!((p.weights[0] - 0.6).abs() < 1e-12);
        assert!((p.weights[1] - 0.4).abs() < 1e-12);
        let q = select_ingredients(arr1(&[0.8, 0.8]), 0.5, true);
        assert_eq!(q.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn saturated_logit_selects_single_label() {
        let p = select_ingredients(arr1(&[0.0, 1.0, 0.0]), 0.5, true);
        assert_eq!((p.selected, p.weights), (vec![1], vec![1.0]));
    }

    #[test]
    fn empty_selection_falls_back_to_argmax() {
        let p = select_ingredients(arr1(&[0.1, 0.4, 0.2]), 0.5, true);
        assert_eq!(p.selected, vec![1]);
        assert!(p.fallback_used());
        let none = select_ingredients(arr1(&[0.1, 0.4, 0.2]), 0.5, false);
        assert!(none.selected.is_empty());
        assert!(!none.fallback_used());
    }

    #[test]
    fn single_label_composes_to_its_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = random_dict(&mut rng, LabelKind::Ingredient, 4, 6);
        let p = select_ingredients(arr1(&[0.1, 0.1, 0.9, 0.1]), 0.5, true);
        assert_eq!(compose_e_ing(&p, &d).unwrap().as_slice(), d.row(2));
        let half = select_ingredients(arr1(&[0.7, 0.7, 0.1, 0.1]), 0.5, true);
        let mid = compose_e_ing(&half, &d).unwrap();
        for j in 0..6 {
            assert!((mid.as_slice()[j] - 0.5 * (d.row(0)[j] + d.row(1)[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn e_ing_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_dict(&mut rng, LabelKind::Ingredient, 12, 16);
        for _ in 0..20 {
            let probs = Array1::from_shape_fn(12, |_| rng.random_range(0.0..1.0));
            let p = select_ingredients(probs.clone(), 0.5, true);
            let ours = compose_e_ing(&p, &d).unwrap();
            let mass: f64 = probs.iter().filter(|&&x| x > 0.5).sum();
            let mut naive = vec![0.0; 16];
            for l in 0..12 {
                if probs[l] > 0.5 {
                    for j in 0..16 {
                        naive[j] += probs[l] / mass * d.row(l)[j];
                    }
                }
            }
            if mass == 0.0 {
                continue;
            }
            for j in 0..16 {
                assert!((ours.as_slice()[j] - naive[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn repeated_actions_pool_their_step_probabilities() {
        let probs = Array2::from_shape_vec((3, 4), vec![0.6, 0.2, 0.1, 0.1, 0.1, 0.5, 0.3, 0.1, 0.4, 0.3, 0.2, 0.1]).unwrap();
        let w = action_weights(&[0, 1, 0], &probs);
        assert_eq!(w.len(), 2);
        assert!((w[0].1 - 1.0 / 1.5).abs() < 1e-12);
        assert!((w[1].1 - 0.5 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn one_ingredient_one_action_is_the_action_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let acts = random_dict(&mut rng, LabelKind::Action, 5, 6);
        let ing = select_ingredients(arr1(&[0.9, 0.1]), 0.5, true);
        let act = ActionPrediction {
            per_ingredient: vec![IngredientActions::new(0, vec![3], Array2::from_elem((1, 6), 1.0 / 6.0))],
        };
        assert_eq!(compose_e_act(&ing, &act, &acts).unwrap().as_slice(), acts.row(3));
    }

    #[test]
    fn equal_action_distributions_give_that_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let acts = random_dict(&mut rng, LabelKind::Action, 5, 6);
        let ing = select_ingredients(arr1(&[0.9, 0.6]), 0.5, true);
        let probs = Array2::from_shape_fn((2, 6), |(t, j)| if j == t + 1 { 0.5 } else { 0.1 });
        let act = ActionPrediction {
            per_ingredient: vec![
                IngredientActions::new(0, vec![1, 2], probs.clone()),
                IngredientActions::new(1, vec![1, 2], probs),
            ],
        };
        let e = compose_e_act(&ing, &act, &acts).unwrap();
        let per = ingredient_action_vectors(&act, &acts).unwrap();
        for j in 0..6 {
            assert!((e.as_slice()[j] - per[0][j]).abs() < 1e-15);
        }
    }

    #[test]
    fn coverage_mismatch_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let acts = random_dict(&mut rng, LabelKind::Action, 5, 6);
        let ing = select_ingredients(arr1(&[0.9, 0.6]), 0.5, true);
        let act = ActionPrediction::default();
        assert!(matches!(
            compose_e_act(&ing, &act, &acts),
            Err(DebiasError::Coverage { .. })
        ));
    }
}
