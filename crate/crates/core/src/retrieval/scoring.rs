//! Bilinear scoring and the bidirectional hardest-negative triplet loss.

use ndarray::{Array2, ArrayView1};

use super::RetrievalError;
use crate::debias::{DebiasOutput, ScoreMode};
use crate::embedding::EmbeddingVec;

/// `e_R . (e_I + e_Ing + e_Act)` with the terms inactive under `mode`
/// dropped.
pub fn score(
    mode: ScoreMode,
    e_r: &EmbeddingVec,
    e_i: &EmbeddingVec,
    debias: Option<&DebiasOutput>,
) -> Result<f64, RetrievalError> {
    let mut s = e_r.dot(e_i)?;
    if mode == ScoreMode::Baseline {
        return Ok(s);
    }
    let out = debias.ok_or(RetrievalError::MissingDebias(mode))?;
    if mode.uses_ingredients() {
        s += e_r.dot(&out.e_ing)?;
    }
    if mode.uses_actions() {
        s += e_r.dot(&out.e_act)?;
    }
    Ok(s)
}

/// `S[i, j] = recipes[j] . queries[i]` where each query row is an image
/// embedding plus its debiasing offset.
pub fn score_matrix(queries: &Array2<f64>, recipes: &Array2<f64>) -> Array2<f64> {
    queries.dot(&recipes.t())
}

/// Triplet loss over a square score matrix whose diagonal holds the
/// positives, and its gradient with respect to the scores.
///
/// Each row (image anchor) and each column (recipe anchor) contributes
/// `max(0, margin - s_pos + s_neg)` with the hardest in-batch negative; the
/// loss is the mean of the `2B` terms.
pub fn triplet_loss(scores: &Array2<f64>, margin: f64) -> Result<(f64, Array2<f64>), RetrievalError> {
    let b = scores.nrows();
    if b < 2 || scores.ncols() != b {
        return Err(RetrievalError::Batch(format!(
            "triplet loss needs a square batch of at least 2 pairs, got {}x{}",
            b,
            scores.ncols()
        )));
    }
    let mut grad = Array2::zeros((b, b));
    let mut total = 0.0;
    let inv = 1.0 / (2 * b) as f64;
    let hardest = |v: ArrayView1<f64>, skip: usize| {
        let mut best = if skip == 0 { 1 } else { 0 };
        for (j, &x) in v.iter().enumerate() {
            if j != skip && x > v[best] {
                best = j;
            }
        }
        best
    };
    for i in 0..b {
        let j = hardest(scores.row(i), i);
        let h = margin - scores[[i, i]] + scores[[i, j]];
        if h > 0.0 {
            total += h;
            grad[[i, i]] -= inv;
            grad[[i, j]] += inv;
        }
    }
    for j in 0..b {
        let i = hardest(scores.column(j), j);
        let h = margin - scores[[j, j]] + scores[[i, j]];
        if h > 0.0 {
            total += h;
            grad[[j, j]] -= inv;
            grad[[i, j]] += inv;
        }
    }
    Ok((total * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::debias::{ActionPrediction, DebiasOutput};
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> EmbeddingVec {
        EmbeddingVec::normalize((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn output(e_ing: EmbeddingVec, e_act: EmbeddingVec) -> DebiasOutput {
        DebiasOutput {
            e_ing,
            e_act,
            ..DebiasOutput::zeros(0)
        }
    }

    #[test]
    fn zero_debias_equals_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, i) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 8));
        let z = output(EmbeddingVec::zeros(8), EmbeddingVec::zeros(8));
        assert_eq!(
            score(ScoreMode::Both, &r, &i, Some(&z)).unwrap(),
            score(ScoreMode::Baseline, &r, &i, None).unwrap()
        );
        assert!((score(ScoreMode::Baseline, &i, &i, None).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn debias_terms_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (r, i) = (rand_vec(&mut rng, 16), rand_vec(&mut rng, 16));
            let o = output(rand_vec(&mut rng, 16), rand_vec(&mut rng, 16));
            let both = score(ScoreMode::Both, &r, &i, Some(&o)).unwrap();
            let base = score(ScoreMode::Baseline, &r, &i, None).unwrap();
            let ing = score(ScoreMode::Ingredient, &r, &i, Some(&o)).unwrap();
            let expect = r.dot(&o.e_ing).unwrap() + r.dot(&o.e_act).unwrap();
            assert!((both - base - expect).abs() < 1e-12);
            assert!((both - ing - r.dot(&o.e_act).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_debias_and_dimension_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (r, i) = (rand_vec(&mut rng, 8), rand_vec(&mut rng, 4));
        assert!(score(ScoreMode::Baseline, &r, &i, None).is_err());
        let r2 = rand_vec(&mut rng, 4);
        assert!(matches!(
            score(ScoreMode::Action, &r2, &i, None),
            Err(RetrievalError::MissingDebias(ScoreMode::Action))
        ));
        let _ = ActionPrediction::default();
    }

    #[test]
    fn satisfied_margin_gives_zero_loss() {
        let s = arr2(&[[1.0, 0.2, 0.1], [0.0, 0.9, 0.5], [0.3, 0.1, 0.95]]);
        let (l, g) = triplet_loss(&s, 0.3).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_pair_batch_by_hand() {
        // rows: images, columns: recipes
        let s = arr2(&[[0.5, 0.4], [0.6, 0.7]]);
        // image 0: 0.3 - 0.5 + 0.4 = 0.2; image 1: 0.3 - 0.7 + 0.6 = 0.2
        // recipe 0: 0.3 - 0.5 + 0.6 = 0.4; recipe 1: 0.3 - 0.7 + 0.4 = 0.0
        let (l, _) = triplet_loss(&s, 0.3).unwrap();
        assert!((l - 0.8 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn transposed_batch_gives_identical_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0));
        let (a, _) = triplet_loss(&s, 0.3).unwrap();
        let (b, _) = triplet_loss(&s.t().to_owned(), 0.3).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn single_pair_batch_is_rejected() {
        assert!(matches!(triplet_loss(&arr2(&[[1.0]]), 0.3), Err(RetrievalError::Batch(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
        let (_, g) = triplet_loss(&s, 0.3).unwrap();
        let h = 1e-7;
        for idx in 0..25 {
            let (r, c) = (idx / 5, idx % 5);
            let mut a = s.clone();
            let mut b = s.clone();
            a[[r, c]] += h;
            b[[r, c]] -= h;
            let fd = (triplet_loss(&a, 0.3).unwrap().0 - triplet_loss(&b, 0.3).unwrap().0) / (2.0 * h);
            assert!((fd - g[[r, c]]).abs() < 1e-6);
        }
    }
}
