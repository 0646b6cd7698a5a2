//! Asymmetric multi-label loss and teacher-forced sequence cross-entropy.

use ndarray::{Array2, ArrayView1, ArrayView2};

use super::DebiasError;

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax, stable under large logits.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_len(probs: usize, labels: usize) -> Result<(), DebiasError> {
    if probs != labels {
        return Err(DebiasError::Shape(format!("{probs} probabilities but {labels} labels")));
    }
    if probs == 0 {
        return Err(DebiasError::Shape("empty label vector".into()));
    }
    Ok(())
}

/// Mean over labels of `-(1-p)^g+ ln p` (positives) and `-p^g- ln(1-p)`
/// (negatives).
pub fn asymmetric_loss(
    probs: ArrayView1<f64>,
    labels: &[bool],
    gamma_plus: f64,
    gamma_minus: f64,
) -> Result<f64, DebiasError> {
    check_len(probs.len(), labels.len())?;
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp(p);
            if y {
                -(1.0 - p).powf(gamma_plus) * p.ln()
            } else {
                -p.powf(gamma_minus) * (1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / labels.len() as f64)
}

/// Gradient of [`asymmetric_loss`] with respect to the probabilities.
pub fn asymmetric_loss_grad(
    probs: ArrayView1<f64>,
    labels: &[bool],
    gamma_plus: f64,
    gamma_minus: f64,
) -> Result<Vec<f64>, DebiasError> {
    check_len(probs.len(), labels.len())?;
    let k = labels.len() as f64;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp(p);
            let g = if y {
                let focal = if gamma_plus == 0.0 {
                    0.0
                } else {
                    gamma_plus * (1.0 - p).powf(gamma_plus - 1.0) * p.ln()
                };
                focal - (1.0 - p).powf(gamma_plus) / p
            } else {
                let focal = if gamma_minus == 0.0 {
                    0.0
                } else {
                    -gamma_minus * p.powf(gamma_minus - 1.0) * (1.0 - p).ln()
                };
                focal + p.powf(gamma_minus) / (1.0 - p)
            };
            g / k
        })
        .collect())
}

/// `-(1/L) sum_l sum_t ln p_l[t, y_t]` for `L` teacher-forced sequences.
/// `step_probs[l]` holds one probability row per target of `gold[l]`.
pub fn generation_loss(step_probs: &[Array2<f64>], gold: &[Vec<usize>]) -> Result<f64, DebiasError> {
    if step_probs.len() != gold.len() {
        return Err(DebiasError::Shape(format!(
            "{} probability tables but {} gold sequences",
            step_probs.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(DebiasError::Shape("no gold sequences".into()));
    }
    let mut total = 0.0;
    for (probs, seq) in step_probs.iter().zip(gold) {
        if probs.nrows() != seq.len() {
            return Err(DebiasError::Shape(format!(
                "{} probability rows for a gold sequence of length {}",
                probs.nrows(),
                seq.len()
            )));
        }
        for (t, &y) in seq.iter().enumerate() {
            if y >= probs.ncols() {
                return Err(DebiasError::GoldOutOfVocabulary(format!("#{y}")));
            }
            total -= clamp(probs[[t, y]]).ln();
        }
    }
    Ok(total / gold.len() as f64)
}

/// Logit gradient of one sequence's share of [`generation_loss`]:
/// `(softmax - onehot) / L`.
pub fn generation_loss_logit_grad(probs: &Array2<f64>, gold: &[usize], n_sequences: usize) -> Array2<f64> {
    let mut g = probs.clone();
    for (t, &y) in gold.iter().enumerate() {
        g[[t, y]] -= 1.0;
    }
    g / n_sequences as f64
}
