//! Multi-label ingredient classifier: learnable label queries attend over
//! the image embedding cut into fixed-width tokens.
//!
//! The unit-norm embedding is rescaled by `sqrt(d)` on entry so that its
//! coordinates have unit scale.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::sigmoid;
use crate::impl_tensors;
use crate::tensor::gaussian_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Width of each image-embedding token; must divide the embedding dim.
    pub token_width: usize,
    pub attention_dim: usize,
    /// Initial logit bias, so that an untrained classifier selects little.
    pub init_bias: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            token_width: 8,
            attention_dim: 16,
            init_bias: -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelClassifier {
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub pos: Array2<f64>,
    pub queries: Array2<f64>,
    pub u: Array2<f64>,
    pub z: Array2<f64>,
    pub b: Array1<f64>,
}
impl_tensors!(LabelClassifier { wk, wv, pos, queries, u, z, b });

pub struct ClassifierCache {
    tokens: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    attn: Array2<f64>,
    pooled: Array2<f64>,
    input: Array1<f64>,
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
}

impl LabelClassifier {
    pub fn init(cfg: &ClassifierConfig, embed_dim: usize, labels: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            cfg.token_width > 0 && embed_dim % cfg.token_width == 0,
            "token width must divide the embedding dim"
        );
        let c = cfg.token_width;
        let a = cfg.attention_dim;
        let n = embed_dim / c;
        Self {
            wk: gaussian_matrix(rng, a, c, c),
            wv: gaussian_matrix(rng, a, c, c),
            pos: gaussian_matrix(rng, n, a, a),
            queries: gaussian_matrix(rng, labels, a, a),
            u: gaussian_matrix(rng, labels, a, a),
            z: gaussian_matrix(rng, labels, embed_dim, embed_dim),
            b: Array1::from_elem(labels, cfg.init_bias),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            wk: Array2::zeros(self.wk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
            pos: Array2::zeros(self.pos.raw_dim()),
            queries: Array2::zeros(self.queries.raw_dim()),
            u: Array2::zeros(self.u.raw_dim()),
            z: Array2::zeros(self.z.raw_dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.b.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.z.ncols()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.queries.ncols() as f64).sqrt()
    }

    fn input_scale(&self) -> f64 {
        (self.embed_dim() as f64).sqrt()
    }

    pub fn forward(&self, e_i: ArrayView1<f64>) -> ClassifierCache {
        let c = self.wk.ncols();
        let n = e_i.len() / c;
        let x = &e_i * self.input_scale();
        let tokens = x.clone().into_shape_with_order((n, c)).expect("divisible embedding");
        let keys = tokens.dot(&self.wk.t()) + &self.pos;
        let values = tokens.dot(&self.wv.t());
        let mut attn = self.queries.dot(&keys.t()) * self.scale();
        for mut row in attn.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row /= s;
        }
        let pooled = attn.dot(&values);
        let logits = (&self.u * &pooled).sum_axis(Axis(1)) + self.z.dot(&x) + &self.b;
        let probs = logits.mapv(sigmoid);
        ClassifierCache {
            tokens,
            keys,
            values,
            attn,
            pooled,
            input: x,
            logits,
            probs,
        }
    }

    /// Accumulates parameter gradients for `d_logits` and returns the
    /// gradient with respect to the image embedding.
    pub fn backward(&self, cache: &ClassifierCache, d_logits: ArrayView1<f64>, grads: &mut LabelClassifier) -> Array1<f64> {
        let dl = d_logits.insert_axis(Axis(1));
        grads.u.scaled_add(1.0, &(&dl * &cache.pooled));
        grads.b += &d_logits;
        grads
            .z
            .scaled_add(1.0, &dl.dot(&cache.input.view().insert_axis(Axis(0))));
        let mut d_input = self.z.t().dot(&d_logits);

        let d_pooled = &dl * &self.u;
        let d_attn = d_pooled.dot(&cache.values.t());
        let d_values = cache.attn.t().dot(&d_pooled);
        let inner = (&d_attn * &cache.attn).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_scores = (&cache.attn * &(&d_attn - &inner)) * self.scale();
        grads.queries.scaled_add(1.0, &d_scores.dot(&cache.keys));
        let d_keys = d_scores.t().dot(&self.queries);
        grads.wk.scaled_add(1.0, &d_keys.t().dot(&cache.tokens));
        grads.pos += &d_keys;
        grads.wv.scaled_add(1.0, &d_values.t().dot(&cache.tokens));
        let d_tokens = d_keys.dot(&self.wk) + d_values.dot(&self.wv);
        d_input += &d_tokens.into_shape_with_order(cache.input.len()).expect("contiguous");
        d_input * self.input_scale()
    }

    pub fn probabilities(&self, e_i: ArrayView1<f64>) -> Array1<f64> {
        self.forward(e_i).probs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensors;
    use rand::{Rng, SeedableRng};

    fn toy(rng: &mut ChaCha8Rng) -> LabelClassifier {
        let cfg = ClassifierConfig {
            token_width: 4,
            attention_dim: 3,
            init_bias: 0.1,
        };
        LabelClassifier::init(&cfg, 8, 5, rng)
    }

    fn objective(c: &LabelClassifier, e: &Array1<f64>, w: &Array1<f64>) -> f64 {
        c.forward(e.view()).logits.dot(w)
    }

    #[test]
    fn probabilities_are_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = toy(&mut rng);
        let e = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let p = c.probabilities(e.view());
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = toy(&mut rng);
        let e = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let w = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let mut grads = c.zeros_like();
        let cache = c.forward(e.view());
        let d_e = c.backward(&cache, w.view(), &mut grads);
        let analytic = grads.flatten();
        let h = 1e-5;
        for i in 0..analytic.len() {
            let mut a = c.clone();
            let mut b = c.clone();
            nudge(&mut a, i, h);
            nudge(&mut b, i, -h);
            let fd = (objective(&a, &e, &w) - objective(&b, &e, &w)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() <= 1e-3 * fd.abs().max(1e-4), "param {i}: {fd} vs {}", analytic[i]);
        }
        for i in 0..8 {
            let mut a = e.clone();
            let mut b = e.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (objective(&c, &a, &w) - objective(&c, &b, &w)) / (2.0 * h);
            assert!((fd - d_e[i]).abs() <= 1e-3 * fd.abs().max(1e-4));
        }
    }

    fn nudge(t: &mut dyn Tensors, index: usize, delta: f64) {
        let mut offset = 0;
        t.visit_mut(&mut |_, _, d| {
            if index >= offset && index < offset + d.len() {
                d[index - offset] += delta;
            }
            offset += d.len();
        });
    }
}
