//! Conditional action-sequence decoder shared by all ingredients of one
//! culture. Output classes are the action dictionary followed by `END`;
//! input tokens additionally include `START`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::softmax_rows;
use crate::impl_tensors;
use crate::tensor::gaussian_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub hidden_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { hidden_dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionGenerator {
    pub wc: Array2<f64>,
    pub bc: Array1<f64>,
    pub tok: Array2<f64>,
    pub pos: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wf1: Array2<f64>,
    pub bf1: Array1<f64>,
    pub wf2: Array2<f64>,
    pub wout: Array2<f64>,
    pub bout: Array1<f64>,
}
impl_tensors!(ActionGenerator { wc, bc, tok, pos, wq, wk, wv, wf1, bf1, wf2, wout, bout });

pub struct GeneratorCache {
    cond: Array1<f64>,
    context: Array1<f64>,
    inputs: Vec<usize>,
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    h1: Array2<f64>,
    f: Array2<f64>,
    h2: Array2<f64>,
    /// One probability row per input position over actions and `END`.
    pub probs: Array2<f64>,
}

/// Greedy decode result. `probs` has one row per emitted action.
pub struct Decoded {
    pub actions: Vec<usize>,
    pub probs: Array2<f64>,
}

impl ActionGenerator {
    pub fn init(cfg: &GeneratorConfig, embed_dim: usize, actions: usize, t_max: usize, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden_dim;
        Self {
            wc: gaussian_matrix(rng, h, 2 * embed_dim, 2 * embed_dim),
            bc: Array1::zeros(h),
            tok: gaussian_matrix(rng, actions + 2, h, h),
            pos: gaussian_matrix(rng, t_max.max(1), h, h),
            wq: gaussian_matrix(rng, h, h, h),
            wk: gaussian_matrix(rng, h, h, h),
            wv: gaussian_matrix(rng, h, h, h),
            wf1: gaussian_matrix(rng, h, h, h),
            bf1: Array1::zeros(h),
            wf2: gaussian_matrix(rng, h, h, h),
            wout: gaussian_matrix(rng, actions + 1, h, h),
            bout: Array1::zeros(actions + 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            wc: Array2::zeros(self.wc.raw_dim()),
            bc: Array1::zeros(self.bc.len()),
            tok: Array2::zeros(self.tok.raw_dim()),
            pos: Array2::zeros(self.pos.raw_dim()),
            wq: Array2::zeros(self.wq.raw_dim()),
            wk: Array2::zeros(self.wk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
            wf1: Array2::zeros(self.wf1.raw_dim()),
            bf1: Array1::zeros(self.bf1.len()),
            wf2: Array2::zeros(self.wf2.raw_dim()),
            wout: Array2::zeros(self.wout.raw_dim()),
            bout: Array1::zeros(self.bout.len()),
        }
    }

    pub fn num_actions(&self) -> usize {
        self.wout.nrows() - 1
    }

    pub fn end_token(&self) -> usize {
        self.num_actions()
    }

    pub fn start_token(&self) -> usize {
        self.num_actions() + 1
    }

    pub fn t_max(&self) -> usize {
        self.pos.nrows()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.wq.nrows() as f64).sqrt()
    }

    /// Teacher-forced pass over `START` followed by `prefix`.
    /// Conditioning embeddings are unit norm; `sqrt(d)` gives their
    /// coordinates unit scale.
    fn cond_scale(&self) -> f64 {
        ((self.wc.ncols() / 2) as f64).sqrt()
    }

    pub fn forward(&self, e_i: ArrayView1<f64>, e_ing: ArrayView1<f64>, prefix: &[usize]) -> GeneratorCache {
        assert!(prefix.len() < self.t_max(), "prefix longer than T_max - 1");
        let cond = concatenate(Axis(0), &[e_i, e_ing]).expect("1-d") * self.cond_scale();
        let context = (self.wc.dot(&cond) + &self.bc).mapv(f64::tanh);
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(self.start_token());
        inputs.extend_from_slice(prefix);
        let t = inputs.len();
        let mut x = Array2::zeros((t, self.wq.nrows()));
        for (i, &tok) in inputs.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &self.tok.row(tok);
            row += &self.pos.row(i);
            row += &context;
        }
        let q = x.dot(&self.wq.t());
        let k = x.dot(&self.wk.t());
        let v = x.dot(&self.wv.t());
        let mut attn = q.dot(&k.t()) * self.scale();
        for (i, mut row) in attn.rows_mut().into_iter().enumerate() {
            let m = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for (j, a) in row.iter_mut().enumerate() {
                *a = if j <= i { (*a - m).exp() } else { 0.0 };
                z += *a;
            }
            row /= z;
        }
        let h1 = &x + &attn.dot(&v);
        let f = (h1.dot(&self.wf1.t()) + &self.bf1).mapv(f64::tanh);
        let h2 = &h1 + &f.dot(&self.wf2.t());
        let logits = h2.dot(&self.wout.t()) + &self.bout;
        let probs = softmax_rows(logits.view());
        GeneratorCache {
            cond,
            context,
            inputs,
            x,
            q,
            k,
            v,
            attn,
            h1,
            f,
            h2,
            probs,
        }
    }

    /// Accumulates parameter gradients for `d_logits` (one row per input
    /// position) and returns the gradient with respect to `e_i`.
    pub fn backward(&self, cache: &GeneratorCache, d_logits: &Array2<f64>, grads: &mut ActionGenerator) -> Array1<f64> {
        grads.wout.scaled_add(1.0, &d_logits.t().dot(&cache.h2));
        grads.bout += &d_logits.sum_axis(Axis(0));
        let d_h2 = d_logits.dot(&self.wout);

        grads.wf2.scaled_add(1.0, &d_h2.t().dot(&cache.f));
        let d_z = d_h2.dot(&self.wf2) * cache.f.mapv(|f| 1.0 - f * f);
        grads.wf1.scaled_add(1.0, &d_z.t().dot(&cache.h1));
        grads.bf1 += &d_z.sum_axis(Axis(0));
        let d_h1 = &d_h2 + &d_z.dot(&self.wf1);

        let d_attn = d_h1.dot(&cache.v.t());
        let d_v = cache.attn.t().dot(&d_h1);
        let inner = (&d_attn * &cache.attn).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_scores = (&cache.attn * &(&d_attn - &inner)) * self.scale();
        let d_q = d_scores.dot(&cache.k);
        let d_k = d_scores.t().dot(&cache.q);
        grads.wq.scaled_add(1.0, &d_q.t().dot(&cache.x));
        grads.wk.scaled_add(1.0, &d_k.t().dot(&cache.x));
        grads.wv.scaled_add(1.0, &d_v.t().dot(&cache.x));
        let d_x = d_h1 + d_q.dot(&self.wq) + d_k.dot(&self.wk) + d_v.dot(&self.wv);

        let mut d_context = Array1::zeros(self.bc.len());
        for (i, &tok) in cache.inputs.iter().enumerate() {
            let row = d_x.row(i);
            grads.tok.row_mut(tok).scaled_add(1.0, &row);
            grads.pos.row_mut(i).scaled_add(1.0, &row);
            d_context += &row;
        }
        let d_u = d_context * cache.context.mapv(|c| 1.0 - c * c);
        grads
            .wc
            .scaled_add(1.0, &d_u.view().insert_axis(Axis(1)).dot(&cache.cond.view().insert_axis(Axis(0))));
        grads.bc += &d_u;
        let d_cond = self.wc.t().dot(&d_u);
        d_cond.slice(s![..self.wc.ncols() / 2]).to_owned() * self.cond_scale()
    }

    /// Greedy decoding of at most `T_max` actions. An immediate `END` is
    /// replaced by the most probable action so every sequence is non-empty.
    pub fn decode(&self, e_i: ArrayView1<f64>, e_ing: ArrayView1<f64>) -> Decoded {
        let end = self.end_token();
        let mut actions = Vec::new();
        let mut rows: Vec<Array1<f64>> = Vec::new();
        while actions.len() < self.t_max() {
            let cache = self.forward(e_i, e_ing, &actions);
            let p = cache.probs.row(actions.len()).to_owned();
            let mut best = argmax(p.view());
            if best == end {
                if !actions.is_empty() {
                    break;
                }
                best = argmax(p.slice(s![..end]));
            }
            actions.push(best);
            rows.push(p);
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let probs = ndarray::stack(Axis(0), &views).expect("equal widths");
        Decoded { actions, probs }
    }

    /// Decoder targets for a gold action sequence: the actions, then `END`
    /// when the sequence is shorter than `T_max`.
    pub fn targets(&self, gold: &[usize]) -> Vec<usize> {
        let mut t: Vec<usize> = gold.iter().copied().take(self.t_max()).collect();
        if t.len() < self.t_max() {
            t.push(self.end_token());
        }
        t
    }
}

fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensors;
    use rand::{Rng, SeedableRng};

    fn toy(rng: &mut ChaCha8Rng) -> ActionGenerator {
        ActionGenerator::init(&GeneratorConfig { hidden_dim: 6 }, 4, 5, 4, rng)
    }

    fn vec4(rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rows_are_distributions_and_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = toy(&mut rng);
        let (e, i) = (vec4(&mut rng), vec4(&mut rng));
        let a = g.forward(e.view(), i.view(), &[1, 2]);
        for row in a.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert_eq!(row.len(), 6);
        }
        let b = g.forward(e.view(), i.view(), &[1, 4]);
        for j in 0..6 {
            assert_eq!(a.probs[[1, j]], b.probs[[1, j]]);
        }
    }

    #[test]
    fn forced_decode_stops_at_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = toy(&mut rng);
        g.wout.fill(0.0);
        g.bout.fill(0.0);
        g.bout[2] = 50.0;
        let e = vec4(&mut rng);
        let out = g.decode(e.view(), e.view());
        assert_eq!(out.actions.len(), g.t_max());
        g.bout[2] = 0.0;
        let end = g.end_token();
        g.bout[end] = 50.0;
        let out = g.decode(e.view(), e.view());
        assert_eq!(out.actions.len(), 1, "immediate END falls back to one action");
        assert_eq!(out.probs.nrows(), 1);
    }

    #[test]
    fn decode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = toy(&mut rng);
        let (e, i) = (vec4(&mut rng), vec4(&mut rng));
        let a = g.decode(e.view(), i.view());
        let b = g.decode(e.view(), i.view());
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.probs, b.probs);
        for row in a.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn targets_append_end_below_t_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = toy(&mut rng);
        assert_eq!(g.targets(&[1, 2]), vec![1, 2, g.end_token()]);
        assert_eq!(g.targets(&[1, 2, 3, 0]), vec![1, 2, 3, 0]);
    }

    fn objective(g: &ActionGenerator, e: &Array1<f64>, i: &Array1<f64>, w: &Array2<f64>) -> f64 {
        let c = g.forward(e.view(), i.view(), &[3, 0]);
        let logits = c.h2.dot(&g.wout.t()) + &g.bout;
        (&logits * w).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = toy(&mut rng);
        let (e, i) = (vec4(&mut rng), vec4(&mut rng));
        let w = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0));
        let cache = g.forward(e.view(), i.view(), &[3, 0]);
        let mut grads = g.zeros_like();
        let d_e = g.backward(&cache, &w, &mut grads);
        let analytic = grads.flatten();
        let h = 1e-5;
        for p in 0..analytic.len() {
            let mut a = g.clone();
            let mut b = g.clone();
            nudge(&mut a, p, h);
            nudge(&mut b, p, -h);
            let fd = (objective(&a, &e, &i, &w) - objective(&b, &e, &i, &w)) / (2.0 * h);
            assert!((fd - analytic[p]).abs() <= 1e-3 * fd.abs().max(1e-4), "param {p}: {fd} vs {}", analytic[p]);
        }
        for k in 0..4 {
            let mut a = e.clone();
            let mut b = e.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (objective(&g, &a, &i, &w) - objective(&g, &b, &i, &w)) / (2.0 * h);
            assert!((fd - d_e[k]).abs() <= 1e-3 * fd.abs().max(1e-4));
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
