//! Named parameter tensors, seeded initialization, the Adam update and the
//! `encparams-v1` checkpoint container.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format `{found}`, expected `{expected}`")]
    Format { expected: String, found: String },
    #[error("tensor `{0}` missing from checkpoint")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
}

/// Uniform access to the trainable tensors of a module.
///
/// Visiting order is fixed per type, which is what lets gradients, optimizer
/// moments and checkpoints line up by position as well as by name.
pub trait Tensors {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, _, d| d.iter_mut().for_each(|x| *x = value));
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, d| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }

    /// Flattened copy of all tensors, in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// `self += scale * other`; both must be the same module type.
    fn add_scaled(&mut self, other: &dyn Tensors, scale: f64) {
        let src = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, _, d| {
            for x in d.iter_mut() {
                *x += scale * src[offset];
                offset += 1;
            }
        });
    }
}

/// Implements [`Tensors`] for a struct whose listed fields are standard-layout
/// `Array1<f64>` / `Array2<f64>`.
#[macro_export]
macro_rules! impl_tensors {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl $crate::tensor::Tensors for $ty {
            fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
                $( f(stringify!($field), self.$field.shape(),
                     self.$field.as_slice().expect("standard layout")); )+
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
                $(
                    let shape = self.$field.shape().to_vec();
                    f(stringify!($field), &shape,
                      self.$field.as_slice_mut().expect("standard layout"));
                )+
            }
        }
    };
}

/// Gaussian init with standard deviation `1/sqrt(fan_in)`.
pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Array1<f64> {
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array1::from_shape_fn(len, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with per-module moment buffers keyed by a caller-chosen prefix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, key: &str, params: &mut dyn Tensors, grads: &dyn Tensors) {
        let g = grads.flatten();
        let n = g.len();
        let state = self.moments.entry(key.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        assert_eq!(state.m.len(), n, "parameter count changed under key {key}");
        state.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(state.t as i32);
        let bc2 = 1.0 - c.beta2.powi(state.t as i32);
        for i in 0..n {
            state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g[i];
            state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g[i] * g[i];
        }
        let mut offset = 0;
        let (m, v) = (&state.m, &state.v);
        params.visit_mut(&mut |_, _, d| {
            for x in d.iter_mut() {
                let mh = m[offset] / bc1;
                let vh = v[offset] / bc2;
                *x -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
                offset += 1;
            }
        });
    }

    pub fn steps_taken(&self, key: &str) -> u64 {
        self.moments.get(key).map_or(0, |m| m.t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Format-tagged map from tensor name to shape and row-major values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorFile {
    pub format: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

pub const ENCODER_FORMAT: &str = "encparams-v1";

impl TensorFile {
    pub fn new(format: &str) -> Self {
        Self {
            format: format.to_string(),
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_module(&mut self, prefix: &str, module: &dyn Tensors) {
        module.visit(&mut |name, shape, data| {
            self.tensors.insert(
                format!("{prefix}.{name}"),
                StoredTensor {
                    shape: shape.to_vec(),
                    values: data.to_vec(),
                },
            );
        });
    }

    /// Copies stored values into `module`, checking every name and shape.
    pub fn restore_module(&self, prefix: &str, module: &mut dyn Tensors) -> Result<(), TensorError> {
        let mut failure = None;
        module.visit_mut(&mut |name, shape, data| {
            if failure.is_some() {
                return;
            }
            let key = format!("{prefix}.{name}");
            match self.tensors.get(&key) {
                None => failure = Some(TensorError::Missing(key)),
                Some(t) if t.shape != shape => {
                    failure = Some(TensorError::Shape {
                        name: key,
                        expected: shape.to_vec(),
                        found: t.shape.clone(),
                    })
                }
                Some(t) if t.values.iter().any(|x| !x.is_finite()) => {
                    failure = Some(TensorError::NonFinite(key))
                }
                Some(t) => data.copy_from_slice(&t.values),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn write_to(&self, w: impl Write) -> Result<(), TensorError> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read_from(r: impl Read, expected_format: &str) -> Result<Self, TensorError> {
        let file: TensorFile = serde_json::from_reader(r)?;
        if file.format != expected_format {
            return Err(TensorError::Format {
                expected: expected_format.to_string(),
                found: file.format,
            });
        }
        Ok(file)
    }
}
