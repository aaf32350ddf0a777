//! Minimal neural substrate: parameter storage, embedding/dense/LSTM layers
//! with hand-written backward passes, losses, Adam, finite-difference
//! gradient checking and a binary checkpoint format.
//!
//! Layers do not own their weights. They hold [`ParamId`]s into a
//! [`ParamStore`], record what they need during `forward` in a cache value,
//! and accumulate gradients into the store during `backward`.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Meta};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{Dense, DenseCache, Embedding, Lstm, LstmCache};
pub use loss::{bce_loss, bce_with_logit, contrastive_loss, cosine, softmax, softmax_xent, ContrastiveConfig};
pub use optim::{adam_step, AdamConfig};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("index {index} out of bounds for size {size}")]
    Bounds { index: usize, size: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric domain error: {0}")]
    Domain(String),
    #[error("checkpoint format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

/// Row-major dense matrix; vectors are `cols == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// Storage precision. `F32` rounds every stored value (parameters and
/// optimizer moments) to the nearest 32-bit float after each update so
/// checkpoints round-trip exactly; `F64` keeps full precision for gradient
/// checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
    pub adam_m: Mat,
    pub adam_v: Mat,
    /// Multiplies the learning rate; 0 freezes the parameter.
    pub lr_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    pub precision: Precision,
    /// Adam steps taken so far.
    pub step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new(Precision::default())
    }
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            precision,
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Mat) -> Result<ParamId, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateName(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let (rows, cols) = (value.rows, value.cols);
        let mut p = Param {
            name: name.to_string(),
            value,
            grad: Mat::zeros(rows, cols),
            adam_m: Mat::zeros(rows, cols),
            adam_v: Mat::zeros(rows, cols),
            lr_scale: 1.0,
        };
        if self.precision == Precision::F32 {
            round_f32(&mut p.value.data);
        }
        self.params.push(p);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds a parameter initialised uniformly in `[-scale, scale]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId, NnError> {
        let mut m = Mat::zeros(rows, cols);
        if scale > 0.0 {
            for x in &mut m.data {
                *x = rng.gen_range(-scale..=scale);
            }
        }
        self.add(name, m)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].grad
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, k: f64) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g *= k);
        }
    }

    /// Sets the learning-rate multiplier of every parameter whose name starts
    /// with `prefix`.
    pub fn set_lr_scale(&mut self, prefix: &str, scale: f64) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.lr_scale = scale;
            }
        }
    }

    /// Copies values, moments and step count from `other` for every
    /// parameter name both stores share, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        for p in &mut self.params {
            let Some(src) = other.id(&p.name).map(|id| other.get(id)) else {
                return Err(NnError::UnknownParam(p.name.clone()));
            };
            if (src.value.rows, src.value.cols) != (p.value.rows, p.value.cols) {
                return Err(NnError::Shape(format!(
                    "`{}` is {}x{} in the checkpoint, {}x{} in the model",
                    p.name, src.value.rows, src.value.cols, p.value.rows, p.value.cols
                )));
            }
            p.value = src.value.clone();
            p.adam_m = src.adam_m.clone();
            p.adam_v = src.adam_v.clone();
        }
        self.step = other.step;
        Ok(())
    }

    /// Snapshot of every parameter value, in registration order.
    pub fn snapshot(&self) -> Vec<Mat> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Mat]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }
}

pub(crate) fn round_f32(data: &mut [f64]) {
    for x in data {
        *x = *x as f32 as f64;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(Precision::F64);
        s.add("w", Mat::zeros(1, 1)).unwrap();
        assert_eq!(s.add("w", Mat::zeros(2, 1)), Err(NnError::DuplicateName("w".into())));
    }

    #[test]
    fn grads_match_param_shapes() {
        let mut s = ParamStore::new(Precision::F32);
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        s.add_uniform("a", 3, 4, 0.1, &mut rng).unwrap();
        s.add("b", Mat::zeros(5, 1)).unwrap();
        for p in s.params() {
            assert_eq!((p.grad.rows, p.grad.cols), (p.value.rows, p.value.cols));
        }
    }

    #[test]
    fn f32_storage_rounds() {
        let mut s = ParamStore::new(Precision::F32);
        let id = s.add("w", Mat { rows: 1, cols: 1, data: vec![0.1] }).unwrap();
        assert_eq!(s.value(id).data[0], 0.1f32 as f64);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
