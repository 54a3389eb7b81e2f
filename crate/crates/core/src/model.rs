//! Affine representation adapter and linear classifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// Row-major `rows x cols` matrix plus a bias of length `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    rows: usize,
    cols: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![T::zero(); rows * cols],
            bias: vec![T::zero(); rows],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut a = Self::zeros(dim, dim);
        for i in 0..dim {
            a.weights[i * dim + i] = T::one();
        }
        a
    }

    pub fn from_parts(rows: usize, cols: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                field: "weights".into(),
                expected: rows * cols,
                found: weights.len(),
            });
        }
        if bias.len() != rows {
            return Err(Error::DimensionMismatch {
                field: "bias".into(),
                expected: rows,
                found: bias.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| dot(self.row(r), x) + self.bias[r])
            .collect()
    }

    /// `W^T g`, the input gradient for an output gradient `g`.
    pub fn backprop_input(&self, g: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for (r, &gr) in g.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += gr * w;
            }
        }
        out
    }

    /// Accumulates `g x^T` into the weights and `g` into the bias.
    pub fn accumulate_outer(&mut self, g: &[T], x: &[T]) {
        for (r, &gr) in g.iter().enumerate() {
            if gr == T::zero() {
                continue;
            }
            let row = &mut self.weights[r * self.cols..(r + 1) * self.cols];
            for (w, &xv) in row.iter_mut().zip(x) {
                *w += gr * xv;
            }
            self.bias[r] += gr;
        }
    }

    /// `self -= step * grad`.
    pub fn descend(&mut self, grad: &Self, step: T) {
        for (w, &g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= step * g;
        }
        for (b, &g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= step * g;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn params(&self) -> impl Iterator<Item = &T> {
        self.weights.iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Linear map from a representation to one score per class.
pub type ClassifierHead<T> = Affine<T>;

/// Trainable affine map applied to the frozen embedding before the head.
pub type Adapter<T> = Affine<T>;

/// Optional adapter followed by a linear head.
///
/// The regularizer acts on the adapter output; without an adapter the
/// representation is the frozen embedding itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub adapter: Option<Adapter<T>>,
    pub head: ClassifierHead<T>,
}

impl<T: Scalar> Model<T> {
    /// Identity adapter (when enabled), head weights uniform in
    /// `[-1/sqrt(d), 1/sqrt(d)]`, zero biases.
    pub fn init(input_dim: usize, n_classes: usize, with_adapter: bool, rng: &mut impl Rng) -> Self {
        let adapter = with_adapter.then(|| Adapter::identity(input_dim));
        let mut head = ClassifierHead::zeros(n_classes, input_dim);
        let bound = 1.0 / (input_dim as f64).sqrt();
        for w in &mut head.weights {
            *w = T::of(rng.random_range(-bound..bound));
        }
        Self { adapter, head }
    }

    pub fn input_dim(&self) -> usize {
        self.adapter.as_ref().map_or(self.head.cols, |a| a.cols)
    }

    pub fn n_classes(&self) -> usize {
        self.head.rows
    }

    pub fn represent(&self, x: &[T]) -> Vec<T> {
        match &self.adapter {
            Some(a) => a.apply(x),
            None => x.to_vec(),
        }
    }

    pub fn logits(&self, x: &[T]) -> Vec<T> {
        self.head.apply(&self.represent(x))
    }

    /// Highest-scoring class; ties go to the lower index.
    pub fn predict_one(&self, x: &[T]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            adapter: self.adapter.as_ref().map(|a| Affine::zeros(a.rows, a.cols)),
            head: Affine::zeros(self.head.rows, self.head.cols),
        }
    }

    pub fn descend(&mut self, grad: &Self, step: T) {
        if let (Some(a), Some(g)) = (self.adapter.as_mut(), grad.adapter.as_ref()) {
            a.descend(g, step);
        }
        self.head.descend(&grad.head, step);
    }

    pub fn is_finite(&self) -> bool {
        self.head.is_finite() && self.adapter.as_ref().is_none_or(Affine::is_finite)
    }

    /// All parameters flattened: adapter weights, adapter bias, head
    /// weights, head bias.
    pub fn parameters(&self) -> Vec<T> {
        self.adapter
            .iter()
            .flat_map(|a| a.params())
            .chain(self.head.params())
            .copied()
            .collect()
    }

    pub fn set_parameters(&mut self, values: &[T]) {
        let slots = self
            .adapter
            .iter_mut()
            .flat_map(|a| a.params_mut())
            .chain(self.head.params_mut());
        for (slot, &v) in slots.zip(values) {
            *slot = v;
        }
    }
}

pub(crate) fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffineRecord {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

/// JSON form of a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    input_dim: usize,
    n_classes: usize,
    adapter: Option<AffineRecord>,
    head: AffineRecord,
}

fn to_record<T: Scalar>(a: &Affine<T>) -> AffineRecord {
    AffineRecord {
        weights: (0..a.rows)
            .map(|r| a.row(r).iter().map(|v| v.to_f64_lossy()).collect())
            .collect(),
        bias: a.bias.iter().map(|v| v.to_f64_lossy()).collect(),
    }
}

fn from_record<T: Scalar>(rec: &AffineRecord, cols: usize, field: &str) -> Result<Affine<T>> {
    let rows = rec.bias.len();
    if rec.weights.len() != rows || rec.weights.iter().any(|r| r.len() != cols) {
        return Err(Error::malformed(field, "ragged or mis-sized weight matrix"));
    }
    Affine::from_parts(
        rows,
        cols,
        rec.weights.iter().flatten().map(|&v| T::of(v)).collect(),
        rec.bias.iter().map(|&v| T::of(v)).collect(),
    )
}

impl<T: Scalar> From<&Model<T>> for ModelRecord {
    fn from(m: &Model<T>) -> Self {
        Self {
            input_dim: m.input_dim(),
            n_classes: m.n_classes(),
            adapter: m.adapter.as_ref().map(to_record),
            head: to_record(&m.head),
        }
    }
}

impl ModelRecord {
    pub fn into_model<T: Scalar>(&self) -> Result<Model<T>> {
        let adapter = self
            .adapter
            .as_ref()
            .map(|a| from_record(a, self.input_dim, "adapter"))
            .transpose()?;
        let rep_dim = adapter.as_ref().map_or(self.input_dim, |a: &Affine<T>| a.rows);
        let head = from_record(&self.head, rep_dim, "head")?;
        if head.rows != self.n_classes {
            return Err(Error::DimensionMismatch {
                field: "head rows".into(),
                expected: self.n_classes,
                found: head.rows,
            });
        }
        Ok(Model { adapter, head })
    }
}
