//! Mini-batch SGD over frozen embeddings with cross-entropy plus the
//! prototype-similarity regularizer, and the two-phase up-weighting baseline.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{pair_coefficients, LossBreakdown};
use crate::metrics::{Prediction, PredictionLog};
use crate::model::{Adapter, Model};
use crate::prototypes::{PrototypeEnsemble, PrototypeTuple, Regime};
use crate::scalar::{dot, Scalar};
use crate::schedule::{LambdaSchedule, DEFAULT_GAMMA};
use crate::store::EmbeddingDataset;

/// Mixed into the seed for prototype sampling so it does not share a stream
/// with initialization and shuffling.
const SAMPLING_SALT: u64 = 0x5eed_9a17_c0de_f00d;

pub const DEFAULT_JTT_GRID: [f64; 6] = [1.0, 2.0, 4.0, 6.0, 8.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Plain,
    Dafair,
    SemiDafair,
    Jtt,
}

impl Method {
    pub fn uses_prototypes(self) -> bool {
        matches!(self, Method::Dafair | Method::SemiDafair)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Plain => "plain",
            Method::Dafair => "dafair",
            Method::SemiDafair => "semi_dafair",
            Method::Jtt => "jtt",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Method::Plain),
            "dafair" => Ok(Method::Dafair),
            "semi_dafair" | "semi-dafair" => Ok(Method::SemiDafair),
            "jtt" => Ok(Method::Jtt),
            other => Err(Error::invalid("method", format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub k_pairs: usize,
    pub lambda_threshold: f64,
    pub gamma: f64,
    /// Batches between prototype re-encodings.
    pub refresh_interval: usize,
    pub method: Method,
    pub jtt_lambda_up: f64,
    /// Train an affine adapter in front of the head. Without it the
    /// regularizer has no parameter to act on.
    pub adapter: bool,
    /// Scale encoded prototype vectors to unit length.
    pub normalize_prototypes: bool,
    /// Encode the prototypes with the current adapter on every batch and
    /// differentiate the regularizer through them as well. When set,
    /// `refresh_interval` has no effect.
    pub prototype_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-2,
            epochs: 1,
            batch_size: 32,
            seed: 0,
            k_pairs: 4,
            lambda_threshold: 0.0,
            gamma: DEFAULT_GAMMA,
            refresh_interval: 200,
            method: Method::Plain,
            jtt_lambda_up: 1.0,
            adapter: true,
            normalize_prototypes: true,
            prototype_gradient: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be finite and positive"));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("k_pairs", self.k_pairs),
            ("refresh_interval", self.refresh_interval),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !(self.jtt_lambda_up > 0.0 && self.jtt_lambda_up.is_finite()) {
            return Err(Error::invalid("jtt_lambda_up", "must be finite and positive"));
        }
        LambdaSchedule::new(self.lambda_threshold, self.gamma, 1)?;
        Ok(())
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Serialize)]
struct TraceRecord {
    step: usize,
    ce: f64,
    kl: f64,
    lambda: f64,
    total: f64,
}

/// Writes one `{step, ce, kl, lambda, total}` JSON object per line.
pub fn write_trace(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for row in trace {
        let rec = TraceRecord {
            step: row.step,
            ce: row.breakdown.ce,
            kl: row.breakdown.kl,
            lambda: row.breakdown.lambda_value,
            total: row.breakdown.total,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub trace: Vec<TraceRow>,
    /// Training rows the first-phase model got wrong (two-phase method only).
    pub upweighted: Option<usize>,
}

/// Where refreshed prototype vectors come from.
pub trait PrototypeSource<T> {
    fn refresh(&self, current: &PrototypeEnsemble<T>) -> Result<PrototypeEnsemble<T>>;
}

/// Frozen encoder: the vectors never change.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenSource;

impl<T: Scalar> PrototypeSource<T> for FrozenSource {
    fn refresh(&self, current: &PrototypeEnsemble<T>) -> Result<PrototypeEnsemble<T>> {
        Ok(current.clone())
    }
}

/// Hands back a fixed, externally supplied ensemble.
#[derive(Debug, Clone)]
pub struct SuppliedSource<T>(pub PrototypeEnsemble<T>);

impl<T: Scalar> PrototypeSource<T> for SuppliedSource<T> {
    fn refresh(&self, _current: &PrototypeEnsemble<T>) -> Result<PrototypeEnsemble<T>> {
        Ok(self.0.clone())
    }
}

/// Recomputes partition means from a labeled dataset.
#[derive(Debug, Clone, Copy)]
pub struct DataDrivenSource<'a> {
    pub dataset: &'a EmbeddingDataset,
    pub n_partitions: usize,
    pub seed: u64,
}

impl<T: Scalar> PrototypeSource<T> for DataDrivenSource<'_> {
    fn refresh(&self, _current: &PrototypeEnsemble<T>) -> Result<PrototypeEnsemble<T>> {
        PrototypeEnsemble::data_driven(self.dataset, self.n_partitions, self.seed)
    }
}

/// Passes raw prototype vectors through the current adapter, the way the
/// training examples are encoded.
#[derive(Debug, Clone, Copy)]
pub struct EncodedSource<'a, T> {
    pub raw: &'a PrototypeEnsemble<T>,
    pub adapter: Option<&'a Adapter<T>>,
    pub normalize: bool,
}

impl<T: Scalar> PrototypeSource<T> for EncodedSource<'_, T> {
    fn refresh(&self, _current: &PrototypeEnsemble<T>) -> Result<PrototypeEnsemble<T>> {
        let encoded = match self.adapter {
            Some(a) => self.raw.map_vectors(|v| a.apply(v)),
            None => self.raw.clone(),
        };
        Ok(if self.normalize {
            encoded.length_normalized()
        } else {
            encoded
        })
    }
}

pub fn refresh_prototypes<T: Scalar>(
    ensemble: &PrototypeEnsemble<T>,
    hook: &impl PrototypeSource<T>,
) -> Result<PrototypeEnsemble<T>> {
    hook.refresh(ensemble)
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a, T> {
    pub x: &'a [T],
    pub y: usize,
    pub weight: T,
}

/// Loss terms and parameter gradient for one batch.
#[derive(Debug, Clone)]
pub struct BatchObjective<T> {
    pub ce: T,
    pub per_pair_kl: Vec<T>,
    pub kl: T,
    pub total: T,
    pub gradient: Model<T>,
}

/// The prototype tuples a batch is regularized against.
#[derive(Debug, Clone, Copy)]
pub enum BatchPrototypes<'a, T> {
    /// Vectors already in representation space, held constant.
    Constant(&'a [&'a PrototypeTuple<T>]),
    /// Raw vectors encoded by the model's adapter inside the objective, so
    /// the regularizer is also differentiated through the prototype side.
    /// `normalize` scales each encoded vector to unit length.
    Encoded {
        raw: &'a [&'a PrototypeTuple<T>],
        normalize: bool,
    },
}

impl<T> BatchPrototypes<'_, T> {
    fn len(&self) -> usize {
        match self {
            BatchPrototypes::Constant(p) => p.len(),
            BatchPrototypes::Encoded { raw, .. } => raw.len(),
        }
    }
}

/// One encoded group vector and what is needed to backpropagate into it.
struct EncodedVector<T> {
    vector: Vec<T>,
    /// Length before normalization; `None` when not normalized.
    norm: Option<T>,
}

fn encode<T: Scalar>(model: &Model<T>, raw: &[T], normalize: bool) -> EncodedVector<T> {
    let e = model.represent(raw);
    if !normalize {
        return EncodedVector { vector: e, norm: None };
    }
    let norm = e.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm > T::zero() {
        EncodedVector {
            vector: e.iter().map(|&v| v / norm).collect(),
            norm: Some(norm),
        }
    } else {
        EncodedVector { vector: e, norm: None }
    }
}

/// Weighted mean cross-entropy plus `lambda` times the batch-mean
/// regularizer, with its exact gradient.
///
/// Both terms divide by the batch size; example weights scale only the
/// cross-entropy. The regularizer sees the adapter output.
pub fn batch_objective<T: Scalar>(
    model: &Model<T>,
    batch: &[Example<'_, T>],
    prototypes: BatchPrototypes<'_, T>,
    lambda: T,
) -> Result<BatchObjective<T>> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    let n_pairs = prototypes.len();
    let (tuples, encoded): (Vec<PrototypeTuple<T>>, Vec<Vec<EncodedVector<T>>>) = match prototypes {
        BatchPrototypes::Constant(pairs) => (pairs.iter().map(|&p| p.clone()).collect(), Vec::new()),
        BatchPrototypes::Encoded { raw, normalize } => {
            let enc: Vec<Vec<EncodedVector<T>>> = raw
                .iter()
                .map(|t| t.vectors().iter().map(|v| encode(model, v, normalize)).collect())
                .collect();
            let tuples = enc
                .iter()
                .map(|groups| PrototypeTuple::new(groups.iter().map(|g| g.vector.clone()).collect()))
                .collect::<Result<Vec<_>>>()?;
            (tuples, enc)
        }
    };

    let inv_b = T::one() / T::of(batch.len() as f64);
    let mut grad = model.zeros_like();
    let mut ce = T::zero();
    let mut per_pair_kl = vec![T::zero(); n_pairs];
    // Per (pair, group): gradient with respect to the encoded vector.
    let dim = model.head.cols();
    let mut proto_grad: Vec<Vec<Vec<T>>> = if encoded.is_empty() {
        Vec::new()
    } else {
        tuples.iter().map(|t| vec![vec![T::zero(); dim]; t.arity()]).collect()
    };

    for ex in batch {
        let h = model.represent(ex.x);
        let logits = model.head.apply(&h);
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let log_norm = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln() + max;
        ce += ex.weight * (log_norm - logits[ex.y]);

        let scale = ex.weight * inv_b;
        let dlogits: Vec<T> = logits
            .iter()
            .enumerate()
            .map(|(c, &l)| {
                let p = (l - log_norm).exp();
                let target = if c == ex.y { T::one() } else { T::zero() };
                scale * (p - target)
            })
            .collect();
        grad.head.accumulate_outer(&dlogits, &h);

        let mut dh = model.head.backprop_input(&dlogits);
        for (j, pair) in tuples.iter().enumerate() {
            let (coeffs, kl) = pair_coefficients(&h, pair, j, lambda * inv_b)?;
            per_pair_kl[j] += kl;
            for (g, &c) in coeffs.iter().enumerate() {
                if c == T::zero() {
                    continue;
                }
                for (d, &pv) in dh.iter_mut().zip(pair.group(g)) {
                    *d += c * pv;
                }
                if let Some(pg) = proto_grad.get_mut(j) {
                    for (d, &hv) in pg[g].iter_mut().zip(&h) {
                        *d += c * hv;
                    }
                }
            }
        }
        if let Some(ga) = grad.adapter.as_mut() {
            ga.accumulate_outer(&dh, ex.x);
        }
    }

    if let (Some(ga), BatchPrototypes::Encoded { raw, .. }) = (grad.adapter.as_mut(), prototypes) {
        for ((pg, enc), src) in proto_grad.iter_mut().zip(&encoded).zip(raw) {
            for (g, d) in pg.iter_mut().enumerate() {
                if let Some(norm) = enc[g].norm {
                    // Through v / |v|: (I - n n^T) d / |v|.
                    let n = &enc[g].vector;
                    let along = dot(n, d);
                    for (dv, &nv) in d.iter_mut().zip(n) {
                        *dv = (*dv - along * nv) / norm;
                    }
                }
                ga.accumulate_outer(d, src.group(g));
            }
        }
    }

    let ce = ce * inv_b;
    for v in &mut per_pair_kl {
        *v *= inv_b;
    }
    let kl: T = per_pair_kl.iter().copied().sum();
    Ok(BatchObjective {
        ce,
        total: ce + lambda * kl,
        per_pair_kl,
        kl,
        gradient: grad,
    })
}

fn widen<T: Scalar>(dataset: &EmbeddingDataset) -> Vec<T> {
    dataset.embeddings().iter().map(|&v| T::widen(v)).collect()
}

/// Trains a model according to `config.method`.
///
/// Prototype methods require `ensemble` (raw vectors in embedding space);
/// `semi_dafair` additionally requires a data-driven ensemble. The two-phase
/// method is dispatched to [`train_jtt`].
pub fn train<T: Scalar>(
    dataset: &EmbeddingDataset,
    ensemble: Option<&PrototypeEnsemble<T>>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    match config.method {
        Method::Jtt => return train_jtt(dataset, config),
        Method::Plain => return run(dataset, None, config, None),
        Method::Dafair | Method::SemiDafair => {}
    }
    let ensemble = ensemble.ok_or_else(|| Error::MissingEnsemble {
        method: config.method.to_string(),
    })?;
    if config.method == Method::SemiDafair && ensemble.regime() != Regime::DataDriven {
        return Err(Error::invalid(
            "ensemble",
            "semi_dafair needs a data-driven prototype ensemble",
        ));
    }
    if config.k_pairs > ensemble.len() {
        return Err(Error::KExceedsEnsemble {
            k: config.k_pairs,
            n: ensemble.len(),
        });
    }
    if ensemble.dim() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            field: "prototype dim".into(),
            expected: dataset.dim(),
            found: ensemble.dim(),
        });
    }
    run(dataset, Some(ensemble), config, None)
}

/// Two-phase training: a plain model first, then a fresh model trained with
/// the rows it misclassified weighted by `config.jtt_lambda_up`.
pub fn train_jtt<T: Scalar>(dataset: &EmbeddingDataset, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let first = run::<T>(dataset, None, config, None)?;
    let log = predict(&first.model, dataset)?;
    let up = T::of(config.jtt_lambda_up);
    let mut errors = 0;
    let weights: Vec<T> = log
        .rows
        .iter()
        .map(|p| {
            if p.y_hat != p.y {
                errors += 1;
                up
            } else {
                T::one()
            }
        })
        .collect();
    debug!("two-phase: {errors} of {} training rows up-weighted by {up}", dataset.len());
    let mut second = run(dataset, None, config, Some(&weights))?;
    second.upweighted = Some(errors);
    Ok(second)
}

fn run<T: Scalar>(
    dataset: &EmbeddingDataset,
    ensemble: Option<&PrototypeEnsemble<T>>,
    config: &TrainConfig,
    weights: Option<&[T]>,
) -> Result<TrainOutcome<T>> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::invalid("dataset", "no training rows"));
    }
    let dim = dataset.dim();
    let data = widen::<T>(dataset);
    let labels = dataset.task_labels();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::<T>::init(dim, dataset.num_classes(), config.adapter, &mut rng);
    let total_steps = config.total_steps(n);
    let schedule = LambdaSchedule::new(T::of(config.lambda_threshold), T::of(config.gamma), total_steps)?;
    let lr = T::of(config.learning_rate);

    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(total_steps);
    // Prototypes encoded by the current adapter inside every batch objective,
    // or re-encoded every `refresh_interval` batches and held constant.
    let live = config.prototype_gradient && model.adapter.is_some();
    let mut encoded: Option<PrototypeEnsemble<T>> = None;
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example<'_, T>> = chunk
                .iter()
                .map(|&i| Example {
                    x: &data[i * dim..(i + 1) * dim],
                    y: labels[i],
                    weight: weights.map_or(T::one(), |w| w[i]),
                })
                .collect();

            let (picked, lambda) = match ensemble {
                Some(raw) => (
                    raw.sample_indices(config.k_pairs, config.seed ^ SAMPLING_SALT, step as u64)?,
                    schedule.lambda_at(step)?,
                ),
                None => (Vec::new(), T::zero()),
            };
            let mut pairs = Vec::with_capacity(picked.len());
            let prototypes = match ensemble {
                Some(raw) if live => {
                    pairs.extend(picked.iter().map(|&j| raw.pair(j)));
                    BatchPrototypes::Encoded {
                        raw: &pairs,
                        normalize: config.normalize_prototypes,
                    }
                }
                Some(raw) => {
                    if step % config.refresh_interval == 0 {
                        let hook = EncodedSource {
                            raw,
                            adapter: model.adapter.as_ref(),
                            normalize: config.normalize_prototypes,
                        };
                        encoded = Some(refresh_prototypes(raw, &hook)?);
                    }
                    let current = encoded.as_ref().expect("refreshed at step 0");
                    pairs.extend(picked.iter().map(|&j| current.pair(j)));
                    BatchPrototypes::Constant(&pairs)
                }
                None => BatchPrototypes::Constant(&pairs),
            };

            let obj = batch_objective(&model, &batch, prototypes, lambda)?;
            if !obj.total.is_finite() {
                return Err(Error::Diverged {
                    batch: step,
                    epoch,
                    what: "loss",
                });
            }
            model.descend(&obj.gradient, lr);
            if !model.is_finite() {
                return Err(Error::Diverged {
                    batch: step,
                    epoch,
                    what: "parameters",
                });
            }

            trace.push(TraceRow {
                step,
                epoch,
                breakdown: LossBreakdown::new(
                    obj.ce.to_f64_lossy(),
                    obj.per_pair_kl.iter().map(|v| v.to_f64_lossy()).collect(),
                    lambda.to_f64_lossy(),
                ),
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        trace,
        upweighted: None,
    })
}

/// Predicted class for every row, with the row's true label and group.
pub fn predict<T: Scalar>(model: &Model<T>, dataset: &EmbeddingDataset) -> Result<PredictionLog> {
    if model.input_dim() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            field: "model input".into(),
            expected: dataset.dim(),
            found: model.input_dim(),
        });
    }
    if model.n_classes() != dataset.num_classes() {
        return Err(Error::DimensionMismatch {
            field: "model classes".into(),
            expected: dataset.num_classes(),
            found: model.n_classes(),
        });
    }
    let mut x = vec![T::zero(); dataset.dim()];
    let rows = dataset
        .rows()
        .zip(dataset.task_labels())
        .zip(dataset.group_labels())
        .map(|((row, &y), &z)| {
            for (dst, &v) in x.iter_mut().zip(row) {
                *dst = T::widen(v);
            }
            Prediction {
                y,
                y_hat: model.predict_one(&x),
                z,
            }
        })
        .collect();
    PredictionLog::new(
        Some(dataset.split()),
        dataset.num_classes(),
        dataset.num_groups(),
        rows,
    )
}
