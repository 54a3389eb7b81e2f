//! Prototype-similarity regularizer.
//!
//! For a representation `x` and a prototype tuple `[p_1, .., p_m]` the
//! similarities `s_g = x . p_g` are turned into a distribution with a softmax
//! and compared to the uniform distribution over the `m` groups with
//! `KL(softmax(s) || uniform)` in nats. The regularizer sums that divergence
//! over the sampled tuples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::PrototypeTuple;
use crate::scalar::{dot, Scalar};

/// Softmax of one tuple's similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDistribution<T> {
    probabilities: Vec<T>,
    log_probabilities: Vec<T>,
    pub pair_id: usize,
}

impl<T: Scalar> SimilarityDistribution<T> {
    /// Builds a distribution directly from probabilities.
    pub fn from_probabilities(probabilities: Vec<T>, pair_id: usize) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::invalid("probabilities", "empty distribution"));
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::invalid("probabilities", "entries must be finite and non-negative"));
        }
        let total: T = probabilities.iter().copied().sum();
        if (total - T::one()).abs() > T::of(1e-9).max(T::epsilon() * T::of(16.0)) {
            return Err(Error::invalid("probabilities", format!("sum is {total}, expected 1")));
        }
        let log_probabilities = probabilities.iter().map(|p| p.ln()).collect();
        Ok(Self {
            probabilities,
            log_probabilities,
            pair_id,
        })
    }

    pub fn probabilities(&self) -> &[T] {
        &self.probabilities
    }

    pub fn log_probabilities(&self) -> &[T] {
        &self.log_probabilities
    }

    pub fn n_groups(&self) -> usize {
        self.probabilities.len()
    }
}

/// Per-batch loss accounting, one row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kl: f64,
    pub lambda_value: f64,
    pub total: f64,
    pub per_pair_kl: Vec<f64>,
}

impl LossBreakdown {
    pub fn new(ce: f64, per_pair_kl: Vec<f64>, lambda_value: f64) -> Self {
        let kl = per_pair_kl.iter().sum();
        Self {
            ce,
            kl,
            lambda_value,
            total: total_loss(ce, kl, lambda_value),
            per_pair_kl,
        }
    }
}

/// Dot product of `x` with every group vector of the tuple.
pub fn pair_similarities<T: Scalar>(x: &[T], pair: &PrototypeTuple<T>) -> Result<Vec<T>> {
    if x.len() != pair.dim() {
        return Err(Error::DimensionMismatch {
            field: "representation".into(),
            expected: pair.dim(),
            found: x.len(),
        });
    }
    Ok(pair.vectors().iter().map(|p| dot(x, p)).collect())
}

/// Max-shifted softmax; log-probabilities are kept exact for the gradient.
pub fn similarity_distribution<T: Scalar>(sims: &[T], pair_id: usize) -> SimilarityDistribution<T> {
    let max = sims.iter().copied().fold(T::neg_infinity(), T::max);
    let shifted: Vec<T> = sims.iter().map(|&s| s - max).collect();
    let log_norm = shifted.iter().map(|&s| s.exp()).sum::<T>().ln();
    let log_probabilities: Vec<T> = shifted.iter().map(|&s| s - log_norm).collect();
    let probabilities = log_probabilities.iter().map(|&l| l.exp()).collect();
    SimilarityDistribution {
        probabilities,
        log_probabilities,
        pair_id,
    }
}

/// `KL(dist || uniform)` in nats.
///
/// Terms are `p * ln(p * m)`. A distribution whose entries are all equal is
/// the uniform one and yields exactly zero.
pub fn kl_to_uniform<T: Scalar>(dist: &SimilarityDistribution<T>) -> T {
    let first = dist.probabilities[0];
    if dist.probabilities.iter().all(|&p| p == first) {
        return T::zero();
    }
    let m = T::of(dist.n_groups() as f64);
    let kl = dist
        .probabilities
        .iter()
        .filter(|p| **p > T::zero())
        .map(|&p| p * (p * m).ln())
        .sum::<T>();
    kl.max(T::zero())
}

/// Regularizer value summed over `pairs`, and each tuple's contribution.
pub fn dafair_kl<T: Scalar>(x: &[T], pairs: &[&PrototypeTuple<T>]) -> Result<(T, Vec<T>)> {
    let per_pair = pairs
        .iter()
        .enumerate()
        .map(|(j, pair)| {
            let sims = pair_similarities(x, pair)?;
            Ok(kl_to_uniform(&similarity_distribution(&sims, j)))
        })
        .collect::<Result<Vec<T>>>()?;
    Ok((per_pair.iter().copied().sum(), per_pair))
}

/// Exact gradient of [`dafair_kl`] with respect to `x`.
///
/// For each tuple with prototype matrix `P` (rows are group vectors) and
/// softmax `p`, the contribution is `P^T (p * (v - p.v))` with
/// `v = ln p - ln u + 1`. Prototypes are treated as constants.
pub fn dafair_kl_gradient<T: Scalar>(x: &[T], pairs: &[&PrototypeTuple<T>]) -> Result<Vec<T>> {
    let mut grad = vec![T::zero(); x.len()];
    for (j, pair) in pairs.iter().enumerate() {
        accumulate_pair_gradient(x, pair, j, T::one(), &mut grad)?;
    }
    Ok(grad)
}

/// Softmax-weighted coefficients `scale * p_g * (v_g - p.v)` of one tuple,
/// and the tuple's KL.
///
/// The derivative of `scale * KL_pair` is `sum_g c_g * p_g` with respect to
/// the representation and `c_g * x` with respect to group vector `g`.
pub(crate) fn pair_coefficients<T: Scalar>(
    x: &[T],
    pair: &PrototypeTuple<T>,
    pair_id: usize,
    scale: T,
) -> Result<(Vec<T>, T)> {
    let sims = pair_similarities(x, pair)?;
    let dist = similarity_distribution(&sims, pair_id);
    let ln_m = T::of(dist.n_groups() as f64).ln();
    let v: Vec<T> = dist
        .log_probabilities
        .iter()
        .map(|&l| l + ln_m + T::one())
        .collect();
    let mean_v = dot(&dist.probabilities, &v);
    let coeffs = dist
        .probabilities
        .iter()
        .zip(&v)
        .map(|(&p, &vg)| scale * p * (vg - mean_v))
        .collect();
    Ok((coeffs, kl_to_uniform(&dist)))
}

/// Adds `scale * d KL_pair / d x` into `grad` and returns the pair's KL.
pub(crate) fn accumulate_pair_gradient<T: Scalar>(
    x: &[T],
    pair: &PrototypeTuple<T>,
    pair_id: usize,
    scale: T,
    grad: &mut [T],
) -> Result<T> {
    let (coeffs, kl) = pair_coefficients(x, pair, pair_id, scale)?;
    for (&coeff, proto) in coeffs.iter().zip(pair.vectors()) {
        if coeff != T::zero() {
            for (g, &pv) in grad.iter_mut().zip(proto) {
                *g += coeff * pv;
            }
        }
    }
    Ok(kl)
}

/// `ce + lambda * kl`.
pub fn total_loss<T: Scalar>(ce: T, kl: T, lambda_value: T) -> T {
    ce + lambda_value * kl
}
