//! Regularization-weight warm-up and the accuracy-floor selection rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_GAMMA: f64 = 5.0;

/// Candidate regularization strengths searched by a sweep.
pub const DEFAULT_LAMBDA_GRID: [f64; 10] = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0];

/// Fraction of the unregularized accuracy a candidate must retain.
pub const ACCURACY_FLOOR: f64 = 0.97;

/// Sigmoid ramp from 0 toward `lambda_threshold` over training progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule<T> {
    lambda_threshold: T,
    gamma: T,
    total_steps: usize,
}

impl<T: Scalar> LambdaSchedule<T> {
    pub fn new(lambda_threshold: T, gamma: T, total_steps: usize) -> Result<Self> {
        if lambda_threshold < T::zero() || !lambda_threshold.is_finite() {
            return Err(Error::invalid("lambda_threshold", "must be finite and non-negative"));
        }
        if gamma <= T::zero() || !gamma.is_finite() {
            return Err(Error::invalid("gamma", "must be finite and positive"));
        }
        if total_steps == 0 {
            return Err(Error::invalid("total_steps", "must be positive"));
        }
        Ok(Self {
            lambda_threshold,
            gamma,
            total_steps,
        })
    }

    pub fn lambda_threshold(&self) -> T {
        self.lambda_threshold
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// `(2 / (1 + exp(-gamma * p)) - 1) * lambda_threshold` with
    /// `p = step / total_steps`.
    pub fn lambda_at(&self, step: usize) -> Result<T> {
        if step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let p = T::of(step as f64) / T::of(self.total_steps as f64);
        let two = T::of(2.0);
        let ramp = two / (T::one() + (-self.gamma * p).exp()) - T::one();
        Ok(ramp * self.lambda_threshold)
    }
}

/// One sweep result considered by [`select_threshold`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub threshold: f64,
    pub accuracy: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub threshold: f64,
    pub accuracy: f64,
    pub gap: f64,
    /// False when no candidate met the accuracy floor and the most accurate
    /// one was returned instead.
    pub qualified: bool,
}

/// Largest threshold whose accuracy is at least `0.97 * baseline_accuracy`.
///
/// Falls back to the most accurate candidate (flagged unqualified) when none
/// passes. Ties are broken toward the smaller threshold in the fallback so the
/// result does not depend on candidate order.
pub fn select_threshold(candidates: &[Candidate], baseline_accuracy: f64) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let floor = ACCURACY_FLOOR * baseline_accuracy;
    let pick = |c: &Candidate, qualified| Selection {
        threshold: c.threshold,
        accuracy: c.accuracy,
        gap: c.gap,
        qualified,
    };
    let best_qualified = candidates
        .iter()
        .filter(|c| c.accuracy >= floor)
        .max_by(|a, b| a.threshold.total_cmp(&b.threshold));
    if let Some(c) = best_qualified {
        return Ok(pick(c, true));
    }
    let fallback = candidates
        .iter()
        .max_by(|a, b| {
            a.accuracy
                .total_cmp(&b.accuracy)
                .then(b.threshold.total_cmp(&a.threshold))
        })
        .expect("non-empty");
    Ok(pick(fallback, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints() {
        let s = LambdaSchedule::new(10.0f64, 5.0, 100).unwrap();
        assert_eq!(s.lambda_at(0).unwrap(), 0.0);
        // mpmath: 10 * (2 / (1 + e^-5) - 1) = 9.866142981514303
        assert!((s.lambda_at(100).unwrap() - 9.86614).abs() < 1e-4);
        assert!(matches!(s.lambda_at(101), Err(Error::StepOutOfRange { .. })));

        let off = LambdaSchedule::new(0.0f64, 5.0, 10).unwrap();
        assert!((0..=10).all(|t| off.lambda_at(t).unwrap() == 0.0));
    }

    #[test]
    fn schedule_is_monotone_and_below_threshold() {
        let s = LambdaSchedule::new(3.0f64, 5.0, 250).unwrap();
        let values: Vec<f64> = (0..=250).map(|t| s.lambda_at(t).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[0] <= w[1]));
        let last = *values.last().unwrap();
        assert!(last < 3.0);
        assert!(3.0 - last <= (1.0 - (2.5f64).tanh()) * 3.0 + 1e-12);
    }

    #[test]
    fn invalid_schedules() {
        assert!(LambdaSchedule::new(-1.0f64, 5.0, 10).is_err());
        assert!(LambdaSchedule::new(1.0f64, 0.0, 10).is_err());
        assert!(LambdaSchedule::new(1.0f64, 5.0, 0).is_err());
    }

    fn c(threshold: f64, accuracy: f64) -> Candidate {
        Candidate {
            threshold,
            accuracy,
            gap: 0.0,
        }
    }

    #[test]
    fn selection_examples() {
        // floor = 0.97 * 0.80 = 0.776
        let s = select_threshold(&[c(1.0, 0.79), c(10.0, 0.785), c(100.0, 0.70)], 0.80).unwrap();
        assert_eq!(s.threshold, 10.0);
        assert!(s.qualified);

        let s = select_threshold(&[c(1.0, 0.5), c(10.0, 0.6), c(100.0, 0.4)], 0.80).unwrap();
        assert_eq!(s.threshold, 10.0);
        assert!(!s.qualified);

        let s = select_threshold(&[c(5.0, 0.9)], 0.80).unwrap();
        assert_eq!(s.threshold, 5.0);
        assert!(s.qualified);

        assert!(matches!(select_threshold(&[], 0.8), Err(Error::EmptyCandidates)));
    }

    /// Independent filter-then-max over the candidates.
    fn brute_force(cands: &[Candidate], baseline: f64) -> f64 {
        let mut best: Option<f64> = None;
        for cand in cands {
            if cand.accuracy >= 0.97 * baseline && best.is_none_or(|b| cand.threshold > b) {
                best = Some(cand.threshold);
            }
        }
        best.unwrap_or(f64::NAN)
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            accs in prop::collection::vec(0.0f64..1.0, 1..10),
            baseline in 0.1f64..1.0,
            rot in 0usize..10,
        ) {
            let cands: Vec<Candidate> = accs.iter().enumerate().map(|(i, &a)| c(i as f64 + 1.0, a)).collect();
            let a = select_threshold(&cands, baseline).unwrap();
            let mut rotated = cands.clone();
            rotated.rotate_left(rot % cands.len());
            rotated.reverse();
            let b = select_threshold(&rotated, baseline).unwrap();
            prop_assert_eq!(a, b);
            if a.qualified {
                prop_assert_eq!(a.threshold, brute_force(&cands, baseline));
            } else {
                prop_assert!(brute_force(&cands, baseline).is_nan());
            }
        }
    }
}
