//! Accuracy, TPR gap and KL-based group fairness measures over a
//! prediction log.
//!
//! Every metric is a function of the `(y, y_hat, z)` contingency counts of
//! rows whose group is known. Empirical distributions are smoothed before any
//! KL divergence: for counts `c` over `m` outcomes,
//! `q_i = (c_i / total + SMOOTHING) / (1 + m * SMOOTHING)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Split;

pub const SMOOTHING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub y: usize,
    pub y_hat: usize,
    pub z: Option<usize>,
}

/// True labels, predictions and (possibly unknown) groups for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLog {
    pub split: Option<Split>,
    pub n_classes: usize,
    pub n_groups: usize,
    pub rows: Vec<Prediction>,
}

impl PredictionLog {
    pub fn new(split: Option<Split>, n_classes: usize, n_groups: usize, rows: Vec<Prediction>) -> Result<Self> {
        let log = Self {
            split,
            n_classes,
            n_groups,
            rows,
        };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::EmptyLog);
        }
        for (row, p) in self.rows.iter().enumerate() {
            for (field, v) in [("y", p.y), ("y_hat", p.y_hat)] {
                if v >= self.n_classes {
                    return Err(Error::LabelOutOfRange {
                        field: field.into(),
                        row,
                        value: v as i64,
                        limit: self.n_classes,
                    });
                }
            }
            if let Some(z) = p.z {
                if z >= self.n_groups {
                    return Err(Error::LabelOutOfRange {
                        field: "z".into(),
                        row,
                        value: z as i64,
                        limit: self.n_groups,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let log: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        log.validate()?;
        Ok(log)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `counts[y][y_hat][z]` over rows with a known group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contingency {
    n_classes: usize,
    n_groups: usize,
    counts: Vec<u64>,
}

impl Contingency {
    pub fn from_log(log: &PredictionLog) -> Self {
        let mut c = Self {
            n_classes: log.n_classes,
            n_groups: log.n_groups,
            counts: vec![0; log.n_classes * log.n_classes * log.n_groups],
        };
        for p in &log.rows {
            if let Some(z) = p.z {
                let i = c.index(p.y, p.y_hat, z);
                c.counts[i] += 1;
            }
        }
        c
    }

    fn index(&self, y: usize, y_hat: usize, z: usize) -> usize {
        (y * self.n_classes + y_hat) * self.n_groups + z
    }

    pub fn get(&self, y: usize, y_hat: usize, z: usize) -> u64 {
        self.counts[self.index(y, y_hat, z)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Sum of counts over the cells matching the given coordinates
    /// (`None` marginalizes that axis).
    fn sum(&self, y: Option<usize>, y_hat: Option<usize>, z: Option<usize>) -> u64 {
        let mut total = 0;
        for yy in 0..self.n_classes {
            if y.is_some_and(|v| v != yy) {
                continue;
            }
            for yh in 0..self.n_classes {
                if y_hat.is_some_and(|v| v != yh) {
                    continue;
                }
                for zz in 0..self.n_groups {
                    if z.is_some_and(|v| v != zz) {
                        continue;
                    }
                    total += self.get(yy, yh, zz);
                }
            }
        }
        total
    }
}

fn smoothed(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let m = counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 / total as f64 + SMOOTHING) / (1.0 + m * SMOOTHING))
        .collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0)
}

/// A metric value together with the terms that had to be skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricValue<V> {
    pub value: V,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TprGap {
    pub per_class: Vec<f64>,
    pub rms: f64,
}

fn require_groups(log: &PredictionLog) -> Result<()> {
    log.validate()?;
    if log.n_groups != 2 {
        return Err(Error::GroupCount { found: log.n_groups });
    }
    Ok(())
}

/// Per-class `TPR(group 0) - TPR(group 1)` and their root mean square over
/// all classes. Classes missing from either group contribute a zero gap.
pub fn tpr_gap(log: &PredictionLog) -> Result<MetricValue<TprGap>> {
    require_groups(log)?;
    let c = Contingency::from_log(log);
    let mut warnings = Vec::new();
    let per_class: Vec<f64> = (0..log.n_classes)
        .map(|y| {
            let support: Vec<u64> = (0..2).map(|z| c.sum(Some(y), None, Some(z))).collect();
            if support.contains(&0) {
                warnings.push(format!("tpr_gap: class {y} absent for a group; gap set to 0"));
                return 0.0;
            }
            let tpr = |z: usize| c.get(y, y, z) as f64 / support[z] as f64;
            tpr(0) - tpr(1)
        })
        .collect();
    let rms = (per_class.iter().map(|g| g * g).sum::<f64>() / log.n_classes as f64).sqrt();
    Ok(MetricValue {
        value: TprGap { per_class, rms },
        warnings,
    })
}

/// `sum_z KL(P(y_hat) || P(y_hat | z))`.
pub fn independence(log: &PredictionLog) -> Result<MetricValue<f64>> {
    log.validate()?;
    let c = Contingency::from_log(log);
    let mut warnings = Vec::new();
    if c.total() == 0 {
        warnings.push("independence: no rows with a known group".into());
        return Ok(MetricValue { value: 0.0, warnings });
    }
    let n = log.n_classes;
    let marginal = smoothed(&(0..n).map(|yh| c.sum(None, Some(yh), None)).collect::<Vec<_>>());
    let mut value = 0.0;
    for z in 0..log.n_groups {
        let cond: Vec<u64> = (0..n).map(|yh| c.sum(None, Some(yh), Some(z))).collect();
        if cond.iter().sum::<u64>() == 0 {
            warnings.push(format!("independence: group {z} has no rows; term skipped"));
            continue;
        }
        value += kl(&marginal, &smoothed(&cond));
    }
    Ok(MetricValue { value, warnings })
}

/// `sum_{y,z} KL(P(y_hat | y) || P(y_hat | y, z))`.
pub fn separation(log: &PredictionLog) -> Result<MetricValue<f64>> {
    log.validate()?;
    let c = Contingency::from_log(log);
    let n = log.n_classes;
    let mut warnings = Vec::new();
    let mut value = 0.0;
    for y in 0..n {
        let given_y: Vec<u64> = (0..n).map(|yh| c.sum(Some(y), Some(yh), None)).collect();
        if given_y.iter().sum::<u64>() == 0 {
            warnings.push(format!("separation: class {y} has no rows; terms skipped"));
            continue;
        }
        let reference = smoothed(&given_y);
        for z in 0..log.n_groups {
            let cond: Vec<u64> = (0..n).map(|yh| c.get(y, yh, z)).collect();
            if cond.iter().sum::<u64>() == 0 {
                warnings.push(format!("separation: class {y} absent for group {z}; term skipped"));
                continue;
            }
            value += kl(&reference, &smoothed(&cond));
        }
    }
    Ok(MetricValue { value, warnings })
}

/// `sum_{y_hat,z} KL(P(y | y_hat) || P(y | y_hat, z))`.
pub fn sufficiency(log: &PredictionLog) -> Result<MetricValue<f64>> {
    log.validate()?;
    let c = Contingency::from_log(log);
    let n = log.n_classes;
    let mut warnings = Vec::new();
    let mut value = 0.0;
    for yh in 0..n {
        let given: Vec<u64> = (0..n).map(|y| c.sum(Some(y), Some(yh), None)).collect();
        if given.iter().sum::<u64>() == 0 {
            warnings.push(format!("sufficiency: class {yh} never predicted; terms skipped"));
            continue;
        }
        let reference = smoothed(&given);
        for z in 0..log.n_groups {
            let cond: Vec<u64> = (0..n).map(|y| c.get(y, yh, z)).collect();
            if cond.iter().sum::<u64>() == 0 {
                warnings.push(format!(
                    "sufficiency: class {yh} never predicted for group {z}; term skipped"
                ));
                continue;
            }
            value += kl(&reference, &smoothed(&cond));
        }
    }
    Ok(MetricValue { value, warnings })
}

/// Accuracy plus every group metric. Group metrics are `None` when no row
/// carries a group label; the TPR gap is `None` unless there are two groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub tpr_gap_rms: Option<f64>,
    pub per_class_tpr_gap: Option<Vec<f64>>,
    pub independence: Option<f64>,
    pub separation: Option<f64>,
    pub sufficiency: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn report(log: &PredictionLog) -> Result<FairnessReport> {
    log.validate()?;
    let correct = log.rows.iter().filter(|p| p.y == p.y_hat).count();
    let accuracy = correct as f64 / log.len() as f64;
    let mut warnings = Vec::new();

    if log.rows.iter().all(|p| p.z.is_none()) {
        warnings.push("no rows carry a group label; group metrics omitted".into());
        return Ok(FairnessReport {
            accuracy,
            tpr_gap_rms: None,
            per_class_tpr_gap: None,
            independence: None,
            separation: None,
            sufficiency: None,
            warnings,
        });
    }
    let unknown = log.rows.iter().filter(|p| p.z.is_none()).count();
    if unknown > 0 {
        warnings.push(format!("{unknown} rows without a group label excluded from group metrics"));
    }

    let (tpr_gap_rms, per_class_tpr_gap) = if log.n_groups == 2 {
        let gap = tpr_gap(log)?;
        warnings.extend(gap.warnings);
        (Some(gap.value.rms), Some(gap.value.per_class))
    } else {
        warnings.push(format!("tpr gap needs 2 groups, log has {}", log.n_groups));
        (None, None)
    };
    let mut take = |m: MetricValue<f64>| {
        warnings.extend(m.warnings);
        Some(m.value)
    };
    let independence = take(independence(log)?);
    let separation = take(separation(log)?);
    let sufficiency = take(sufficiency(log)?);
    Ok(FairnessReport {
        accuracy,
        tpr_gap_rms,
        per_class_tpr_gap,
        independence,
        separation,
        sufficiency,
        warnings,
    })
}

/// Side-by-side change from `before` to `after`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub accuracy_change: f64,
    pub tpr_gap_change: Option<f64>,
    /// `1 - after / before` for the rms TPR gap.
    pub gap_reduction: Option<f64>,
    pub independence_change: Option<f64>,
    pub separation_change: Option<f64>,
    pub sufficiency_change: Option<f64>,
}

pub fn compare(before: &FairnessReport, after: &FairnessReport) -> ReportDelta {
    let diff = |a: Option<f64>, b: Option<f64>| Some(b? - a?);
    ReportDelta {
        accuracy_change: after.accuracy - before.accuracy,
        tpr_gap_change: diff(before.tpr_gap_rms, after.tpr_gap_rms),
        gap_reduction: match (before.tpr_gap_rms, after.tpr_gap_rms) {
            (Some(b), Some(a)) if b > 0.0 => Some(1.0 - a / b),
            _ => None,
        },
        independence_change: diff(before.independence, after.independence),
        separation_change: diff(before.separation, after.separation),
        sufficiency_change: diff(before.sufficiency, after.sufficiency),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(y: usize, y_hat: usize, z: usize) -> Prediction {
        Prediction { y, y_hat, z: Some(z) }
    }

    /// Class 0 always right; class 1 right 3/4 times for group 0 and 2/4
    /// times for group 1.
    fn worked_example() -> PredictionLog {
        let mut rows = Vec::new();
        for z in 0..2 {
            rows.extend((0..4).map(|_| row(0, 0, z)));
        }
        rows.extend([row(1, 1, 0), row(1, 1, 0), row(1, 1, 0), row(1, 0, 0)]);
        rows.extend([row(1, 1, 1), row(1, 1, 1), row(1, 0, 1), row(1, 0, 1)]);
        PredictionLog::new(Some(Split::Test), 2, 2, rows).unwrap()
    }

    #[test]
    fn worked_tpr_gap() {
        let g = tpr_gap(&worked_example()).unwrap();
        assert_eq!(g.value.per_class, vec![0.0, 0.25]);
        assert!((g.value.rms - 0.1767766952966369).abs() < 1e-6);
        assert!(g.warnings.is_empty());
    }

    #[test]
    fn worked_kl_metrics_by_hand() {
        let log = worked_example();
        let s = |c: &[f64]| -> Vec<f64> {
            let t: f64 = c.iter().sum();
            c.iter().map(|v| (v / t + SMOOTHING) / (1.0 + c.len() as f64 * SMOOTHING)).collect()
        };
        let k = |p: &[f64], q: &[f64]| -> f64 { p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum() };
        // prediction counts: group 0 [5, 3], group 1 [6, 2], overall [11, 5]
        let ind = k(&s(&[11.0, 5.0]), &s(&[5.0, 3.0])) + k(&s(&[11.0, 5.0]), &s(&[6.0, 2.0]));
        assert!((independence(&log).unwrap().value - ind).abs() < 1e-12);
        // class 1: overall [3, 5]; group0 [1, 3]; group1 [2, 2]. class 0 terms vanish.
        let sep = k(&s(&[3.0, 5.0]), &s(&[1.0, 3.0])) + k(&s(&[3.0, 5.0]), &s(&[2.0, 2.0]));
        let got = separation(&log).unwrap().value;
        assert!(got > 0.0);
        assert!((got - sep).abs() < 1e-12);
        // y_hat = 0: y counts overall [8, 3], group0 [4, 1], group1 [4, 2];
        // y_hat = 1: y counts [0, 5] everywhere.
        let suf = k(&s(&[8.0, 3.0]), &s(&[4.0, 1.0])) + k(&s(&[8.0, 3.0]), &s(&[4.0, 2.0]));
        assert!((sufficiency(&log).unwrap().value - suf).abs() < 1e-12);
    }

    #[test]
    fn perfect_classifier() {
        let rows = (0..12).map(|i| row(i % 3, i % 3, i % 2)).collect();
        let log = PredictionLog::new(None, 3, 2, rows).unwrap();
        let r = report(&log).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.tpr_gap_rms, Some(0.0));
        assert!(r.independence.unwrap() < 1e-12);
        assert!(r.separation.unwrap() < 1e-12);
        assert!(r.sufficiency.unwrap() < 1e-12);
    }

    #[test]
    fn independence_cases() {
        let rows = vec![row(0, 1, 0), row(1, 1, 0), row(0, 0, 1), row(1, 0, 1)];
        let log = PredictionLog::new(None, 2, 2, rows).unwrap();
        let got = independence(&log).unwrap().value;
        let q = |c: [f64; 2]| c.map(|v| (v / 2.0 + SMOOTHING) / (1.0 + 2.0 * SMOOTHING));
        let p = [0.5, 0.5];
        let expected: f64 = [q([0.0, 2.0]), q([2.0, 0.0])]
            .iter()
            .map(|qz| p.iter().zip(qz).map(|(a, b)| a * (a / b).ln()).sum::<f64>())
            .sum();
        assert!(got > 0.0);
        assert!((got - expected).abs() < 1e-9);

        let single = PredictionLog::new(None, 2, 1, vec![row(0, 1, 0), row(1, 0, 0), row(1, 1, 0)]).unwrap();
        assert_eq!(independence(&single).unwrap().value, 0.0);

        let same = vec![row(0, 1, 0), row(1, 0, 0), row(0, 1, 1), row(1, 0, 1)];
        let log = PredictionLog::new(None, 2, 2, same).unwrap();
        assert_eq!(independence(&log).unwrap().value, 0.0);
    }

    #[test]
    fn skipped_terms_are_flagged() {
        // class 1 only seen for group 0
        let rows = vec![row(0, 0, 0), row(0, 1, 1), row(1, 1, 0)];
        let log = PredictionLog::new(None, 2, 2, rows).unwrap();
        let sep = separation(&log).unwrap();
        assert!(sep.warnings.iter().any(|w| w.contains("class 1 absent for group 1")));
        let gap = tpr_gap(&log).unwrap();
        assert_eq!(gap.value.per_class[1], 0.0);
        assert!(!gap.warnings.is_empty());

        // class 1 never predicted
        let rows = vec![row(0, 0, 0), row(1, 0, 1)];
        let log = PredictionLog::new(None, 2, 2, rows).unwrap();
        let suf = sufficiency(&log).unwrap();
        assert!(suf.warnings.iter().any(|w| w.contains("never predicted")));
    }

    #[test]
    fn unknown_groups_count_toward_accuracy_only() {
        let mut log = worked_example();
        log.rows.push(Prediction { y: 1, y_hat: 0, z: None });
        log.rows.push(Prediction { y: 1, y_hat: 0, z: None });
        let r = report(&log).unwrap();
        assert_eq!(r.accuracy, 13.0 / 18.0);
        assert!((r.tpr_gap_rms.unwrap() - 0.1767766952966369).abs() < 1e-12);
        assert!(r.warnings.iter().any(|w| w.contains("2 rows without a group label")));
    }

    #[test]
    fn no_group_labels() {
        let rows = vec![Prediction { y: 0, y_hat: 0, z: None }];
        let r = report(&PredictionLog::new(None, 2, 2, rows).unwrap()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.tpr_gap_rms.is_none() && r.independence.is_none());
        assert_eq!(r.warnings.len(), 1);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["tpr_gap_rms"].is_null());
    }

    #[test]
    fn errors() {
        assert!(matches!(PredictionLog::new(None, 2, 2, vec![]), Err(Error::EmptyLog)));
        assert!(PredictionLog::new(None, 2, 2, vec![row(2, 0, 0)]).is_err());
        let three = PredictionLog::new(None, 2, 3, vec![row(0, 0, 2)]).unwrap();
        assert!(matches!(tpr_gap(&three), Err(Error::GroupCount { found: 3 })));
        assert!(report(&three).unwrap().tpr_gap_rms.is_none());
    }

    #[test]
    fn group_swap_negates_gaps() {
        let log = worked_example();
        let mut swapped = log.clone();
        for p in &mut swapped.rows {
            p.z = p.z.map(|z| 1 - z);
        }
        let (a, b) = (report(&log).unwrap(), report(&swapped).unwrap());
        let neg: Vec<f64> = a.per_class_tpr_gap.unwrap().iter().map(|g| -g).collect();
        assert_eq!(b.per_class_tpr_gap.unwrap(), neg);
        assert_eq!(a.tpr_gap_rms, b.tpr_gap_rms);
        assert!((a.independence.unwrap() - b.independence.unwrap()).abs() < 1e-12);
        assert!((a.separation.unwrap() - b.separation.unwrap()).abs() < 1e-12);
        assert!((a.sufficiency.unwrap() - b.sufficiency.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_json_keys() {
        let r = report(&worked_example()).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "accuracy",
                "independence",
                "per_class_tpr_gap",
                "separation",
                "sufficiency",
                "tpr_gap_rms",
                "warnings"
            ]
        );
    }

    #[test]
    fn delta_reports_reduction() {
        let before = report(&worked_example()).unwrap();
        let mut fair = worked_example();
        fair.rows[15].y_hat = 1; // group 1 class 1 now 3/4
        let after = report(&fair).unwrap();
        let d = compare(&before, &after);
        assert_eq!(d.gap_reduction, Some(1.0));
        assert!(d.accuracy_change > 0.0);
    }
}
