//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dafair_core::experiment::{run_sweep, PrototypeSpec, Splits, SweepPlan, SweepReport};
use dafair_core::loss::{dafair_kl, dafair_kl_gradient, kl_to_uniform, similarity_distribution};
use dafair_core::synthetic::{make_synthetic, SyntheticData, SyntheticParams};
use dafair_core::trainer::{batch_objective, BatchPrototypes, Example};
use dafair_core::{
    independence, separation, sufficiency, tpr_gap, train, Ensemble, LambdaSchedule, Method, Model, Prediction,
    PredictionLog, PrototypeTuple, SimilarityDistribution, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seed of the synthetic fixture shared by the experiment criteria.
const FIXTURE_SEED: u64 = 2024;
const SEMI_LABELS_PER_GROUP: usize = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(name: &str, elapsed: Duration, outcome: &Outcome) {
    let tag = if outcome.pass { "PASS" } else { "FAIL" };
    println!("{tag} {name} ({:.2}s): {}", elapsed.as_secs_f64(), outcome.detail);
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------------------
// Gradient oracle

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Fourth-order central stencil.
fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    let h = 1e-4;
    let mut x = at.to_vec();
    let eval = |x: &mut Vec<f64>, i: usize, offset: f64| {
        x[i] = at[i] + offset;
        let v = f(x);
        x[i] = at[i];
        v
    };
    (0..at.len())
        .map(|i| {
            let (p1, m1) = (eval(&mut x, i, h), eval(&mut x, i, -h));
            let (p2, m2) = (eval(&mut x, i, 2.0 * h), eval(&mut x, i, -2.0 * h));
            (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
        })
        .collect()
}

fn gradient_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for instance in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(instance);
        let d = rng.random_range(2..=16);
        let groups = rng.random_range(2..=3);
        let k = rng.random_range(1..=4);
        let classes = rng.random_range(2..=4);
        let lambda = rng.random_range(0.1..5.0);

        let mut model = Model::<f64>::init(d, classes, true, &mut rng);
        let jitter: Vec<f64> = model
            .parameters()
            .iter()
            .map(|p| p + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        model.set_parameters(&jitter);

        let raw: Vec<PrototypeTuple<f64>> = (0..k)
            .map(|_| PrototypeTuple::new((0..groups).map(|_| normal(&mut rng, d)).collect()).unwrap())
            .collect();
        let raw_refs: Vec<&PrototypeTuple<f64>> = raw.iter().collect();
        let xs: Vec<Vec<f64>> = (0..rng.random_range(1..=4)).map(|_| normal(&mut rng, d)).collect();
        let batch: Vec<Example<'_, f64>> = xs
            .iter()
            .map(|x| Example {
                x,
                y: rng.random_range(0..classes),
                weight: rng.random_range(0.5..2.0),
            })
            .collect();
        let prototypes = match instance % 3 {
            0 => BatchPrototypes::Constant(&raw_refs),
            1 => BatchPrototypes::Encoded {
                raw: &raw_refs,
                normalize: false,
            },
            _ => BatchPrototypes::Encoded {
                raw: &raw_refs,
                normalize: true,
            },
        };

        // Parameters of the total batch loss.
        let theta = model.parameters();
        let analytic = batch_objective(&model, &batch, prototypes, lambda).unwrap().gradient.parameters();
        let numeric = central_difference(
            |p| {
                let mut m = model.clone();
                m.set_parameters(p);
                batch_objective(&m, &batch, prototypes, lambda).unwrap().total
            },
            &theta,
        );
        worst = worst.max(relative_error(&analytic, &numeric));

        // Representation gradient of the regularizer itself.
        let x = &xs[0];
        let analytic = dafair_kl_gradient(x, &raw_refs).unwrap();
        let numeric = central_difference(|v| dafair_kl(v, &raw_refs).unwrap().0, x);
        worst = worst.max(relative_error(&analytic, &numeric));
        count += 1;
    }
    Outcome {
        pass: worst < 1e-4,
        detail: format!("{count} instances, max relative error {worst:.2e} (limit 1e-4)"),
    }
}

// ---------------------------------------------------------------------------
// KL properties

fn kl_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut violations = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for i in 0..10_000 {
        let m = rng.random_range(2..=6);
        let uniform = SimilarityDistribution::from_probabilities(vec![1.0 / m as f64; m], 0).unwrap();
        if kl_to_uniform(&uniform) != 0.0 {
            violations.push(format!("uniform m={m} gave {}", kl_to_uniform(&uniform)));
        }
        let equal_scores = similarity_distribution(&vec![rng.random_range(-5.0..5.0); m], 0);
        if kl_to_uniform(&equal_scores) != 0.0 {
            violations.push(format!("equal scores m={m}"));
        }

        // Spread of the scores varies from tiny to extreme.
        let scale = 10f64.powf(rng.random_range(-3.0..2.0));
        let mut scores: Vec<f64> = (0..m).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        if i % 10 == 0 {
            scores[0] += 1e3; // saturated
        }
        let dist = similarity_distribution(&scores, 0);
        let kl = kl_to_uniform(&dist);
        let bound = (m as f64).ln();
        let is_uniform = dist.probabilities().windows(2).all(|w| w[0] == w[1]);
        if !is_uniform && kl <= 0.0 {
            violations.push(format!("non-uniform distribution with kl {kl}"));
        }
        if kl > bound + 1e-9 {
            violations.push(format!("kl {kl} above ln {m}"));
        }
        max_ratio = max_ratio.max(kl / bound);
    }
    Outcome {
        pass: violations.is_empty(),
        detail: if violations.is_empty() {
            format!("10000 distributions; exact zero on uniform, positive otherwise, max kl/ln|Z| = {max_ratio:.9}")
        } else {
            format!("{} violations, first: {}", violations.len(), violations[0])
        },
    }
}

// ---------------------------------------------------------------------------
// Metric oracle: row-by-row counting, written without the contingency tensor.

const EPS: f64 = 1e-9;

fn smooth(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 / total as f64 + EPS) / (1.0 + k * EPS))
        .collect()
}

fn divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += p[i] * (p[i] / q[i]).ln();
    }
    s.max(0.0)
}

/// Histogram over `n` categories of `key` for the rows passing `keep`.
fn histogram(rows: &[Prediction], n: usize, keep: impl Fn(&Prediction) -> bool, key: impl Fn(&Prediction) -> usize) -> Vec<usize> {
    let mut h = vec![0; n];
    for r in rows.iter().filter(|r| r.z.is_some() && keep(r)) {
        h[key(r)] += 1;
    }
    h
}

fn brute_conditional_kl(
    rows: &[Prediction],
    n: usize,
    groups: usize,
    condition: impl Fn(&Prediction) -> usize,
    outcome: impl Fn(&Prediction) -> usize + Copy,
) -> f64 {
    let mut total = 0.0;
    for c in 0..n {
        let reference = histogram(rows, n, |r| condition(r) == c, outcome);
        if reference.iter().sum::<usize>() == 0 {
            continue;
        }
        for z in 0..groups {
            let cond = histogram(rows, n, |r| condition(r) == c && r.z == Some(z), outcome);
            if cond.iter().sum::<usize>() == 0 {
                continue;
            }
            total += divergence(&smooth(&reference), &smooth(&cond));
        }
    }
    total
}

fn brute_independence(rows: &[Prediction], n: usize, groups: usize) -> f64 {
    brute_conditional_kl(rows, n, groups, |_| 0, |r| r.y_hat).max(0.0)
}

fn brute_tpr_gap(rows: &[Prediction], n: usize) -> (Vec<f64>, f64) {
    let tpr = |y: usize, z: usize| -> Option<f64> {
        let support: Vec<&Prediction> = rows.iter().filter(|r| r.y == y && r.z == Some(z)).collect();
        if support.is_empty() {
            return None;
        }
        Some(support.iter().filter(|r| r.y_hat == y).count() as f64 / support.len() as f64)
    };
    let gaps: Vec<f64> = (0..n)
        .map(|y| match (tpr(y, 0), tpr(y, 1)) {
            (Some(a), Some(b)) => a - b,
            _ => 0.0,
        })
        .collect();
    let rms = (gaps.iter().map(|g| g * g).sum::<f64>() / n as f64).sqrt();
    (gaps, rms)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut mismatch = None;
    for trial in 0..1000 {
        let n = rng.random_range(1..=200);
        let classes = rng.random_range(2..=5);
        let groups = if trial % 4 == 3 { 3 } else { 2 };
        // Skewed draws so that empty cells occur regularly.
        let skew = rng.random_range(0.0..0.9);
        let rows: Vec<Prediction> = (0..n)
            .map(|_| {
                let y = rng.random_range(0..classes);
                let y_hat = if rng.random_bool(skew) { y } else { rng.random_range(0..classes) };
                let z = if rng.random_bool(0.1) {
                    None
                } else {
                    Some(rng.random_range(0..groups))
                };
                Prediction { y, y_hat, z }
            })
            .collect();
        let log = PredictionLog::new(None, classes, groups, rows.clone()).unwrap();

        let mut check = |what: &str, got: f64, want: f64| {
            let err = (got - want).abs();
            worst = worst.max(err);
            if err > 1e-9 && mismatch.is_none() {
                mismatch = Some(format!("trial {trial} {what}: {got} vs {want}"));
            }
        };
        check("independence", independence(&log).unwrap().value, brute_independence(&rows, classes, groups));
        check(
            "separation",
            separation(&log).unwrap().value,
            brute_conditional_kl(&rows, classes, groups, |r| r.y, |r| r.y_hat),
        );
        check(
            "sufficiency",
            sufficiency(&log).unwrap().value,
            brute_conditional_kl(&rows, classes, groups, |r| r.y_hat, |r| r.y),
        );
        if groups == 2 {
            let got = tpr_gap(&log).unwrap().value;
            let (per_class, rms) = brute_tpr_gap(&rows, classes);
            check("tpr_gap rms", got.rms, rms);
            for (a, b) in got.per_class.iter().zip(&per_class) {
                check("tpr_gap class", *a, *b);
            }
        } else if tpr_gap(&log).is_ok() {
            mismatch.get_or_insert_with(|| format!("trial {trial}: tpr_gap accepted {groups} groups"));
        }
    }
    Outcome {
        pass: mismatch.is_none(),
        detail: match mismatch {
            None => format!("1000 logs, max abs deviation {worst:.2e} (limit 1e-9)"),
            Some(m) => m,
        },
    }
}

// ---------------------------------------------------------------------------
// Schedule endpoints

fn schedule_endpoints() -> Outcome {
    // 2 / (1 + e^-5) - 1, 50-digit reference.
    const RAMP_AT_END: f64 = 0.986_614_298_151_430_3;
    let mut worst: f64 = 0.0;
    let mut start_exact = true;
    for &threshold in &[0.0, 0.1, 1.0, 2.0, 10.0, 100.0] {
        for total in [1usize, 7, 125, 10_000] {
            let s = LambdaSchedule::new(threshold, 5.0, total).unwrap();
            start_exact &= s.lambda_at(0).unwrap() == 0.0;
            worst = worst.max((s.lambda_at(total).unwrap() - RAMP_AT_END * threshold).abs());
        }
    }
    Outcome {
        pass: start_exact && worst < 1e-9,
        detail: format!("step 0 exactly zero: {start_exact}; final-step max deviation {worst:.2e} (limit 1e-9)"),
    }
}

// ---------------------------------------------------------------------------
// Experiments on the synthetic fixture

struct Fixture {
    data: SyntheticData,
    predefined: Ensemble,
}

impl Fixture {
    fn new() -> Self {
        let data = make_synthetic(&SyntheticParams::new(4000, 32, 1.0, FIXTURE_SEED)).unwrap();
        let predefined = Ensemble::from_prototype_file(&data.prototypes).unwrap();
        Self { data, predefined }
    }

    fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.data.train,
            validation: &self.data.validation,
            test: &self.data.test,
        }
    }

    fn sweep(&self, methods: Vec<Method>, spec: PrototypeSpec, base: &TrainConfig) -> SweepReport {
        let plan = SweepPlan {
            methods,
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
            ..SweepPlan::default()
        };
        run_sweep(self.splits(), |_| Some(spec.clone()), base, &plan).unwrap()
    }
}

fn disabled_regularizer(fx: &Fixture) -> Outcome {
    let mut identical = 0;
    let mut differing = Vec::new();
    for seed in 0..3 {
        for (live, normalize) in [(true, true), (false, false)] {
            let plain = TrainConfig {
                seed,
                prototype_gradient: live,
                normalize_prototypes: normalize,
                ..TrainConfig::default()
            };
            let dafair = TrainConfig {
                method: Method::Dafair,
                lambda_threshold: 0.0,
                ..plain.clone()
            };
            let a = train::<f64>(&fx.data.train, None, &plain).unwrap();
            let b = train(&fx.data.train, Some(&fx.predefined), &dafair).unwrap();
            let same = a.model.parameters().iter().zip(b.model.parameters()).all(|(x, y)| x.to_bits() == y.to_bits());
            if same {
                identical += 1;
            } else {
                differing.push(format!("seed {seed} live {live}"));
            }
        }
    }
    Outcome {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("{identical} seeded runs bit-identical to plain")
        } else {
            format!("differs: {}", differing.join(", "))
        },
    }
}

fn bias_reduction(main: &SweepReport) -> Outcome {
    let base = &main.baseline;
    let dafair = main.selection(Method::Dafair).unwrap();
    let jtt = main.selection(Method::Jtt).unwrap();
    let accuracy_ratio = dafair.row.accuracy_mean / base.accuracy_mean;
    let pass = dafair.gap_reduction >= 0.30 && accuracy_ratio >= 0.97 && jtt.gap_reduction <= dafair.gap_reduction;
    Outcome {
        pass,
        detail: format!(
            "plain gap {:.4} acc {:.4}; dafair (lambda {}) gap {:.4} acc {:.4} -> reduction {:.1}% (need >= 30%), \
             accuracy ratio {:.4} (need >= 0.97); jtt (up {}) reduction {:.1}% (need <= dafair)",
            base.gap_mean,
            base.accuracy_mean,
            dafair.selection.threshold,
            dafair.row.gap_mean,
            dafair.row.accuracy_mean,
            100.0 * dafair.gap_reduction,
            accuracy_ratio,
            jtt.selection.threshold,
            100.0 * jtt.gap_reduction,
        ),
    }
}

fn label_efficiency(fx: &Fixture, base: &TrainConfig) -> Outcome {
    let reduction = |labeled| {
        let spec = PrototypeSpec::DataDriven {
            labeled,
            n_partitions: 10,
        };
        let r = fx.sweep(vec![Method::SemiDafair], spec, base);
        let s = r.selection(Method::SemiDafair).unwrap().clone();
        (s.gap_reduction, s.selection.threshold)
    };
    let (few, few_lambda) = reduction(fx.data.train.with_group_label_budget(SEMI_LABELS_PER_GROUP));
    let (all, all_lambda) = reduction(fx.data.train.clone());
    // A shortfall of at most 20% of the full-label reduction.
    let shortfall = (all - few) / all;
    Outcome {
        pass: all > 0.0 && shortfall <= 0.20,
        detail: format!(
            "{SEMI_LABELS_PER_GROUP} labels/group: reduction {:.1}% (lambda {few_lambda}); all labels: {:.1}% \
             (lambda {all_lambda}); shortfall {:.1}% (limit 20%)",
            100.0 * few,
            100.0 * all,
            100.0 * shortfall.max(0.0)
        ),
    }
}

fn k_ablation(fx: &Fixture, main: &SweepReport, base: &TrainConfig) -> Outcome {
    let plain = main.baseline.gap_mean;
    let mut parts = Vec::new();
    let mut pass = true;
    for k in [1usize, 2, 4, 8] {
        let gap = if k == base.k_pairs {
            main.selection(Method::Dafair).unwrap().row.gap_mean
        } else {
            let cfg = TrainConfig { k_pairs: k, ..base.clone() };
            let r = fx.sweep(vec![Method::Dafair], PrototypeSpec::Fixed(fx.predefined.clone()), &cfg);
            r.selection(Method::Dafair).unwrap().row.gap_mean
        };
        pass &= gap < plain;
        parts.push(format!("K={k} {gap:.4}"));
    }
    Outcome {
        pass,
        detail: format!("plain {plain:.4}; {}", parts.join(", ")),
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut run = |name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut outcome = f();
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed > limit {
                outcome.pass = false;
                outcome.detail += &format!("; runtime {:.1}s over {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64());
            }
        }
        report(name, elapsed, &outcome);
        if !outcome.pass {
            failures += 1;
        }
    };

    run("gradient-oracle", Some(Duration::from_secs(10)), &mut gradient_oracle);
    run("kl-properties", None, &mut kl_properties);
    run("metric-oracle", Some(Duration::from_secs(30)), &mut metric_oracle);
    run("lambda-schedule-endpoints", None, &mut schedule_endpoints);

    let fixture_start = Instant::now();
    let fx = Fixture::new();
    let base = TrainConfig::default();
    run("disabled-regularizer", None, &mut || disabled_regularizer(&fx));

    let mut main_sweep = None;
    run("synthetic-bias-reduction", Some(Duration::from_secs(120)), &mut || {
        let start = Instant::now();
        let r = fx.sweep(
            vec![Method::Dafair, Method::Jtt],
            PrototypeSpec::Fixed(fx.predefined.clone()),
            &base,
        );
        let mut outcome = bias_reduction(&r);
        let total = fixture_start.elapsed().max(start.elapsed());
        outcome.detail += &format!("; fixture + sweep {:.1}s (limit 120s)", total.as_secs_f64());
        if total > Duration::from_secs(120) {
            outcome.pass = false;
        }
        main_sweep = Some(r);
        outcome
    });
    let main_sweep = main_sweep.expect("sweep ran");
    run("semi-dafair-label-efficiency", None, &mut || label_efficiency(&fx, &base));
    run("k-ablation", None, &mut || k_ablation(&fx, &main_sweep, &base));

    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
