//! Seeded synthetic embeddings with an injected demographic shortcut.
//!
//! Rows are `x = (2y - 1) * m * u + s * a * (2z - 1) * v + e` with
//! `e ~ N(0, I)`, orthonormal random directions `u` (task) and `v`
//! (demographic), task margin `m`, demographic amplitude `a`, and
//! `P(z = y) = 0.5 + (c - 0.5) * s` for bias strength `s` and maximum
//! agreement `c`. At `s = 0` the group is independent of both label and
//! features.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::prototypes::PrototypeEnsemble;
use crate::store::{write_dataset, write_prototypes, EmbeddingDataset, PrototypeFile, PrototypeRecord, Split};

pub const TASK_MARGIN: f64 = 1.5;
pub const DEMOGRAPHIC_AMPLITUDE: f64 = 2.0;
pub const MAX_AGREEMENT: f64 = 0.8;
/// Scale of the content shared by both members of a synthetic prototype pair.
const PROTOTYPE_CONTENT: f64 = 0.5;
const PROTOTYPE_NOISE: f64 = 0.1;

pub const GROUP_NAMES: [&str; 2] = ["group_a", "group_b"];
pub const LABEL_NAMES: [&str; 2] = ["class_0", "class_1"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub dim: usize,
    pub bias_strength: f64,
    pub seed: u64,
    pub n_prototype_pairs: usize,
    pub task_margin: f64,
    pub demographic_amplitude: f64,
    /// `P(z = y)` at full bias strength.
    pub max_agreement: f64,
}

impl SyntheticParams {
    /// Validation and test sizes are a quarter of the training size.
    pub fn new(n_train: usize, dim: usize, bias_strength: f64, seed: u64) -> Self {
        Self {
            n_train,
            n_validation: (n_train / 4).max(1),
            n_test: (n_train / 4).max(1),
            dim,
            bias_strength,
            seed,
            n_prototype_pairs: 10,
            task_margin: TASK_MARGIN,
            demographic_amplitude: DEMOGRAPHIC_AMPLITUDE,
            max_agreement: MAX_AGREEMENT,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_validation == 0 || self.n_test == 0 {
            return Err(Error::invalid("n", "split sizes must be positive"));
        }
        if self.dim < 2 {
            return Err(Error::invalid("dim", "needs at least 2 dimensions"));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::invalid("bias_strength", "must lie in [0, 1]"));
        }
        if !(0.5..=1.0).contains(&self.max_agreement) {
            return Err(Error::invalid("max_agreement", "must lie in [0.5, 1]"));
        }
        if !(self.task_margin.is_finite() && self.demographic_amplitude.is_finite()) {
            return Err(Error::invalid("task_margin", "margins must be finite"));
        }
        if self.n_prototype_pairs == 0 {
            return Err(Error::invalid("n_prototype_pairs", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: EmbeddingDataset,
    pub validation: EmbeddingDataset,
    pub test: EmbeddingDataset,
    /// Hand-style prototypes: shared content plus a signed demographic offset.
    pub prototypes: PrototypeFile,
    /// Partition means of the fully labeled training split.
    pub data_driven_prototypes: PrototypeFile,
    /// Task direction `u` and demographic direction `v`.
    pub directions: (Vec<f64>, Vec<f64>),
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn orthonormal_pair(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut u = gaussian(rng, dim);
    let nu = norm(&u);
    u.iter_mut().for_each(|x| *x /= nu);
    let mut v = gaussian(rng, dim);
    let proj: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, a)| *x -= proj * a);
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    (u, v)
}

fn split(
    rng: &mut ChaCha8Rng,
    n: usize,
    params: &SyntheticParams,
    dirs: &(Vec<f64>, Vec<f64>),
    tag: Split,
) -> Result<EmbeddingDataset> {
    let (u, v) = dirs;
    let agree = 0.5 + (params.max_agreement - 0.5) * params.bias_strength;
    let mut emb = Vec::with_capacity(n * params.dim);
    let mut ys = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for _ in 0..n {
        let y = usize::from(rng.random_bool(0.5));
        let z = if rng.random_bool(agree) { y } else { 1 - y };
        let ty = if y == 1 { params.task_margin } else { -params.task_margin };
        let tz = params.bias_strength * params.demographic_amplitude * if z == 1 { 1.0 } else { -1.0 };
        for k in 0..params.dim {
            let noise: f64 = rng.sample(StandardNormal);
            emb.push((ty * u[k] + tz * v[k] + noise) as f32);
        }
        ys.push(y);
        zs.push(Some(z));
    }
    EmbeddingDataset::new(
        params.dim,
        emb,
        ys,
        zs,
        LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
        GROUP_NAMES.iter().map(|s| s.to_string()).collect(),
        tag,
    )
}

/// Converts an ensemble back into prototype-file form.
pub fn ensemble_to_file(ensemble: &PrototypeEnsemble<f64>, text: impl Fn(usize, usize) -> String) -> PrototypeFile {
    let records = ensemble
        .pairs()
        .iter()
        .enumerate()
        .flat_map(|(pair, t)| {
            let text = &text;
            (0..t.arity()).map(move |group| PrototypeRecord {
                pair,
                group,
                text: text(pair, group),
                vector: t.group(group).iter().map(|&v| v as f32).collect(),
            })
        })
        .collect();
    PrototypeFile {
        dim: ensemble.dim(),
        n_pairs: ensemble.len(),
        group_names: ensemble.group_names().to_vec(),
        records,
    }
}

pub fn make_synthetic(params: &SyntheticParams) -> Result<SyntheticData> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let dirs = orthonormal_pair(&mut rng, params.dim);
    let train = split(&mut rng, params.n_train, params, &dirs, Split::Train)?;
    let validation = split(&mut rng, params.n_validation, params, &dirs, Split::Validation)?;
    let test = split(&mut rng, params.n_test, params, &dirs, Split::Test)?;

    let v = &dirs.1;
    let mut records = Vec::with_capacity(params.n_prototype_pairs * 2);
    for pair in 0..params.n_prototype_pairs {
        let content: Vec<f64> = gaussian(&mut rng, params.dim)
            .into_iter()
            .map(|c| c * PROTOTYPE_CONTENT)
            .collect();
        for (group, name) in GROUP_NAMES.iter().enumerate() {
            let sign = if group == 1 { 1.0 } else { -1.0 };
            let vector = content
                .iter()
                .zip(v)
                .map(|(c, vk)| {
                    let noise: f64 = rng.sample(StandardNormal);
                    (c + sign * params.demographic_amplitude * vk + PROTOTYPE_NOISE * noise) as f32
                })
                .collect();
            records.push(PrototypeRecord {
                pair,
                group,
                text: format!("synthetic prototype {pair} for {name}"),
                vector,
            });
        }
    }
    let prototypes = PrototypeFile {
        dim: params.dim,
        n_pairs: params.n_prototype_pairs,
        group_names: GROUP_NAMES.iter().map(|s| s.to_string()).collect(),
        records,
    }
    .validate(params.dim)?;

    let ensemble = PrototypeEnsemble::<f64>::data_driven(&train, params.n_prototype_pairs, params.seed)?;
    let data_driven_prototypes = ensemble_to_file(&ensemble, |pair, group| {
        format!("mean of partition {pair} for {}", GROUP_NAMES[group])
    })
    .validate(params.dim)?;

    Ok(SyntheticData {
        train,
        validation,
        test,
        prototypes,
        data_driven_prototypes,
        directions: dirs,
    })
}

/// Writes `train/`, `validation/`, `test/`, `prototypes.json` and
/// `prototypes_data_driven.json` under `dir`.
pub fn write_synthetic(data: &SyntheticData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    write_dataset(&data.train, dir.join("train"))?;
    write_dataset(&data.validation, dir.join("validation"))?;
    write_dataset(&data.test, dir.join("test"))?;
    write_prototypes(&data.prototypes, dir.join("prototypes.json"))?;
    write_prototypes(&data.data_driven_prototypes, dir.join("prototypes_data_driven.json"))
}
