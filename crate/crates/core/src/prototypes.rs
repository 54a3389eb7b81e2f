//! Prototype ensembles: per-group anchor vectors, either read from a
//! prototype file or averaged from a labeled subset of the data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::{EmbeddingDataset, PrototypeFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Predefined,
    DataDriven,
}

/// One vector per group, all of the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTuple<T> {
    vectors: Vec<Vec<T>>,
}

impl<T: Scalar> PrototypeTuple<T> {
    pub fn new(vectors: Vec<Vec<T>>) -> Result<Self> {
        if vectors.len() < 2 {
            return Err(Error::invalid("tuple", "a prototype tuple needs at least two groups"));
        }
        let dim = vectors[0].len();
        if dim == 0 {
            return Err(Error::invalid("tuple", "prototype vectors must be non-empty"));
        }
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    field: "prototype tuple".into(),
                    expected: dim,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    field: "prototype tuple".into(),
                    row: 0,
                });
            }
        }
        Ok(Self { vectors })
    }

    pub fn arity(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn group(&self, g: usize) -> &[T] {
        &self.vectors[g]
    }

    pub fn vectors(&self) -> &[Vec<T>] {
        &self.vectors
    }

    fn map(&self, f: &impl Fn(&[T]) -> Vec<T>) -> Self {
        Self {
            vectors: self.vectors.iter().map(|v| f(v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeEnsemble<T> {
    pairs: Vec<PrototypeTuple<T>>,
    regime: Regime,
    group_names: Vec<String>,
}

impl<T: Scalar> PrototypeEnsemble<T> {
    pub fn new(pairs: Vec<PrototypeTuple<T>>, regime: Regime, group_names: Vec<String>) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return Err(Error::invalid("pairs", "ensemble needs at least one tuple"));
        };
        let (arity, dim) = (first.arity(), first.dim());
        for t in &pairs {
            if t.arity() != arity {
                return Err(Error::DimensionMismatch {
                    field: "tuple arity".into(),
                    expected: arity,
                    found: t.arity(),
                });
            }
            if t.dim() != dim {
                return Err(Error::DimensionMismatch {
                    field: "prototype dim".into(),
                    expected: dim,
                    found: t.dim(),
                });
            }
        }
        if group_names.len() != arity {
            return Err(Error::DimensionMismatch {
                field: "group_names".into(),
                expected: arity,
                found: group_names.len(),
            });
        }
        Ok(Self {
            pairs,
            regime,
            group_names,
        })
    }

    /// Copies every vector of a validated prototype file, pair by pair.
    pub fn from_prototype_file(file: &PrototypeFile) -> Result<Self> {
        let pairs = (0..file.n_pairs)
            .map(|j| {
                PrototypeTuple::new(
                    (0..file.n_groups())
                        .map(|g| file.vector(j, g).iter().map(|&v| T::widen(v)).collect())
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs, Regime::Predefined, file.group_names.clone())
    }

    /// Group means over `n_partitions` disjoint partitions of the labeled rows.
    ///
    /// Labeled rows of each group are shuffled independently (seeded) and cut
    /// into near-equal contiguous partitions; the first `count % n_partitions`
    /// partitions receive one extra row. Tuple `j` holds the partition-`j`
    /// mean of every group.
    pub fn data_driven(dataset: &EmbeddingDataset, n_partitions: usize, seed: u64) -> Result<Self> {
        if n_partitions == 0 {
            return Err(Error::invalid("n_partitions", "must be positive"));
        }
        let n_groups = dataset.num_groups();
        if n_groups < 2 {
            return Err(Error::invalid("dataset", "data-driven prototypes need at least two groups"));
        }
        let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
        for (i, z) in dataset.group_labels().iter().enumerate() {
            if let Some(z) = *z {
                by_group[z].push(i);
            }
        }
        for (group, rows) in by_group.iter().enumerate() {
            if rows.len() < n_partitions {
                return Err(Error::InsufficientLabeledRows {
                    group,
                    available: rows.len(),
                    required: n_partitions,
                });
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = dataset.dim();
        // means[group][partition]
        let mut means: Vec<Vec<Vec<T>>> = Vec::with_capacity(n_groups);
        for rows in &mut by_group {
            rows.shuffle(&mut rng);
            let base = rows.len() / n_partitions;
            let extra = rows.len() % n_partitions;
            let mut start = 0;
            let mut group_means = Vec::with_capacity(n_partitions);
            for p in 0..n_partitions {
                let size = base + usize::from(p < extra);
                let part = &rows[start..start + size];
                start += size;
                let mut acc = vec![0f64; dim];
                for &i in part {
                    for (a, &v) in acc.iter_mut().zip(dataset.row(i)) {
                        *a += f64::from(v);
                    }
                }
                group_means.push(acc.iter().map(|a| T::of(a / size as f64)).collect());
            }
            means.push(group_means);
        }

        let pairs = (0..n_partitions)
            .map(|p| PrototypeTuple::new(means.iter().map(|g| g[p].clone()).collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs, Regime::DataDriven, dataset.group_names().to_vec())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.pairs[0].arity()
    }

    pub fn dim(&self) -> usize {
        self.pairs[0].dim()
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn pairs(&self) -> &[PrototypeTuple<T>] {
        &self.pairs
    }

    pub fn pair(&self, j: usize) -> &PrototypeTuple<T> {
        &self.pairs[j]
    }

    /// Applies `f` to every prototype vector, keeping regime and names.
    pub fn map_vectors(&self, f: impl Fn(&[T]) -> Vec<T>) -> Self {
        Self {
            pairs: self.pairs.iter().map(|t| t.map(&f)).collect(),
            regime: self.regime,
            group_names: self.group_names.clone(),
        }
    }

    /// Every vector scaled to unit Euclidean length (zero vectors unchanged).
    pub fn length_normalized(&self) -> Self {
        self.map_vectors(|v| {
            let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm > T::zero() {
                v.iter().map(|&x| x / norm).collect()
            } else {
                v.to_vec()
            }
        })
    }

    /// Draws `k` distinct tuple indices uniformly without replacement.
    ///
    /// The draw is a pure function of `(seed, iteration)`: the generator is
    /// keyed by the seed and its stream is selected by the iteration counter.
    pub fn sample_indices(&self, k: usize, seed: u64, iteration: u64) -> Result<Vec<usize>> {
        if k == 0 {
            return Err(Error::invalid("k", "must be positive"));
        }
        if k > self.len() {
            return Err(Error::KExceedsEnsemble { k, n: self.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(iteration);
        Ok(rand::seq::index::sample(&mut rng, self.len(), k).into_vec())
    }

    pub fn sample_pairs(&self, k: usize, seed: u64, iteration: u64) -> Result<Vec<&PrototypeTuple<T>>> {
        Ok(self
            .sample_indices(k, seed, iteration)?
            .into_iter()
            .map(|j| &self.pairs[j])
            .collect())
    }
}
