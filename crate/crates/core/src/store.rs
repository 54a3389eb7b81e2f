//! On-disk embedding datasets and prototype files.
//!
//! A dataset directory holds three files:
//!
//! * `meta.json` with `n`, `dim`, `label_names`, `group_names` and `split`;
//! * `embeddings.f32le`, `n * dim` little-endian binary32 values, row-major;
//! * `labels.tsv`, one `task<TAB>group` line per row, group `-1` when unknown.
//!
//! Prototype vectors live in a single `prototypes.json`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.f32le";
pub const LABELS_FILE: &str = "labels.tsv";

/// Sentinel written to `labels.tsv` for rows without a group label.
pub const UNKNOWN_GROUP: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::malformed("split", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    n: usize,
    dim: usize,
    label_names: Vec<String>,
    group_names: Vec<String>,
    split: String,
}

/// Validated, immutable matrix of text embeddings with task and group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    embeddings: Vec<f32>,
    task_labels: Vec<usize>,
    group_labels: Vec<Option<usize>>,
    label_names: Vec<String>,
    group_names: Vec<String>,
    split: Split,
}

impl EmbeddingDataset {
    pub fn new(
        dim: usize,
        embeddings: Vec<f32>,
        task_labels: Vec<usize>,
        group_labels: Vec<Option<usize>>,
        label_names: Vec<String>,
        group_names: Vec<String>,
        split: Split,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::malformed("dim", "embedding dimension must be positive"));
        }
        let n = task_labels.len();
        if embeddings.len() != n * dim {
            return Err(Error::DimensionMismatch {
                field: "embeddings".into(),
                expected: n * dim,
                found: embeddings.len(),
            });
        }
        if group_labels.len() != n {
            return Err(Error::DimensionMismatch {
                field: "group_labels".into(),
                expected: n,
                found: group_labels.len(),
            });
        }
        for (row, chunk) in embeddings.chunks_exact(dim).enumerate() {
            if chunk.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    field: "embeddings".into(),
                    row,
                });
            }
        }
        for (row, &y) in task_labels.iter().enumerate() {
            if y >= label_names.len() {
                return Err(Error::LabelOutOfRange {
                    field: "task_label".into(),
                    row,
                    value: y as i64,
                    limit: label_names.len(),
                });
            }
        }
        for (row, z) in group_labels.iter().enumerate() {
            if let Some(z) = *z {
                if z >= group_names.len() {
                    return Err(Error::LabelOutOfRange {
                        field: "group_label".into(),
                        row,
                        value: z as i64,
                        limit: group_names.len(),
                    });
                }
            }
        }
        Ok(Self {
            dim,
            embeddings,
            task_labels,
            group_labels,
            label_names,
            group_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.task_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.embeddings.chunks_exact(self.dim)
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn task_labels(&self) -> &[usize] {
        &self.task_labels
    }

    pub fn group_labels(&self) -> &[Option<usize>] {
        &self.group_labels
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn group_names(&self) -> &[String] {
        &self.group_names
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Number of rows carrying a group label, per group.
    pub fn labeled_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_groups()];
        for z in self.group_labels.iter().flatten() {
            counts[*z] += 1;
        }
        counts
    }

    /// Copy of the dataset where only the first `per_group` labeled rows of
    /// each group (in row order) keep their group label.
    pub fn with_group_label_budget(&self, per_group: usize) -> Self {
        let mut seen = vec![0usize; self.num_groups()];
        let group_labels = self
            .group_labels
            .iter()
            .map(|z| match *z {
                Some(g) if seen[g] < per_group => {
                    seen[g] += 1;
                    Some(g)
                }
                _ => None,
            })
            .collect();
        Self {
            group_labels,
            ..self.clone()
        }
    }

    /// Copy of the dataset with every group label removed.
    pub fn without_group_labels(&self) -> Self {
        Self {
            group_labels: vec![None; self.len()],
            ..self.clone()
        }
    }
}

/// Writes a dataset directory, creating it if needed.
pub fn write_dataset(dataset: &EmbeddingDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let meta = Meta {
        n: dataset.len(),
        dim: dataset.dim,
        label_names: dataset.label_names.clone(),
        group_names: dataset.group_names.clone(),
        split: dataset.split.to_string(),
    };
    let meta_path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;

    let payload: Vec<u8> = dataset
        .embeddings
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let emb_path = dir.join(EMBEDDINGS_FILE);
    fs::write(&emb_path, payload).map_err(|e| Error::io(&emb_path, e))?;

    let mut labels = String::with_capacity(dataset.len() * 6);
    for (y, z) in dataset.task_labels.iter().zip(&dataset.group_labels) {
        let z = z.map_or(UNKNOWN_GROUP, |z| z as i64);
        labels.push_str(&format!("{y}\t{z}\n"));
    }
    let labels_path = dir.join(LABELS_FILE);
    fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;
    Ok(())
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let dir = dir.as_ref();

    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    if meta.dim == 0 {
        return Err(Error::malformed("dim", "embedding dimension must be positive"));
    }
    let split: Split = meta.split.parse()?;

    let emb_path = dir.join(EMBEDDINGS_FILE);
    let bytes = fs::read(&emb_path).map_err(|e| Error::io(&emb_path, e))?;
    let expected = meta.n * meta.dim * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadLength {
            field: EMBEDDINGS_FILE.into(),
            expected,
            found: bytes.len(),
        });
    }
    let embeddings: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let labels_path = dir.join(LABELS_FILE);
    let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let (task_labels, group_labels) = parse_labels(&text, meta.n, &meta)?;

    EmbeddingDataset::new(
        meta.dim,
        embeddings,
        task_labels,
        group_labels,
        meta.label_names,
        meta.group_names,
        split,
    )
}

fn parse_labels(text: &str, n: usize, meta: &Meta) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != n {
        return Err(Error::DimensionMismatch {
            field: LABELS_FILE.into(),
            expected: n,
            found: lines.len(),
        });
    }
    let mut task = Vec::with_capacity(n);
    let mut group = Vec::with_capacity(n);
    for (row, line) in lines.iter().enumerate() {
        let mut parts = line.split('\t');
        let (Some(y), Some(z), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::malformed(
                LABELS_FILE,
                format!("row {row}: expected `task<TAB>group`"),
            ));
        };
        let parse = |s: &str, field: &str| -> Result<i64> {
            s.trim().parse::<i64>().map_err(|_| {
                Error::malformed(field, format!("row {row}: {s:?} is not an integer"))
            })
        };
        let y = parse(y, "task_label")?;
        let z = parse(z, "group_label")?;
        if y < 0 || y as usize >= meta.label_names.len() {
            return Err(Error::LabelOutOfRange {
                field: "task_label".into(),
                row,
                value: y,
                limit: meta.label_names.len(),
            });
        }
        task.push(y as usize);
        if z == UNKNOWN_GROUP {
            group.push(None);
        } else if z < 0 || z as usize >= meta.group_names.len() {
            return Err(Error::LabelOutOfRange {
                field: "group_label".into(),
                row,
                value: z,
                limit: meta.group_names.len(),
            });
        } else {
            group.push(Some(z as usize));
        }
    }
    Ok((task, group))
}

/// One prototype vector with the sentence it encodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeRecord {
    pub pair: usize,
    pub group: usize,
    pub text: String,
    pub vector: Vec<f32>,
}

/// Contents of `prototypes.json`: a complete (pair, group) grid of vectors.
///
/// After validation the records are ordered by pair, then group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototypeFile {
    pub dim: usize,
    pub n_pairs: usize,
    pub group_names: Vec<String>,
    pub records: Vec<PrototypeRecord>,
}

impl PrototypeFile {
    /// Checks the grid and dimension, and sorts records by (pair, group).
    pub fn validate(mut self, expected_dim: usize) -> Result<Self> {
        if self.dim != expected_dim {
            return Err(Error::DimensionMismatch {
                field: "prototypes.dim".into(),
                expected: expected_dim,
                found: self.dim,
            });
        }
        if self.n_pairs == 0 {
            return Err(Error::malformed("n_pairs", "at least one pair is required"));
        }
        let n_groups = self.group_names.len();
        if n_groups < 2 {
            return Err(Error::malformed("group_names", "at least two groups are required"));
        }
        let mut seen = vec![false; self.n_pairs * n_groups];
        for (row, rec) in self.records.iter().enumerate() {
            if rec.pair >= self.n_pairs {
                return Err(Error::LabelOutOfRange {
                    field: "pair".into(),
                    row,
                    value: rec.pair as i64,
                    limit: self.n_pairs,
                });
            }
            if rec.group >= n_groups {
                return Err(Error::LabelOutOfRange {
                    field: "group".into(),
                    row,
                    value: rec.group as i64,
                    limit: n_groups,
                });
            }
            if rec.vector.len() != expected_dim {
                return Err(Error::DimensionMismatch {
                    field: format!("prototypes.records[{row}].vector"),
                    expected: expected_dim,
                    found: rec.vector.len(),
                });
            }
            if rec.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    field: "prototypes.vector".into(),
                    row,
                });
            }
            let cell = &mut seen[rec.pair * n_groups + rec.group];
            if *cell {
                return Err(Error::DuplicateCell {
                    pair: rec.pair,
                    group: rec.group,
                });
            }
            *cell = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::IncompleteGrid {
                pair: missing / n_groups,
                group: missing % n_groups,
            });
        }
        self.records.sort_by_key(|r| (r.pair, r.group));
        Ok(self)
    }

    pub fn n_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn vector(&self, pair: usize, group: usize) -> &[f32] {
        &self.records[pair * self.n_groups() + group].vector
    }
}

pub fn load_prototypes(path: impl AsRef<Path>, expected_dim: usize) -> Result<PrototypeFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PrototypeFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    file.validate(expected_dim)
}

pub fn write_prototypes(file: &PrototypeFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(file).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
