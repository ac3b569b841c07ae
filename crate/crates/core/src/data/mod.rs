//! Partial-domain-adaptation datasets: synthetic generation, CSV ingest and
//! batching.
//!
//! Target class ids are kept behind [`PdaDataset::evaluation`]. Training code
//! only ever sees target features.

mod batch;
mod csv_io;
mod synth;

use std::collections::BTreeSet;
use std::path::PathBuf;

pub use batch::{Batch, BatchIterator};
pub use csv_io::{load_feature_csv, write_feature_csv};
pub use synth::{generate_pda_gaussians, ShiftConfig};

use crate::autodiff::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("invalid dataset: {0}")]
    Validation(String),
}

/// Target class ids and the target label set, withheld from training.
#[derive(Debug, Clone, PartialEq)]
struct HiddenTargetLabels {
    labels: Vec<usize>,
    classes: BTreeSet<usize>,
}

/// Read-only access to withheld target labels, for evaluation and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct EvaluationView<'a> {
    hidden: &'a HiddenTargetLabels,
}

impl<'a> EvaluationView<'a> {
    pub fn target_labels(&self) -> &'a [usize] {
        &self.hidden.labels
    }

    /// The shared label set.
    pub fn target_classes(&self) -> &'a BTreeSet<usize> {
        &self.hidden.classes
    }

    pub fn is_common(&self, class: usize) -> bool {
        self.hidden.classes.contains(&class)
    }
}

/// Labeled source samples and unlabeled target samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PdaDataset {
    dim: usize,
    num_classes: usize,
    source_features: Vec<f64>,
    source_labels: Vec<usize>,
    source_classes: BTreeSet<usize>,
    target_features: Vec<f64>,
    hidden: Option<HiddenTargetLabels>,
}

impl PdaDataset {
    /// Validates and assembles a dataset. `target_labels`, when present, is
    /// stored as hidden evaluation data.
    pub fn new(
        dim: usize,
        source_features: Vec<f64>,
        source_labels: Vec<usize>,
        target_features: Vec<f64>,
        target_labels: Option<Vec<usize>>,
    ) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::Validation("feature dimension is zero".into()));
        }
        if source_labels.is_empty() || source_features.len() != source_labels.len() * dim {
            return Err(DataError::Validation(format!(
                "source holds {} values for {} labels of dimension {dim}",
                source_features.len(),
                source_labels.len()
            )));
        }
        if target_features.is_empty() || !target_features.len().is_multiple_of(dim) {
            return Err(DataError::Validation(format!(
                "target holds {} values, not a positive multiple of {dim}",
                target_features.len()
            )));
        }
        if source_features
            .iter()
            .chain(&target_features)
            .any(|v| !v.is_finite())
        {
            return Err(DataError::Validation("non-finite feature value".into()));
        }
        let source_classes: BTreeSet<usize> = source_labels.iter().copied().collect();
        let num_classes = source_classes.last().map_or(0, |&c| c + 1);
        let n_target = target_features.len() / dim;

        let hidden = match target_labels {
            None => None,
            Some(labels) => {
                if labels.len() != n_target {
                    return Err(DataError::Validation(format!(
                        "{} target labels for {n_target} target rows",
                        labels.len()
                    )));
                }
                if let Some(bad) = labels.iter().find(|c| !source_classes.contains(c)) {
                    return Err(DataError::Validation(format!(
                        "target class {bad} is not a source class"
                    )));
                }
                let classes: BTreeSet<usize> = labels.iter().copied().collect();
                if classes.len() >= source_classes.len() {
                    return Err(DataError::Validation(format!(
                        "target label set ({} classes) must be a strict subset of the source label set ({} classes)",
                        classes.len(),
                        source_classes.len()
                    )));
                }
                Some(HiddenTargetLabels { labels, classes })
            }
        };

        Ok(PdaDataset {
            dim,
            num_classes,
            source_features,
            source_labels,
            source_classes,
            target_features,
            hidden,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Width of a one-hot label vector: largest source class id plus one.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_source(&self) -> usize {
        self.source_labels.len()
    }

    pub fn num_target(&self) -> usize {
        self.target_features.len() / self.dim
    }

    pub fn source_classes(&self) -> &BTreeSet<usize> {
        &self.source_classes
    }

    pub fn source_labels(&self) -> &[usize] {
        &self.source_labels
    }

    pub fn source_row(&self, i: usize) -> &[f64] {
        &self.source_features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target_row(&self, i: usize) -> &[f64] {
        &self.target_features[i * self.dim..(i + 1) * self.dim]
    }

    /// Source features as an `[n_s, d]` matrix.
    pub fn source_matrix(&self) -> Tensor {
        Tensor::matrix(self.num_source(), self.dim, self.source_features.clone())
            .expect("validated at construction")
    }

    /// Target features as an `[n_t, d]` matrix.
    pub fn target_matrix(&self) -> Tensor {
        Tensor::matrix(self.num_target(), self.dim, self.target_features.clone())
            .expect("validated at construction")
    }

    pub(crate) fn gather_source(&self, idx: &[usize]) -> Tensor {
        gather(&self.source_features, self.dim, idx)
    }

    pub(crate) fn gather_target(&self, idx: &[usize]) -> Tensor {
        gather(&self.target_features, self.dim, idx)
    }

    /// Withheld target labels; `None` when the target split was unlabeled.
    pub fn evaluation(&self) -> Option<EvaluationView<'_>> {
        self.hidden.as_ref().map(|hidden| EvaluationView { hidden })
    }
}

fn gather(features: &[f64], dim: usize, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        data.extend_from_slice(&features[i * dim..(i + 1) * dim]);
    }
    Tensor::matrix(idx.len(), dim, data).expect("non-empty gather")
}
