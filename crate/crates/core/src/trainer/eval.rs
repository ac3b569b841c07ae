use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::PdaDataset;
use crate::networks::{forward_inference, ParamSet};

/// Target-split classification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEvaluation {
    pub accuracy: f64,
    pub num_samples: usize,
    /// `(class, correct, total)` for each class present in the target split.
    pub per_class: Vec<(usize, usize, usize)>,
    /// `confusion[true][predicted]` over all `N_c` classes.
    pub confusion: Vec<Vec<usize>>,
}

impl TargetEvaluation {
    pub fn class_accuracy(&self, class: usize) -> Option<f64> {
        self.per_class
            .iter()
            .find(|(c, _, _)| *c == class)
            .map(|&(_, ok, n)| ok as f64 / n as f64)
    }
}

/// Argmax of `C(F(x))` against the hidden target labels; `None` when the
/// dataset has none.
pub fn evaluate_target(params: &ParamSet, ds: &PdaDataset) -> Result<Option<TargetEvaluation>, TrainError> {
    let Some(view) = ds.evaluation() else {
        return Ok(None);
    };
    let probs = forward_inference(params, &ds.target_matrix())?;
    let pred = probs.argmax_rows();
    let n_c = params.num_classes();
    let mut confusion = vec![vec![0usize; n_c]; n_c];
    for (&y, &p) in view.target_labels().iter().zip(&pred) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..n_c).map(|c| confusion[c][c]).sum();
    let per_class = view
        .target_classes()
        .iter()
        .map(|&c| (c, confusion[c][c], confusion[c].iter().sum()))
        .collect();
    Ok(Some(TargetEvaluation {
        accuracy: correct as f64 / pred.len() as f64,
        num_samples: pred.len(),
        per_class,
        confusion,
    }))
}
