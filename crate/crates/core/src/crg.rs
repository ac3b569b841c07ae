//! Class relational graph: per-batch edges from label vectors and graph
//! convolution over them.
//!
//! Source nodes carry one-hot ground truth, target nodes carry the
//! classifier's softmax row. Edge weights are label dot products plus a
//! self-loop, symmetrically normalized:
//!
//! ```text
//! A~ = Y Y^T + I,   D~_ii = sum_j A~_ij,   A^ = D~^-1/2 A~ D~^-1/2
//! H^{l+1} = sigma(A^ H^l W^l)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CrgError {
    #[error("source label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("target probabilities have {got} columns, expected {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("target row {row} is not a probability vector")]
    NotProbability { row: usize },
    #[error("graph stack: {0}")]
    Stack(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

/// How target nodes are labeled when building edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLabelMode {
    /// Classifier probabilities.
    #[default]
    Soft,
    /// One-hot of the most probable class.
    Hard,
}

/// Label vectors of a batch, source rows first.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    rows: Tensor,
    domains: Vec<Domain>,
}

impl LabelMatrix {
    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

pub fn build_label_matrix(
    source_labels: &[usize],
    target_probs: Option<&Tensor>,
    num_classes: usize,
    mode: TargetLabelMode,
) -> Result<LabelMatrix, CrgError> {
    let n_t = target_probs.map_or(0, Tensor::rows);
    let n = source_labels.len() + n_t;
    let mut data = vec![0.0; n * num_classes];
    let mut domains = Vec::with_capacity(n);
    for (i, &y) in source_labels.iter().enumerate() {
        if y >= num_classes {
            return Err(CrgError::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
        data[i * num_classes + y] = 1.0;
        domains.push(Domain::Source);
    }
    if let Some(probs) = target_probs {
        if probs.cols() != num_classes {
            return Err(CrgError::WidthMismatch {
                expected: num_classes,
                got: probs.cols(),
            });
        }
        let hard = probs.argmax_rows();
        for r in 0..n_t {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-8 {
                return Err(CrgError::NotProbability { row: r });
            }
            let out = &mut data[(source_labels.len() + r) * num_classes..][..num_classes];
            match mode {
                TargetLabelMode::Soft => out.copy_from_slice(row),
                TargetLabelMode::Hard => out[hard[r]] = 1.0,
            }
            domains.push(Domain::Target);
        }
    }
    Ok(LabelMatrix {
        rows: Tensor::matrix(n, num_classes, data)?,
        domains,
    })
}

/// Raw and normalized adjacency of one batch graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    a_tilde: Tensor,
    a_hat: Tensor,
}

impl AdjacencyMatrix {
    /// No cross-node edges: propagation becomes a per-node map.
    pub fn identity(n: usize) -> Self {
        AdjacencyMatrix {
            a_tilde: Tensor::eye(n),
            a_hat: Tensor::eye(n),
        }
    }

    pub fn a_tilde(&self) -> &Tensor {
        &self.a_tilde
    }

    pub fn a_hat(&self) -> &Tensor {
        &self.a_hat
    }

    pub fn len(&self) -> usize {
        self.a_hat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_adjacency(labels: &LabelMatrix) -> AdjacencyMatrix {
    let y = labels.rows();
    let n = y.rows();
    let mut a_tilde = y.matmul(&y.transpose()).expect("Y Y^T");
    for i in 0..n {
        let v = a_tilde.get(i, i);
        a_tilde.set(i, i, v + 1.0);
    }
    // Symmetrize away any rounding asymmetry from the product.
    for i in 0..n {
        for j in i + 1..n {
            let v = a_tilde.get(i, j);
            a_tilde.set(j, i, v);
        }
    }
    let degree: Vec<f64> = (0..n).map(|i| a_tilde.row(i).iter().sum()).collect();
    let mut a_hat = a_tilde.clone();
    for i in 0..n {
        for j in 0..n {
            a_hat.set(i, j, a_tilde.get(i, j) / (degree[i] * degree[j]).sqrt());
        }
    }
    AdjacencyMatrix { a_tilde, a_hat }
}

/// Weights of the stacked graph convolution layers; relu between layers,
/// identity after the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStack {
    pub weights: Vec<Tensor>,
}

impl GraphStack {
    /// He-uniform initialized stack with `widths[0]` inputs and one layer per
    /// remaining width.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Result<Self, CrgError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(CrgError::Stack(format!("invalid widths {widths:?}")));
        }
        let weights = widths
            .windows(2)
            .map(|w| crate::networks::he_uniform(w[0], w[1], rng))
            .collect();
        Ok(GraphStack { weights })
    }

    pub fn validate(&self) -> Result<(), CrgError> {
        if self.weights.is_empty() {
            return Err(CrgError::Stack("no layers".into()));
        }
        for w in &self.weights {
            if !w.is_matrix() {
                return Err(CrgError::Stack(format!("weight shape {:?}", w.shape())));
            }
        }
        for pair in self.weights.windows(2) {
            if pair[0].cols() != pair[1].rows() {
                return Err(CrgError::Stack(format!(
                    "layer output {} does not feed input {}",
                    pair[0].cols(),
                    pair[1].rows()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, Tensor::cols)
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }
}

/// Graph convolution over `h0` with constant `a_hat`, using the stack's
/// weights as registered on the tape.
pub fn propagate(tape: &mut Tape, h0: Var, a_hat: &Tensor, weights: &[Var]) -> Result<Var, CrgError> {
    let n = tape.value(h0).rows();
    if !a_hat.is_matrix() || a_hat.rows() != n || a_hat.cols() != n {
        return Err(CrgError::Tensor(TensorError::ShapeMismatch {
            op: "propagate",
            left: tape.value(h0).shape().to_vec(),
            right: a_hat.shape().to_vec(),
        }));
    }
    let adj = tape.constant(a_hat.clone());
    let mut h = h0;
    for (l, &w) in weights.iter().enumerate() {
        let hw = tape.matmul(h, w)?;
        h = tape.matmul(adj, hw)?;
        if l + 1 < weights.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn source_rows_one_hot_target_rows_pass_through() {
        let probs = m(&[vec![0.1, 0.2, 0.3, 0.4]]);
        let y = build_label_matrix(&[2], Some(&probs), 4, TargetLabelMode::Soft).unwrap();
        assert_eq!(y.rows().row(0), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(y.rows().row(1), probs.row(0));
        assert_eq!(y.domains(), &[Domain::Source, Domain::Target]);

        let hard = build_label_matrix(&[2], Some(&probs), 4, TargetLabelMode::Hard).unwrap();
        assert_eq!(hard.rows().row(1), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn label_errors() {
        assert_eq!(
            build_label_matrix(&[4], None, 4, TargetLabelMode::Soft),
            Err(CrgError::LabelOutOfRange {
                label: 4,
                num_classes: 4
            })
        );
        let bad = m(&[vec![0.5, 0.6]]);
        assert!(matches!(
            build_label_matrix(&[0], Some(&bad), 2, TargetLabelMode::Soft),
            Err(CrgError::NotProbability { row: 0 })
        ));
    }

    #[test]
    fn adjacency_hand_cases() {
        let diff = build_label_matrix(&[0, 1], None, 2, TargetLabelMode::Soft).unwrap();
        let adj = build_adjacency(&diff);
        assert_eq!(adj.a_tilde().data(), &[2.0, 0.0, 0.0, 2.0]);
        assert_eq!(adj.a_hat().data(), Tensor::eye(2).data());

        let same = build_label_matrix(&[1, 1], None, 2, TargetLabelMode::Soft).unwrap();
        let adj = build_adjacency(&same);
        assert_eq!(adj.a_tilde().data(), &[2.0, 1.0, 1.0, 2.0]);
        let expect = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
        for (a, b) in adj.a_hat().data().iter().zip(expect) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }

        let single = build_label_matrix(&[], Some(&m(&[vec![0.3, 0.7]])), 2, TargetLabelMode::Soft)
            .unwrap();
        let adj = build_adjacency(&single);
        assert_relative_eq!(adj.a_hat().data()[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn identity_single_layer_is_relu_free_linear() {
        let mut tape = Tape::new();
        let h0 = tape.constant(m(&[vec![1.0, -2.0], vec![-3.0, 4.0]]));
        let w = tape.constant(Tensor::eye(2));
        let out = propagate(&mut tape, h0, &Tensor::eye(2), &[w]).unwrap();
        assert_eq!(tape.value(out), tape.value(h0));
        // With a hidden relu layer: relu(H0) I then identity output.
        let w2 = tape.constant(Tensor::eye(2));
        let out = propagate(&mut tape, h0, &Tensor::eye(2), &[w, w2]).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn equal_rows_stay_equal_under_averaging() {
        let mut tape = Tape::new();
        let h0 = tape.constant(m(&[vec![0.3, -1.2], vec![0.3, -1.2]]));
        let w = tape.constant(m(&[vec![1.5, 0.2], vec![-0.7, 2.0]]));
        let a = m(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let out = propagate(&mut tape, h0, &a, &[w]).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn dimension_mismatch() {
        let mut tape = Tape::new();
        let h0 = tape.constant(Tensor::zeros(&[3, 2]));
        let w = tape.constant(Tensor::eye(2));
        assert!(propagate(&mut tape, h0, &Tensor::eye(2), &[w]).is_err());
    }
}
