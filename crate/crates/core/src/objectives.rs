//! Commonness scores, weighted losses, class statistics and the
//! confidence-guided centroid loss.
//!
//! ```text
//! E(x)   = -(1 / ln N_c) * sum_c l_c(x) ln l_c(x)
//! raw(x) = E(C'(G(F(x)))) - D'(G(F(x)))
//! w      = (raw - min) / (max - min + 1e-8)          per batch
//! L_cg   = 1/(2K) * ( sum_{T_K} |R_s - R_t|^2 - sum_{B_K} |R_s - R_t|^2 )
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, Var};

/// Denominator guard of the min-max normalization.
pub const MINMAX_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ObjectiveError {
    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),
    #[error("{what}: expected {expected} entries, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid setting: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Entropy of a probability row divided by `ln N_c`, with `0 ln 0 = 0`.
pub fn normalized_entropy(row: &[f64]) -> f64 {
    if row.len() < 2 {
        return 0.0;
    }
    let h: f64 = row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    (h / (row.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Per-sample commonness of one batch of source samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    /// Normalized to `[0, 1]`.
    pub w: Vec<f64>,
    pub raw: Vec<f64>,
}

impl WeightVector {
    pub fn ones(n: usize) -> Self {
        WeightVector {
            w: vec![1.0; n],
            raw: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Min-max normalization of raw scores; a constant batch maps to all ones.
pub fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= MINMAX_EPS {
        return vec![1.0; raw.len()];
    }
    raw.iter()
        .map(|r| ((r - lo) / (hi - lo + MINMAX_EPS)).clamp(0.0, 1.0))
        .collect()
}

/// Commonness from the auxiliary heads' outputs on source samples:
/// `probs_aux` is `[n, N_c]`, `prob_daux` is `[n, 1]`.
pub fn sample_commonness(probs_aux: &Tensor, prob_daux: &Tensor) -> Result<WeightVector, ObjectiveError> {
    let n = probs_aux.rows();
    if n == 0 || probs_aux.numel() == 0 {
        return Err(ObjectiveError::EmptyBatch("sample_commonness"));
    }
    if prob_daux.numel() != n {
        return Err(ObjectiveError::Length {
            what: "sample_commonness",
            expected: n,
            got: prob_daux.numel(),
        });
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| normalized_entropy(probs_aux.row(i)) - prob_daux.data()[i])
        .collect();
    Ok(WeightVector {
        w: min_max_normalize(&raw),
        raw,
    })
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor, ObjectiveError> {
    let mut t = Tensor::zeros(&[labels.len().max(1), num_classes.max(1)]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(ObjectiveError::LabelOutOfRange {
                label: l,
                num_classes,
            });
        }
        t.set(i, l, 1.0);
    }
    Ok(t)
}

/// `(1/n) sum_i w_i * -ln p_i[y_i]` over source rows.
pub fn weighted_classifier_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    w: &[f64],
) -> Result<Var, ObjectiveError> {
    if labels.is_empty() {
        return Err(ObjectiveError::EmptyBatch("weighted_classifier_loss"));
    }
    let targets = one_hot(labels, tape.value(probs).cols())?;
    Ok(tape.weighted_cross_entropy(probs, &targets, w)?)
}

/// `mean_s(w * -ln D) + mean_t(-ln(1 - D))`.
pub fn weighted_domain_loss(
    tape: &mut Tape,
    prob_source: Var,
    w: &[f64],
    prob_target: Var,
) -> Result<Var, ObjectiveError> {
    let ns = tape.value(prob_source).numel();
    let nt = tape.value(prob_target).numel();
    if ns == 0 || nt == 0 {
        return Err(ObjectiveError::EmptyBatch("weighted_domain_loss"));
    }
    let src = tape.weighted_binary_cross_entropy(prob_source, &vec![1.0; ns], w)?;
    let tgt = tape.weighted_binary_cross_entropy(prob_target, &vec![0.0; nt], &vec![1.0; nt])?;
    Ok(tape.add(src, tgt)?)
}

/// How class commonness turns into per-class centroid coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    /// Attract the top K, repel the bottom K.
    #[default]
    TopBottomK,
    /// Attraction term only.
    TopKOnly,
    /// Every eligible class, coefficient `2c - 1` on min-max normalized commonness.
    Soft,
}

/// EMA-smoothed class statistics carried across training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonnessState {
    pub alpha: f64,
    pub k: usize,
    pub margin_clamp: Option<f64>,
    pub guidance: Guidance,
    pub class_commonness: Vec<f64>,
    pub commonness_seen: Vec<bool>,
    pub centroid_source: Tensor,
    pub centroid_target: Tensor,
    pub source_seen: Vec<bool>,
    pub target_seen: Vec<bool>,
}

/// `max(1, ceil(0.1 N_c))`.
pub fn default_top_k(num_classes: usize) -> usize {
    ((0.1 * num_classes as f64).ceil() as usize).max(1)
}

/// Centroids for the current step as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct CentroidVars {
    pub source: Var,
    pub target: Var,
}

/// Result of [`confidence_guided_loss`].
#[derive(Debug, Clone)]
pub struct GuidanceOutcome {
    pub loss: Var,
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
    pub skipped: bool,
}

impl CommonnessState {
    pub fn new(num_classes: usize, feat_dim: usize, alpha: f64, k: usize) -> Result<Self, ObjectiveError> {
        if num_classes < 2 || feat_dim == 0 {
            return Err(ObjectiveError::Config(format!(
                "need at least 2 classes and a positive feature width, got {num_classes} and {feat_dim}"
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(ObjectiveError::Config(format!("EMA alpha {alpha} outside [0, 1]")));
        }
        if k < 1 || k > num_classes / 2 {
            return Err(ObjectiveError::Config(format!(
                "K = {k} must lie in [1, {}]",
                num_classes / 2
            )));
        }
        Ok(CommonnessState {
            alpha,
            k,
            margin_clamp: None,
            guidance: Guidance::default(),
            class_commonness: vec![0.0; num_classes],
            commonness_seen: vec![false; num_classes],
            centroid_source: Tensor::zeros(&[num_classes, feat_dim]),
            centroid_target: Tensor::zeros(&[num_classes, feat_dim]),
            source_seen: vec![false; num_classes],
            target_seen: vec![false; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_commonness.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.centroid_source.cols()
    }

    /// Classes with both centroids observed.
    pub fn eligible(&self) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&c| self.source_seen[c] && self.target_seen[c] && self.commonness_seen[c])
            .collect()
    }

    /// Per-class batch mean of `w`, folded in with the EMA. A class seen for
    /// the first time takes its batch mean directly.
    pub fn update_class_commonness(&mut self, w: &[f64], labels: &[usize]) -> Result<(), ObjectiveError> {
        if w.len() != labels.len() {
            return Err(ObjectiveError::Length {
                what: "update_class_commonness",
                expected: labels.len(),
                got: w.len(),
            });
        }
        let n_c = self.num_classes();
        let mut sum = vec![0.0; n_c];
        let mut count = vec![0usize; n_c];
        for (&wi, &l) in w.iter().zip(labels) {
            if l >= n_c {
                return Err(ObjectiveError::LabelOutOfRange {
                    label: l,
                    num_classes: n_c,
                });
            }
            sum[l] += wi;
            count[l] += 1;
        }
        for c in 0..n_c {
            if count[c] == 0 {
                continue;
            }
            let mean = sum[c] / count[c] as f64;
            self.class_commonness[c] = if self.commonness_seen[c] {
                self.alpha * mean + (1.0 - self.alpha) * self.class_commonness[c]
            } else {
                mean
            };
            self.commonness_seen[c] = true;
        }
        Ok(())
    }

    /// Folds this batch's class means of `feat` into the centroids.
    ///
    /// `feat` holds the source rows (labels `source_labels`) followed by the
    /// target rows (labels `target_pseudo`). The returned centroids are
    /// `M feat + P` with constant `M` and `P`, so gradients reach `feat` only
    /// through the current batch.
    pub fn update_centroids(
        &mut self,
        tape: &mut Tape,
        feat: Var,
        source_labels: &[usize],
        target_pseudo: &[usize],
    ) -> Result<CentroidVars, ObjectiveError> {
        let (rows, d) = {
            let f = tape.value(feat);
            (f.rows(), f.cols())
        };
        let ns = source_labels.len();
        if ns + target_pseudo.len() != rows {
            return Err(ObjectiveError::Length {
                what: "update_centroids",
                expected: rows,
                got: ns + target_pseudo.len(),
            });
        }
        if d != self.feat_dim() {
            return Err(ObjectiveError::Length {
                what: "centroid width",
                expected: self.feat_dim(),
                got: d,
            });
        }
        let source = centroid_step(
            tape,
            feat,
            source_labels,
            0,
            &mut self.centroid_source,
            &mut self.source_seen,
            self.alpha,
        )?;
        let target = centroid_step(
            tape,
            feat,
            target_pseudo,
            ns,
            &mut self.centroid_target,
            &mut self.target_seen,
            self.alpha,
        )?;
        Ok(CentroidVars { source, target })
    }

    /// Top and bottom class sets, or `None` when fewer than K classes are
    /// eligible. Ties break by ascending class id.
    pub fn select_classes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        let eligible = self.eligible();
        if eligible.len() < self.k {
            return None;
        }
        let mut desc = eligible.clone();
        desc.sort_by(|&a, &b| {
            self.class_commonness[b]
                .total_cmp(&self.class_commonness[a])
                .then(a.cmp(&b))
        });
        let mut asc = eligible;
        asc.sort_by(|&a, &b| {
            self.class_commonness[a]
                .total_cmp(&self.class_commonness[b])
                .then(a.cmp(&b))
        });
        desc.truncate(self.k);
        asc.truncate(self.k);
        Some((desc, asc))
    }
}

fn centroid_step(
    tape: &mut Tape,
    feat: Var,
    labels: &[usize],
    offset: usize,
    stored: &mut Tensor,
    seen: &mut [bool],
    alpha: f64,
) -> Result<Var, ObjectiveError> {
    let (n_c, d) = (stored.rows(), stored.cols());
    let rows = tape.value(feat).rows();
    let mut count = vec![0usize; n_c];
    for &l in labels {
        if l >= n_c {
            return Err(ObjectiveError::LabelOutOfRange {
                label: l,
                num_classes: n_c,
            });
        }
        count[l] += 1;
    }
    let gain: Vec<f64> = (0..n_c).map(|c| if seen[c] { alpha } else { 1.0 }).collect();
    let mut m = Tensor::zeros(&[n_c, rows]);
    for (i, &l) in labels.iter().enumerate() {
        m.set(l, offset + i, gain[l] / count[l] as f64);
    }
    let mut history = stored.clone();
    for c in (0..n_c).filter(|&c| count[c] > 0) {
        for k in 0..d {
            history.set(c, k, (1.0 - gain[c]) * stored.get(c, k));
        }
        seen[c] = true;
    }
    let m = tape.constant(m);
    let history = tape.constant(history);
    let batch = tape.matmul(m, feat)?;
    let out = tape.add(batch, history)?;
    *stored = tape.value(out).clone();
    Ok(out)
}

/// Signed centroid loss over the classes ranked by `state`.
///
/// `centroids` may be any `[N_c, d]` pair on the tape, usually the output of
/// [`CommonnessState::update_centroids`]. With fewer than K eligible classes
/// the loss is a constant zero.
pub fn confidence_guided_loss(
    tape: &mut Tape,
    state: &CommonnessState,
    centroids: CentroidVars,
) -> Result<GuidanceOutcome, ObjectiveError> {
    let n_c = state.num_classes();
    let skip = |tape: &mut Tape| GuidanceOutcome {
        loss: tape.constant(Tensor::scalar(0.0)),
        top: Vec::new(),
        bottom: Vec::new(),
        skipped: true,
    };
    let Some((top, bottom)) = state.select_classes() else {
        log::debug!(
            "confidence-guided loss skipped: {} of {} classes eligible, K = {}",
            state.eligible().len(),
            n_c,
            state.k
        );
        return Ok(skip(tape));
    };

    let diff = tape.sub(centroids.source, centroids.target)?;
    let sq = tape.mul(diff, diff)?;
    let dist = tape.row_sums(sq);

    let mut attract = vec![0.0; n_c];
    let mut repel = vec![0.0; n_c];
    match state.guidance {
        Guidance::TopBottomK | Guidance::TopKOnly => {
            let scale = 1.0 / (2 * state.k) as f64;
            for &c in &top {
                attract[c] = scale;
            }
            if state.guidance == Guidance::TopBottomK {
                for &c in &bottom {
                    repel[c] = scale;
                }
            }
        }
        Guidance::Soft => {
            let eligible = state.eligible();
            let values: Vec<f64> = eligible.iter().map(|&c| state.class_commonness[c]).collect();
            let norm = min_max_normalize(&values);
            let scale = 1.0 / eligible.len() as f64;
            for (&c, &v) in eligible.iter().zip(&norm) {
                let coef = 2.0 * v - 1.0;
                if coef >= 0.0 {
                    attract[c] = scale * coef;
                } else {
                    repel[c] = -scale * coef;
                }
            }
        }
    }

    let attract = tape.constant(Tensor::matrix(n_c, 1, attract)?);
    let pulled = tape.mul(dist, attract)?;
    let mut loss = tape.sum(pulled);
    if repel.iter().any(|&r| r != 0.0) {
        let capped = match state.margin_clamp {
            Some(m) => tape.clamp_max(dist, m),
            None => dist,
        };
        let repel = tape.constant(Tensor::matrix(n_c, 1, repel)?);
        let pushed = tape.mul(capped, repel)?;
        let pushed = tape.sum(pushed);
        loss = tape.sub(loss, pushed)?;
    }
    Ok(GuidanceOutcome {
        loss,
        top,
        bottom,
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_cases() {
        assert_eq!(normalized_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((normalized_entropy(&[0.25; 4]) - 1.0).abs() < 1e-12);
        let half = normalized_entropy(&[0.5, 0.5, 0.0, 0.0]);
        assert!((half - 2f64.ln() / 4f64.ln()).abs() < 1e-12);
        assert!((half - 0.5).abs() < 1e-12);
    }

    #[test]
    fn min_max_cases() {
        let w = min_max_normalize(&[-1.0, 0.0, 1.0]);
        assert!(w[0].abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-8 && (w[2] - 1.0).abs() < 1e-8);
        assert_eq!(min_max_normalize(&[0.3, 0.3, 0.3]), vec![1.0; 3]);
    }

    #[test]
    fn commonness_combines_entropy_and_discriminator() {
        let probs = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let d = Tensor::matrix(3, 1, vec![0.9, 0.9, 0.1]).unwrap();
        let wv = sample_commonness(&probs, &d).unwrap();
        assert!((wv.raw[0] + 0.9).abs() < 1e-12);
        assert!((wv.raw[2] - 0.9).abs() < 1e-12);
        assert!(wv.w[0] < wv.w[1] && wv.w[1] < wv.w[2]);
        assert!(sample_commonness(&probs, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn classifier_loss_linear_in_w() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap());
        let full = weighted_classifier_loss(&mut tape, p, &[1, 0], &[1.0, 1.0]).unwrap();
        let half = weighted_classifier_loss(&mut tape, p, &[1, 0], &[0.5, 0.5]).unwrap();
        let zero = weighted_classifier_loss(&mut tape, p, &[1, 0], &[0.0, 0.0]).unwrap();
        let plain = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((tape.value(full).item().unwrap() - plain).abs() < 1e-12);
        assert!((tape.value(half).item().unwrap() - plain / 2.0).abs() < 1e-12);
        assert_eq!(tape.value(zero).item().unwrap(), 0.0);
        assert!(weighted_classifier_loss(&mut tape, p, &[2, 0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn domain_loss_cases() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::filled(&[3, 1], 0.5));
        let t = tape.constant(Tensor::filled(&[2, 1], 0.5));
        let l = weighted_domain_loss(&mut tape, s, &[1.0; 3], t).unwrap();
        assert!((tape.value(l).item().unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let l0 = weighted_domain_loss(&mut tape, s, &[0.0; 3], t).unwrap();
        assert!((tape.value(l0).item().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn class_commonness_ema() {
        let mut st = CommonnessState::new(4, 2, 0.7, 1).unwrap();
        st.update_class_commonness(&[0.2, 0.4, 1.0], &[0, 0, 2]).unwrap();
        assert!((st.class_commonness[0] - 0.3).abs() < 1e-12);
        assert!(!st.commonness_seen[1]);
        st.update_class_commonness(&[0.9], &[0]).unwrap();
        assert!((st.class_commonness[0] - (0.7 * 0.9 + 0.3 * 0.3)).abs() < 1e-12);
        assert_eq!(st.class_commonness[2], 1.0);

        let mut frozen = CommonnessState::new(4, 2, 0.0, 1).unwrap();
        frozen.update_class_commonness(&[0.5], &[1]).unwrap();
        frozen.update_class_commonness(&[0.1], &[1]).unwrap();
        assert_eq!(frozen.class_commonness[1], 0.5);
    }

    #[test]
    fn centroid_updates() {
        let mut st = CommonnessState::new(4, 2, 1.0, 1).unwrap();
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![-1.0, 0.5]]).unwrap());
        let c = st.update_centroids(&mut tape, f, &[1, 1], &[3]).unwrap();
        assert_eq!(tape.value(c.source).row(1), &[2.0, 4.0]);
        assert_eq!(tape.value(c.target).row(3), &[-1.0, 0.5]);
        assert_eq!(tape.value(c.source).row(0), &[0.0, 0.0]);
        assert!(st.source_seen[1] && !st.source_seen[3] && st.target_seen[3]);

        st.alpha = 0.5;
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![9.0, 9.0]]).unwrap());
        st.update_centroids(&mut tape, g, &[0], &[3]).unwrap();
        assert_eq!(st.centroid_source.row(1), &[2.0, 4.0]);
        assert_eq!(st.centroid_source.row(0), &[0.0, 0.0]);
        assert_eq!(st.centroid_target.row(3), &[4.0, 4.75]);
    }

    fn ranked_state() -> CommonnessState {
        let mut st = CommonnessState::new(4, 1, 0.7, 1).unwrap();
        st.class_commonness = vec![0.4, 0.1, 0.3, 0.2];
        st.commonness_seen = vec![true; 4];
        st.source_seen = vec![true; 4];
        st.target_seen = vec![true; 4];
        st
    }

    fn centroid_vars(tape: &mut Tape, rs: &[f64], rt: &[f64]) -> CentroidVars {
        CentroidVars {
            source: tape.leaf(Tensor::matrix(rs.len(), 1, rs.to_vec()).unwrap()),
            target: tape.leaf(Tensor::matrix(rt.len(), 1, rt.to_vec()).unwrap()),
        }
    }

    #[test]
    fn guided_loss_arithmetic() {
        let st = ranked_state();
        let mut tape = Tape::new();
        let cv = centroid_vars(&mut tape, &[2.0, 1.0, 7.0, 7.0], &[0.0, 0.0, 0.0, 0.0]);
        let out = confidence_guided_loss(&mut tape, &st, cv).unwrap();
        assert_eq!((out.top.clone(), out.bottom.clone()), (vec![0], vec![1]));
        assert!((tape.value(out.loss).item().unwrap() - 1.5).abs() < 1e-12);

        let mut doubled = st.clone();
        doubled.class_commonness.iter_mut().for_each(|c| *c *= 2.0);
        let out2 = confidence_guided_loss(&mut tape, &doubled, cv).unwrap();
        assert_eq!(out2.top, out.top);
        assert_eq!(tape.value(out2.loss).item().unwrap(), tape.value(out.loss).item().unwrap());

        let mut clamped = st.clone();
        clamped.margin_clamp = Some(0.25);
        let out3 = confidence_guided_loss(&mut tape, &clamped, cv).unwrap();
        assert!((tape.value(out3.loss).item().unwrap() - 0.5 * (4.0 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn guided_loss_skips_without_eligible_classes() {
        let mut st = ranked_state();
        st.target_seen = vec![false; 4];
        let mut tape = Tape::new();
        let cv = centroid_vars(&mut tape, &[2.0, 1.0, 0.0, 0.0], &[0.0; 4]);
        let out = confidence_guided_loss(&mut tape, &st, cv).unwrap();
        assert!(out.skipped);
        assert_eq!(tape.value(out.loss).item().unwrap(), 0.0);
    }

    #[test]
    fn ties_break_by_class_id() {
        let mut st = ranked_state();
        st.class_commonness = vec![0.5; 4];
        let (top, bottom) = st.select_classes().unwrap();
        assert_eq!((top, bottom), (vec![0], vec![0]));
    }

    #[test]
    fn invalid_state_rejected() {
        assert!(CommonnessState::new(4, 2, 0.7, 3).is_err());
        assert!(CommonnessState::new(4, 2, 1.5, 1).is_err());
        assert_eq!(default_top_k(6), 1);
        assert_eq!(default_top_k(31), 4);
    }
}
