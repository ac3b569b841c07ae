use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::crg::TargetLabelMode;
use crate::objectives::Guidance;

/// Ablation ladder, from plain supervised training to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SourceOnly,
    Dann,
    Base,
    Crg,
    Apda,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SourceOnly,
        Variant::Dann,
        Variant::Base,
        Variant::Crg,
        Variant::Apda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::Dann => "dann",
            Variant::Base => "base",
            Variant::Crg => "crg",
            Variant::Apda => "apda",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}; expected one of source_only, dann, base, crg, apda"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr0: f64,
    pub lr_alpha: f64,
    pub lr_beta: f64,
    pub head_lr_multiplier: f64,
    pub momentum: f64,
    pub grl_gamma: f64,
    pub lambda_c: f64,
    pub ema_alpha: f64,
    /// `None` means `max(1, ceil(0.1 N_c))`.
    pub top_k: Option<usize>,
    pub margin_clamp: Option<f64>,
    pub guidance: Guidance,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub graph_layers: usize,
    pub graph_width: usize,
    pub target_labels: TargetLabelMode,
    /// Let the auxiliary heads' losses reach `F` and `G`.
    pub couple_aux: bool,
    /// Replace the batch graph with the identity.
    pub force_identity_adjacency: bool,
    /// Replace the sample weights with ones.
    pub force_unit_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Apda,
            lr0: 1e-3,
            lr_alpha: 10.0,
            lr_beta: 0.75,
            head_lr_multiplier: 10.0,
            momentum: 0.9,
            grl_gamma: 10.0,
            lambda_c: 1.0,
            ema_alpha: 0.7,
            top_k: None,
            margin_clamp: None,
            guidance: Guidance::TopBottomK,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            graph_layers: 2,
            graph_width: 64,
            target_labels: TargetLabelMode::Soft,
            couple_aux: false,
            force_identity_adjacency: false,
            force_unit_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr0) || !positive(self.head_lr_multiplier) {
            return fail(format!(
                "lr0 and head_lr_multiplier must be positive, got {} and {}",
                self.lr0, self.head_lr_multiplier
            ));
        }
        if !(self.lr_alpha >= 0.0) || !(self.lr_beta >= 0.0) || !(self.grl_gamma >= 0.0) {
            return fail("lr_alpha, lr_beta and grl_gamma must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lambda_c >= 0.0) || !self.lambda_c.is_finite() {
            return fail(format!("lambda_c must be non-negative, got {}", self.lambda_c));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return fail(format!("ema_alpha must lie in [0, 1], got {}", self.ema_alpha));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.graph_layers == 0 || self.graph_width == 0 {
            return fail("graph needs at least one layer of positive width".into());
        }
        if let Some(m) = self.margin_clamp {
            if !(m > 0.0) {
                return fail(format!("margin_clamp must be positive, got {m}"));
            }
        }
        Ok(())
    }

    /// Which parts of the objective are live for this configuration.
    pub fn gates(&self) -> Gates {
        use Variant::*;
        Gates {
            weighting: matches!(self.variant, Base | Crg | Apda) && !self.force_unit_weights,
            graph: matches!(self.variant, Crg | Apda) && !self.force_identity_adjacency,
            adversarial: self.variant != SourceOnly,
            lambda_c: if self.variant == Apda { self.lambda_c } else { 0.0 },
        }
    }

    /// `lr0 * (1 + lr_alpha p)^-lr_beta` for the extractor.
    pub fn lr_at(&self, p: f64) -> Result<f64, TrainError> {
        lr_schedule(p, self.lr0, self.lr_alpha, self.lr_beta)
    }

    pub fn grl_lambda_at(&self, p: f64) -> f64 {
        grl_lambda_schedule(p, self.grl_gamma)
    }
}

/// Resolved switches of one variant. Every variant runs the same
/// computation; gating only masks inputs and coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gates {
    pub weighting: bool,
    pub graph: bool,
    pub adversarial: bool,
    pub lambda_c: f64,
}

pub fn lr_schedule(p: f64, lr0: f64, alpha: f64, beta: f64) -> Result<f64, TrainError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TrainError::Config(format!("progress {p} outside [0, 1]")));
    }
    Ok(lr0 * (1.0 + alpha * p).powf(-beta))
}

/// `2 / (1 + exp(-gamma p)) - 1`.
pub fn grl_lambda_schedule(p: f64, gamma: f64) -> f64 {
    2.0 / (1.0 + (-gamma * p).exp()) - 1.0
}

/// Progress of step `s` out of `total`: 0 at the first step, 1 at the last.
pub fn progress(step: usize, total: usize) -> f64 {
    if total <= 1 {
        0.0
    } else {
        step as f64 / (total - 1) as f64
    }
}
