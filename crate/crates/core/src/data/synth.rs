use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, PdaDataset};

/// Parameters of the synthetic Gaussian partial-adaptation benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub num_source_classes: usize,
    pub num_target_classes: usize,
    pub samples_per_class_source: usize,
    pub samples_per_class_target: usize,
    pub dim: usize,
    /// Within-class standard deviation.
    pub class_spread: f64,
    /// Rotation of the target domain in the plane of the first two dimensions.
    pub rotation_deg: f64,
    /// Target offset; shorter than `dim` means zero-padded.
    pub translation: Vec<f64>,
    pub noise_std: f64,
    /// Fraction of each source class moved out toward another class.
    pub anomaly_fraction: f64,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            num_source_classes: 6,
            num_target_classes: 3,
            samples_per_class_source: 50,
            samples_per_class_target: 50,
            dim: 2,
            class_spread: 1.0,
            rotation_deg: 25.0,
            translation: vec![0.0, 0.0],
            noise_std: 0.3,
            anomaly_fraction: 0.1,
            seed: 0,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Validation(m));
        if self.num_target_classes < 1 || self.num_target_classes >= self.num_source_classes {
            return fail(format!(
                "need 1 <= num_target_classes < num_source_classes, got {} and {}",
                self.num_target_classes, self.num_source_classes
            ));
        }
        if self.samples_per_class_source == 0 || self.samples_per_class_target == 0 {
            return fail("samples per class must be positive".into());
        }
        if self.dim < 2 {
            return fail(format!("dim must be at least 2, got {}", self.dim));
        }
        if !(self.class_spread > 0.0) || !self.class_spread.is_finite() {
            return fail(format!("class_spread must be positive, got {}", self.class_spread));
        }
        if !(0.0..0.5).contains(&self.anomaly_fraction) {
            return fail(format!(
                "anomaly_fraction must lie in [0, 0.5), got {}",
                self.anomaly_fraction
            ));
        }
        if !(self.noise_std >= 0.0) || !self.rotation_deg.is_finite() {
            return fail("noise_std must be non-negative and rotation finite".into());
        }
        if self.translation.len() > self.dim || self.translation.iter().any(|v| !v.is_finite()) {
            return fail(format!(
                "translation has {} entries for dim {}",
                self.translation.len(),
                self.dim
            ));
        }
        Ok(())
    }

    /// Class means: evenly spaced on a circle of radius `4 * class_spread`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let radius = 4.0 * self.class_spread;
        (0..self.num_source_classes)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / self.num_source_classes as f64;
                let mut m = vec![0.0; self.dim];
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
                m
            })
            .collect()
    }

    pub fn anomalies_per_class(&self) -> usize {
        (self.anomaly_fraction * self.samples_per_class_source as f64).floor() as usize
    }
}

/// Samples a dataset whose target covers classes `0..num_target_classes`,
/// rotated, translated and perturbed relative to the source.
///
/// In every source class the first `anomalies_per_class()` samples are placed
/// `3 * class_spread` from their mean in the direction of a randomly chosen
/// other class, with jitter orthogonal to that direction only.
pub fn generate_pda_gaussians(config: &ShiftConfig) -> Result<PdaDataset, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sigma = config.class_spread;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let means = config.class_means();
    let d = config.dim;
    let n_anom = config.anomalies_per_class();

    let mut source_features = Vec::new();
    let mut source_labels = Vec::new();
    for (c, mean) in means.iter().enumerate() {
        for i in 0..config.samples_per_class_source {
            let x: Vec<f64> = if i < n_anom {
                let mut other = rng.random_range(0..config.num_source_classes - 1);
                if other >= c {
                    other += 1;
                }
                let dir: Vec<f64> = means[other].iter().zip(mean).map(|(a, b)| a - b).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let u: Vec<f64> = dir.iter().map(|v| v / norm).collect();
                let jitter: Vec<f64> = (0..d).map(|_| 0.5 * sigma * unit.sample(&mut rng)).collect();
                let along: f64 = jitter.iter().zip(&u).map(|(a, b)| a * b).sum();
                (0..d)
                    .map(|k| mean[k] + 3.0 * sigma * u[k] + jitter[k] - along * u[k])
                    .collect()
            } else {
                mean.iter().map(|m| m + sigma * unit.sample(&mut rng)).collect()
            };
            source_features.extend(x);
            source_labels.push(c);
        }
    }

    let theta = config.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut translation = config.translation.clone();
    translation.resize(d, 0.0);
    let mut target_features = Vec::new();
    let mut target_labels = Vec::new();
    for (c, mean) in means.iter().enumerate().take(config.num_target_classes) {
        for _ in 0..config.samples_per_class_target {
            let mut x: Vec<f64> = mean.iter().map(|m| m + sigma * unit.sample(&mut rng)).collect();
            let (x0, x1) = (x[0], x[1]);
            x[0] = cos * x0 - sin * x1;
            x[1] = sin * x0 + cos * x1;
            for (v, t) in x.iter_mut().zip(&translation) {
                *v += t;
                if config.noise_std > 0.0 {
                    *v += config.noise_std * unit.sample(&mut rng);
                }
            }
            target_features.extend(x);
            target_labels.push(c);
        }
    }

    PdaDataset::new(
        d,
        source_features,
        source_labels,
        target_features,
        Some(target_labels),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn label_sets_follow_config() {
        let ds = generate_pda_gaussians(&ShiftConfig::default()).unwrap();
        assert_eq!(ds.source_classes().len(), 6);
        let eval = ds.evaluation().unwrap();
        assert_eq!(eval.target_classes(), &BTreeSet::from([0, 1, 2]));
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = ShiftConfig {
            seed: 17,
            ..ShiftConfig::default()
        };
        assert_eq!(
            generate_pda_gaussians(&cfg).unwrap(),
            generate_pda_gaussians(&cfg).unwrap()
        );
        let other = ShiftConfig { seed: 18, ..cfg.clone() };
        assert_ne!(
            generate_pda_gaussians(&cfg).unwrap(),
            generate_pda_gaussians(&other).unwrap()
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            ShiftConfig {
                num_target_classes: 6,
                ..ShiftConfig::default()
            },
            ShiftConfig {
                num_target_classes: 0,
                ..ShiftConfig::default()
            },
            ShiftConfig {
                class_spread: 0.0,
                ..ShiftConfig::default()
            },
            ShiftConfig {
                anomaly_fraction: 0.5,
                ..ShiftConfig::default()
            },
            ShiftConfig {
                translation: vec![0.0; 3],
                ..ShiftConfig::default()
            },
        ];
        for cfg in bad {
            assert!(generate_pda_gaussians(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn anomalies_lie_beyond_two_sigma() {
        let cfg = ShiftConfig {
            anomaly_fraction: 0.2,
            dim: 5,
            class_spread: 0.7,
            seed: 3,
            ..ShiftConfig::default()
        };
        let ds = generate_pda_gaussians(&cfg).unwrap();
        let means = cfg.class_means();
        for c in 0..cfg.num_source_classes {
            let far = (0..ds.num_source())
                .filter(|&i| ds.source_labels()[i] == c)
                .filter(|&i| {
                    let d2: f64 = ds
                        .source_row(i)
                        .iter()
                        .zip(&means[c])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    d2.sqrt() > 2.0 * cfg.class_spread
                })
                .count();
            assert!(far >= cfg.anomalies_per_class(), "class {c}: {far}");
        }
    }
}
