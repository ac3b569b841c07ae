use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use apda::data::{generate_pda_gaussians, PdaDataset, ShiftConfig};
use apda::networks::ParamSet;
use apda::objectives::CommonnessState;
use apda::trainer::{full_pass, train, MetricsLog, TrainConfig, TrainError, Variant};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, ExperimentConfig};
use crate::CliError;

/// Commonness state at the end of training plus per-sample commonness from
/// a full pass over the source split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonnessSnapshot {
    pub variant: Variant,
    pub state: CommonnessState,
    pub source_commonness: Vec<f64>,
    pub source_labels: Vec<usize>,
    /// Target label set, when the target split carried labels.
    pub common_classes: Option<Vec<usize>>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::io(path, e);
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Curve labels: the run directory for `metrics.*` files, else the file
/// stem; repeated labels get a `#n` suffix.
pub fn labels(paths: &[PathBuf]) -> Vec<String> {
    let mut taken = BTreeSet::new();
    paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
            let generic = matches!(stem, "metrics" | "commonness_snapshot");
            let base = match p.parent().and_then(Path::file_name).and_then(|s| s.to_str()) {
                Some(dir) if generic => dir.to_string(),
                _ => stem.to_string(),
            };
            let mut label = base.clone();
            let mut n = 2;
            while !taken.insert(label.clone()) {
                label = format!("{base}#{n}");
                n += 1;
            }
            label
        })
        .collect()
}

pub fn load_metrics(path: &Path) -> Result<MetricsLog, CliError> {
    if !path.exists() {
        return Err(CliError::io(path, "no such file"));
    }
    let loaded = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => MetricsLog::load_json(path),
        _ => MetricsLog::load_csv(path),
    };
    loaded.map_err(|e| CliError::Validation(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub label: String,
    pub epoch: usize,
    pub step: usize,
    /// `1 - accuracy` on the target split; empty without target labels.
    pub target_error: Option<f64>,
}

/// One curve per metrics file: target error at the end of every epoch.
pub fn error_curves(paths: &[PathBuf]) -> Result<Vec<ErrorPoint>, CliError> {
    let mut rows = Vec::new();
    for (label, path) in labels(paths).into_iter().zip(paths) {
        let log = load_metrics(path)?;
        rows.extend(log.epochs.iter().map(|e| ErrorPoint {
            label: label.clone(),
            epoch: e.epoch,
            step: e.step,
            target_error: e.target_accuracy.map(|a| 1.0 - a),
        }));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub label: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub common: usize,
    pub private: usize,
}

/// Per-sample commonness counted into equal bins over `[0, 1]`; the last
/// bin is closed.
pub fn commonness_histogram(label: &str, snap: &CommonnessSnapshot, width: f64) -> Result<Vec<HistogramBin>, CliError> {
    let bins = (1.0 / width).round() as usize;
    if bins == 0 || (bins as f64 * width - 1.0).abs() > 1e-9 {
        return Err(CliError::Validation(format!("bin width {width} does not divide [0, 1]")));
    }
    let common: BTreeSet<usize> = snap
        .common_classes
        .as_ref()
        .ok_or_else(|| CliError::Validation(format!("{label}: snapshot has no target label set")))?
        .iter()
        .copied()
        .collect();
    if snap.source_commonness.len() != snap.source_labels.len() {
        return Err(CliError::Validation(format!("{label}: commonness and labels differ in length")));
    }
    let mut rows: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            label: label.to_string(),
            bin_lo: i as f64 / bins as f64,
            bin_hi: (i + 1) as f64 / bins as f64,
            common: 0,
            private: 0,
        })
        .collect();
    for (&w, c) in snap.source_commonness.iter().zip(&snap.source_labels) {
        if !(0.0..=1.0).contains(&w) {
            return Err(CliError::Validation(format!("{label}: commonness {w} outside [0, 1]")));
        }
        let row = &mut rows[((w * bins as f64) as usize).min(bins - 1)];
        if common.contains(c) {
            row.common += 1;
        } else {
            row.private += 1;
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub variant: Variant,
    pub num_target_classes: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
    /// `completed`, or the reason training stopped.
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub num_target_classes: usize,
    pub runs: usize,
    pub completed: usize,
    /// Median over completed runs.
    pub median_accuracy: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(v[n / 2]),
        _ => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

fn sweep_one(shift: &ShiftConfig, train_cfg: &TrainConfig) -> Result<SweepRun, CliError> {
    let ds = generate_pda_gaussians(shift)?;
    let (accuracy, status) = match train(train_cfg, &ds) {
        Ok(out) => (out.log.final_accuracy(), "completed".to_string()),
        Err(e @ TrainError::NonFinite { .. }) => (None, format!("diverged: {e}")),
        Err(e) => return Err(e.into()),
    };
    Ok(SweepRun {
        variant: train_cfg.variant,
        num_target_classes: shift.num_target_classes,
        seed: train_cfg.seed,
        accuracy,
        status,
    })
}

/// Retrains each configured variant for every target class count and seed.
/// Variants run on separate threads; results come back in config order.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<(Vec<SweepRun>, Vec<SweepRow>), CliError> {
    let DatasetSource::Synthetic(base) = &cfg.dataset else {
        return Err(CliError::Validation("the overlap sweep needs a synthetic dataset section".into()));
    };
    let counts: Vec<usize> = if cfg.report.sweep_target_classes.is_empty() {
        (1..base.num_source_classes).collect()
    } else {
        cfg.report.sweep_target_classes.clone()
    };
    if let Some(&bad) = counts.iter().find(|&&k| k == 0 || k >= base.num_source_classes) {
        return Err(CliError::Validation(format!(
            "sweep target class count {bad} must lie in 1..{}",
            base.num_source_classes
        )));
    }
    let seeds = if cfg.report.sweep_seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        cfg.report.sweep_seeds.clone()
    };

    let per_variant: Vec<Result<Vec<SweepRun>, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .report
            .sweep_variants
            .iter()
            .map(|&variant| {
                let (counts, seeds) = (&counts, &seeds);
                scope.spawn(move || {
                    let mut runs = Vec::new();
                    for &k in counts {
                        let shift = ShiftConfig {
                            num_target_classes: k,
                            ..base.clone()
                        };
                        for &seed in seeds {
                            let tc = TrainConfig {
                                variant,
                                seed,
                                ..cfg.train.clone()
                            };
                            log::info!("sweep {variant} with {k} target classes, seed {seed}");
                            runs.push(sweep_one(&shift, &tc)?);
                        }
                    }
                    Ok(runs)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep thread panicked")).collect()
    });

    let mut runs = Vec::new();
    for r in per_variant {
        runs.extend(r?);
    }
    let mut table = Vec::new();
    for &variant in &cfg.report.sweep_variants {
        for &k in &counts {
            let cell: Vec<&SweepRun> = runs
                .iter()
                .filter(|r| r.variant == variant && r.num_target_classes == k)
                .collect();
            let accs: Vec<f64> = cell.iter().filter_map(|r| r.accuracy).collect();
            table.push(SweepRow {
                variant,
                num_target_classes: k,
                runs: cell.len(),
                completed: cell.iter().filter(|r| r.status == "completed").count(),
                median_accuracy: median(&accs),
            });
        }
    }
    Ok((runs, table))
}

/// Writes `G(F(x))` for every source and target sample with a domain tag
/// and class id (hidden target labels when available).
pub fn export_features(params: &ParamSet, ds: &PdaDataset, cfg: &TrainConfig, path: &Path) -> Result<(), CliError> {
    let pass = full_pass(params, ds, cfg)?;
    let width = pass.source_features.cols();
    let io = |e: csv::Error| CliError::io(path, e);
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["domain".to_string(), "class".to_string()];
    header.extend((0..width).map(|j| format!("g{j}")));
    w.write_record(&header).map_err(io)?;
    let hidden = ds.evaluation().map(|e| e.target_labels());
    let splits = [
        ("source", &pass.source_features, Some(ds.source_labels())),
        ("target", &pass.target_features, hidden),
    ];
    for (domain, feats, labels) in splits {
        for i in 0..feats.rows() {
            let mut rec = vec![domain.to_string(), labels.map(|l| l[i].to_string()).unwrap_or_default()];
            rec.extend(feats.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
