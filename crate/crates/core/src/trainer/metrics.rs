use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;

/// Losses as they enter the total objective (coefficients applied; masked
/// terms are zero).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_c: f64,
    pub l_d: f64,
    pub l_cg: f64,
    pub l_aux_c: f64,
    pub l_aux_d: f64,
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        self.l_c + self.l_d + self.l_cg + self.l_aux_c + self.l_aux_d
    }

    pub fn is_finite(&self) -> bool {
        [self.l_c, self.l_d, self.l_cg, self.l_aux_c, self.l_aux_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub p: f64,
    pub lr: f64,
    pub lambda: f64,
    pub losses: StepLosses,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Steps completed at the end of the epoch.
    pub step: usize,
    /// `None` without hidden target labels.
    pub target_accuracy: Option<f64>,
    pub mean_w_common: Option<f64>,
    pub mean_w_private: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RowKind {
    Step,
    Epoch,
}

/// One CSV row; step rows leave the epoch columns empty and vice versa.
#[derive(Debug, Serialize, Deserialize)]
struct Row {
    kind: RowKind,
    step: usize,
    epoch: Option<usize>,
    p: Option<f64>,
    lr: Option<f64>,
    lambda: Option<f64>,
    l_c: Option<f64>,
    l_d: Option<f64>,
    l_cg: Option<f64>,
    l_aux_c: Option<f64>,
    l_aux_d: Option<f64>,
    target_accuracy: Option<f64>,
    mean_w_common: Option<f64>,
    mean_w_private: Option<f64>,
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io(format!("{}: {e}", path.display()))
}

impl MetricsLog {
    /// Final logged target accuracy.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.target_accuracy)
    }

    /// Step rows, each followed by the epoch row that closes it.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut epochs = self.epochs.iter().peekable();
        for s in &self.steps {
            w.serialize(Row {
                kind: RowKind::Step,
                step: s.step,
                epoch: None,
                p: Some(s.p),
                lr: Some(s.lr),
                lambda: Some(s.lambda),
                l_c: Some(s.losses.l_c),
                l_d: Some(s.losses.l_d),
                l_cg: Some(s.losses.l_cg),
                l_aux_c: Some(s.losses.l_aux_c),
                l_aux_d: Some(s.losses.l_aux_d),
                target_accuracy: None,
                mean_w_common: None,
                mean_w_private: None,
            })?;
            while let Some(e) = epochs.next_if(|e| e.step <= s.step + 1) {
                w.serialize(epoch_row(e))?;
            }
        }
        for e in epochs {
            w.serialize(epoch_row(e))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, csv::Error> {
        let mut log = MetricsLog::default();
        for row in csv::Reader::from_reader(input).deserialize() {
            let r: Row = row?;
            match r.kind {
                RowKind::Step => log.steps.push(StepRecord {
                    step: r.step,
                    p: r.p.unwrap_or(f64::NAN),
                    lr: r.lr.unwrap_or(f64::NAN),
                    lambda: r.lambda.unwrap_or(f64::NAN),
                    losses: StepLosses {
                        l_c: r.l_c.unwrap_or(f64::NAN),
                        l_d: r.l_d.unwrap_or(f64::NAN),
                        l_cg: r.l_cg.unwrap_or(f64::NAN),
                        l_aux_c: r.l_aux_c.unwrap_or(f64::NAN),
                        l_aux_d: r.l_aux_d.unwrap_or(f64::NAN),
                    },
                }),
                RowKind::Epoch => log.epochs.push(EpochRecord {
                    epoch: r.epoch.unwrap_or(0),
                    step: r.step,
                    target_accuracy: r.target_accuracy,
                    mean_w_common: r.mean_w_common,
                    mean_w_private: r.mean_w_private,
                }),
            }
        }
        Ok(log)
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), TrainError> {
        let f = std::fs::File::create(path).map_err(|e| csv_err(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| csv_err(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self, TrainError> {
        let f = std::fs::File::open(path).map_err(|e| csv_err(path, e))?;
        MetricsLog::read_csv(std::io::BufReader::new(f)).map_err(|e| csv_err(path, e))
    }

    pub fn save_json(&self, path: &Path) -> Result<(), TrainError> {
        let s = serde_json::to_string_pretty(self).expect("metrics serialize");
        std::fs::write(path, s).map_err(|e| csv_err(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self, TrainError> {
        let s = std::fs::read_to_string(path).map_err(|e| csv_err(path, e))?;
        serde_json::from_str(&s).map_err(|e| csv_err(path, e))
    }
}

fn epoch_row(e: &EpochRecord) -> Row {
    Row {
        kind: RowKind::Epoch,
        step: e.step,
        epoch: Some(e.epoch),
        p: None,
        lr: None,
        lambda: None,
        l_c: None,
        l_d: None,
        l_cg: None,
        l_aux_c: None,
        l_aux_d: None,
        target_accuracy: e.target_accuracy,
        mean_w_common: e.mean_w_common,
        mean_w_private: e.mean_w_private,
    }
}
