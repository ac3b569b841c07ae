use std::path::Path;

use super::{DataError, PdaDataset};

struct Rows {
    features: Vec<f64>,
    labels: Vec<Option<usize>>,
}

fn read_rows(path: &Path, dim: Option<usize>) -> Result<(usize, Rows), DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e))?;

    let mut rows = Rows {
        features: Vec::new(),
        labels: Vec::new(),
    };
    let mut dim = dim;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_error(path, row, e))?;
        let parse_err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            row,
            message,
        };
        let n = record.len();
        let d = *dim.get_or_insert_with(|| n.saturating_sub(1));
        if d == 0 {
            return Err(parse_err("need at least one feature and a class column".into()));
        }
        let labeled = match n {
            _ if n == d + 1 => true,
            _ if n == d => false,
            _ => {
                return Err(parse_err(format!(
                    "expected {d} features plus a class id, found {n} columns"
                )))
            }
        };
        for field in record.iter().take(d) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("cannot parse feature {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite feature {field:?}")));
            }
            rows.features.push(v);
        }
        let label = if labeled {
            let field = &record[d];
            Some(
                field
                    .parse::<usize>()
                    .map_err(|_| parse_err(format!("cannot parse class id {field:?}")))?,
            )
        } else {
            None
        };
        rows.labels.push(label);
    }
    match dim {
        Some(d) if !rows.labels.is_empty() => Ok((d, rows)),
        _ => Err(DataError::Validation(format!("{} has no rows", path.display()))),
    }
}

fn csv_error(path: &Path, row: usize, e: csv::Error) -> DataError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => DataError::Parse {
            path: path.to_path_buf(),
            row,
            message: format!("{other:?}"),
        },
    }
}

/// Loads a source/target pair of headerless feature files.
///
/// Every row is `d` floats followed by an integer class id. The class column
/// is mandatory for the source file and optional (all rows or none) for the
/// target file, where it is kept as hidden evaluation data.
pub fn load_feature_csv(source: &Path, target: &Path) -> Result<PdaDataset, DataError> {
    let (dim, src) = read_rows(source, None)?;
    let source_labels = src
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.ok_or_else(|| DataError::Parse {
                path: source.to_path_buf(),
                row: i + 1,
                message: "source row lacks a class id".into(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let (_, tgt) = read_rows(target, Some(dim))?;
    let labeled = tgt.labels.iter().filter(|l| l.is_some()).count();
    let target_labels = if labeled == 0 {
        None
    } else if labeled == tgt.labels.len() {
        Some(tgt.labels.iter().map(|l| l.expect("all labeled")).collect())
    } else {
        return Err(DataError::Validation(format!(
            "{}: class column present on only {labeled} of {} rows",
            target.display(),
            tgt.labels.len()
        )));
    };
    PdaDataset::new(dim, src.features, source_labels, tgt.features, target_labels)
}

/// Writes rows of `features` followed by class ids (when given) in the
/// format read by [`load_feature_csv`].
pub fn write_feature_csv(
    path: &Path,
    dim: usize,
    features: &[f64],
    labels: Option<&[usize]>,
) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => io(source),
            other => DataError::Validation(format!("{other:?}")),
        })?;
    for (i, row) in features.chunks(dim).enumerate() {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        if let Some(labels) = labels {
            fields.push(labels[i].to_string());
        }
        writer
            .write_record(&fields)
            .map_err(|e| io(std::io::Error::other(e)))?;
    }
    writer.flush().map_err(io)
}
