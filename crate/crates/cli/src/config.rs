use std::path::{Path, PathBuf};

use apda::data::{generate_pda_gaussians, load_feature_csv, PdaDataset, ShiftConfig};
use apda::trainer::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const OUTPUT_DIR_ENV: &str = "APDA_OUTPUT_DIR";

/// Where the samples come from. Serialized as `{"synthetic": {...}}` or
/// `{"csv": {"source": ..., "target": ...}}`, so exactly one is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(ShiftConfig),
    Csv { source: PathBuf, target: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(ShiftConfig::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<PdaDataset, CliError> {
        Ok(match self {
            DatasetSource::Synthetic(cfg) => generate_pda_gaussians(cfg)?,
            DatasetSource::Csv { source, target } => load_feature_csv(source, target)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub histogram_bin_width: f64,
    /// Target class counts for the overlap sweep; empty means `1..N_s`.
    pub sweep_target_classes: Vec<usize>,
    pub sweep_variants: Vec<Variant>,
    /// Training seeds per sweep cell; empty means the train seed only.
    pub sweep_seeds: Vec<u64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            histogram_bin_width: 0.05,
            sweep_target_classes: Vec::new(),
            sweep_variants: Variant::ALL.to_vec(),
            sweep_seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub output_dir: Option<PathBuf>,
    pub report: ReportConfig,
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults) and applies `key=value` overrides.
    /// Relative CSV paths are taken relative to the config file.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if let (Some(base), DatasetSource::Csv { source, target }) =
            (path.and_then(Path::parent), &mut cfg.dataset)
        {
            for p in [source, target] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        self.train.validate()?;
        let w = self.report.histogram_bin_width;
        if !(w > 0.0 && w <= 1.0) {
            return Err(CliError::Validation(format!("histogram_bin_width must lie in (0, 1], got {w}")));
        }
        Ok(())
    }

    /// `explicit`, else the config's `output_dir`, else `$APDA_OUTPUT_DIR`.
    pub fn output_dir(&self, explicit: Option<&Path>) -> Result<PathBuf, CliError> {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                CliError::Validation(format!("no output directory: pass --out, set output_dir or {OUTPUT_DIR_ENV}"))
            })
    }
}

/// Sets `a.b-c=value` in a JSON tree. Dashes in keys become underscores;
/// the value is parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<String> = key.split('.').map(|k| k.replace('-', "_")).collect();
    if parts.iter().any(String::is_empty) {
        return Err(CliError::Validation(format!("override key {key:?} has an empty segment")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(CliError::Validation(format!("override {key:?} descends into a non-object")));
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.clone())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Validation(format!("override {key:?} descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].clone(), parsed);
    Ok(())
}

/// Rewrites `--section.key=value` and `--section.key value` into
/// `--set section.key=value`.
pub fn expand_dotted_flags(args: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let dotted = arg
            .strip_prefix("--")
            .filter(|rest| rest.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(rest) if rest.contains('=') => {
                out.push("--set".into());
                out.push(rest.to_string());
            }
            Some(rest) => {
                let rest = rest.to_string();
                out.push("--set".into());
                out.push(format!("{rest}={}", it.next().unwrap_or_default()));
            }
            None => out.push(arg),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_nested_keys() {
        let mut v = Value::Object(Default::default());
        apply_override(&mut v, "train.lambda-c=0.5").unwrap();
        apply_override(&mut v, "train.variant=dann").unwrap();
        assert_eq!(v["train"]["lambda_c"], 0.5);
        assert_eq!(v["train"]["variant"], "dann");
        assert!(apply_override(&mut v, "train").is_err());
        assert!(apply_override(&mut v, "train.lambda_c.x=1").is_err());
    }

    #[test]
    fn dotted_flags_expand() {
        let args: Vec<String> = ["apda", "train", "--train.lambda-c=0.5", "--dataset.synthetic.seed", "3", "--variant", "crg"]
            .map(String::from)
            .to_vec();
        assert_eq!(
            expand_dotted_flags(args),
            ["apda", "train", "--set", "train.lambda-c=0.5", "--set", "dataset.synthetic.seed=3", "--variant", "crg"]
        );
    }

    #[test]
    fn unknown_and_double_sources_rejected() {
        let bad = ["train.lambda_x=1".to_string()];
        assert!(matches!(ExperimentConfig::resolve(None, &bad), Err(CliError::Validation(_))));
        let both = ["dataset.csv.source=a".to_string(), "dataset.csv.target=b".to_string(), "dataset.synthetic.seed=1".to_string()];
        assert!(matches!(ExperimentConfig::resolve(None, &both), Err(CliError::Validation(_))));
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }
}
