use std::fs;
use std::path::{Path, PathBuf};

use apda::data::{generate_pda_gaussians, write_feature_csv, PdaDataset, ShiftConfig};
use apda::networks::ParamSet;
use apda::trainer::{evaluate_target, full_pass, MetricsLog, Trainer, Variant};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{expand_dotted_flags, DatasetSource, ExperimentConfig};
use crate::report::{self, CommonnessSnapshot};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "apda", version, about = "Associative partial domain adaptation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset as source.csv, target.csv and manifest.json.
    Generate(GenerateArgs),
    /// Train one variant and write checkpoint, metrics and commonness snapshot.
    Train(TrainArgs),
    /// Score a checkpoint on the target split.
    Eval(EvalArgs),
    /// Export error curves, commonness histograms, overlap sweeps and features.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override such as `train.lambda_c=0.5`; also accepted as `--train.lambda-c=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Regenerate from an earlier manifest instead of the config.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Parent directory; files go to `<out>/<variant>/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source CSV; with `--target` replaces the config's dataset.
    #[arg(long, requires = "target")]
    pub source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    pub target: Option<PathBuf>,
    /// Report path; defaults to `eval.json` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// metrics.csv or metrics.json files, one error curve each.
    #[arg(long, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    /// commonness_snapshot.json files, one histogram each.
    #[arg(long, num_args = 1..)]
    pub snapshot: Vec<PathBuf>,
    /// Retrain every variant over a range of target class counts.
    #[arg(long)]
    pub sweep: bool,
    /// Export `G(F(x))` for both splits using this checkpoint.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run(args: Vec<String>) -> u8 {
    let cli = match Cli::try_parse_from(expand_dotted_flags(args)) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

/// Everything needed to regenerate a dataset, plus digests to check it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: ShiftConfig,
    pub seed: u64,
    pub files: Vec<FileDigest>,
}

fn flatten(rows: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    rows.flatten().collect()
}

/// Writes `source.csv`, `target.csv` (hidden labels in the last column) and
/// `manifest.json` into `out`.
pub fn generate_dataset(shift: &ShiftConfig, out: &Path) -> Result<Manifest, CliError> {
    let ds = generate_pda_gaussians(shift)?;
    create_dir(out)?;
    let eval = ds.evaluation().expect("synthetic targets are labeled");
    let src = flatten((0..ds.num_source()).map(|i| ds.source_row(i).to_vec()));
    let tgt = flatten((0..ds.num_target()).map(|i| ds.target_row(i).to_vec()));
    let mut files = Vec::new();
    for (name, data, labels) in [
        ("source.csv", &src, ds.source_labels()),
        ("target.csv", &tgt, eval.target_labels()),
    ] {
        let path = out.join(name);
        write_feature_csv(&path, ds.dim(), data, Some(labels))?;
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        files.push(FileDigest {
            file: name.into(),
            rows: labels.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        dataset: shift.clone(),
        seed: shift.seed,
        files,
    };
    write_file(&out.join("manifest.json"), to_json(&manifest))?;
    Ok(manifest)
}

fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    let (shift, out) = match &a.manifest {
        Some(m) => {
            let manifest: Manifest = read_json(m)?;
            let cfg = ExperimentConfig::resolve(None, &a.common.overrides)?;
            (manifest.dataset, cfg.output_dir(a.out.as_deref())?)
        }
        None => {
            let cfg = ExperimentConfig::resolve(a.common.config.as_deref(), &a.common.overrides)?;
            let DatasetSource::Synthetic(shift) = &cfg.dataset else {
                return Err(CliError::Validation("generate needs a synthetic dataset section".into()));
            };
            (shift.clone(), cfg.output_dir(a.out.as_deref())?)
        }
    };
    let manifest = generate_dataset(&shift, &out)?;
    for f in &manifest.files {
        println!("{} {} rows sha256 {}", out.join(&f.file).display(), f.rows, f.sha256);
    }
    Ok(())
}

/// Files written by one training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub dir: PathBuf,
    pub log: MetricsLog,
}

/// Trains `cfg.train.variant` into `<out>/<variant>/`. Metrics are written
/// even when training aborts, so a diverged run leaves its history behind.
pub fn train_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<TrainRun, CliError> {
    let ds = cfg.dataset.load()?;
    let dir = out.join(cfg.train.variant.name());
    create_dir(&dir)?;
    write_file(&dir.join("config.json"), to_json(cfg))?;

    let mut trainer = Trainer::new(cfg.train.clone(), &ds)?;
    let steps_per_epoch = trainer.steps_per_epoch();
    let mut outcome = Ok(());
    while !trainer.is_done() {
        match trainer.step() {
            Ok(rec) if (rec.step + 1) % steps_per_epoch == 0 => {
                if let Some(e) = trainer.log().epochs.last() {
                    log::info!("{} epoch {} target accuracy {:?}", cfg.train.variant, e.epoch, e.target_accuracy);
                }
            }
            Ok(_) => {}
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    let log = trainer.log().clone();
    let io = |e: apda::trainer::TrainError| CliError::Runtime(e.to_string());
    log.save_csv(&dir.join("metrics.csv")).map_err(io)?;
    log.save_json(&dir.join("metrics.json")).map_err(io)?;
    outcome?;

    trainer.params().save(&dir.join("checkpoint.json"))?;
    let pass = full_pass(trainer.params(), &ds, &cfg.train)?;
    let snapshot = CommonnessSnapshot {
        variant: cfg.train.variant,
        state: trainer.state().clone(),
        source_commonness: pass.source_commonness.w,
        source_labels: ds.source_labels().to_vec(),
        common_classes: ds.evaluation().map(|e| e.target_classes().iter().copied().collect()),
    };
    write_file(&dir.join("commonness_snapshot.json"), to_json(&snapshot))?;
    Ok(TrainRun { dir, log })
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut overrides = a.common.overrides.clone();
    if let Some(v) = a.variant {
        overrides.push(format!("train.variant={v}"));
    }
    let cfg = ExperimentConfig::resolve(a.common.config.as_deref(), &overrides)?;
    let run = train_experiment(&cfg, &cfg.output_dir(a.out.as_deref())?)?;
    match run.log.final_accuracy() {
        Some(acc) => println!("{}: target accuracy {acc:.4}, wrote {}", cfg.train.variant, run.dir.display()),
        None => println!("{}: wrote {}", cfg.train.variant, run.dir.display()),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub num_samples: usize,
    pub per_class: Vec<ClassAccuracy>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet, CliError> {
    if !path.exists() {
        return Err(CliError::io(path, "no such file"));
    }
    Ok(ParamSet::load(path)?)
}

fn check_compatible(params: &ParamSet, ds: &PdaDataset) -> Result<(), CliError> {
    if params.input_dim() != ds.dim() {
        return Err(CliError::Validation(format!(
            "checkpoint expects {}-dimensional inputs, dataset has {}",
            params.input_dim(),
            ds.dim()
        )));
    }
    if let Some(&max) = ds.source_classes().last() {
        if max >= params.num_classes() {
            return Err(CliError::Validation(format!(
                "dataset has class {max}, checkpoint predicts {} classes",
                params.num_classes()
            )));
        }
    }
    Ok(())
}

pub fn evaluate_checkpoint(params: &ParamSet, ds: &PdaDataset) -> Result<EvalReport, CliError> {
    check_compatible(params, ds)?;
    let eval = evaluate_target(params, ds)?
        .ok_or_else(|| CliError::Validation("target split has no labels to evaluate against".into()))?;
    Ok(EvalReport {
        accuracy: eval.accuracy,
        num_samples: eval.num_samples,
        per_class: eval
            .per_class
            .iter()
            .map(|&(class, correct, total)| ClassAccuracy {
                class,
                correct,
                total,
                accuracy: correct as f64 / total as f64,
            })
            .collect(),
        confusion: eval.confusion,
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::resolve(a.common.config.as_deref(), &a.common.overrides)?;
    if let (Some(source), Some(target)) = (&a.source, &a.target) {
        cfg.dataset = DatasetSource::Csv {
            source: source.clone(),
            target: target.clone(),
        };
    }
    let params = load_checkpoint(&a.checkpoint)?;
    let ds = cfg.dataset.load()?;
    let report = evaluate_checkpoint(&params, &ds)?;
    let text = to_json(&report);
    let out = a.out.clone().unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("eval.json")
    });
    write_file(&out, &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    if a.metrics.is_empty() && a.snapshot.is_empty() && !a.sweep && a.features.is_none() {
        return Err(CliError::Validation(
            "nothing to report: pass --metrics, --snapshot, --sweep or --features".into(),
        ));
    }
    let cfg = ExperimentConfig::resolve(a.common.config.as_deref(), &a.common.overrides)?;
    let out = cfg.output_dir(a.out.as_deref())?;
    create_dir(&out)?;
    let mut written = Vec::new();

    if !a.metrics.is_empty() {
        let curves = report::error_curves(&a.metrics)?;
        let path = out.join("error_curves.csv");
        report::write_csv(&path, &curves)?;
        written.push(path);
    }
    if !a.snapshot.is_empty() {
        let mut rows = Vec::new();
        for (label, path) in report::labels(&a.snapshot).into_iter().zip(&a.snapshot) {
            let snap: CommonnessSnapshot = read_json(path)?;
            rows.extend(report::commonness_histogram(&label, &snap, cfg.report.histogram_bin_width)?);
        }
        let path = out.join("commonness_histogram.csv");
        report::write_csv(&path, &rows)?;
        written.push(path);
    }
    if a.sweep {
        let (runs, table) = report::run_sweep(&cfg)?;
        let runs_path = out.join("sweep_runs.csv");
        report::write_csv(&runs_path, &runs)?;
        let table_path = out.join("sweep.csv");
        report::write_csv(&table_path, &table)?;
        written.extend([runs_path, table_path]);
    }
    if let Some(ck) = &a.features {
        let params = load_checkpoint(ck)?;
        let ds = cfg.dataset.load()?;
        check_compatible(&params, &ds)?;
        let path = out.join("features.csv");
        report::export_features(&params, &ds, &cfg.train, &path)?;
        written.push(path);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
