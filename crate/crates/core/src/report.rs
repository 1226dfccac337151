//! Trial grids, summaries and the CSV/JSON artifacts they produce.
//!
//! Every file written here is a pure function of the configuration and
//! seeds. Wall-clock timings go to `timings.json`, which is the one
//! exception.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{cifar10_splits, mnist_splits, synthetic_images, split, SplitPlan, Splits};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::nn::{evaluate, train, Architecture, EpochRecord, Evaluation, Model, ModelSpec, TrainConfig};
use crate::svm::{sweep, SweepRow, TwoClassSet};

pub const TRIALS_HEADER: [&str; 7] = [
    "model",
    "loss",
    "seed",
    "best_epoch",
    "initial_val_error",
    "best_val_error",
    "test_error",
];
pub const CURVES_HEADER: [&str; 6] = ["model", "loss", "seed", "epoch", "train_loss", "val_error"];
pub const SUMMARY_HEADER: [&str; 6] = ["model", "loss", "completed", "failed", "test_mean", "test_std"];
pub const GENERALIZATION_HEADER: [&str; 7] = [
    "model", "loss", "val_mean", "val_std", "test_mean", "test_std", "gap",
];
pub const SWEEP_HEADER: [&str; 6] = ["delta", "test_error", "geom_margin", "mean_margin", "variance", "nmv"];
pub const HISTOGRAM_HEADER: [&str; 4] = ["bin_lo", "bin_hi", "positive", "negative"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    Cifar10,
    /// Generated 28×28 images, for dry runs without downloads.
    Synthetic,
}

impl DatasetId {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "cifar10" | "cifar-10" | "cifar" => Ok(DatasetId::Cifar10),
            "synthetic" => Ok(DatasetId::Synthetic),
            "smallnorb" | "norb" => Err(Error::InvalidArgument(
                "smallNORB ingestion is not supported".into(),
            )),
            _ => Err(Error::InvalidArgument(format!("unknown dataset {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    pub models: Vec<Architecture>,
    pub losses: Vec<LossKind>,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seed of the train/validation split, shared by all trials.
    pub split_seed: u64,
    pub data_dir: PathBuf,
    /// Truncate the training split to its first `n` examples.
    pub train_limit: Option<usize>,
}

impl ExperimentConfig {
    /// Paired-seed MNIST defaults: seeds `0..trials`, batch 500, lr 0.001.
    pub fn new(dataset: DatasetId, trials: usize) -> Self {
        ExperimentConfig {
            dataset,
            models: vec![Architecture::Fc128x32],
            losses: vec![LossKind::SoftmaxCe, LossKind::Halfway],
            trials,
            seeds: (0..trials as u64).collect(),
            epochs: 50,
            batch_size: 500,
            lr: 0.001,
            split_seed: 0,
            data_dir: PathBuf::from("data"),
            train_limit: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials != self.seeds.len() {
            return Err(Error::InvalidArgument(format!(
                "{} trials but {} seeds",
                self.trials,
                self.seeds.len()
            )));
        }
        if self.trials == 0 || self.models.is_empty() || self.losses.is_empty() {
            return Err(Error::InvalidArgument(
                "need at least one trial, model and loss".into(),
            ));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn data_subdir(&self) -> PathBuf {
        self.data_dir.join(self.dataset.name())
    }

    pub fn train_config(&self, loss: LossKind, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(loss, seed);
        cfg.adam.lr = self.lr;
        cfg.batch_size = self.batch_size;
        cfg.epochs = self.epochs;
        cfg
    }
}

/// Loads the configured dataset and its train/validation/test splits.
pub fn load_splits(config: &ExperimentConfig) -> Result<Splits> {
    let mut splits = match config.dataset {
        DatasetId::Mnist => mnist_splits(config.data_subdir(), config.split_seed)?,
        DatasetId::Cifar10 => cifar10_splits(config.data_subdir(), config.split_seed)?,
        DatasetId::Synthetic => {
            let all = synthetic_images(1200, [28, 28, 1], 10, 0.8, config.split_seed)?;
            let (rest, test) = split(
                &all,
                SplitPlan {
                    seed: config.split_seed,
                    validation: 200,
                },
            )?;
            let (train, validation) = split(
                &rest,
                SplitPlan {
                    seed: config.split_seed.wrapping_add(1),
                    validation: 200,
                },
            )?;
            let mut test = test;
            test.split = crate::data::SplitTag::Test;
            Splits {
                train,
                validation,
                test,
            }
        }
    };
    if let Some(n) = config.train_limit {
        splits.train = splits.train.head(n);
    }
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub model: Architecture,
    pub loss: LossKind,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub initial_val_error: f64,
    pub best_epoch: usize,
    pub best_val_error: f64,
    pub test_error: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub model: Architecture,
    pub loss: LossKind,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub config: ExperimentConfig,
    pub records: Vec<TrialRecord>,
    pub failures: Vec<TrialFailure>,
    /// Best-snapshot models, aligned with `records`.
    pub models: Vec<Model>,
}

impl GridReport {
    pub fn all_completed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn record(&self, model: Architecture, loss: LossKind, seed: u64) -> Option<(&TrialRecord, &Model)> {
        self.records
            .iter()
            .zip(&self.models)
            .find(|(r, _)| r.model == model && r.loss == loss && r.seed == seed)
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        summarize(&self.config, &self.records, &self.failures)
    }

    pub fn generalization(&self) -> Vec<GeneralizationRow> {
        generalization_report(&self.records)
    }
}

/// Runs every (model, seed, loss) cell in parallel. Losses sharing a seed
/// start from identical parameters. Failed trials are collected, not fatal.
pub fn run_grid(config: &ExperimentConfig, splits: &Splits) -> Result<GridReport> {
    config.validate()?;
    let mut cells = Vec::new();
    for &model in &config.models {
        for &seed in &config.seeds {
            for &loss in &config.losses {
                cells.push((model, seed, loss));
            }
        }
    }
    let outcomes: Vec<std::result::Result<(TrialRecord, Model), TrialFailure>> = cells
        .par_iter()
        .map(|&(model, seed, loss)| {
            let started = Instant::now();
            let run = ModelSpec::for_dataset(model, &splits.train)
                .and_then(|spec| train(&spec, &config.train_config(loss, seed), splits));
            match run {
                Ok(r) => Ok((
                    TrialRecord {
                        model,
                        loss,
                        seed,
                        epochs: r.epochs,
                        initial_val_error: r.initial_val_error,
                        best_epoch: r.best_epoch,
                        best_val_error: r.best_val_error,
                        test_error: r.test_error,
                        wall_seconds: started.elapsed().as_secs_f64(),
                    },
                    r.best_model,
                )),
                Err(e) => Err(TrialFailure {
                    model,
                    loss,
                    seed,
                    error: e.to_string(),
                }),
            }
        })
        .collect();
    let mut report = GridReport {
        config: config.clone(),
        records: Vec::new(),
        failures: Vec::new(),
        models: Vec::new(),
    };
    for o in outcomes {
        match o {
            Ok((r, m)) => {
                report.records.push(r);
                report.models.push(m);
            }
            Err(f) => report.failures.push(f),
        }
    }
    Ok(report)
}

/// Mean and sample (n−1) standard deviation; the deviation of a single
/// value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: Architecture,
    pub loss: LossKind,
    pub completed: usize,
    pub failed: usize,
    pub test_mean: f64,
    pub test_std: f64,
}

/// One row per (model, loss) of the config, from completed trials only.
pub fn summarize(config: &ExperimentConfig, records: &[TrialRecord], failures: &[TrialFailure]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &model in &config.models {
        for &loss in &config.losses {
            let tests: Vec<f64> = records
                .iter()
                .filter(|r| r.model == model && r.loss == loss)
                .map(|r| r.test_error)
                .collect();
            let failed = failures
                .iter()
                .filter(|f| f.model == model && f.loss == loss)
                .count();
            let (test_mean, test_std) = mean_std(&tests);
            rows.push(SummaryRow {
                model,
                loss,
                completed: tests.len(),
                failed,
                test_mean,
                test_std,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationRow {
    pub model: Architecture,
    pub loss: LossKind,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    /// `test_mean − val_mean`.
    pub gap: f64,
}

/// Validation (of the selected snapshot) against test error per
/// (model, loss), in order of first appearance.
pub fn generalization_report(records: &[TrialRecord]) -> Vec<GeneralizationRow> {
    let mut keys: Vec<(Architecture, LossKind)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.model, r.loss)) {
            keys.push((r.model, r.loss));
        }
    }
    keys.into_iter()
        .map(|(model, loss)| {
            let sel: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.model == model && r.loss == loss)
                .collect();
            let vals: Vec<f64> = sel.iter().map(|r| r.best_val_error).collect();
            let tests: Vec<f64> = sel.iter().map(|r| r.test_error).collect();
            let (val_mean, val_std) = mean_std(&vals);
            let (test_mean, test_std) = mean_std(&tests);
            GeneralizationRow {
                model,
                loss,
                val_mean,
                val_std,
                test_mean,
                test_std,
                gap: test_mean - val_mean,
            }
        })
        .collect()
}

/// Positive-label and negative-label counts of one output over shared bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl Histogram {
    pub fn from_sides(positive: &[f64], negative: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidArgument("need at least one bin".into()));
        }
        let all = positive.iter().chain(negative);
        let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument("no finite values to bin".into()));
        }
        if hi == lo {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let count = |vs: &[f64]| {
            let mut c = vec![0usize; bins];
            for &v in vs {
                let b = (((v - lo) / width) as usize).min(bins - 1);
                c[b] += 1;
            }
            c
        };
        Ok(Histogram {
            positive: count(positive),
            negative: count(negative),
            edges,
        })
    }

    pub fn bins(&self) -> usize {
        self.positive.len()
    }
}

/// Histograms of raw output `k` over `dataset`, split by label.
pub fn margin_histograms(eval: &Evaluation, k: usize, bins: usize) -> Result<Histogram> {
    let (pos, neg) = eval.output_split(k)?;
    Histogram::from_sides(&pos, &neg, bins)
}

pub fn emit_margin_histograms(
    model: &Model,
    dataset: &crate::data::Dataset,
    k: usize,
    bins: usize,
    path: &Path,
) -> Result<Histogram> {
    let eval = evaluate(model, dataset)?;
    let h = margin_histograms(&eval, k, bins)?;
    write_histogram(&h, path)?;
    Ok(h)
}

/// `{}` formatting: shortest round-trip representation.
fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let e = std::io::Error::other(e.to_string());
    Error::io(path, e)
}

fn write_rows<const N: usize>(path: &Path, header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_histogram(h: &Histogram, path: &Path) -> Result<()> {
    write_rows(
        path,
        HISTOGRAM_HEADER,
        (0..h.bins()).map(|i| {
            [
                num(h.edges[i]),
                num(h.edges[i + 1]),
                h.positive[i].to_string(),
                h.negative[i].to_string(),
            ]
        }),
    )
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    write_rows(
        path,
        SUMMARY_HEADER,
        rows.iter().map(|r| {
            [
                r.model.name().to_string(),
                r.loss.name().to_string(),
                r.completed.to_string(),
                r.failed.to_string(),
                num(r.test_mean),
                num(r.test_std),
            ]
        }),
    )
}

pub fn write_generalization(rows: &[GeneralizationRow], path: &Path) -> Result<()> {
    write_rows(
        path,
        GENERALIZATION_HEADER,
        rows.iter().map(|r| {
            [
                r.model.name().to_string(),
                r.loss.name().to_string(),
                num(r.val_mean),
                num(r.val_std),
                num(r.test_mean),
                num(r.test_std),
                num(r.gap),
            ]
        }),
    )
}

pub fn write_trials(records: &[TrialRecord], path: &Path) -> Result<()> {
    write_rows(
        path,
        TRIALS_HEADER,
        records.iter().map(|r| {
            [
                r.model.name().to_string(),
                r.loss.name().to_string(),
                r.seed.to_string(),
                r.best_epoch.to_string(),
                num(r.initial_val_error),
                num(r.best_val_error),
                num(r.test_error),
            ]
        }),
    )
}

pub fn write_curves(records: &[TrialRecord], path: &Path) -> Result<()> {
    write_rows(
        path,
        CURVES_HEADER,
        records.iter().flat_map(|r| {
            r.epochs.iter().map(move |e| {
                [
                    r.model.name().to_string(),
                    r.loss.name().to_string(),
                    r.seed.to_string(),
                    e.epoch.to_string(),
                    num(e.train_loss),
                    num(e.val_error),
                ]
            })
        }),
    )
}

pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    write_rows(
        path,
        SWEEP_HEADER,
        rows.iter().map(|r| {
            [
                num(r.delta),
                opt(r.test_error),
                opt(r.geom_margin),
                opt(r.mean_margin),
                opt(r.variance),
                opt(r.nmv),
            ]
        }),
    )
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    library: &'static str,
    version: &'static str,
    config: &'a C,
    files: Vec<&'static str>,
}

#[derive(Debug, Serialize)]
struct Timing {
    model: Architecture,
    loss: LossKind,
    seed: u64,
    wall_seconds: f64,
}

/// Writes `trials.csv`, `curves.csv`, `summary.csv`, `generalization.csv`,
/// `failures.json`, `manifest.json` and `timings.json` into `out`.
pub fn write_grid(report: &GridReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_trials(&report.records, &out.join("trials.csv"))?;
    write_curves(&report.records, &out.join("curves.csv"))?;
    write_summary(&report.summary(), &out.join("summary.csv"))?;
    write_generalization(&report.generalization(), &out.join("generalization.csv"))?;
    write_json(&report.failures, &out.join("failures.json"))?;
    write_json(
        &Manifest {
            library: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            config: &report.config,
            files: vec![
                "trials.csv",
                "curves.csv",
                "summary.csv",
                "generalization.csv",
                "failures.json",
            ],
        },
        &out.join("manifest.json"),
    )?;
    let timings: Vec<Timing> = report
        .records
        .iter()
        .map(|r| Timing {
            model: r.model,
            loss: r.loss,
            seed: r.seed,
            wall_seconds: r.wall_seconds,
        })
        .collect();
    write_json(&timings, &out.join("timings.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub deltas: Vec<f64>,
    pub c: f64,
    pub mixture: crate::svm::MixtureConfig,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            deltas: crate::svm::default_delta_grid(),
            c: crate::svm::DEFAULT_C,
            mixture: crate::svm::MixtureConfig::default(),
            n_train: 200,
            n_test: 1000,
        }
    }
}

/// Runs the δ-sweep on the synthetic mixtures and writes `sweep.csv` and
/// `sweep_manifest.json` into `out`.
pub fn run_svm_sweep(config: &SweepConfig, out: &Path) -> Result<Vec<SweepRow>> {
    let (train, test): (TwoClassSet, TwoClassSet) =
        crate::svm::gaussian_mixtures(&config.mixture, config.n_train, config.n_test)?;
    let rows = sweep(&config.deltas, &train, &test, config.c)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_sweep(&rows, &out.join("sweep.csv"))?;
    write_json(
        &Manifest {
            library: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            config,
            files: vec!["sweep.csv"],
        },
        &out.join("sweep_manifest.json"),
    )?;
    Ok(rows)
}
