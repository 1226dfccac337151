use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use marginlab::losses::LossKind;
use marginlab::nn::Architecture;
use marginlab::report::{
    emit_margin_histograms, load_splits, run_grid, run_svm_sweep, write_grid, DatasetId, ExperimentConfig,
    SweepConfig,
};
use marginlab::svm::{log_grid, sweep_shape};

#[derive(Parser)]
#[command(name = "marginlab", version, about = "Halfway vs softmax trial grids and RBF-SVM margin sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (model, loss, seed) cell and write CSV summaries.
    Grid(GridArgs),
    /// Sweep δ of the RBF feature map on synthetic two-class data.
    SvmSweep(SweepArgs),
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value = "mnist")]
    dataset: String,
    /// Comma-separated: FC-128-32, FC-500-500-2000, CNN-MNIST-NORB, CNN-CIFAR.
    #[arg(long, value_delimiter = ',', default_value = "FC-128-32")]
    model: Vec<String>,
    /// Comma-separated: softmax, halfway, mse.
    #[arg(long, value_delimiter = ',', default_value = "softmax,halfway")]
    loss: Vec<String>,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Comma-separated seeds; defaults to 0..trials.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 500)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Use only the first N training examples.
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long, env = "MARGINLAB_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Also write per-output train-split histograms with this many bins.
    #[arg(long)]
    histograms: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// Explicit comma-separated δ values.
    #[arg(long, value_delimiter = ',', conflicts_with = "log_grid")]
    delta_grid: Option<Vec<f64>>,
    /// `lo,hi,n` for a log-spaced grid.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    log_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100.0)]
    c: f64,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn grid(args: GridArgs) -> Result<bool> {
    let dataset = DatasetId::parse(&args.dataset)?;
    let mut config = ExperimentConfig::new(dataset, args.trials);
    config.models = args
        .model
        .iter()
        .map(|m| Architecture::parse(m))
        .collect::<marginlab::Result<_>>()?;
    config.losses = args
        .loss
        .iter()
        .map(|l| LossKind::parse(l))
        .collect::<marginlab::Result<_>>()?;
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    config.epochs = args.epochs;
    config.batch_size = args.batch_size;
    config.lr = args.lr;
    config.split_seed = args.split_seed;
    config.train_limit = args.train_limit;
    config.data_dir = args.data_dir;
    config.validate()?;

    let splits = load_splits(&config)
        .with_context(|| format!("loading {} from {}", dataset.name(), config.data_subdir().display()))?;
    eprintln!(
        "{}: {} train / {} validation / {} test",
        dataset.name(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );
    let report = run_grid(&config, &splits)?;
    write_grid(&report, &args.out)?;
    for f in &report.failures {
        eprintln!("warning: {} {} seed {} failed: {}", f.model, f.loss.name(), f.seed, f.error);
    }
    for row in report.summary() {
        println!(
            "{:<16} {:<8} {}/{} completed  test error {:.4} ± {:.4}",
            row.model.name(),
            row.loss.name(),
            row.completed,
            row.completed + row.failed,
            row.test_mean,
            row.test_std
        );
    }
    if let Some(bins) = args.histograms {
        let dir = args.out.join("histograms");
        for (rec, model) in report.records.iter().zip(&report.models) {
            for k in 0..splits.train.classes {
                let name = format!("{}_{}_seed{}_out{}.csv", rec.model.name(), rec.loss.name(), rec.seed, k);
                emit_margin_histograms(model, &splits.train, k, bins, &dir.join(name))?;
            }
        }
    }
    Ok(report.all_completed())
}

fn svm_sweep(args: SweepArgs) -> Result<bool> {
    let mut config = SweepConfig {
        c: args.c,
        n_train: args.n_train,
        n_test: args.n_test,
        ..SweepConfig::default()
    };
    config.mixture.seed = args.seed;
    if let Some(deltas) = args.delta_grid {
        config.deltas = deltas;
    } else if let Some(g) = args.log_grid {
        if g[2] < 1.0 || g[2].fract() != 0.0 {
            bail!("grid size must be a positive integer");
        }
        config.deltas = log_grid(g[0], g[1], g[2] as usize)?;
    }
    let rows = run_svm_sweep(&config, &args.out)?;
    for r in &rows {
        let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4e}"));
        println!(
            "δ={:<10.4e} test={} margin={} mean={} var={} nmv={}",
            r.delta,
            show(r.test_error),
            show(r.geom_margin),
            show(r.mean_margin),
            show(r.variance),
            show(r.nmv)
        );
    }
    if let Some(shape) = sweep_shape(&rows) {
        println!(
            "min error at δ={:.4e}, min NMV at δ={:.4e}, max margin at δ={:.4e}",
            shape.delta_min_error, shape.delta_min_nmv, shape.delta_max_margin
        );
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Grid(a) => grid(a),
        Command::SvmSweep(a) => svm_sweep(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
