//! `rankbench`: evaluation toolkit for drug-blind drug-response prediction.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rankbench_core::error::{Error, ErrorClass};

mod commands;
mod config;
mod manifest;

#[derive(Parser)]
#[command(
    name = "rankbench",
    version,
    about = "Statistical evaluation toolkit for drug-blind drug-response prediction",
    long_about = "Metric decomposition (global vs. per-drug Pearson r), ridge reference \
                  models, MoA-stratified protocols, K-shot response-profile matching, a \
                  checkpoint-selection leakage audit, and a synthetic-data generator."
)]
struct Cli {
    /// Worker threads (default: available parallelism; env RANKBENCH_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON config file with per-subcommand defaults; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted structure.
    Synth(SynthArgs),
    /// Cross-validated ridge evaluation (global and per-drug r).
    Eval(EvalArgs),
    /// Covariance decomposition of global r for a prediction table.
    Decompose(DecomposeArgs),
    /// K-shot response-profile matching curve.
    Kshot(KshotArgs),
    /// MoA-stratified experiments: one-hot, weighted, within-class.
    Moa(MoaArgs),
    /// Checkpoint-selection leakage audit on a toy iterative learner.
    Leakage(LeakageArgs),
    /// Mutation-stratified sensitivity test for one drug.
    Biomarker(BiomarkerArgs),
    /// Replicate or profile concordance ceilings.
    Concordance(ConcordanceArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// dominance | two-cluster | no-analog | noisy-leakage
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for response.csv, cell_features.csv, moa.csv,
    /// ground_truth.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the preset's drug count.
    #[arg(long)]
    drugs: Option<usize>,
    /// Override the preset's cell count.
    #[arg(long)]
    cells: Option<usize>,
    /// Override the preset's noise sd.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
pub struct ResponseInputArgs {
    /// Response CSV (long format).
    #[arg(long)]
    responses: Option<PathBuf>,
    /// Column holding the drug id.
    #[arg(long, default_value = None)]
    col_drug: Option<String>,
    /// Column holding the cell id.
    #[arg(long, default_value = None)]
    col_cell: Option<String>,
    /// Column holding the response value.
    #[arg(long, default_value = None)]
    col_value: Option<String>,
    /// lnIC50 | AUC
    #[arg(long)]
    units: Option<String>,
}

#[derive(Args)]
pub struct PipelineArgs {
    /// Ridge penalty.
    #[arg(long)]
    alpha: Option<f64>,
    /// PCA dims for features prefixed `rna`.
    #[arg(long)]
    pca_rna: Option<usize>,
    /// PCA dims for features prefixed `mut`.
    #[arg(long)]
    pca_mut: Option<usize>,
    /// PCA dims applied to all (remaining) cell features.
    #[arg(long)]
    pca_all: Option<usize>,
    /// Per-drug evaluation needs at least this many cells.
    #[arg(long)]
    min_obs: Option<usize>,
    /// zero | skip: scoring for drugs with constant predictions.
    #[arg(long)]
    zero_variance_policy: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    input: ResponseInputArgs,
    /// Cell feature CSV (wide format).
    #[arg(long)]
    cell_features: Option<PathBuf>,
    /// none | <path> | moa-onehot | random:<dim>:<seed>
    #[arg(long)]
    drug_features: Option<String>,
    /// drug-blind | cell-blind | scaffold | mixed
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// raw | zscore
    #[arg(long)]
    targets: Option<String>,
    /// MoA CSV (drug_id,moa_class), for one-hot or weighted runs.
    #[arg(long)]
    moa: Option<PathBuf>,
    /// Scaffold CSV (drug_id,scaffold_id), for the scaffold scheme.
    #[arg(long)]
    scaffold: Option<PathBuf>,
    /// Fixed same-MoA training weight for --moa-class.
    #[arg(long)]
    moa_weight: Option<f64>,
    /// Grid for inner-CV weight selection, e.g. 1,2,5,10,20.
    #[arg(long)]
    moa_weight_grid: Option<String>,
    /// Target class for MoA weighting.
    #[arg(long)]
    moa_class: Option<String>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Plot table: per-drug r rows.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct DecomposeArgs {
    /// Truth response CSV.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Prediction CSV (drug_id,cell_id,value), or `drug-mean` / `cell-mean`
    /// to decompose a reference predictor of the truth table.
    #[arg(long)]
    pred: Option<String>,
    #[arg(long)]
    col_drug: Option<String>,
    #[arg(long)]
    col_cell: Option<String>,
    #[arg(long)]
    col_value: Option<String>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
pub struct KshotArgs {
    /// Training response CSV.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test response CSV.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Comma-separated K values, e.g. 0,1,3,5,10,20,50.
    #[arg(long)]
    k_list: Option<String>,
    /// Top-N matched drugs.
    #[arg(long)]
    n: Option<usize>,
    /// Blend-weight grid `start:end:step`, e.g. 0:1:0.1.
    #[arg(long)]
    grid: Option<String>,
    /// Observed-cell subsets sampled per (drug, K).
    #[arg(long)]
    trials: Option<usize>,
    /// Inner trials per training drug during weight selection.
    #[arg(long)]
    inner_trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    min_obs: Option<usize>,
    #[arg(long)]
    min_overlap: Option<usize>,
    /// `permuted` adds the permuted-pairing control point.
    #[arg(long)]
    control: Option<String>,
    /// K at which the control runs (default: largest K in the list).
    #[arg(long)]
    control_k: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Plot table: per-K curve rows.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct MoaArgs {
    #[command(flatten)]
    input: ResponseInputArgs,
    #[arg(long)]
    cell_features: Option<PathBuf>,
    /// MoA CSV (drug_id,moa_class).
    #[arg(long)]
    moa: Option<PathBuf>,
    /// onehot | weighted | within
    #[arg(long)]
    mode: Option<String>,
    /// Target MoA class (weighted and within modes).
    #[arg(long)]
    class: Option<String>,
    /// Shuffle drug->class labels with this seed before running
    /// (class sizes preserved).
    #[arg(long)]
    permute_seed: Option<u64>,
    /// Weight grid for the weighted mode, e.g. 1,2,5,10,20.
    #[arg(long)]
    weight_grid: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct LeakageArgs {
    /// Response CSV; omit to audit the noisy-leakage synthetic preset.
    #[arg(long)]
    responses: Option<PathBuf>,
    /// Cell feature CSV; required with --responses.
    #[arg(long)]
    cell_features: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Noise sd override for the synthetic preset.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Fraction of training drugs held out for fair epoch selection.
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    min_obs: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct BiomarkerArgs {
    #[arg(long)]
    responses: Option<PathBuf>,
    /// Mutation status CSV: header `cell_id,mutant` with 0/1 values.
    #[arg(long)]
    mutations: Option<PathBuf>,
    /// Drug to stratify.
    #[arg(long)]
    drug: Option<String>,
    /// less | greater | two-sided (mutant vs. wild-type; default less).
    #[arg(long)]
    alternative: Option<String>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
pub struct ConcordanceArgs {
    /// replicate | profile
    #[arg(long)]
    mode: Option<String>,
    /// Replicate mode: first assay CSV.
    #[arg(long)]
    table_a: Option<PathBuf>,
    /// Replicate mode: second assay CSV.
    #[arg(long)]
    table_b: Option<PathBuf>,
    /// Replicate mode: comma-separated anchor drug ids.
    #[arg(long)]
    anchors: Option<String>,
    /// Profile mode: response CSV.
    #[arg(long)]
    responses: Option<PathBuf>,
    /// Profile mode: MoA CSV.
    #[arg(long)]
    moa: Option<PathBuf>,
    /// Profile mode: class label.
    #[arg(long)]
    class: Option<String>,
    #[arg(long)]
    min_obs: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn install_thread_pool(threads: Option<usize>) -> Result<(), Error> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("RANKBENCH_THREADS") {
            Ok(text) => Some(text.parse::<usize>().map_err(|_| {
                Error::usage(format!("RANKBENCH_THREADS must be an integer, got `{text}`"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors.
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };

    let run = || -> Result<(), Error> {
        install_thread_pool(cli.threads)?;
        let config = config::ConfigFile::load(cli.config.as_deref())?;
        match &cli.command {
            Command::Synth(args) => commands::synth(args, &config),
            Command::Eval(args) => commands::eval(args, &config),
            Command::Decompose(args) => commands::decompose(args, &config),
            Command::Kshot(args) => commands::kshot(args, &config),
            Command::Moa(args) => commands::moa(args, &config),
            Command::Leakage(args) => commands::leakage(args, &config),
            Command::Biomarker(args) => commands::biomarker(args, &config),
            Command::Concordance(args) => commands::concordance(args, &config),
        }
    };

    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            match error.class() {
                ErrorClass::Usage => ExitCode::from(1),
                ErrorClass::Data => ExitCode::from(2),
                ErrorClass::Numerical => ExitCode::from(3),
            }
        }
    }
}
