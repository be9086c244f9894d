//! Subcommand implementations: resolve parameters, load inputs, run the
//! core pipelines, write reports and plot tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use rankbench_core::dataio::{
    self, align, AlignedDataset, EntityKind, ResponseColumns, ResponseTable, Units,
};
use rankbench_core::error::{Error, Result};
use rankbench_core::leakage::{run_leakage_experiment, LeakageExperimentConfig};
use rankbench_core::matching::{
    default_k_list, default_weight_grid, kshot_curve, permuted_pairing_control, BlendCurve,
    BlendPoint, DEFAULT_INNER_TRIALS, DEFAULT_MIN_OVERLAP, DEFAULT_TOP_N,
    DEFAULT_TRIALS_PER_DRUG,
};
use rankbench_core::metrics::{
    decompose_global_r, profile_concordance, replicate_concordance, PredictionTable,
    ZeroVariancePolicy, DEFAULT_MIN_OBS,
};
use rankbench_core::models::{cell_mean_predictor, drug_mean_predictor};
use rankbench_core::protocols::{
    permute_moa, run_cv, run_moa_weighted, run_within_moa_loo, CellPipeline, CvConfig,
    DrugFeatureMode, PcaGroupSpec, Scheme, TargetMode, WeightingMode,
};
use rankbench_core::stats::{biomarker_stratify, Alternative};
use rankbench_core::synth::{generate, Preset, SynthConfig};

use crate::config::ConfigFile;
use crate::manifest::{write_csv, write_report, RunManifest};
use crate::{
    BiomarkerArgs, ConcordanceArgs, DecomposeArgs, EvalArgs, KshotArgs, LeakageArgs, MoaArgs,
    PipelineArgs, ResponseInputArgs, SynthArgs,
};

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::usage(format!("missing required flag {flag}")))
}

fn parse_units(text: &str) -> Result<Units> {
    match text {
        "lnIC50" | "lnic50" => Ok(Units::LnIc50),
        "AUC" | "auc" => Ok(Units::Auc),
        other => Err(Error::usage(format!(
            "unknown units `{other}` (expected lnIC50|AUC)"
        ))),
    }
}

fn parse_policy(text: &str) -> Result<ZeroVariancePolicy> {
    match text {
        "zero" => Ok(ZeroVariancePolicy::Zero),
        "skip" => Ok(ZeroVariancePolicy::Skip),
        other => Err(Error::usage(format!(
            "unknown zero-variance policy `{other}` (expected zero|skip)"
        ))),
    }
}

fn parse_alternative(text: &str) -> Result<Alternative> {
    match text {
        "less" => Ok(Alternative::Less),
        "greater" => Ok(Alternative::Greater),
        "two-sided" => Ok(Alternative::TwoSided),
        other => Err(Error::usage(format!(
            "unknown alternative `{other}` (expected less|greater|two-sided)"
        ))),
    }
}

fn parse_usize_list(text: &str, flag: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::usage(format!("{flag}: cannot parse `{part}`")))
        })
        .collect()
}

fn parse_f64_list(text: &str, flag: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| Error::usage(format!("{flag}: cannot parse `{part}`")))
        })
        .collect()
}

/// `start:end:step` inclusive grid.
fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::usage(format!(
            "--grid expects start:end:step, got `{text}`"
        )));
    }
    let parse = |p: &str| {
        p.parse::<f64>()
            .map_err(|_| Error::usage(format!("--grid: cannot parse `{p}`")))
    };
    let (start, end, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
    if !(step > 0.0) || end < start {
        return Err(Error::usage("--grid: need step > 0 and end >= start"));
    }
    let mut grid = Vec::new();
    let mut index = 0usize;
    loop {
        let w = start + step * index as f64;
        if w > end + 1e-12 {
            break;
        }
        grid.push(w.min(end));
        index += 1;
    }
    Ok(grid)
}

struct ResolvedResponseInput {
    path: PathBuf,
    columns: ResponseColumns,
    units: Units,
}

impl ResolvedResponseInput {
    fn resolve(args: &ResponseInputArgs, config: &ConfigFile, sub: &str) -> Result<Self> {
        let path = require(
            config.resolve_opt(args.responses.clone(), sub, "responses")?,
            "--responses",
        )?;
        let columns = ResponseColumns {
            drug: config.resolve(
                args.col_drug.clone(),
                sub,
                "col_drug",
                "drug_id".to_owned(),
            )?,
            cell: config.resolve(
                args.col_cell.clone(),
                sub,
                "col_cell",
                "cell_id".to_owned(),
            )?,
            value: config.resolve(
                args.col_value.clone(),
                sub,
                "col_value",
                "value".to_owned(),
            )?,
        };
        let units = parse_units(&config.resolve(
            args.units.clone(),
            sub,
            "units",
            "lnIC50".to_owned(),
        )?)?;
        Ok(ResolvedResponseInput {
            path,
            columns,
            units,
        })
    }

    fn load(&self) -> Result<ResponseTable> {
        Ok(dataio::load_response_table(&self.path, &self.columns, self.units)?.0)
    }
}

fn cell_pipeline(args: &PipelineArgs, config: &ConfigFile, sub: &str) -> Result<CellPipeline> {
    let rna = config.resolve_opt(args.pca_rna, sub, "pca_rna")?;
    let mutation = config.resolve_opt(args.pca_mut, sub, "pca_mut")?;
    let all = config.resolve_opt(args.pca_all, sub, "pca_all")?;
    let mut groups = Vec::new();
    if let Some(dim) = rna {
        groups.push(PcaGroupSpec {
            prefix: "rna".into(),
            dim,
        });
    }
    if let Some(dim) = mutation {
        groups.push(PcaGroupSpec {
            prefix: "mut".into(),
            dim,
        });
    }
    if let Some(dim) = all {
        groups.push(PcaGroupSpec {
            prefix: String::new(),
            dim,
        });
    }
    Ok(if groups.is_empty() {
        CellPipeline::Raw
    } else {
        CellPipeline::Pca(groups)
    })
}

// ---------------------------------------------------------------- synth ---

#[derive(Serialize)]
struct SynthResolved {
    preset: String,
    out_dir: String,
    config: SynthConfig,
}

#[derive(Serialize)]
struct SynthResult {
    files: BTreeMap<String, String>,
    n_drugs: usize,
    n_cells: usize,
    n_records: usize,
    n_classes: usize,
}

pub fn synth(args: &SynthArgs, config_file: &ConfigFile) -> Result<()> {
    let sub = "synth";
    let preset_name = config_file.resolve(
        args.preset.clone(),
        sub,
        "preset",
        "dominance".to_owned(),
    )?;
    let preset = Preset::parse(&preset_name)?;
    let seed = config_file.resolve(args.seed, sub, "seed", 42u64)?;
    let out_dir = config_file.resolve(
        args.out_dir.clone(),
        sub,
        "out_dir",
        PathBuf::from("."),
    )?;
    let mut synth_config = preset.config(seed);
    if let Some(n) = config_file.resolve_opt(args.drugs, sub, "drugs")? {
        synth_config.n_drugs = n;
    }
    if let Some(n) = config_file.resolve_opt(args.cells, sub, "cells")? {
        synth_config.n_cells = n;
    }
    if let Some(sd) = config_file.resolve_opt(args.noise, sub, "noise")? {
        synth_config.sigma_noise = sd;
    }

    let output = generate(&synth_config)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let response_path = out_dir.join("response.csv");
    let features_path = out_dir.join("cell_features.csv");
    let moa_path = out_dir.join("moa.csv");
    let truth_path = out_dir.join("ground_truth.json");
    dataio::save_response_table(&output.response, &response_path)?;
    dataio::save_feature_matrix(&output.cell_features, &features_path)?;
    dataio::save_moa_map(&output.moa, &moa_path)?;
    let truth_json = serde_json::to_string_pretty(&output.ground_truth)
        .map_err(|e| Error::usage(format!("ground truth not serializable: {e}")))?;
    std::fs::write(&truth_path, truth_json + "\n").map_err(|e| Error::Io {
        path: truth_path.display().to_string(),
        source: e,
    })?;

    let mut files = BTreeMap::new();
    for path in [&response_path, &features_path, &moa_path, &truth_path] {
        files.insert(
            path.display().to_string(),
            crate::manifest::file_digest(path)?,
        );
    }
    let resolved = SynthResolved {
        preset: preset.name().to_owned(),
        out_dir: out_dir.display().to_string(),
        config: synth_config.clone(),
    };
    let manifest = RunManifest::new(sub, &resolved, &[], Some(seed))?;
    let result = SynthResult {
        files,
        n_drugs: output.response.n_drugs(),
        n_cells: output.response.n_cells(),
        n_records: output.response.len(),
        n_classes: output.moa.classes().len(),
    };
    write_report(manifest, result, args.report.as_deref())
}

// ----------------------------------------------------------------- eval ---

#[derive(Serialize)]
struct EvalResolved {
    responses: String,
    cell_features: String,
    drug_features: String,
    moa: Option<String>,
    scaffold: Option<String>,
    columns: ResponseColumns,
    units: Units,
    cv: CvConfig,
    moa_class: Option<String>,
    moa_weight_grid: Option<Vec<f64>>,
}

enum DrugFeatureArg {
    None,
    MoaOneHot,
    Random { dim: usize, seed: u64 },
    Path(PathBuf),
}

fn parse_drug_features(text: &str) -> Result<DrugFeatureArg> {
    match text {
        "none" => Ok(DrugFeatureArg::None),
        "moa-onehot" => Ok(DrugFeatureArg::MoaOneHot),
        other if other.starts_with("random:") => {
            let parts: Vec<&str> = other.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::usage(
                    "--drug-features random takes random:<dim>:<seed>",
                ));
            }
            let dim = parts[1]
                .parse()
                .map_err(|_| Error::usage("random vector dim must be an integer"))?;
            let seed = parts[2]
                .parse()
                .map_err(|_| Error::usage("random vector seed must be an integer"))?;
            Ok(DrugFeatureArg::Random { dim, seed })
        }
        path => Ok(DrugFeatureArg::Path(PathBuf::from(path))),
    }
}

struct LoadedDataset {
    dataset: AlignedDataset,
    input_paths: Vec<PathBuf>,
}

#[allow(clippy::too_many_arguments)]
fn load_dataset(
    input: &ResolvedResponseInput,
    cell_features: &Path,
    drug_features: &DrugFeatureArg,
    moa: Option<&Path>,
    scaffold: Option<&Path>,
) -> Result<LoadedDataset> {
    let response = input.load()?;
    let (cells, _) = dataio::load_feature_matrix(cell_features, EntityKind::Cell)?;
    let mut input_paths = vec![input.path.clone(), cell_features.to_path_buf()];
    let drug_matrix = match drug_features {
        DrugFeatureArg::Path(path) => {
            input_paths.push(path.clone());
            Some(dataio::load_feature_matrix(path, EntityKind::Drug)?.0)
        }
        _ => None,
    };
    let moa_map = match moa {
        Some(path) => {
            input_paths.push(path.to_path_buf());
            Some(dataio::load_moa_map(path)?)
        }
        None => None,
    };
    let scaffold_map = match scaffold {
        Some(path) => {
            input_paths.push(path.to_path_buf());
            Some(dataio::load_scaffold_map(path)?)
        }
        None => None,
    };
    let (dataset, report) = align(
        &response,
        &cells,
        drug_matrix.as_ref(),
        moa_map.as_ref(),
        scaffold_map.as_ref(),
    )?;
    eprintln!(
        "aligned: {} drugs, {} cells, {} records ({} records dropped, {} values imputed)",
        report.n_drugs,
        report.n_cells,
        report.n_records,
        report.dropped_records,
        report.imputed_values
    );
    Ok(LoadedDataset {
        dataset,
        input_paths,
    })
}

fn per_drug_csv(path: &Path, values: &BTreeMap<String, f64>) -> Result<()> {
    let rows: Vec<String> = values
        .iter()
        .map(|(drug, r)| format!("{drug},{r}"))
        .collect();
    write_csv(path, "drug_id,per_drug_r", &rows)
}

pub fn eval(args: &EvalArgs, config_file: &ConfigFile) -> Result<()> {
    let sub = "eval";
    let input = ResolvedResponseInput::resolve(&args.input, config_file, sub)?;
    let cell_features = require(
        config_file.resolve_opt(args.cell_features.clone(), sub, "cell_features")?,
        "--cell-features",
    )?;
    let drug_features_text = config_file.resolve(
        args.drug_features.clone(),
        sub,
        "drug_features",
        "none".to_owned(),
    )?;
    let drug_features_arg = parse_drug_features(&drug_features_text)?;
    let scheme = Scheme::parse(&config_file.resolve(
        args.scheme.clone(),
        sub,
        "scheme",
        "drug-blind".to_owned(),
    )?)?;
    let target_mode = match config_file
        .resolve(args.targets.clone(), sub, "targets", "raw".to_owned())?
        .as_str()
    {
        "raw" => TargetMode::Raw,
        "zscore" => TargetMode::ZscorePerDrug,
        other => {
            return Err(Error::usage(format!(
                "unknown target mode `{other}` (expected raw|zscore)"
            )))
        }
    };
    let moa_path = config_file.resolve_opt(args.moa.clone(), sub, "moa")?;
    let scaffold_path = config_file.resolve_opt(args.scaffold.clone(), sub, "scaffold")?;
    let moa_class = config_file.resolve_opt(args.moa_class.clone(), sub, "moa_class")?;
    let moa_weight = config_file.resolve_opt(args.moa_weight, sub, "moa_weight")?;
    let grid_text = config_file.resolve_opt(args.moa_weight_grid.clone(), sub, "moa_weight_grid")?;
    let weight_grid = grid_text
        .map(|t| parse_f64_list(&t, "--moa-weight-grid"))
        .transpose()?;

    let weighting = match (&moa_class, moa_weight) {
        (Some(class), Some(weight)) => WeightingMode::MoaWeight {
            class: class.clone(),
            weight,
        },
        (None, Some(_)) => {
            return Err(Error::usage("--moa-weight requires --moa-class"))
        }
        _ => WeightingMode::Uniform,
    };
    if weight_grid.is_some() && moa_class.is_none() {
        return Err(Error::usage("--moa-weight-grid requires --moa-class"));
    }
    if weight_grid.is_some() && moa_weight.is_some() {
        return Err(Error::usage(
            "--moa-weight and --moa-weight-grid are mutually exclusive",
        ));
    }

    let cv = CvConfig {
        scheme,
        k: config_file.resolve(args.k, sub, "k", 5)?,
        seed: config_file.resolve(args.seed, sub, "seed", 42)?,
        cell_pipeline: cell_pipeline(&args.pipeline, config_file, sub)?,
        drug_features: match &drug_features_arg {
            DrugFeatureArg::None => DrugFeatureMode::None,
            DrugFeatureArg::MoaOneHot => DrugFeatureMode::MoaOneHot,
            DrugFeatureArg::Random { dim, seed } => DrugFeatureMode::RandomVector {
                dim: *dim,
                seed: *seed,
            },
            DrugFeatureArg::Path(_) => DrugFeatureMode::Matrix,
        },
        target_mode,
        weighting,
        alpha: config_file.resolve(args.pipeline.alpha, sub, "alpha", 1.0)?,
        min_obs: config_file.resolve(args.pipeline.min_obs, sub, "min_obs", DEFAULT_MIN_OBS)?,
        zero_variance_policy: parse_policy(&config_file.resolve(
            args.pipeline.zero_variance_policy.clone(),
            sub,
            "zero_variance_policy",
            "zero".to_owned(),
        )?)?,
    };

    let loaded = load_dataset(
        &input,
        &cell_features,
        &drug_features_arg,
        moa_path.as_deref(),
        scaffold_path.as_deref(),
    )?;

    let result = match (&weight_grid, &moa_class) {
        (Some(grid), Some(class)) => {
            let moa = loaded
                .dataset
                .moa
                .clone()
                .ok_or_else(|| Error::usage("--moa-weight-grid requires --moa"))?;
            run_moa_weighted(&loaded.dataset, &moa, class, grid, &cv)?
        }
        _ => run_cv(&loaded.dataset, &cv)?,
    };

    if let Some(csv_path) = &args.csv {
        per_drug_csv(csv_path, &result.pooled.per_drug_values)?;
    }
    let resolved = EvalResolved {
        responses: input.path.display().to_string(),
        cell_features: cell_features.display().to_string(),
        drug_features: drug_features_text,
        moa: moa_path.as_ref().map(|p| p.display().to_string()),
        scaffold: scaffold_path.as_ref().map(|p| p.display().to_string()),
        columns: input.columns.clone(),
        units: input.units,
        cv: cv.clone(),
        moa_class,
        moa_weight_grid: weight_grid,
    };
    let input_refs: Vec<&Path> = loaded.input_paths.iter().map(PathBuf::as_path).collect();
    let manifest = RunManifest::new(sub, &resolved, &input_refs, Some(cv.seed))?;
    write_report(manifest, result, args.report.as_deref())
}

// ------------------------------------------------------------ decompose ---

#[derive(Serialize)]
struct DecomposeResolved {
    truth: String,
    pred: String,
    columns: ResponseColumns,
}

pub fn decompose(args: &DecomposeArgs, config_file: &ConfigFile) -> Result<()> {
    let sub = "decompose";
    let truth_path = require(
        config_file.resolve_opt(args.truth.clone(), sub, "truth")?,
        "--truth",
    )?;
    let pred_text = require(
        config_file.resolve_opt(args.pred.clone(), sub, "pred")?,
        "--pred",
    )?;
    let columns = ResponseColumns {
        drug: config_file.resolve(args.col_drug.clone(), sub, "col_drug", "drug_id".to_owned())?,
        cell: config_file.resolve(args.col_cell.clone(), sub, "col_cell", "cell_id".to_owned())?,
        value: config_file.resolve(
            args.col_value.clone(),
            sub,
            "col_value",
            "value".to_owned(),
        )?,
    };
    let (truth, _) = dataio::load_response_table(&truth_path, &columns, Units::LnIc50)?;

    let mut input_paths = vec![truth_path.clone()];
    let predictions: PredictionTable = match pred_text.as_str() {
        "drug-mean" => drug_mean_predictor(&truth).predict_for(&truth)?.0,
        "cell-mean" => cell_mean_predictor(&truth).predict_for(&truth)?.0,
        path => {
            let path = PathBuf::from(path);
            input_paths.push(path.clone());
            let (table, _) = dataio::load_response_table(&path, &columns, Units::LnIc50)?;
            PredictionTable::from_records(
                table
                    .records()
                    .iter()
                    .map(|r| (r.drug_id.clone(), r.cell_id.clone(), r.value)),
            )?
        }
    };
    let report = decompose_global_r(&predictions, &truth)?;
    let resolved = DecomposeResolved {
        truth: truth_path.display().to_string(),
        pred: pred_text,
        columns,
    };
    let input_refs: Vec<&Path> = input_paths.iter().map(PathBuf::as_path).collect();
    let manifest = RunManifest::new(sub, &resolved, &input_refs, None)?;
    write_report(manifest, report, args.report.as_deref())
}

// ---------------------------------------------------------------- kshot ---

#[derive(Serialize)]
struct KshotResolved {
    train: String,
    test: String,
    k_list: Vec<usize>,
    top_n: usize,
    grid: Vec<f64>,
    trials: usize,
    inner_trials: usize,
    seed: u64,
    min_obs: usize,
    min_overlap: usize,
    control: Option<String>,
    control_k: Option<usize>,
}

#[derive(Serialize)]
struct KshotResult {
    curve: BlendCurve,
    control: Option<BlendPoint>,
}

pub fn kshot(args: &KshotArgs, config_file: &ConfigFile) -> Result<()> {
    let sub = "kshot";
    let train_path = require(
        config_file.resolve_opt(args.train.clone(), sub, "train")?,
        "--train",
    )?;
    let test_path = require(
        config_file.resolve_opt(args.test.clone(), sub, "test")?,
        "--test",
    )?;
    let k_list = match config_file.resolve_opt(args.k_list.clone(), sub, "k_list")? {
        Some(text) => parse_usize_list(&text, "--k-list")?,
        None => default_k_list(),
    };
    let grid = match config_file.resolve_opt(args.grid.clone(), sub, "grid")? {
        Some(text) => parse_grid(&text)?,
        None => default_weight_grid(),
    };
    let top_n = config_file.resolve(args.n, sub, "n", DEFAULT_TOP_N)?;
    let trials = config_file.resolve(args.trials, sub, "trials", DEFAULT_TRIALS_PER_DRUG)?;
    let inner_trials =
        config_file.resolve(args.inner_trials, sub, "inner_trials", DEFAULT_INNER_TRIALS)?;
    let seed = config_file.resolve(args.seed, sub, "seed", 42)?;
    let min_obs = config_file.resolve(args.min_obs, sub, "min_obs", DEFAULT_MIN_OBS)?;
    let min_overlap =
        config_file.resolve(args.min_overlap, sub, "min_overlap", DEFAULT_MIN_OVERLAP)?;
    let control = config_file.resolve_opt(args.control.clone(), sub, "control")?;
    if let Some(mode) = &control {
        if mode != "permuted" {
            return Err(Error::usage(format!(
                "unknown control `{mode}` (expected permuted)"
            )));
        }
    }
    let control_k = config_file.resolve_opt(args.control_k, sub, "control_k")?;

    let columns = ResponseColumns::default();
    let (train, _) = dataio::load_response_table(&train_path, &columns, Units::LnIc50)?;
    let (test, _) = dataio::load_response_table(&test_path, &columns, Units::LnIc50)?;

    let curve = kshot_curve(
        &train,
        &test,
        &k_list,
        trials,
        top_n,
        &grid,
        inner_trials,
        seed,
        min_obs,
        min_overlap,
    )?;
    let control_point = if control.is_some() {
        let k = match control_k {
            Some(k) => k,
            None => *k_list.iter().filter(|&&k| k > 0).max().ok_or_else(|| {
                Error::usage("--control needs a positive K in --k-list or --control-k")
            })?,
        };
        Some(permuted_pairing_control(
            &train,
            &test,
            k,
            trials,
            top_n,
            &grid,
            inner_trials,
            seed,
            min_obs,
            min_overlap,
        )?)
    } else {
        None
    };

    if let Some(csv_path) = &args.csv {
        let mut rows: Vec<String> = curve
            .points
            .iter()
            .map(|p| {
                format!(
                    "{},{},{},{},{},{},curve",
                    p.k,
                    p.selected_w.map_or(String::new(), |w| w.to_string()),
                    p.per_drug_r_mean,
                    p.per_drug_r_sd,
                    p.n_drugs,
                    p.n_drugs_skipped
                )
            })
            .collect();
        if let Some(point) = &control_point {
            rows.push(format!(
                "{},{},{},{},{},{},permuted-control",
                point.k,
                point.selected_w.map_or(String::new(), |w| w.to_string()),
                point.per_drug_r_mean,
                point.per_drug_r_sd,
                point.n_drugs,
                point.n_drugs_skipped
            ));
        }
        write_csv(
            csv_path,
            "k,selected_w,per_drug_r_mean,per_drug_r_sd,n_drugs,n_drugs_skipped,series",
            &rows,
        )?;
    }

    let resolved = KshotResolved {
        train: train_path.display().to_string(),
        test: test_path.display().to_string(),
        k_list,
        top_n,
        grid,
        trials,
        inner_trials,
        seed,
        min_obs,
        min_overlap,
        control,
        control_k,
    };
    let manifest = RunManifest::new(
        sub,
        &resolved,
        &[train_path.as_path(), test_path.as_path()],
        Some(seed),
    )?;
    write_report(
        manifest,
        KshotResult {
            curve,
            control: control_point,
        },
        args.report.as_deref(),
    )
}

// ------------------------------------------------------------------ moa ---

#[derive(Serialize)]
struct MoaResolved {
    responses: String,
    cell_features: String,
    moa: String,
    mode: String,
    class: Option<String>,
    permute_seed: Option<u64>,
    weight_grid: Option<Vec<f64>>,
    cv: CvConfig,
}

pub fn moa(args: &MoaArgs, config_file: &ConfigFile) -> Result<()> {
    let sub = "moa";
    let input = ResolvedResponseInput::resolve(&args.input, config_file, sub)?;
    let cell_features = require(
        config_file.resolve_opt(args.cell_features.clone(), sub, "cell_features")?,
        "--cell-features",
    )?;
    let moa_path = require(
        config_file.resolve_opt(args.moa.clone(), sub, "moa")?,
        "--moa",
    )?;
    let mode = config_file.resolve(args.mode.clone(), sub, "mode", "onehot".to_owned())?;
    let class = config_file.resolve_opt(args.class.clone(), sub, "class")?;
    let permute_seed = config_file.resolve_opt(args.permute_seed, sub, "permute_seed")?;
    let weight_grid = match config_file.resolve_opt(args.weight_grid.clone(), sub, "weight_grid")? {
        Some(text) => parse_f64_list(&text, "--weight-grid")?,
        None => vec![1.0, 2.0, 5.0, 10.0, 20.0],
    };

    let cv = CvConfig {
        scheme: Scheme::DrugBlind,
        k: config_file.resolve(args.k, sub, "k", 5)?,
        seed: config_file.resolve(args.seed, sub, "seed", 42)?,
        cell_pipeline: cell_pipeline(&args.pipeline, config_file, sub)?,
        drug_features: if mode == "onehot" {
            DrugFeatureMode::MoaOneHot
        } else {
            DrugFeatureMode::None
        },
        target_mode: TargetMode::Raw,
        weighting: WeightingMode::Uniform,
        alpha: config_file.resolve(args.pipeline.alpha, sub, "alpha", 1.0)?,
        min_obs: config_file.resolve(args.pipeline.min_obs, sub, "min_obs", DEFAULT_MIN_OBS)?,
        zero_variance_policy: parse_policy(&config_file.resolve(
            args.pipeline.zero_variance_policy.clone(),
            sub,
            "zero_variance_policy",
            "zero".to_owned(),
        )?)?,
    };

    let loaded = load_dataset(
        &input,
        &cell_features,
        &DrugFeatureArg::None,
        Some(moa_path.as_path()),
        None,
    )?;
    let mut dataset = loaded.dataset;
    let mut map = dataset
        .moa
        .clone()
        .ok_or_else(|| Error::usage("MoA map empty after alignment"))?;
    if let Some(seed) = permute_seed {
        map = permute_moa(&map, seed);
        dataset.moa = Some(map.clone());
    }

    let resolved = MoaResolved {
        responses: input.path.display().to_string(),
        cell_features: cell_features.display().to_string(),
        moa: moa_path.display().to_string(),
        mode: mode.clone(),
        class: class.clone(),
        permute_seed,
        weight_grid: Some(weight_grid.clone()),
        cv: cv.clone(),
    };
    let input_refs: Vec<&Path> = loaded.input_paths.iter().map(PathBuf::as_path).collect();
    let manifest = RunManifest::new(sub, &resolved, &input_refs, Some(cv.seed))?;

    match mode.as_str() {
        "onehot" => {
            let result = run_cv(&dataset, &cv)?;
            if let Some(csv_path) = &args.csv {
                per_drug_csv(csv_path, &result.pooled.per_drug_values)?;
            }
            write_report(manifest, result, args.report.as_deref())
        }
        "weighted" => {
            let class = require(class, "--class")?;
            let result = run_moa_weighted(&dataset, &map, &class, &weight_grid, &cv)?;
            if let Some(csv_path) = &args.csv {
                per_drug_csv(csv_path, &result.pooled.per_drug_values)?;
            }
            write_report(manifest, result, args.report.as_deref())
        }
        "within" => {
            let class = require(class, "--class")?;
            let result = run_within_moa_loo(&dataset, &map, &class, cv.alpha, &cv)?;
            if let Some(csv_path) = &args.csv {
                per_drug_csv(csv_path, &result.pooled.per_drug_values)?;
            }
            write_report(manifest, result, args.report.as_deref())
        }
        other => Err(Error::usage(format!(
            "unknown mode `{other}` (expected onehot|weighted|within)"
        ))),
    }
}

// -------------------------------------------------------------- leakage ---

#[derive(Serialize)]
struct LeakageResolved {
    responses: Option<String>,
    cell_features: Option<String>,
    synthetic_preset: Option<String>,
    noise: Option<f64>,
    config: LeakageExperimentConfig,
}

pub fn leakage(args: &LeakageArgs, config_file: &ConfigFile) -> Result<()> {
    let sub = "leakage";
    let responses = config_file.resolve_opt(args.responses.clone(), sub, "responses")?;
    let cell_features = config_file.resolve_opt(args.cell_features.clone(), sub, "cell_features")?;
    let noise = config_file.resolve_opt(args.noise, sub, "noise")?;
    let config = LeakageExperimentConfig {
        folds: config_file.resolve(args.folds, sub, "folds", 10)?,
        epochs: config_file.resolve(args.epochs, sub, "epochs", 50)?,
        lr: config_file.resolve(args.lr, sub, "lr", 0.05)?,
        alpha: config_file.resolve(args.alpha, sub, "alpha", 1.0)?,
        val_fraction: config_file.resolve(args.val_fraction, sub, "val_fraction", 0.1)?,
        seed: config_file.resolve(args.seed, sub, "seed", 42)?,
        min_obs: config_file.resolve(args.min_obs, sub, "min_obs", DEFAULT_MIN_OBS)?,
    };

    let (dataset, input_paths, preset_used) = match (&responses, &cell_features) {
        (Some(resp), Some(cells)) => {
            let (response, _) =
                dataio::load_response_table(resp, &ResponseColumns::default(), Units::LnIc50)?;
            let (features, _) = dataio::load_feature_matrix(cells, EntityKind::Cell)?;
            let (dataset, _) = align(&response, &features, None, None, None)?;
            (dataset, vec![resp.clone(), cells.clone()], None)
        }
        (None, None) => {
            let mut synth_config = Preset::NoisyLeakage.config(config.seed);
            if let Some(sd) = noise {
                synth_config.sigma_noise = sd;
            }
            let out = generate(&synth_config)?;
            let dataset = AlignedDataset {
                response: out.response,
                cell_features: out.cell_features,
                drug_features: None,
                moa: Some(out.moa),
                scaffold: None,
            };
            (dataset, Vec::new(), Some("noisy-leakage".to_owned()))
        }
        _ => {
            return Err(Error::usage(
                "--responses and --cell-features must be given together",
            ))
        }
    };

    let report = run_leakage_experiment(&dataset, &config)?;

    if let Some(csv_path) = &args.csv {
        let mut rows = Vec::new();
        for (policy, epochs) in &report.selected_epochs {
            for (fold, epoch) in epochs.iter().enumerate() {
                rows.push(format!("{policy},{fold},{epoch}"));
            }
        }
        write_csv(csv_path, "policy,fold,selected_epoch", &rows)?;
    }

    let resolved = LeakageResolved {
        responses: responses.as_ref().map(|p| p.display().to_string()),
        cell_features: cell_features.as_ref().map(|p| p.display().to_string()),
        synthetic_preset: preset_used,
        noise,
        config: config.clone(),
    };
    let input_refs: Vec<&Path> = input_paths.iter().map(PathBuf::as_path).collect();
    let manifest = RunManifest::new(sub, &resolved, &input_refs, Some(config.seed))?;
    write_report(manifest, report, args.report.as_deref())
}

// ------------------------------------------------------------ biomarker ---

#[derive(Serialize)]
struct BiomarkerResolved {
    responses: String,
    mutations: String,
    drug: String,
    alternative: Alternative,
}

fn load_mutation_status(path: &Path) -> Result<BTreeMap<String, bool>> {
    let path_str = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path_str.clone(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{path_str}: {e}")))?
        .clone();
    let idx = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_owned(),
                path: path_str.clone(),
            })
    };
    let cell_idx = idx("cell_id")?;
    let mutant_idx = idx("mutant")?;
    let mut map = BTreeMap::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Schema(format!("{path_str}: {e}")))?;
        let cell = record.get(cell_idx).unwrap_or("").trim().to_owned();
        let text = record.get(mutant_idx).unwrap_or("").trim();
        let status = match text {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                return Err(Error::ParseValue {
                    path: path_str,
                    row: row + 1,
                    value: other.to_owned(),
                })
            }
        };
        map.insert(cell, status);
    }
    if map.is_empty() {
        return Err(Error::data(format!("{path_str}: no mutation rows")));
    }
    Ok(map)
}

pub fn biomarker(args: &BiomarkerArgs, config_file: &ConfigFile) -> Result<()> {
    let sub = "biomarker";
    let responses = require(
        config_file.resolve_opt(args.responses.clone(), sub, "responses")?,
        "--responses",
    )?;
    let mutations = require(
        config_file.resolve_opt(args.mutations.clone(), sub, "mutations")?,
        "--mutations",
    )?;
    let drug = require(
        config_file.resolve_opt(args.drug.clone(), sub, "drug")?,
        "--drug",
    )?;
    let alternative = parse_alternative(&config_file.resolve(
        args.alternative.clone(),
        sub,
        "alternative",
        "less".to_owned(),
    )?)?;

    let (truth, _) =
        dataio::load_response_table(&responses, &ResponseColumns::default(), Units::LnIc50)?;
    let status = load_mutation_status(&mutations)?;
    let result = biomarker_stratify(&truth, &status, &drug, alternative)?;

    let resolved = BiomarkerResolved {
        responses: responses.display().to_string(),
        mutations: mutations.display().to_string(),
        drug,
        alternative,
    };
    let manifest = RunManifest::new(
        sub,
        &resolved,
        &[responses.as_path(), mutations.as_path()],
        None,
    )?;
    write_report(manifest, result, args.report.as_deref())
}

// ---------------------------------------------------------- concordance ---

#[derive(Serialize)]
struct ConcordanceResolved {
    mode: String,
    table_a: Option<String>,
    table_b: Option<String>,
    anchors: Option<Vec<String>>,
    responses: Option<String>,
    moa: Option<String>,
    class: Option<String>,
    min_obs: usize,
}

pub fn concordance(args: &ConcordanceArgs, config_file: &ConfigFile) -> Result<()> {
    let sub = "concordance";
    let mode = config_file.resolve(args.mode.clone(), sub, "mode", "replicate".to_owned())?;
    let min_obs = config_file.resolve(args.min_obs, sub, "min_obs", DEFAULT_MIN_OBS)?;
    let columns = ResponseColumns::default();
    match mode.as_str() {
        "replicate" => {
            let table_a_path = require(
                config_file.resolve_opt(args.table_a.clone(), sub, "table_a")?,
                "--table-a",
            )?;
            let table_b_path = require(
                config_file.resolve_opt(args.table_b.clone(), sub, "table_b")?,
                "--table-b",
            )?;
            let anchors_text = require(
                config_file.resolve_opt(args.anchors.clone(), sub, "anchors")?,
                "--anchors",
            )?;
            let anchors: Vec<String> = anchors_text
                .split(',')
                .map(|s| s.trim().to_owned())
                .filter(|s| !s.is_empty())
                .collect();
            let (table_a, _) = dataio::load_response_table(&table_a_path, &columns, Units::LnIc50)?;
            let (table_b, _) = dataio::load_response_table(&table_b_path, &columns, Units::LnIc50)?;
            let result = replicate_concordance(&table_a, &table_b, &anchors, min_obs)?;
            let resolved = ConcordanceResolved {
                mode,
                table_a: Some(table_a_path.display().to_string()),
                table_b: Some(table_b_path.display().to_string()),
                anchors: Some(anchors),
                responses: None,
                moa: None,
                class: None,
                min_obs,
            };
            let manifest = RunManifest::new(
                sub,
                &resolved,
                &[table_a_path.as_path(), table_b_path.as_path()],
                None,
            )?;
            write_report(manifest, result, args.report.as_deref())
        }
        "profile" => {
            let responses = require(
                config_file.resolve_opt(args.responses.clone(), sub, "responses")?,
                "--responses",
            )?;
            let moa_path = require(
                config_file.resolve_opt(args.moa.clone(), sub, "moa")?,
                "--moa",
            )?;
            let class = require(
                config_file.resolve_opt(args.class.clone(), sub, "class")?,
                "--class",
            )?;
            let (truth, _) = dataio::load_response_table(&responses, &columns, Units::LnIc50)?;
            let map = dataio::load_moa_map(&moa_path)?;
            let result = profile_concordance(&truth, &map, &class, min_obs)?;
            let resolved = ConcordanceResolved {
                mode,
                table_a: None,
                table_b: None,
                anchors: None,
                responses: Some(responses.display().to_string()),
                moa: Some(moa_path.display().to_string()),
                class: Some(class),
                min_obs,
            };
            let manifest = RunManifest::new(
                sub,
                &resolved,
                &[responses.as_path(), moa_path.as_path()],
                None,
            )?;
            write_report(manifest, result, args.report.as_deref())
        }
        other => Err(Error::usage(format!(
            "unknown concordance mode `{other}` (expected replicate|profile)"
        ))),
    }
}
