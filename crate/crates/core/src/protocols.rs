//! Cross-validation fold construction and full experiment pipelines:
//! drug-blind, cell-blind, scaffold-stratified and record-level mixed CV,
//! MoA one-hot / weighted / within-MoA training, the permuted-MoA control,
//! and z-scored-target training.
//!
//! Folds run in parallel; per-fold RNG streams are derived from
//! (seed, scheme, fold index) so results do not depend on thread count, and
//! aggregation is ordered by fold index.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{AlignedDataset, FeatureMatrix, MoaMap, ResponseTable, ScaffoldMap};
use crate::error::{Error, Result};
use crate::metrics::{
    decompose_global_r, global_r, per_drug_r, DecompositionReport, MetricReport, PredictionTable,
    ZeroVariancePolicy, DEFAULT_MIN_OBS,
};
use crate::models::{pca_fit, pca_transform, ridge_fit, ridge_predict, zscore_per_drug, PcaModel};
use crate::rng::{derive_rng, derive_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    DrugBlind,
    CellBlind,
    Scaffold,
    WithinMoaLoo,
    /// Record-level splits; trivially easy, provided for reference runs only.
    Mixed,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::DrugBlind => "drug-blind",
            Scheme::CellBlind => "cell-blind",
            Scheme::Scaffold => "scaffold",
            Scheme::WithinMoaLoo => "within-moa-loo",
            Scheme::Mixed => "mixed",
        }
    }

    pub fn parse(name: &str) -> Result<Scheme> {
        match name {
            "drug-blind" => Ok(Scheme::DrugBlind),
            "cell-blind" => Ok(Scheme::CellBlind),
            "scaffold" => Ok(Scheme::Scaffold),
            "within-moa-loo" => Ok(Scheme::WithinMoaLoo),
            "mixed" => Ok(Scheme::Mixed),
            other => Err(Error::usage(format!(
                "unknown scheme `{other}` (expected drug-blind|cell-blind|scaffold|mixed)"
            ))),
        }
    }
}

/// Deterministic assignment of entities to folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub scheme: Scheme,
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSpec {
    pub fn fold_members(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Assign entities to folds.
///
/// Drug-blind/cell-blind/mixed: seeded shuffle then round-robin. Scaffold:
/// scaffold groups sorted by descending size are greedily packed onto the
/// currently smallest fold, so all drugs sharing a scaffold land together.
/// Within-MoA LOO: every entity is its own fold.
pub fn make_folds(
    entities: &[String],
    scheme: Scheme,
    k: usize,
    seed: u64,
    scaffold: Option<&ScaffoldMap>,
) -> Result<FoldSpec> {
    let mut sorted: Vec<String> = entities.to_vec();
    sorted.sort();
    sorted.dedup();
    if scheme == Scheme::WithinMoaLoo {
        let assignment = sorted
            .into_iter()
            .enumerate()
            .map(|(i, id)| (id, i))
            .collect::<BTreeMap<_, _>>();
        let k = assignment.len();
        return Ok(FoldSpec {
            scheme,
            k,
            seed,
            assignment,
        });
    }
    if k < 2 {
        return Err(Error::usage("make_folds: k must be >= 2"));
    }
    if sorted.len() < k {
        return Err(Error::data(format!(
            "make_folds: {} entities cannot fill {k} folds",
            sorted.len()
        )));
    }
    let assignment = match scheme {
        Scheme::DrugBlind | Scheme::CellBlind | Scheme::Mixed => {
            let mut rng = derive_rng(seed, &["folds", scheme.name()]);
            let mut shuffled = sorted;
            shuffled.shuffle(&mut rng);
            shuffled
                .into_iter()
                .enumerate()
                .map(|(i, id)| (id, i % k))
                .collect()
        }
        Scheme::Scaffold => {
            let map = scaffold.ok_or_else(|| {
                Error::usage("make_folds: scaffold scheme requires a scaffold map")
            })?;
            // Entities without a scaffold label become singleton groups.
            let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for id in &sorted {
                let group = match map.scaffold_of(id) {
                    Some(s) => s.to_owned(),
                    None => format!("_singleton:{id}"),
                };
                groups.entry(group).or_default().push(id.clone());
            }
            if groups.len() < k {
                return Err(Error::data(format!(
                    "make_folds: {} scaffold groups cannot fill {k} folds",
                    groups.len()
                )));
            }
            let mut ordered: Vec<(String, Vec<String>)> = groups.into_iter().collect();
            // Descending size; scaffold id breaks ties deterministically.
            ordered.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
            let mut loads = vec![0usize; k];
            let mut assignment = BTreeMap::new();
            for (_, members) in ordered {
                let fold = loads
                    .iter()
                    .enumerate()
                    .min_by_key(|(i, load)| (**load, *i))
                    .map(|(i, _)| i)
                    .expect("k >= 2");
                loads[fold] += members.len();
                for id in members {
                    assignment.insert(id, fold);
                }
            }
            assignment
        }
        Scheme::WithinMoaLoo => unreachable!("handled above"),
    };
    Ok(FoldSpec {
        scheme,
        k,
        seed,
        assignment,
    })
}

/// One PCA block of the cell-feature pipeline: columns whose name starts
/// with `prefix` are reduced to `dim` components (an empty prefix matches
/// every remaining column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaGroupSpec {
    pub prefix: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellPipeline {
    /// Use the feature matrix as is.
    Raw,
    /// PCA per column group; unclaimed columns pass through.
    Pca(Vec<PcaGroupSpec>),
}

impl Default for CellPipeline {
    fn default() -> Self {
        CellPipeline::Raw
    }
}

/// A fitted cell pipeline: group models plus the passthrough column set.
struct FittedPipeline {
    groups: Vec<(PcaGroupSpec, PcaModel)>,
    passthrough: Vec<String>,
}

fn fit_pipeline(pipeline: &CellPipeline, features: &FeatureMatrix) -> Result<FittedPipeline> {
    match pipeline {
        CellPipeline::Raw => Ok(FittedPipeline {
            groups: Vec::new(),
            passthrough: features.feature_names().to_vec(),
        }),
        CellPipeline::Pca(specs) => {
            let mut claimed: BTreeSet<String> = BTreeSet::new();
            let mut groups = Vec::new();
            for spec in specs {
                let members: Vec<String> = features
                    .feature_names()
                    .iter()
                    .filter(|n| !claimed.contains(*n) && n.starts_with(&spec.prefix))
                    .cloned()
                    .collect();
                if members.is_empty() {
                    return Err(Error::usage(format!(
                        "cell pipeline: no feature matches prefix `{}`",
                        spec.prefix
                    )));
                }
                claimed.extend(members.iter().cloned());
                let sub = features.select_features(|n| members.iter().any(|m| m == n));
                let model = pca_fit(&sub, spec.dim)?;
                groups.push((spec.clone(), model));
            }
            let passthrough = features
                .feature_names()
                .iter()
                .filter(|n| !claimed.contains(*n))
                .cloned()
                .collect();
            Ok(FittedPipeline { groups, passthrough })
        }
    }
}

/// Transformed per-cell rows plus the produced feature names.
fn apply_pipeline(
    fitted: &FittedPipeline,
    features: &FeatureMatrix,
) -> Result<(BTreeMap<String, Vec<f64>>, Vec<String>)> {
    let mut names = Vec::new();
    let mut rows: BTreeMap<String, Vec<f64>> = features
        .entity_ids()
        .iter()
        .map(|id| (id.clone(), Vec::new()))
        .collect();
    for (spec, model) in &fitted.groups {
        let sub = features.select_features(|n| model.feature_names.iter().any(|m| m == n));
        let transformed = pca_transform(model, &sub)?;
        let label = if spec.prefix.is_empty() {
            String::new()
        } else {
            format!("{}_", spec.prefix.trim_end_matches('_'))
        };
        for pc in transformed.feature_names() {
            names.push(format!("{label}{pc}"));
        }
        for (i, id) in transformed.entity_ids().iter().enumerate() {
            rows.get_mut(id)
                .expect("same entity set")
                .extend_from_slice(transformed.row(i));
        }
    }
    if !fitted.passthrough.is_empty() {
        let sub = features.select_features(|n| fitted.passthrough.iter().any(|m| m == n));
        names.extend(sub.feature_names().iter().cloned());
        for (i, id) in sub.entity_ids().iter().enumerate() {
            rows.get_mut(id)
                .expect("same entity set")
                .extend_from_slice(sub.row(i));
        }
    }
    Ok((rows, names))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DrugFeatureMode {
    /// Cell features only.
    None,
    /// Per-drug rows from the dataset's drug feature matrix; uncovered drugs
    /// are dropped from training and evaluation with a count.
    Matrix,
    /// One-hot MoA class label.
    MoaOneHot,
    /// A fixed random vector per drug (dimensionality control).
    RandomVector { dim: usize, seed: u64 },
}

impl Default for DrugFeatureMode {
    fn default() -> Self {
        DrugFeatureMode::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    Raw,
    ZscorePerDrug,
}

impl Default for TargetMode {
    fn default() -> Self {
        TargetMode::Raw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightingMode {
    Uniform,
    /// Training records of drugs in `class` weighted by `weight`, others 1.
    MoaWeight { class: String, weight: f64 },
}

impl Default for WeightingMode {
    fn default() -> Self {
        WeightingMode::Uniform
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub scheme: Scheme,
    pub k: usize,
    pub seed: u64,
    pub cell_pipeline: CellPipeline,
    pub drug_features: DrugFeatureMode,
    pub target_mode: TargetMode,
    pub weighting: WeightingMode,
    pub alpha: f64,
    pub min_obs: usize,
    pub zero_variance_policy: ZeroVariancePolicy,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            scheme: Scheme::DrugBlind,
            k: 5,
            seed: 42,
            cell_pipeline: CellPipeline::Raw,
            drug_features: DrugFeatureMode::None,
            target_mode: TargetMode::Raw,
            weighting: WeightingMode::Uniform,
            alpha: 1.0,
            min_obs: DEFAULT_MIN_OBS,
            zero_variance_policy: ZeroVariancePolicy::Zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub pooled: MetricReport,
    pub decomposition: Option<DecompositionReport>,
    /// Per-fold reports; `None` when a fold had no evaluable drug.
    pub per_fold: Vec<Option<MetricReport>>,
    pub config: CvConfig,
    pub n_folds: usize,
    /// Drugs dropped (train and eval) because the drug feature matrix does
    /// not cover them.
    pub dropped_drugs_missing_features: usize,
    /// Drugs without a MoA label under one-hot or weighted modes.
    pub moa_uncovered_drugs: usize,
    /// Training drugs passed through centered-only by target z-scoring.
    pub zscore_degenerate_drugs: usize,
    /// Global r of the pooled predictions against per-drug z-scored truth
    /// (the collapse view); populated for z-scored targets.
    pub global_r_zscored_truth: Option<f64>,
    /// Per-fold selected MoA weights (grid-search pathway only).
    pub selected_weights: Option<Vec<f64>>,
}

/// Per-drug feature vectors for the configured mode.
enum DrugFeatures<'a> {
    None,
    Matrix(&'a FeatureMatrix),
    OneHot {
        moa: &'a MoaMap,
        classes: Vec<String>,
    },
    Random {
        dim: usize,
        seed: u64,
        cache: BTreeMap<String, Vec<f64>>,
    },
}

impl<'a> DrugFeatures<'a> {
    fn build(dataset: &'a AlignedDataset, mode: &DrugFeatureMode) -> Result<Self> {
        Ok(match mode {
            DrugFeatureMode::None => DrugFeatures::None,
            DrugFeatureMode::Matrix => {
                let matrix = dataset.drug_features.as_ref().ok_or_else(|| {
                    Error::usage("drug feature mode `matrix` requires a drug feature matrix")
                })?;
                DrugFeatures::Matrix(matrix)
            }
            DrugFeatureMode::MoaOneHot => {
                let moa = dataset
                    .moa
                    .as_ref()
                    .ok_or_else(|| Error::usage("MoA one-hot requires a MoA map"))?;
                DrugFeatures::OneHot {
                    moa,
                    classes: moa.classes().to_vec(),
                }
            }
            DrugFeatureMode::RandomVector { dim, seed } => {
                if *dim == 0 {
                    return Err(Error::usage("random drug vector dim must be >= 1"));
                }
                let mut cache = BTreeMap::new();
                for drug in dataset.response.drugs() {
                    let mut rng = derive_rng(*seed, &["drug-random-vector", drug]);
                    let normal =
                        rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
                    let v: Vec<f64> = (0..*dim)
                        .map(|_| rand_distr::Distribution::sample(&normal, &mut rng))
                        .collect();
                    cache.insert(drug.to_owned(), v);
                }
                DrugFeatures::Random {
                    dim: *dim,
                    seed: *seed,
                    cache,
                }
            }
        })
    }

    fn names(&self) -> Vec<String> {
        match self {
            DrugFeatures::None => Vec::new(),
            DrugFeatures::Matrix(m) => m
                .feature_names()
                .iter()
                .map(|n| format!("drug_{n}"))
                .collect(),
            DrugFeatures::OneHot { classes, .. } => classes
                .iter()
                .map(|c| format!("moa_is_{c}"))
                .collect(),
            DrugFeatures::Random { dim, .. } => {
                (0..*dim).map(|i| format!("rvec{i}")).collect()
            }
        }
    }

    /// `None` means the drug is uncovered and must be dropped (matrix mode).
    fn vector(&self, drug: &str) -> Option<Vec<f64>> {
        match self {
            DrugFeatures::None => Some(Vec::new()),
            DrugFeatures::Matrix(m) => m.row_of(drug).map(|r| r.to_vec()),
            DrugFeatures::OneHot { moa, classes } => {
                let mut v = vec![0.0; classes.len()];
                if let Some(class) = moa.class_of(drug) {
                    if let Ok(i) = classes.binary_search_by(|c| c.as_str().cmp(class)) {
                        v[i] = 1.0;
                    }
                }
                Some(v)
            }
            DrugFeatures::Random { cache, dim, seed } => Some(
                cache.get(drug).cloned().unwrap_or_else(|| {
                    let mut rng = derive_rng(*seed, &["drug-random-vector", drug]);
                    let normal =
                        rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
                    (0..*dim)
                        .map(|_| rand_distr::Distribution::sample(&normal, &mut rng))
                        .collect()
                }),
            ),
        }
    }
}

struct RecordRef<'a> {
    drug: &'a str,
    cell: &'a str,
    value: f64,
}

/// Z-score training targets per drug. Returns transformed values aligned
/// with `records` and the count of degenerate (centered-only) drugs.
fn zscore_training_targets(records: &[RecordRef<'_>]) -> (Vec<f64>, usize) {
    let mut stats: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let slot = stats.entry(r.drug).or_insert((0.0, 0.0, 0));
        slot.0 += r.value;
        slot.2 += 1;
    }
    for (drug, slot) in stats.iter_mut() {
        slot.0 /= slot.2 as f64;
        let mean = slot.0;
        let var: f64 = records
            .iter()
            .filter(|r| r.drug == *drug)
            .map(|r| (r.value - mean) * (r.value - mean))
            .sum::<f64>()
            / slot.2 as f64;
        slot.1 = var.sqrt();
    }
    let degenerate = stats
        .values()
        .filter(|(_, sd, n)| *n < 2 || *sd <= 0.0)
        .count();
    let targets = records
        .iter()
        .map(|r| {
            let (mean, sd, n) = stats[r.drug];
            let centered = r.value - mean;
            if n < 2 || sd <= 0.0 {
                centered
            } else {
                centered / sd
            }
        })
        .collect();
    (targets, degenerate)
}

/// Fit ridge on training records and predict the test records.
fn fit_predict(
    train: &[RecordRef<'_>],
    test: &[RecordRef<'_>],
    cell_rows: &BTreeMap<String, Vec<f64>>,
    drug_features: &DrugFeatures<'_>,
    feature_names: &[String],
    config: &CvConfig,
    moa: Option<&MoaMap>,
) -> Result<(PredictionTable, usize)> {
    if train.is_empty() {
        return Err(Error::data("empty training fold after drops"));
    }
    let p = feature_names.len();
    let mut rows: Vec<f64> = Vec::with_capacity(train.len() * p);
    let mut kept_train: Vec<&RecordRef<'_>> = Vec::with_capacity(train.len());
    for r in train {
        let Some(drug_vec) = drug_features.vector(r.drug) else {
            continue;
        };
        let cell_vec = cell_rows
            .get(r.cell)
            .ok_or_else(|| Error::data(format!("cell `{}` missing from features", r.cell)))?;
        rows.extend_from_slice(cell_vec);
        rows.extend_from_slice(&drug_vec);
        kept_train.push(r);
    }
    if kept_train.is_empty() {
        return Err(Error::data("empty training fold after drops"));
    }
    let x = DMatrix::from_row_slice(kept_train.len(), p, &rows);

    let train_refs: Vec<RecordRef<'_>> = kept_train
        .iter()
        .map(|r| RecordRef {
            drug: r.drug,
            cell: r.cell,
            value: r.value,
        })
        .collect();
    let (targets, degenerate) = match config.target_mode {
        TargetMode::Raw => (train_refs.iter().map(|r| r.value).collect::<Vec<f64>>(), 0),
        TargetMode::ZscorePerDrug => zscore_training_targets(&train_refs),
    };

    let weights: Option<Vec<f64>> = match &config.weighting {
        WeightingMode::Uniform => None,
        WeightingMode::MoaWeight { class, weight } => {
            let moa = moa.ok_or_else(|| Error::usage("MoA weighting requires a MoA map"))?;
            Some(
                kept_train
                    .iter()
                    .map(|r| {
                        if moa.class_of(r.drug) == Some(class.as_str()) {
                            *weight
                        } else {
                            1.0
                        }
                    })
                    .collect(),
            )
        }
    };

    let model = ridge_fit(
        &x,
        &targets,
        config.alpha,
        weights.as_deref(),
        feature_names.to_vec(),
    )?;

    let mut test_rows: Vec<f64> = Vec::new();
    let mut kept_test: Vec<&RecordRef<'_>> = Vec::new();
    for r in test {
        let Some(drug_vec) = drug_features.vector(r.drug) else {
            continue;
        };
        let cell_vec = cell_rows
            .get(r.cell)
            .ok_or_else(|| Error::data(format!("cell `{}` missing from features", r.cell)))?;
        test_rows.extend_from_slice(cell_vec);
        test_rows.extend_from_slice(&drug_vec);
        kept_test.push(r);
    }
    if kept_test.is_empty() {
        return Err(Error::data("no evaluable test records in fold"));
    }
    let xt = DMatrix::from_row_slice(kept_test.len(), p, &test_rows);
    let predicted = ridge_predict(&model, &xt)?;
    let table = PredictionTable::from_records(
        kept_test
            .iter()
            .zip(&predicted)
            .map(|(r, v)| (r.drug.to_owned(), r.cell.to_owned(), *v)),
    )?;
    Ok((table, degenerate))
}

/// Records split for one fold.
struct FoldSplit<'a> {
    train: Vec<RecordRef<'a>>,
    test: Vec<RecordRef<'a>>,
}

fn split_records<'a>(
    response: &'a ResponseTable,
    fold_spec: &FoldSpec,
    fold: usize,
) -> FoldSplit<'a> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in response.records() {
        let entity = match fold_spec.scheme {
            Scheme::DrugBlind | Scheme::Scaffold | Scheme::WithinMoaLoo => r.drug_id.as_str(),
            Scheme::CellBlind => r.cell_id.as_str(),
            Scheme::Mixed => {
                // Record-level key; see `record_key`.
                return_record_key_split(&mut train, &mut test, fold_spec, fold, r);
                continue;
            }
        };
        let record = RecordRef {
            drug: &r.drug_id,
            cell: &r.cell_id,
            value: r.value,
        };
        if fold_spec.assignment.get(entity) == Some(&fold) {
            test.push(record);
        } else {
            train.push(record);
        }
    }
    // Structural leakage assertion: no test entity's records in training.
    match fold_spec.scheme {
        Scheme::DrugBlind | Scheme::Scaffold | Scheme::WithinMoaLoo => {
            let test_drugs: BTreeSet<&str> = test.iter().map(|r| r.drug).collect();
            assert!(
                train.iter().all(|r| !test_drugs.contains(r.drug)),
                "fold leakage: test drug found in training records"
            );
        }
        Scheme::CellBlind => {
            let test_cells: BTreeSet<&str> = test.iter().map(|r| r.cell).collect();
            assert!(
                train.iter().all(|r| !test_cells.contains(r.cell)),
                "fold leakage: test cell found in training records"
            );
        }
        Scheme::Mixed => {}
    }
    FoldSplit { train, test }
}

pub(crate) fn record_key(drug: &str, cell: &str) -> String {
    format!("{drug}\u{1f}{cell}")
}

fn return_record_key_split<'a>(
    train: &mut Vec<RecordRef<'a>>,
    test: &mut Vec<RecordRef<'a>>,
    fold_spec: &FoldSpec,
    fold: usize,
    r: &'a crate::dataio::ResponseRecord,
) {
    let key = record_key(&r.drug_id, &r.cell_id);
    let record = RecordRef {
        drug: &r.drug_id,
        cell: &r.cell_id,
        value: r.value,
    };
    if fold_spec.assignment.get(&key) == Some(&fold) {
        test.push(record);
    } else {
        train.push(record);
    }
}

fn fold_entities(dataset: &AlignedDataset, scheme: Scheme) -> Vec<String> {
    match scheme {
        Scheme::DrugBlind | Scheme::Scaffold | Scheme::WithinMoaLoo => {
            dataset.response.drugs().map(str::to_owned).collect()
        }
        Scheme::CellBlind => dataset
            .response
            .cell_ids()
            .into_iter()
            .map(str::to_owned)
            .collect(),
        Scheme::Mixed => dataset
            .response
            .records()
            .iter()
            .map(|r| record_key(&r.drug_id, &r.cell_id))
            .collect(),
    }
}

/// Count of response drugs not covered by the drug feature matrix.
fn drugs_missing_features(dataset: &AlignedDataset, mode: &DrugFeatureMode) -> usize {
    match mode {
        DrugFeatureMode::Matrix => match &dataset.drug_features {
            Some(m) => dataset
                .response
                .drugs()
                .filter(|d| !m.contains(d))
                .count(),
            None => 0,
        },
        _ => 0,
    }
}

fn moa_uncovered(dataset: &AlignedDataset, config: &CvConfig) -> usize {
    let needs_moa = matches!(config.drug_features, DrugFeatureMode::MoaOneHot)
        || matches!(config.weighting, WeightingMode::MoaWeight { .. });
    if !needs_moa {
        return 0;
    }
    match &dataset.moa {
        Some(moa) => dataset
            .response
            .drugs()
            .filter(|d| moa.class_of(d).is_none())
            .count(),
        None => 0,
    }
}

/// Pooled evaluation of fold predictions against raw truth.
fn pooled_result(
    dataset: &AlignedDataset,
    fold_tables: Vec<(PredictionTable, usize)>,
    per_fold: Vec<Option<MetricReport>>,
    config: &CvConfig,
    selected_weights: Option<Vec<f64>>,
) -> Result<CvResult> {
    let degenerate: usize = fold_tables.iter().map(|(_, d)| *d).sum();
    let pooled_table = PredictionTable::merge(fold_tables.into_iter().map(|(t, _)| t))?;
    let pooled = per_drug_r(
        &pooled_table,
        &dataset.response,
        config.min_obs,
        config.zero_variance_policy,
    )?;
    let decomposition = decompose_global_r(&pooled_table, &dataset.response).ok();
    let global_r_zscored_truth = if config.target_mode == TargetMode::ZscorePerDrug {
        let (z_truth, _) = zscore_per_drug(&dataset.response)?;
        global_r(&pooled_table, &z_truth).ok().flatten()
    } else {
        None
    };
    let n_folds = per_fold.len();
    Ok(CvResult {
        pooled,
        decomposition,
        per_fold,
        config: config.clone(),
        n_folds,
        dropped_drugs_missing_features: drugs_missing_features(dataset, &config.drug_features),
        moa_uncovered_drugs: moa_uncovered(dataset, config),
        zscore_degenerate_drugs: degenerate,
        global_r_zscored_truth,
        selected_weights,
    })
}

/// Run k-fold cross-validation with the configured pipeline.
pub fn run_cv(dataset: &AlignedDataset, config: &CvConfig) -> Result<CvResult> {
    run_cv_with_predictions(dataset, config).map(|(result, _)| result)
}

/// `run_cv` plus the pooled prediction table (for downstream comparisons).
pub fn run_cv_with_predictions(
    dataset: &AlignedDataset,
    config: &CvConfig,
) -> Result<(CvResult, PredictionTable)> {
    let entities = fold_entities(dataset, config.scheme);
    let fold_spec = make_folds(
        &entities,
        config.scheme,
        config.k,
        config.seed,
        dataset.scaffold.as_ref(),
    )?;
    let drug_features = DrugFeatures::build(dataset, &config.drug_features)?;

    // Drug-blind style schemes keep every cell in training, so the cell
    // pipeline is fitted once on all cells; cell-blind refits per fold on
    // training cells only to avoid cell-feature leakage.
    let shared_pipeline = if config.scheme == Scheme::CellBlind {
        None
    } else {
        let fitted = fit_pipeline(&config.cell_pipeline, &dataset.cell_features)?;
        Some(apply_pipeline(&fitted, &dataset.cell_features)?)
    };

    let folds: Vec<usize> = (0..fold_spec.k).collect();
    let outcomes: Vec<Result<(PredictionTable, usize, Option<MetricReport>)>> = folds
        .par_iter()
        .map(|&fold| {
            let split = split_records(&dataset.response, &fold_spec, fold);
            let (cell_rows, mut names) = match &shared_pipeline {
                Some((rows, names)) => (rows.clone(), names.clone()),
                None => {
                    let train_cells: BTreeSet<&str> =
                        split.train.iter().map(|r| r.cell).collect();
                    let train_features = dataset.cell_features.restrict(&train_cells);
                    let fitted = fit_pipeline(&config.cell_pipeline, &train_features)?;
                    apply_pipeline(&fitted, &dataset.cell_features)?
                }
            };
            names.extend(drug_features.names());
            let (table, degenerate) = fit_predict(
                &split.train,
                &split.test,
                &cell_rows,
                &drug_features,
                &names,
                config,
                dataset.moa.as_ref(),
            )?;
            let fold_report = per_drug_r(
                &table,
                &dataset.response,
                config.min_obs,
                config.zero_variance_policy,
            )
            .ok();
            Ok((table, degenerate, fold_report))
        })
        .collect();

    let mut fold_tables = Vec::with_capacity(fold_spec.k);
    let mut per_fold = Vec::with_capacity(fold_spec.k);
    for outcome in outcomes {
        let (table, degenerate, report) = outcome?;
        fold_tables.push((table, degenerate));
        per_fold.push(report);
    }
    let pooled_table =
        PredictionTable::merge(fold_tables.iter().map(|(t, _)| t.clone()))?;
    let result = pooled_result(dataset, fold_tables, per_fold, config, None)?;
    Ok((result, pooled_table))
}

/// Within-MoA leave-one-drug-out report for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WithinMoaReport {
    pub class_label: String,
    pub pooled: MetricReport,
    pub n_class_drugs: usize,
}

/// Leave-one-drug-out within a MoA class: each class drug is predicted by a
/// ridge model trained on the remaining same-class drugs only.
pub fn run_within_moa_loo(
    dataset: &AlignedDataset,
    moa: &MoaMap,
    class_label: &str,
    alpha: f64,
    config: &CvConfig,
) -> Result<WithinMoaReport> {
    let class_drugs: Vec<String> = moa
        .drugs_in_class(class_label)
        .into_iter()
        .filter(|d| dataset.response.contains_drug(d))
        .map(str::to_owned)
        .collect();
    if class_drugs.len() < 2 {
        return Err(Error::data(format!(
            "within-MoA LOO needs >= 2 drugs in class `{class_label}`, found {}",
            class_drugs.len()
        )));
    }
    let fitted = fit_pipeline(&config.cell_pipeline, &dataset.cell_features)?;
    let (cell_rows, names) = apply_pipeline(&fitted, &dataset.cell_features)?;
    let drug_features = DrugFeatures::None;
    let loo_config = CvConfig {
        alpha,
        weighting: WeightingMode::Uniform,
        drug_features: DrugFeatureMode::None,
        ..config.clone()
    };

    let outcomes: Vec<Result<PredictionTable>> = class_drugs
        .par_iter()
        .map(|held_out| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for drug in &class_drugs {
                for r in dataset.response.records_of(drug) {
                    let record = RecordRef {
                        drug: &r.drug_id,
                        cell: &r.cell_id,
                        value: r.value,
                    };
                    if drug == held_out {
                        test.push(record);
                    } else {
                        train.push(record);
                    }
                }
            }
            let (table, _) = fit_predict(
                &train,
                &test,
                &cell_rows,
                &drug_features,
                &names,
                &loo_config,
                Some(moa),
            )?;
            Ok(table)
        })
        .collect();

    let mut tables = Vec::new();
    for outcome in outcomes {
        tables.push(outcome?);
    }
    let pooled_table = PredictionTable::merge(tables)?;
    let pooled = per_drug_r(
        &pooled_table,
        &dataset.response,
        config.min_obs,
        config.zero_variance_policy,
    )?;
    Ok(WithinMoaReport {
        class_label: class_label.to_owned(),
        pooled,
        n_class_drugs: class_drugs.len(),
    })
}

/// MoA-weighted CV: within each outer fold an inner 80/20 split over
/// training drugs selects the class weight from `weight_grid` maximizing
/// inner per-drug r for the target class; the final fold model uses the
/// selected weight.
pub fn run_moa_weighted(
    dataset: &AlignedDataset,
    moa: &MoaMap,
    target_class: &str,
    weight_grid: &[f64],
    config: &CvConfig,
) -> Result<CvResult> {
    if weight_grid.is_empty() {
        return Err(Error::usage("weight grid must not be empty"));
    }
    let mut grid: Vec<f64> = weight_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    if grid.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::usage("weights must be positive"));
    }

    let entities = fold_entities(dataset, Scheme::DrugBlind);
    let fold_spec = make_folds(
        &entities,
        Scheme::DrugBlind,
        config.k,
        config.seed,
        None,
    )?;
    let drug_features = DrugFeatures::build(dataset, &config.drug_features)?;
    let fitted = fit_pipeline(&config.cell_pipeline, &dataset.cell_features)?;
    let (cell_rows, mut names) = apply_pipeline(&fitted, &dataset.cell_features)?;
    names.extend(drug_features.names());

    let folds: Vec<usize> = (0..fold_spec.k).collect();
    let outcomes: Vec<Result<(PredictionTable, usize, Option<MetricReport>, f64)>> = folds
        .par_iter()
        .map(|&fold| {
            let split = split_records(&dataset.response, &fold_spec, fold);
            // Inner 80/20 split over training drugs, once per outer fold.
            let mut train_drugs: Vec<&str> = split
                .train
                .iter()
                .map(|r| r.drug)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let mut inner_rng = derive_rng(
                config.seed,
                &["moa-weighted-inner", &fold.to_string()],
            );
            train_drugs.shuffle(&mut inner_rng);
            let n_val = (train_drugs.len() / 5).max(1);
            let val_drugs: BTreeSet<&str> = train_drugs[..n_val].iter().copied().collect();

            let inner_train: Vec<RecordRef<'_>> = split
                .train
                .iter()
                .filter(|r| !val_drugs.contains(r.drug))
                .map(|r| RecordRef {
                    drug: r.drug,
                    cell: r.cell,
                    value: r.value,
                })
                .collect();
            let inner_val: Vec<RecordRef<'_>> = split
                .train
                .iter()
                .filter(|r| val_drugs.contains(r.drug))
                .map(|r| RecordRef {
                    drug: r.drug,
                    cell: r.cell,
                    value: r.value,
                })
                .collect();

            let mut best: Option<(f64, f64)> = None; // (weight, score)
            for &w in &grid {
                let inner_config = CvConfig {
                    weighting: WeightingMode::MoaWeight {
                        class: target_class.to_owned(),
                        weight: w,
                    },
                    ..config.clone()
                };
                let (inner_pred, _) = fit_predict(
                    &inner_train,
                    &inner_val,
                    &cell_rows,
                    &drug_features,
                    &names,
                    &inner_config,
                    Some(moa),
                )?;
                let report = per_drug_r(
                    &inner_pred,
                    &dataset.response,
                    // Inner folds are small; accept any 2+-cell drug.
                    2.min(config.min_obs),
                    config.zero_variance_policy,
                )?;
                // Score on target-class drugs when present, else overall.
                let class_values: Vec<f64> = report
                    .per_drug_values
                    .iter()
                    .filter(|(d, _)| moa.class_of(d) == Some(target_class))
                    .map(|(_, v)| *v)
                    .collect();
                let score = if class_values.is_empty() {
                    report.per_drug_r_mean
                } else {
                    class_values.iter().sum::<f64>() / class_values.len() as f64
                };
                // Strictly-greater keeps the smallest weight on ties.
                if best.map_or(true, |(_, s)| score > s) {
                    best = Some((w, score));
                }
            }
            let (selected, _) = best.expect("grid is nonempty");

            let final_config = CvConfig {
                weighting: WeightingMode::MoaWeight {
                    class: target_class.to_owned(),
                    weight: selected,
                },
                ..config.clone()
            };
            let (table, degenerate) = fit_predict(
                &split.train,
                &split.test,
                &cell_rows,
                &drug_features,
                &names,
                &final_config,
                Some(moa),
            )?;
            let fold_report = per_drug_r(
                &table,
                &dataset.response,
                config.min_obs,
                config.zero_variance_policy,
            )
            .ok();
            Ok((table, degenerate, fold_report, selected))
        })
        .collect();

    let mut fold_tables = Vec::new();
    let mut per_fold = Vec::new();
    let mut selected = Vec::new();
    for outcome in outcomes {
        let (table, degenerate, report, weight) = outcome?;
        fold_tables.push((table, degenerate));
        per_fold.push(report);
        selected.push(weight);
    }
    pooled_result(dataset, fold_tables, per_fold, config, Some(selected))
}

/// Shuffle drug -> class assignments with a seeded permutation of the drug
/// list against the fixed multiset of labels; class sizes are preserved
/// exactly.
pub fn permute_moa(moa: &MoaMap, seed: u64) -> MoaMap {
    let drugs: Vec<&str> = moa.iter().map(|(d, _)| d).collect();
    let mut labels: Vec<&str> = moa.iter().map(|(_, c)| c).collect();
    let mut rng = derive_rng(seed, &["permute-moa"]);
    labels.shuffle(&mut rng);
    MoaMap::from_pairs(
        drugs
            .iter()
            .zip(&labels)
            .map(|(d, c)| (d.to_string(), c.to_string())),
    )
    .expect("permutation preserves non-emptiness")
}

/// Seed for a fold-scoped RNG stream (exposed for pipelines that add
/// their own per-fold randomness).
pub fn fold_stream_seed(seed: u64, scheme: Scheme, fold: usize) -> u64 {
    derive_seed(seed, &["fold-stream", scheme.name(), &fold.to_string()])
}
