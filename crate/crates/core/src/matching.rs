//! K-shot response-profile matching: correlate pilot observations of a new
//! drug against training-drug profiles, transfer the top-N profiles, blend
//! with the cell-mean prior, sweep K, and run the permuted-pairing control.
//!
//! The matching path never sees eval-cell truth for the test drug: a
//! `KShotTask` carries observed values for the observed cells only, and
//! bare cell ids for the evaluation set.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::ResponseTable;
use crate::error::{Error, Result};
use crate::metrics::{pearson_unchecked, PredictionTable};
use crate::models::{cell_mean_predictor, Predictor};
use crate::rng::derive_rng;

pub const DEFAULT_TOP_N: usize = 5;
pub const DEFAULT_MIN_OVERLAP: usize = 2;
pub const DEFAULT_TRIALS_PER_DRUG: usize = 5;
pub const DEFAULT_INNER_TRIALS: usize = 3;

/// Default blend-weight grid: 0.0, 0.1, ..., 1.0.
pub fn default_weight_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Default K sweep.
pub fn default_k_list() -> Vec<usize> {
    vec![0, 1, 3, 5, 10, 20, 50]
}

/// A sampled pilot-observation task for one test drug.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotTask {
    pub test_drug: String,
    pub observed_cells: Vec<String>,
    pub observed_values: Vec<f64>,
    /// Cells to predict; disjoint from the observed cells.
    pub eval_cells: Vec<String>,
}

impl KShotTask {
    pub fn new(
        test_drug: String,
        observed_cells: Vec<String>,
        observed_values: Vec<f64>,
        eval_cells: Vec<String>,
    ) -> Result<Self> {
        if observed_cells.len() != observed_values.len() {
            return Err(Error::usage("kshot task: observed cells/values mismatch"));
        }
        let observed: BTreeSet<&str> = observed_cells.iter().map(|s| s.as_str()).collect();
        if eval_cells.iter().any(|c| observed.contains(c.as_str())) {
            return Err(Error::usage("kshot task: eval cells overlap observed cells"));
        }
        Ok(KShotTask {
            test_drug,
            observed_cells,
            observed_values,
            eval_cells,
        })
    }

    pub fn k(&self) -> usize {
        self.observed_cells.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub train_drug_id: String,
    pub correlation: f64,
    /// `max(correlation, 0)`.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    /// Top-N candidates by |correlation|, drug id breaking ties.
    pub matched: Vec<MatchEntry>,
    pub n: usize,
    /// No candidate had positive weight: the prediction is the prior.
    pub empty: bool,
    /// Eval cells predicted by prior fallback (no covering matched drug).
    pub prior_fallback_cells: usize,
}

/// Match a pilot task against training-drug profiles and predict the eval
/// cells as a weighted average of the matched profiles. Eval cells with no
/// coverage, and the all-weights-zero case, fall back to the cell-mean
/// prior and are flagged.
pub fn match_predict(
    train: &ResponseTable,
    task: &KShotTask,
    top_n: usize,
    min_overlap: usize,
) -> Result<(PredictionTable, MatchSet)> {
    if task.k() < min_overlap {
        return Err(Error::usage(format!(
            "kshot task has K = {} observations, below min_overlap = {min_overlap}",
            task.k()
        )));
    }
    if task.eval_cells.is_empty() {
        return Err(Error::usage("kshot task has no eval cells"));
    }
    let prior = cell_mean_predictor(train);

    // Correlate the K-vector against each training drug on shared cells.
    let mut candidates: Vec<MatchEntry> = Vec::new();
    for (drug, _) in train.per_drug() {
        if drug == task.test_drug {
            continue;
        }
        let mut pilot = Vec::new();
        let mut profile = Vec::new();
        for (cell, value) in task.observed_cells.iter().zip(&task.observed_values) {
            if let Some(train_value) = train.get(drug, cell) {
                pilot.push(*value);
                profile.push(train_value);
            }
        }
        if pilot.len() < min_overlap {
            continue;
        }
        // Null correlations (zero variance on either side) are excluded.
        if let Some(correlation) = pearson_unchecked(&pilot, &profile) {
            candidates.push(MatchEntry {
                train_drug_id: drug.to_owned(),
                correlation,
                weight: correlation.max(0.0),
            });
        }
    }
    candidates.sort_by(|a, b| {
        b.correlation
            .abs()
            .partial_cmp(&a.correlation.abs())
            .expect("finite correlations")
            .then_with(|| a.train_drug_id.cmp(&b.train_drug_id))
    });
    candidates.truncate(top_n);
    let empty = candidates.iter().all(|m| m.weight <= 0.0);

    let mut fallback_cells = 0usize;
    let mut records = Vec::with_capacity(task.eval_cells.len());
    for cell in &task.eval_cells {
        let mut numerator = 0.0;
        let mut denominator = 0.0;
        if !empty {
            for entry in &candidates {
                if entry.weight <= 0.0 {
                    continue;
                }
                if let Some(value) = train.get(&entry.train_drug_id, cell) {
                    numerator += entry.weight * value;
                    denominator += entry.weight;
                }
            }
        }
        let value = if denominator > 0.0 {
            numerator / denominator
        } else {
            fallback_cells += 1;
            prior.predict(&task.test_drug, cell).0
        };
        records.push((task.test_drug.clone(), cell.clone(), value));
    }
    let table = PredictionTable::from_records(records)?;
    let match_set = MatchSet {
        matched: candidates,
        n: top_n,
        empty,
        prior_fallback_cells: fallback_cells,
    };
    Ok((table, match_set))
}

/// Standardize each drug's predictions to zero mean and unit (population)
/// sd; degenerate blocks pass through centered.
fn standardize_per_drug(table: &PredictionTable) -> PredictionTable {
    let mut records = Vec::with_capacity(table.len());
    for (drug, block) in table.per_drug() {
        let n = block.len() as f64;
        let mean = block.iter().map(|r| r.predicted).sum::<f64>() / n;
        let var = block
            .iter()
            .map(|r| (r.predicted - mean) * (r.predicted - mean))
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        for r in block {
            let centered = r.predicted - mean;
            let value = if sd > 0.0 { centered / sd } else { centered };
            records.push((drug.to_owned(), r.cell_id.clone(), value));
        }
    }
    PredictionTable::from_records(records).expect("standardization preserves keys")
}

/// Convex combination of the standardized prior and matched predictions:
/// `(1-w) * prior_std + w * matched_std`, per drug.
pub fn blend(
    prior: &PredictionTable,
    matched: &PredictionTable,
    w: f64,
) -> Result<PredictionTable> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::usage(format!("blend weight {w} outside [0, 1]")));
    }
    let prior_keys: Vec<(&str, &str)> = prior
        .records()
        .iter()
        .map(|r| (r.drug_id.as_str(), r.cell_id.as_str()))
        .collect();
    let matched_keys: Vec<(&str, &str)> = matched
        .records()
        .iter()
        .map(|r| (r.drug_id.as_str(), r.cell_id.as_str()))
        .collect();
    if prior_keys != matched_keys {
        return Err(Error::usage("blend: prior and matched key sets differ"));
    }
    let prior_std = standardize_per_drug(prior);
    let matched_std = standardize_per_drug(matched);
    let records = prior_std
        .records()
        .iter()
        .zip(matched_std.records())
        .map(|(p, m)| {
            (
                p.drug_id.clone(),
                p.cell_id.clone(),
                (1.0 - w) * p.predicted + w * m.predicted,
            )
        })
        .collect::<Vec<_>>();
    PredictionTable::from_records(records)
}

/// Correlation of predictions with truth on one drug's eval cells, with the
/// zero-variance conventions of `per_drug_r` (constant predictions score 0,
/// constant truth is `None` = skip).
fn task_r(pred: &PredictionTable, truth: &ResponseTable, drug: &str) -> Option<f64> {
    let block = pred.records_of(drug);
    let mut yhat = Vec::with_capacity(block.len());
    let mut y = Vec::with_capacity(block.len());
    for r in block {
        let value = truth.get(drug, &r.cell_id)?;
        yhat.push(r.predicted);
        y.push(value);
    }
    if y.len() < 2 {
        return None;
    }
    let mean_y = y.iter().sum::<f64>() / y.len() as f64;
    if y.iter().all(|v| *v == mean_y) {
        return None;
    }
    Some(pearson_unchecked(&yhat, &y).unwrap_or(0.0))
}

/// Simulate K-shot tasks on training drugs only (each held out in turn,
/// matched and blended against the rest) and return the grid weight
/// maximizing mean per-drug r; ties resolve to the smaller weight.
#[allow(clippy::too_many_arguments)]
pub fn select_blend_weight(
    train: &ResponseTable,
    k: usize,
    grid: &[f64],
    inner_trials: usize,
    seed: u64,
    top_n: usize,
    min_overlap: usize,
    min_eval: usize,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::usage("blend weight grid must not be empty"));
    }
    let mut grid_sorted = grid.to_vec();
    grid_sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    if train.n_drugs() < 2 {
        return Err(Error::data("weight selection needs at least 2 training drugs"));
    }
    if k < min_overlap {
        // Too few observations to match anything: the prior wins trivially.
        return Ok(grid_sorted[0]);
    }

    let eligible: Vec<&str> = train
        .per_drug()
        .filter(|(_, block)| block.len() >= k + min_eval)
        .map(|(drug, _)| drug)
        .collect();
    if eligible.is_empty() {
        return Err(Error::data(format!(
            "no training drug has {k}+{min_eval} cells for weight selection"
        )));
    }

    let trials = inner_trials.max(1);
    // The prior is the training fold's own K = 0 baseline (cell means over
    // all training drugs, including the drug currently held out of the
    // matching step): it is what a user of the fold would deploy, and it
    // makes the small-K collapse to the prior systematic.
    let prior = cell_mean_predictor(train);
    let scores: Vec<Vec<f64>> = eligible
        .par_iter()
        .map(|drug| {
            let cells: Vec<&str> = train
                .records_of(drug)
                .iter()
                .map(|r| r.cell_id.as_str())
                .collect();
            let mut grid_scores = vec![0.0; grid_sorted.len()];
            let mut grid_counts = vec![0usize; grid_sorted.len()];
            for trial in 0..trials {
                let mut rng = derive_rng(
                    seed,
                    &["select-w", &k.to_string(), drug, &trial.to_string()],
                );
                let mut sampled: Vec<&str> = cells.clone();
                sampled.shuffle(&mut rng);
                let observed: Vec<String> =
                    sampled[..k].iter().map(|c| c.to_string()).collect();
                let mut eval: Vec<String> =
                    sampled[k..].iter().map(|c| c.to_string()).collect();
                eval.sort();
                let observed_values: Vec<f64> = observed
                    .iter()
                    .map(|c| train.get(drug, c).expect("cell of drug"))
                    .collect();
                let task = KShotTask::new(
                    (*drug).to_owned(),
                    observed,
                    observed_values,
                    eval.clone(),
                )
                .expect("disjoint by construction");
                // match_predict skips the task's own drug as a candidate.
                let Ok((matched_pred, _)) =
                    match_predict(train, &task, top_n, min_overlap)
                else {
                    continue;
                };
                let Ok((prior_pred, _)) = prior.predict_keys(
                    eval.iter().map(|c| (*drug, c.as_str())),
                ) else {
                    continue;
                };
                for (i, &w) in grid_sorted.iter().enumerate() {
                    let Ok(blended) = blend(&prior_pred, &matched_pred, w) else {
                        continue;
                    };
                    if let Some(r) = task_r(&blended, train, drug) {
                        grid_scores[i] += r;
                        grid_counts[i] += 1;
                    }
                }
            }
            grid_scores
                .iter()
                .zip(&grid_counts)
                .map(|(s, c)| if *c > 0 { s / *c as f64 } else { f64::NEG_INFINITY })
                .collect()
        })
        .collect();

    let mut best_w = grid_sorted[0];
    let mut best_score = f64::NEG_INFINITY;
    for (i, &w) in grid_sorted.iter().enumerate() {
        let per_drug: Vec<f64> = scores
            .iter()
            .map(|s| s[i])
            .filter(|v| v.is_finite())
            .collect();
        if per_drug.is_empty() {
            continue;
        }
        let score = per_drug.iter().sum::<f64>() / per_drug.len() as f64;
        if score > best_score {
            best_score = score;
            best_w = w;
        }
    }
    Ok(best_w)
}

/// One point of the K sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendPoint {
    pub k: usize,
    /// Grid weight chosen on training drugs; `None` for the K = 0 prior.
    pub selected_w: Option<f64>,
    pub per_drug_r_mean: f64,
    pub per_drug_r_sd: f64,
    pub n_drugs: usize,
    /// Test drugs without enough cells for this K.
    pub n_drugs_skipped: usize,
    /// Eval cells that fell back to the prior, summed over tasks.
    pub prior_fallback_cells: usize,
    /// Tasks whose match set had no positive weight.
    pub empty_match_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendCurve {
    pub points: Vec<BlendPoint>,
    pub trials_per_drug: usize,
    pub top_n: usize,
    pub seed: u64,
}

struct DrugOutcome {
    r: Option<f64>,
    fallback_cells: usize,
    empty_tasks: usize,
}

fn sample_task(
    test: &ResponseTable,
    drug: &str,
    k: usize,
    trial: usize,
    seed: u64,
) -> KShotTask {
    let cells: Vec<&str> = test
        .records_of(drug)
        .iter()
        .map(|r| r.cell_id.as_str())
        .collect();
    let mut rng = derive_rng(seed, &["kshot", drug, &k.to_string(), &trial.to_string()]);
    let mut shuffled = cells.clone();
    shuffled.shuffle(&mut rng);
    let observed: Vec<String> = shuffled[..k].iter().map(|c| c.to_string()).collect();
    let mut eval: Vec<String> = shuffled[k..].iter().map(|c| c.to_string()).collect();
    eval.sort();
    let observed_values: Vec<f64> = observed
        .iter()
        .map(|c| test.get(drug, c).expect("cell of drug"))
        .collect();
    KShotTask::new(drug.to_owned(), observed, observed_values, eval)
        .expect("disjoint by construction")
}

fn prior_point(
    train: &ResponseTable,
    test: &ResponseTable,
    min_obs: usize,
) -> Result<BlendPoint> {
    let prior = cell_mean_predictor(train);
    let mut values = Vec::new();
    let mut skipped = 0usize;
    for (drug, block) in test.per_drug() {
        if block.len() < min_obs {
            skipped += 1;
            continue;
        }
        let (pred, _) = prior.predict_keys(
            block.iter().map(|r| (drug, r.cell_id.as_str())),
        )?;
        match task_r(&pred, test, drug) {
            Some(r) => values.push(r),
            None => skipped += 1,
        }
    }
    if values.is_empty() {
        return Err(Error::data("no eligible drug at K = 0"));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let sd = sample_sd(&values);
    Ok(BlendPoint {
        k: 0,
        selected_w: None,
        per_drug_r_mean: mean,
        per_drug_r_sd: sd,
        n_drugs: values.len(),
        n_drugs_skipped: skipped,
        prior_fallback_cells: 0,
        empty_match_tasks: 0,
    })
}

fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64)
        .sqrt()
}

fn summarize_point(
    k: usize,
    selected_w: Option<f64>,
    outcomes: Vec<DrugOutcome>,
    skipped: usize,
) -> Result<BlendPoint> {
    let values: Vec<f64> = outcomes.iter().filter_map(|o| o.r).collect();
    if values.is_empty() {
        return Err(Error::data(format!("no eligible drug at K = {k}")));
    }
    let extra_skipped = outcomes.iter().filter(|o| o.r.is_none()).count();
    Ok(BlendPoint {
        k,
        selected_w,
        per_drug_r_mean: values.iter().sum::<f64>() / values.len() as f64,
        per_drug_r_sd: sample_sd(&values),
        n_drugs: values.len(),
        n_drugs_skipped: skipped + extra_skipped,
        prior_fallback_cells: outcomes.iter().map(|o| o.fallback_cells).sum(),
        empty_match_tasks: outcomes.iter().map(|o| o.empty_tasks).sum(),
    })
}

/// Sweep K: for each K and eligible test drug, sample observed-cell subsets,
/// match against the training table, blend with the per-K selected weight,
/// and average per-drug r over trials then drugs. K = 0 is the pure
/// cell-mean prior.
#[allow(clippy::too_many_arguments)]
pub fn kshot_curve(
    train: &ResponseTable,
    test: &ResponseTable,
    k_list: &[usize],
    trials_per_drug: usize,
    top_n: usize,
    grid: &[f64],
    inner_trials: usize,
    seed: u64,
    min_obs: usize,
    min_overlap: usize,
) -> Result<BlendCurve> {
    if k_list.is_empty() {
        return Err(Error::usage("k list must not be empty"));
    }
    let mut ks = k_list.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let trials = trials_per_drug.max(1);
    let prior = cell_mean_predictor(train);

    let mut points = Vec::with_capacity(ks.len());
    for &k in &ks {
        if k == 0 {
            points.push(prior_point(train, test, min_obs)?);
            continue;
        }
        let selected_w = select_blend_weight(
            train,
            k,
            grid,
            inner_trials,
            seed,
            top_n,
            min_overlap,
            min_obs,
        )?;
        let eligible: Vec<&str> = test
            .per_drug()
            .filter(|(_, block)| block.len() >= k + min_obs)
            .map(|(drug, _)| drug)
            .collect();
        let skipped = test.n_drugs() - eligible.len();
        if eligible.is_empty() {
            return Err(Error::data(format!("no eligible drug at K = {k}")));
        }
        let outcomes: Vec<DrugOutcome> = eligible
            .par_iter()
            .map(|drug| run_drug_trials(train, test, drug, k, trials, selected_w, top_n, min_overlap, seed, &prior))
            .collect::<Result<Vec<_>>>()?;
        points.push(summarize_point(k, Some(selected_w), outcomes, skipped)?);
    }
    Ok(BlendCurve {
        points,
        trials_per_drug: trials,
        top_n,
        seed,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_drug_trials(
    train: &ResponseTable,
    test: &ResponseTable,
    drug: &str,
    k: usize,
    trials: usize,
    w: f64,
    top_n: usize,
    min_overlap: usize,
    seed: u64,
    prior: &Predictor,
) -> Result<DrugOutcome> {
    let mut rs = Vec::new();
    let mut fallback_cells = 0usize;
    let mut empty_tasks = 0usize;
    for trial in 0..trials {
        let task = sample_task(test, drug, k, trial, seed);
        let (matched_pred, match_set) = match_predict(train, &task, top_n, min_overlap)?;
        let (prior_pred, _) = prior.predict_keys(
            task.eval_cells.iter().map(|c| (drug, c.as_str())),
        )?;
        let blended = blend(&prior_pred, &matched_pred, w)?;
        fallback_cells += match_set.prior_fallback_cells;
        if match_set.empty {
            empty_tasks += 1;
        }
        if let Some(r) = task_r(&blended, test, drug) {
            rs.push(r);
        }
    }
    Ok(DrugOutcome {
        r: if rs.is_empty() {
            None
        } else {
            Some(rs.iter().sum::<f64>() / rs.len() as f64)
        },
        fallback_cells,
        empty_tasks,
    })
}

/// Seeded derangement (no fixed points) by rejection sampling, with a
/// rotation fallback for pathological rejection streaks.
fn derangement(n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    assert!(n >= 2, "cannot derange fewer than 2 items");
    let mut permutation: Vec<usize> = (0..n).collect();
    for _ in 0..10_000 {
        permutation.shuffle(rng);
        if permutation.iter().enumerate().all(|(i, &p)| p != i) {
            return permutation;
        }
    }
    (0..n).map(|i| (i + 1) % n).collect()
}

/// Permuted-pairing control: observed K-vectors are derangement-shuffled
/// across test drugs (cell ids kept, values taken from the wrong drug)
/// before matching; the rest of the pipeline is unchanged.
#[allow(clippy::too_many_arguments)]
pub fn permuted_pairing_control(
    train: &ResponseTable,
    test: &ResponseTable,
    k: usize,
    trials_per_drug: usize,
    top_n: usize,
    grid: &[f64],
    inner_trials: usize,
    seed: u64,
    min_obs: usize,
    min_overlap: usize,
) -> Result<BlendPoint> {
    if k == 0 {
        return Err(Error::usage("permuted control needs K >= 1"));
    }
    let eligible: Vec<&str> = test
        .per_drug()
        .filter(|(_, block)| block.len() >= k + min_obs)
        .map(|(drug, _)| drug)
        .collect();
    if eligible.len() < 2 {
        return Err(Error::data(
            "permuted control needs at least 2 eligible test drugs to derange",
        ));
    }
    let skipped = test.n_drugs() - eligible.len();
    // Same weight selection as the matched run at this K.
    let selected_w = select_blend_weight(
        train,
        k,
        grid,
        inner_trials,
        seed,
        top_n,
        min_overlap,
        min_obs,
    )?;
    let prior = cell_mean_predictor(train);
    let trials = trials_per_drug.max(1);

    // Per-trial derangement of drug indices.
    let derangements: Vec<Vec<usize>> = (0..trials)
        .map(|trial| {
            let mut rng = derive_rng(
                seed,
                &["derange", &k.to_string(), &trial.to_string()],
            );
            derangement(eligible.len(), &mut rng)
        })
        .collect();

    let outcomes: Vec<DrugOutcome> = eligible
        .par_iter()
        .enumerate()
        .map(|(i, drug)| {
            let mut rs = Vec::new();
            let mut fallback_cells = 0usize;
            let mut empty_tasks = 0usize;
            for (trial, permutation) in derangements.iter().enumerate() {
                let own_task = sample_task(test, drug, k, trial, seed);
                let wrong_drug = eligible[permutation[i]];
                // Keep this drug's observed cells; take values from the
                // deranged partner where it has them.
                let mut observed_cells = Vec::new();
                let mut observed_values = Vec::new();
                for cell in &own_task.observed_cells {
                    if let Some(v) = test.get(wrong_drug, cell) {
                        observed_cells.push(cell.clone());
                        observed_values.push(v);
                    }
                }
                let (matched_pred, match_set) = if observed_cells.len() >= min_overlap {
                    let task = KShotTask::new(
                        (*drug).to_owned(),
                        observed_cells,
                        observed_values,
                        own_task.eval_cells.clone(),
                    )?;
                    match_predict(train, &task, top_n, min_overlap)?
                } else {
                    // Too little wrong-drug coverage: pure prior task.
                    let (prior_pred, _) = prior.predict_keys(
                        own_task.eval_cells.iter().map(|c| (*drug, c.as_str())),
                    )?;
                    (
                        prior_pred,
                        MatchSet {
                            matched: Vec::new(),
                            n: top_n,
                            empty: true,
                            prior_fallback_cells: own_task.eval_cells.len(),
                        },
                    )
                };
                let (prior_pred, _) = prior.predict_keys(
                    own_task.eval_cells.iter().map(|c| (*drug, c.as_str())),
                )?;
                let blended = blend(&prior_pred, &matched_pred, selected_w)?;
                fallback_cells += match_set.prior_fallback_cells;
                if match_set.empty {
                    empty_tasks += 1;
                }
                if let Some(r) = task_r(&blended, test, drug) {
                    rs.push(r);
                }
            }
            Ok(DrugOutcome {
                r: if rs.is_empty() {
                    None
                } else {
                    Some(rs.iter().sum::<f64>() / rs.len() as f64)
                },
                fallback_cells,
                empty_tasks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    summarize_point(k, Some(selected_w), outcomes, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Units;

    fn table(records: &[(&str, &str, f64)]) -> ResponseTable {
        ResponseTable::from_records(
            records
                .iter()
                .map(|(d, c, v)| (d.to_string(), c.to_string(), *v)),
            Units::LnIc50,
        )
        .unwrap()
        .0
    }

    /// Training table with an exact copy of the test profile plus two
    /// decoys on 8 cells.
    fn copy_fixture() -> (ResponseTable, Vec<f64>) {
        let profile = vec![1.0, 5.0, 2.0, 8.0, 3.0, 7.0, 4.0, 6.0];
        let mut records = Vec::new();
        for (i, v) in profile.iter().enumerate() {
            let cell = format!("c{i}");
            records.push(("copy".to_owned(), cell.clone(), *v));
            records.push(("flat_noise".to_owned(), cell.clone(), (i % 2) as f64));
            records.push(("reversed".to_owned(), cell, profile[7 - i]));
        }
        (
            ResponseTable::from_records(records, Units::LnIc50).unwrap().0,
            profile,
        )
    }

    #[test]
    fn exact_copy_in_train_is_matched_with_correlation_one() {
        let (train, profile) = copy_fixture();
        let task = KShotTask::new(
            "new".into(),
            vec!["c0".into(), "c1".into(), "c2".into(), "c3".into()],
            profile[..4].to_vec(),
            vec!["c4".into(), "c5".into(), "c6".into(), "c7".into()],
        )
        .unwrap();
        let (pred, match_set) = match_predict(&train, &task, 1, 2).unwrap();
        assert_eq!(match_set.matched[0].train_drug_id, "copy");
        assert!((match_set.matched[0].correlation - 1.0).abs() < 1e-12);
        for (i, cell) in ["c4", "c5", "c6", "c7"].iter().enumerate() {
            assert_eq!(pred.get("new", cell), Some(profile[4 + i]));
        }
    }

    #[test]
    fn ranking_is_by_magnitude_and_negatives_are_zero_weighted() {
        // Hand-built 4-cell vectors: A correlates +1, B -1, C 0 with the
        // pilot observations.
        let train = table(&[
            ("A", "c0", 1.0),
            ("A", "c1", 2.0),
            ("A", "c2", 3.0),
            ("A", "c3", 4.0),
            ("A", "e0", 10.0),
            ("A", "e1", 20.0),
            ("B", "c0", 4.0),
            ("B", "c1", 3.0),
            ("B", "c2", 2.0),
            ("B", "c3", 1.0),
            ("B", "e0", -10.0),
            ("B", "e1", -20.0),
            ("C", "c0", 1.0),
            ("C", "c1", -1.0),
            ("C", "c2", -1.0),
            ("C", "c3", 1.0),
            ("C", "e0", 0.0),
            ("C", "e1", 0.0),
        ]);
        let task = KShotTask::new(
            "new".into(),
            vec!["c0".into(), "c1".into(), "c2".into(), "c3".into()],
            vec![10.0, 20.0, 30.0, 40.0],
            vec!["e0".into(), "e1".into()],
        )
        .unwrap();
        let (pred, match_set) = match_predict(&train, &task, 2, 2).unwrap();
        assert_eq!(match_set.matched.len(), 2);
        let ids: Vec<&str> = match_set
            .matched
            .iter()
            .map(|m| m.train_drug_id.as_str())
            .collect();
        assert_eq!(ids, vec!["A", "B"], "top-2 by |corr|");
        assert!((match_set.matched[0].weight - 1.0).abs() < 1e-12);
        assert_eq!(match_set.matched[1].weight, 0.0, "negative corr zeroed");
        // Prediction = A's profile alone.
        assert_eq!(pred.get("new", "e0"), Some(10.0));
        assert_eq!(pred.get("new", "e1"), Some(20.0));
    }

    #[test]
    fn constant_training_profiles_fall_back_to_prior() {
        let train = table(&[
            ("flat1", "c0", 2.0),
            ("flat1", "c1", 2.0),
            ("flat1", "c2", 2.0),
            ("flat1", "e0", 5.0),
            ("flat2", "c0", 7.0),
            ("flat2", "c1", 7.0),
            ("flat2", "c2", 7.0),
            ("flat2", "e0", 9.0),
        ]);
        let task = KShotTask::new(
            "new".into(),
            vec!["c0".into(), "c1".into(), "c2".into()],
            vec![1.0, 2.0, 3.0],
            vec!["e0".into()],
        )
        .unwrap();
        let (pred, match_set) = match_predict(&train, &task, 5, 2).unwrap();
        assert!(match_set.empty);
        assert_eq!(match_set.prior_fallback_cells, 1);
        // Prior at e0 = mean(5, 9) = 7.
        assert_eq!(pred.get("new", "e0"), Some(7.0));
    }

    #[test]
    fn match_predict_requires_min_overlap() {
        let (train, profile) = copy_fixture();
        let task = KShotTask::new(
            "new".into(),
            vec!["c0".into()],
            profile[..1].to_vec(),
            vec!["c4".into()],
        )
        .unwrap();
        assert!(match_predict(&train, &task, 5, 2).is_err());
    }

    fn prediction(records: &[(&str, &str, f64)]) -> PredictionTable {
        PredictionTable::from_records(
            records
                .iter()
                .map(|(d, c, v)| (d.to_string(), c.to_string(), *v)),
        )
        .unwrap()
    }

    #[test]
    fn blend_endpoints_preserve_component_correlations() {
        let truth = table(&[
            ("d", "c0", 1.0),
            ("d", "c1", 4.0),
            ("d", "c2", 2.0),
            ("d", "c3", 8.0),
            ("d", "c4", 5.0),
        ]);
        let prior = prediction(&[
            ("d", "c0", 0.9),
            ("d", "c1", 4.2),
            ("d", "c2", 2.5),
            ("d", "c3", 7.0),
            ("d", "c4", 5.5),
        ]);
        let matched = prediction(&[
            ("d", "c0", 8.0),
            ("d", "c1", 2.0),
            ("d", "c2", 6.0),
            ("d", "c3", 1.0),
            ("d", "c4", 3.0),
        ]);
        let b0 = blend(&prior, &matched, 0.0).unwrap();
        let b1 = blend(&prior, &matched, 1.0).unwrap();
        let r_prior = task_r(&prior, &truth, "d").unwrap();
        let r_matched = task_r(&matched, &truth, "d").unwrap();
        assert!((task_r(&b0, &truth, "d").unwrap() - r_prior).abs() < 1e-12);
        assert!((task_r(&b1, &truth, "d").unwrap() - r_matched).abs() < 1e-12);
    }

    #[test]
    fn blend_of_identical_standardized_components_ignores_w() {
        let truth = table(&[
            ("d", "c0", 1.0),
            ("d", "c1", 4.0),
            ("d", "c2", 2.0),
        ]);
        let prior = prediction(&[("d", "c0", 0.0), ("d", "c1", 2.0), ("d", "c2", 1.0)]);
        // Affine transform of the prior: same standardized component.
        let matched = prediction(&[("d", "c0", 10.0), ("d", "c1", 14.0), ("d", "c2", 12.0)]);
        let r_half = task_r(&blend(&prior, &matched, 0.5).unwrap(), &truth, "d").unwrap();
        let r_zero = task_r(&blend(&prior, &matched, 0.0).unwrap(), &truth, "d").unwrap();
        assert!((r_half - r_zero).abs() < 1e-12);
    }

    #[test]
    fn blend_rejects_key_mismatch() {
        let prior = prediction(&[("d", "c0", 1.0), ("d", "c1", 2.0)]);
        let matched = prediction(&[("d", "c0", 1.0), ("d", "cX", 2.0)]);
        assert!(blend(&prior, &matched, 0.5).is_err());
    }

    #[test]
    fn single_element_grid_is_returned() {
        let (train, _) = copy_fixture();
        let w = select_blend_weight(&train, 3, &[0.3], 2, 7, 5, 2, 2).unwrap();
        assert_eq!(w, 0.3);
    }

    #[test]
    fn uncorrelated_training_noise_collapses_weight_to_prior() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(23, &["noise-train"]);
        let mut records = Vec::new();
        for d in 0..8 {
            for c in 0..40 {
                records.push((
                    format!("d{d}"),
                    format!("c{c:02}"),
                    rng.random::<f64>() * 4.0 - 2.0,
                ));
            }
        }
        let train = ResponseTable::from_records(records, Units::LnIc50).unwrap().0;
        let w = select_blend_weight(
            &train,
            10,
            &default_weight_grid(),
            3,
            11,
            DEFAULT_TOP_N,
            DEFAULT_MIN_OVERLAP,
            5,
        )
        .unwrap();
        assert!(w <= 0.1, "selected w = {w} on pure-noise training drugs");
    }

    #[test]
    fn analog_clusters_select_substantial_weight_at_large_k() {
        // Two clusters of near-copy drugs with conflicting base profiles:
        // the fold-wide prior averages the clusters (mediocre), while
        // matching transfers same-cluster analogs (excellent), so large K
        // must select a substantial blend weight.
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::derive_rng(29, &["analog-train"]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let base_a: Vec<f64> = (0..80).map(|_| normal.sample(&mut rng) * 2.0).collect();
        let base_b: Vec<f64> = base_a.iter().map(|v| -v).collect();
        let mut records = Vec::new();
        for d in 0..8 {
            let base = if d % 2 == 0 { &base_a } else { &base_b };
            for (c, b) in base.iter().enumerate() {
                let noise: f64 = normal.sample(&mut rng) * 0.2;
                records.push((format!("d{d}"), format!("c{c:02}"), b + noise));
            }
        }
        let train = ResponseTable::from_records(records, Units::LnIc50).unwrap().0;
        let w = select_blend_weight(
            &train,
            50,
            &default_weight_grid(),
            3,
            13,
            DEFAULT_TOP_N,
            DEFAULT_MIN_OVERLAP,
            5,
        )
        .unwrap();
        assert!(w >= 0.5, "selected w = {w} with analog training clusters");
    }

    #[test]
    fn weight_grid_must_be_nonempty() {
        let (train, _) = copy_fixture();
        assert!(select_blend_weight(&train, 3, &[], 1, 0, 5, 2, 2).is_err());
    }

    #[test]
    fn derangement_has_no_fixed_points_and_is_deterministic() {
        for n in [2usize, 3, 5, 9] {
            let mut rng = derive_rng(3, &["derange-test", &n.to_string()]);
            let d = derangement(n, &mut rng);
            assert!(d.iter().enumerate().all(|(i, &p)| p != i));
            let mut sorted = d.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            let mut rng2 = derive_rng(3, &["derange-test", &n.to_string()]);
            assert_eq!(d, derangement(n, &mut rng2));
        }
    }

    #[test]
    fn control_equals_unpermuted_for_identical_profiles() {
        // Two test drugs with identical profiles: the swap derangement
        // exchanges identical K-vectors, so the control must match the
        // ordinary curve point at the same K.
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::derive_rng(41, &["identical"]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let base: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng) * 2.0).collect();
        let mut train_records = Vec::new();
        for d in 0..4 {
            for (c, b) in base.iter().enumerate() {
                let noise: f64 = normal.sample(&mut rng) * 0.3;
                train_records.push((format!("t{d}"), format!("c{c:02}"), b + noise));
            }
        }
        let train = ResponseTable::from_records(train_records, Units::LnIc50)
            .unwrap()
            .0;
        let mut test_records = Vec::new();
        for (c, b) in base.iter().enumerate() {
            test_records.push(("x0".to_owned(), format!("c{c:02}"), *b));
            test_records.push(("x1".to_owned(), format!("c{c:02}"), *b));
        }
        let test = ResponseTable::from_records(test_records, Units::LnIc50)
            .unwrap()
            .0;
        let grid = default_weight_grid();
        let k = 10;
        let curve = kshot_curve(&train, &test, &[k], 3, 5, &grid, 2, 17, 5, 2).unwrap();
        let control =
            permuted_pairing_control(&train, &test, k, 3, 5, &grid, 2, 17, 5, 2).unwrap();
        assert!(
            (curve.points[0].per_drug_r_mean - control.per_drug_r_mean).abs() < 1e-9,
            "curve {} vs control {}",
            curve.points[0].per_drug_r_mean,
            control.per_drug_r_mean
        );
    }

    #[test]
    fn kshot_with_duplicate_drug_beats_or_ties_prior_at_large_k() {
        // K = all available cells minus min_obs, with an exact duplicate of
        // the test drug in training: the blended estimate must not fall
        // below the prior.
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::derive_rng(61, &["dup"]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n_cells = 12;
        let profile: Vec<f64> = (0..n_cells).map(|_| normal.sample(&mut rng) * 2.0).collect();
        let mut train_records = Vec::new();
        let mut test_records = Vec::new();
        for c in 0..n_cells {
            let cell = format!("c{c:02}");
            // duplicate of the test profile plus two decoys
            train_records.push(("dup".to_owned(), cell.clone(), profile[c]));
            let decoy1: f64 = normal.sample(&mut rng);
            let decoy2: f64 = normal.sample(&mut rng);
            train_records.push(("decoy1".to_owned(), cell.clone(), decoy1));
            train_records.push(("decoy2".to_owned(), cell.clone(), decoy2));
            test_records.push(("new".to_owned(), cell, profile[c]));
        }
        let train = ResponseTable::from_records(train_records, Units::LnIc50).unwrap().0;
        let test = ResponseTable::from_records(test_records, Units::LnIc50).unwrap().0;
        let min_obs = 5;
        let k = n_cells - min_obs;
        let grid = default_weight_grid();
        let curve =
            kshot_curve(&train, &test, &[0, k], 4, 2, &grid, 2, 5, min_obs, 2).unwrap();
        let prior_mean = curve.points[0].per_drug_r_mean;
        let blended_mean = curve.points[1].per_drug_r_mean;
        assert!(
            blended_mean >= prior_mean - 1e-9,
            "blended {blended_mean} < prior {prior_mean}"
        );
    }

    #[test]
    fn blend_r_is_continuous_in_w() {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::derive_rng(51, &["continuity"]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..10 {
            let n = 30;
            let truth_values: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let prior_values: Vec<f64> = truth_values
                .iter()
                .map(|v| v + normal.sample(&mut rng))
                .collect();
            let matched_values: Vec<f64> = truth_values
                .iter()
                .map(|v| 0.3 * v + normal.sample(&mut rng))
                .collect();
            let truth = ResponseTable::from_records(
                (0..n).map(|i| ("d".to_owned(), format!("c{i:02}"), truth_values[i])),
                Units::LnIc50,
            )
            .unwrap()
            .0;
            let prior = PredictionTable::from_records(
                (0..n).map(|i| ("d".to_owned(), format!("c{i:02}"), prior_values[i])),
            )
            .unwrap();
            let matched = PredictionTable::from_records(
                (0..n).map(|i| ("d".to_owned(), format!("c{i:02}"), matched_values[i])),
            )
            .unwrap();
            let mut previous: Option<f64> = None;
            let mut w: f64 = 0.0;
            while w <= 1.0 + 1e-9 {
                let r = task_r(&blend(&prior, &matched, w.min(1.0)).unwrap(), &truth, "d")
                    .unwrap();
                if let Some(prev) = previous {
                    assert!(
                        (r - prev).abs() <= 0.05,
                        "jump {} at w = {w}",
                        (r - prev).abs()
                    );
                }
                previous = Some(r);
                w += 0.01;
            }
        }
    }
}
