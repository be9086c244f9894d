//! Quantify evaluation inflation from test-set checkpoint selection and
//! best-fold reporting, using a toy iterative learner (full-batch gradient
//! descent on the ridge objective) that reproduces the selection-artifact
//! mechanism at desk scale: epoch-to-epoch metric noise that a test-max
//! policy can exploit.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{AlignedDataset, FeatureMatrix, ResponseTable};
use crate::error::{Error, Result};
use crate::metrics::{global_r, per_drug_r, PredictionTable, ZeroVariancePolicy};
use crate::protocols::{make_folds, Scheme};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub lr: f64,
    pub epochs: usize,
    pub alpha: f64,
}

/// Per-epoch validation and test predictions of one training run, plus the
/// truth tables needed to score them.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochTrace {
    /// `records[e]` holds the predictions after epoch `e + 1`.
    pub val_predictions: Vec<PredictionTable>,
    pub test_predictions: Vec<PredictionTable>,
    pub val_truth: ResponseTable,
    pub test_truth: ResponseTable,
    pub config: LearnerConfig,
}

impl EpochTrace {
    pub fn epochs(&self) -> usize {
        self.val_predictions.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointPolicy {
    /// Fair: argmax of validation global r.
    ValidationMax,
    /// Snooped: argmax of test global r.
    TestMax,
    /// No selection: the final epoch.
    Last,
}

fn design_for(
    records: &ResponseTable,
    features: &FeatureMatrix,
) -> Result<(DMatrix<f64>, Vec<f64>, Vec<(String, String)>)> {
    let n = records.len();
    let p = features.n_features();
    let mut rows = Vec::with_capacity(n * p);
    let mut targets = Vec::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    for r in records.records() {
        let row = features.row_of(&r.cell_id).ok_or_else(|| {
            Error::data(format!("cell `{}` missing from features", r.cell_id))
        })?;
        rows.extend_from_slice(row);
        targets.push(r.value);
        keys.push((r.drug_id.clone(), r.cell_id.clone()));
    }
    Ok((DMatrix::from_row_slice(n, p, &rows), targets, keys))
}

/// Full-batch gradient descent on the ridge objective
/// `(1/n) ||Xw + b - y||^2 + (alpha/n) ||w||^2` from zero initialization,
/// emitting validation and test predictions after every epoch. With a small
/// enough learning rate this converges toward the closed-form ridge
/// solution.
pub fn iterative_learner_trace(
    train: &ResponseTable,
    val: &ResponseTable,
    test: &ResponseTable,
    features: &FeatureMatrix,
    lr: f64,
    epochs: usize,
    alpha: f64,
) -> Result<EpochTrace> {
    if epochs < 1 {
        return Err(Error::usage("iterative learner: epochs must be >= 1"));
    }
    if !(lr > 0.0) {
        return Err(Error::usage("iterative learner: lr must be > 0"));
    }
    // Disjointness of the splits is part of the contract.
    let train_keys: BTreeSet<(&str, &str)> = train
        .records()
        .iter()
        .map(|r| (r.drug_id.as_str(), r.cell_id.as_str()))
        .collect();
    for (name, split) in [("validation", val), ("test", test)] {
        for r in split.records() {
            if train_keys.contains(&(r.drug_id.as_str(), r.cell_id.as_str())) {
                return Err(Error::usage(format!(
                    "iterative learner: {name} split overlaps training records"
                )));
            }
        }
    }

    let (x_train, y_train, _) = design_for(train, features)?;
    let (x_val, _, val_keys) = design_for(val, features)?;
    let (x_test, _, test_keys) = design_for(test, features)?;
    let n = x_train.nrows() as f64;
    let p = x_train.ncols();

    let mut w = DVector::zeros(p);
    let mut b = 0.0f64;
    let mut val_predictions = Vec::with_capacity(epochs);
    let mut test_predictions = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let residual = &x_train * &w + DVector::from_element(x_train.nrows(), b)
            - DVector::from_row_slice(&y_train);
        let grad_w = (x_train.transpose() * &residual + alpha * &w) * (2.0 / n);
        let grad_b = residual.sum() * 2.0 / n;
        w -= lr * grad_w;
        b -= lr * grad_b;

        let loss = residual.norm_squared() / n + alpha * w.norm_squared() / n;
        if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
            return Err(Error::numerical(format!(
                "iterative learner diverged at epoch {epoch} (lr = {lr})"
            )));
        }

        let predict = |x: &DMatrix<f64>, keys: &[(String, String)]| {
            let values = x * &w;
            PredictionTable::from_records(
                keys.iter()
                    .zip(values.iter())
                    .map(|((drug, cell), v)| (drug.clone(), cell.clone(), v + b)),
            )
        };
        val_predictions.push(predict(&x_val, &val_keys)?);
        test_predictions.push(predict(&x_test, &test_keys)?);
    }

    Ok(EpochTrace {
        val_predictions,
        test_predictions,
        val_truth: val.clone(),
        test_truth: test.clone(),
        config: LearnerConfig { lr, epochs, alpha },
    })
}

/// Argmax of global r over epochs, earliest epoch on ties. This helper is
/// the only scoring path, and it receives a single split: the fair policy
/// can never read test predictions.
fn argmax_epoch(per_epoch: &[PredictionTable], truth: &ResponseTable) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, predictions) in per_epoch.iter().enumerate() {
        if let Some(r) = global_r(predictions, truth)? {
            if best.map_or(true, |(_, b)| r > b) {
                best = Some((i + 1, r));
            }
        }
    }
    best.map(|(epoch, _)| epoch)
        .ok_or_else(|| Error::data("metric undefined at every epoch"))
}

/// Selected (1-based) epoch under the policy.
pub fn select_checkpoint(trace: &EpochTrace, policy: CheckpointPolicy) -> Result<usize> {
    if trace.epochs() == 0 {
        return Err(Error::usage("empty trace"));
    }
    match policy {
        CheckpointPolicy::ValidationMax => {
            argmax_epoch(&trace.val_predictions, &trace.val_truth)
        }
        CheckpointPolicy::TestMax => argmax_epoch(&trace.test_predictions, &trace.test_truth),
        CheckpointPolicy::Last => Ok(trace.epochs()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub fair_global_r: f64,
    pub snooped_global_r: f64,
    pub last_epoch_global_r: f64,
    pub fair_per_drug_r: f64,
    pub snooped_per_drug_r: f64,
    /// snooped mean minus fair mean (global r).
    pub snoop_inflation: f64,
    pub best_fold_global_r: f64,
    pub mean_fold_global_r: f64,
    /// best snooped fold minus mean snooped fold.
    pub best_fold_inflation: f64,
    /// policy name -> selected epoch per fold.
    pub selected_epochs: BTreeMap<String, Vec<usize>>,
    pub n_folds: usize,
}

fn test_metrics_at(
    trace: &EpochTrace,
    epoch: usize,
    min_obs: usize,
) -> Result<(f64, f64)> {
    let predictions = &trace.test_predictions[epoch - 1];
    let g = global_r(predictions, &trace.test_truth)?.ok_or_else(|| {
        Error::data(format!("test global r undefined at epoch {epoch}"))
    })?;
    let report = per_drug_r(
        predictions,
        &trace.test_truth,
        min_obs,
        ZeroVariancePolicy::Zero,
    )?;
    Ok((g, report.per_drug_r_mean))
}

/// Evaluate each fold's test metrics at the epochs chosen by the fair,
/// snooped, and last-epoch policies, and summarize the inflation.
pub fn inflation_report(folds: &[EpochTrace], min_obs: usize) -> Result<LeakageReport> {
    if folds.len() < 2 {
        return Err(Error::usage("inflation report needs at least 2 folds"));
    }
    let epochs = folds[0].epochs();
    if folds.iter().any(|t| t.epochs() != epochs) {
        return Err(Error::usage("inconsistent fold structures (epoch counts differ)"));
    }

    let mut fair_epochs = Vec::new();
    let mut snooped_epochs = Vec::new();
    let mut last_epochs = Vec::new();
    let mut fair_g = Vec::new();
    let mut snooped_g = Vec::new();
    let mut last_g = Vec::new();
    let mut fair_pd = Vec::new();
    let mut snooped_pd = Vec::new();
    for trace in folds {
        let fair = select_checkpoint(trace, CheckpointPolicy::ValidationMax)?;
        let snooped = select_checkpoint(trace, CheckpointPolicy::TestMax)?;
        let last = select_checkpoint(trace, CheckpointPolicy::Last)?;
        fair_epochs.push(fair);
        snooped_epochs.push(snooped);
        last_epochs.push(last);
        let (g, pd) = test_metrics_at(trace, fair, min_obs)?;
        fair_g.push(g);
        fair_pd.push(pd);
        let (g, pd) = test_metrics_at(trace, snooped, min_obs)?;
        snooped_g.push(g);
        snooped_pd.push(pd);
        let (g, _) = test_metrics_at(trace, last, min_obs)?;
        last_g.push(g);
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fair_global_r = mean(&fair_g);
    let snooped_global_r = mean(&snooped_g);
    let best_fold_global_r = snooped_g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut selected_epochs = BTreeMap::new();
    selected_epochs.insert("validation-max".to_owned(), fair_epochs);
    selected_epochs.insert("test-max".to_owned(), snooped_epochs);
    selected_epochs.insert("last".to_owned(), last_epochs);
    Ok(LeakageReport {
        fair_global_r,
        snooped_global_r,
        last_epoch_global_r: mean(&last_g),
        fair_per_drug_r: mean(&fair_pd),
        snooped_per_drug_r: mean(&snooped_pd),
        snoop_inflation: snooped_global_r - fair_global_r,
        best_fold_global_r,
        mean_fold_global_r: snooped_global_r,
        best_fold_inflation: best_fold_global_r - snooped_global_r,
        selected_epochs,
        n_folds: folds.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageExperimentConfig {
    pub folds: usize,
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    /// Fraction of non-test drugs held out as the drug-blind validation set.
    pub val_fraction: f64,
    pub seed: u64,
    pub min_obs: usize,
}

impl Default for LeakageExperimentConfig {
    fn default() -> Self {
        LeakageExperimentConfig {
            folds: 10,
            epochs: 50,
            lr: 0.05,
            alpha: 1.0,
            val_fraction: 0.1,
            seed: 42,
            min_obs: 5,
        }
    }
}

/// Drug-blind leakage experiment: split drugs into folds, hold out a
/// validation drug set from each fold's training drugs, trace the toy
/// learner, and report the inflation summary.
pub fn run_leakage_experiment(
    dataset: &AlignedDataset,
    config: &LeakageExperimentConfig,
) -> Result<LeakageReport> {
    let drugs: Vec<String> = dataset.response.drugs().map(str::to_owned).collect();
    let fold_spec = make_folds(&drugs, Scheme::DrugBlind, config.folds, config.seed, None)?;

    let folds: Vec<usize> = (0..fold_spec.k).collect();
    let traces: Vec<Result<EpochTrace>> = folds
        .par_iter()
        .map(|&fold| {
            let test_drugs: BTreeSet<&str> =
                fold_spec.fold_members(fold).into_iter().collect();
            let mut remaining: Vec<&str> = drugs
                .iter()
                .map(String::as_str)
                .filter(|d| !test_drugs.contains(d))
                .collect();
            let mut rng = derive_rng(
                config.seed,
                &["leakage-val", &fold.to_string()],
            );
            remaining.shuffle(&mut rng);
            let n_val = ((remaining.len() as f64 * config.val_fraction).round() as usize)
                .clamp(1, remaining.len().saturating_sub(1));
            let val_drugs: BTreeSet<&str> = remaining[..n_val].iter().copied().collect();

            let test = dataset
                .response
                .filter_drugs(|d| test_drugs.contains(d))?;
            let val = dataset.response.filter_drugs(|d| val_drugs.contains(d))?;
            let train = dataset
                .response
                .filter_drugs(|d| !test_drugs.contains(d) && !val_drugs.contains(d))?;
            iterative_learner_trace(
                &train,
                &val,
                &test,
                &dataset.cell_features,
                config.lr,
                config.epochs,
                config.alpha,
            )
        })
        .collect();
    let traces: Vec<EpochTrace> = traces.into_iter().collect::<Result<Vec<_>>>()?;
    inflation_report(&traces, config.min_obs)
}
