//! Correlation metrics, the exact covariance decomposition of global r, and
//! concordance ceilings.
//!
//! All variances and covariances here use the population (n) denominator; the
//! ratios in the decomposition only make sense with one convention applied
//! consistently. The per-drug r spread is the one exception: it is a sample
//! standard deviation across drugs (n-1), recorded in the report metadata.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{MoaMap, ResponseTable};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_OBS: usize = 5;

/// How to score a drug whose *predictions* have zero variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroVariancePolicy {
    /// Score the drug 0 (a constant prediction ranks nothing).
    Zero,
    /// Leave the drug out of the average.
    Skip,
}

impl Default for ZeroVariancePolicy {
    fn default() -> Self {
        ZeroVariancePolicy::Zero
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub drug_id: String,
    pub cell_id: String,
    pub predicted: f64,
}

/// Predicted values keyed like a response table. Keys are unique and every
/// value is finite; duplicate keys are a usage error (a pipeline bug, not a
/// data-cleaning situation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTable {
    records: Vec<PredictionRecord>,
    #[serde(skip)]
    drug_ranges: Vec<(String, usize, usize)>,
}

impl PredictionTable {
    pub fn from_records(
        records: impl IntoIterator<Item = (String, String, f64)>,
    ) -> Result<Self> {
        let mut records: Vec<PredictionRecord> = records
            .into_iter()
            .map(|(drug_id, cell_id, predicted)| PredictionRecord {
                drug_id,
                cell_id,
                predicted,
            })
            .collect();
        if records.iter().any(|r| !r.predicted.is_finite()) {
            return Err(Error::usage("prediction table contains non-finite values"));
        }
        records.sort_by(|a, b| (&a.drug_id, &a.cell_id).cmp(&(&b.drug_id, &b.cell_id)));
        for window in records.windows(2) {
            if window[0].drug_id == window[1].drug_id && window[0].cell_id == window[1].cell_id {
                return Err(Error::usage(format!(
                    "duplicate prediction key ({}, {})",
                    window[0].drug_id, window[0].cell_id
                )));
            }
        }
        let mut table = PredictionTable {
            records,
            drug_ranges: Vec::new(),
        };
        table.rebuild_index();
        Ok(table)
    }

    fn rebuild_index(&mut self) {
        self.drug_ranges.clear();
        let mut start = 0usize;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].drug_id != self.records[start].drug_id {
                self.drug_ranges
                    .push((self.records[start].drug_id.clone(), start, i));
                start = i;
            }
        }
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn drugs(&self) -> impl Iterator<Item = &str> {
        self.drug_ranges.iter().map(|(d, _, _)| d.as_str())
    }

    pub fn records_of(&self, drug_id: &str) -> &[PredictionRecord] {
        match self
            .drug_ranges
            .binary_search_by(|(d, _, _)| d.as_str().cmp(drug_id))
        {
            Ok(i) => {
                let (_, start, end) = self.drug_ranges[i];
                &self.records[start..end]
            }
            Err(_) => &[],
        }
    }

    pub fn get(&self, drug_id: &str, cell_id: &str) -> Option<f64> {
        let block = self.records_of(drug_id);
        block
            .binary_search_by(|r| r.cell_id.as_str().cmp(cell_id))
            .ok()
            .map(|i| block[i].predicted)
    }

    pub fn per_drug(&self) -> impl Iterator<Item = (&str, &[PredictionRecord])> {
        self.drug_ranges
            .iter()
            .map(move |(d, s, e)| (d.as_str(), &self.records[*s..*e]))
    }

    /// Merge tables with disjoint key sets (pooling CV folds).
    pub fn merge(tables: impl IntoIterator<Item = PredictionTable>) -> Result<PredictionTable> {
        let mut records = Vec::new();
        for t in tables {
            records.extend(
                t.records
                    .into_iter()
                    .map(|r| (r.drug_id, r.cell_id, r.predicted)),
            );
        }
        PredictionTable::from_records(records)
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population covariance (n denominator), two-pass.
fn pop_cov(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / x.len() as f64
}

fn pop_var(x: &[f64]) -> f64 {
    pop_cov(x, x)
}

fn pop_sd(x: &[f64]) -> f64 {
    pop_var(x).sqrt()
}

/// Sample standard deviation (n-1) across a set of summary values.
fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Pearson correlation without precondition checks; `None` when either side
/// has zero variance. Clamped to [-1, 1] against roundoff.
pub(crate) fn pearson_unchecked(x: &[f64], y: &[f64]) -> Option<f64> {
    let vx = pop_var(x);
    let vy = pop_var(y);
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some((pop_cov(x, y) / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Sample Pearson correlation; `None` when either vector has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::usage(format!(
            "pearson: length mismatch ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::usage("pearson: need at least 2 observations"));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::usage("pearson: non-finite input"));
    }
    Ok(pearson_unchecked(x, y))
}

/// Shared (drug, cell) pairs grouped by drug: (drug, cells, predicted, truth).
/// Every prediction key must exist in the truth table.
pub(crate) struct SharedPairs<'a> {
    pub drugs: Vec<(&'a str, Vec<&'a str>, Vec<f64>, Vec<f64>)>,
    pub n_pairs: usize,
}

pub(crate) fn shared_pairs<'a>(
    pred: &'a PredictionTable,
    truth: &ResponseTable,
) -> Result<SharedPairs<'a>> {
    let mut drugs = Vec::new();
    let mut n_pairs = 0usize;
    for (drug, block) in pred.per_drug() {
        let mut cells = Vec::with_capacity(block.len());
        let mut predicted = Vec::with_capacity(block.len());
        let mut observed = Vec::with_capacity(block.len());
        for record in block {
            match truth.get(drug, &record.cell_id) {
                Some(value) => {
                    cells.push(record.cell_id.as_str());
                    predicted.push(record.predicted);
                    observed.push(value);
                }
                None => {
                    return Err(Error::usage(format!(
                        "prediction key ({drug}, {}) absent from the evaluation table",
                        record.cell_id
                    )))
                }
            }
        }
        n_pairs += cells.len();
        drugs.push((drug, cells, predicted, observed));
    }
    Ok(SharedPairs { drugs, n_pairs })
}

fn shared_pairs_static(
    pred: &PredictionTable,
    truth: &ResponseTable,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let shared = shared_pairs(pred, truth)?;
    let mut yhat = Vec::with_capacity(shared.n_pairs);
    let mut y = Vec::with_capacity(shared.n_pairs);
    for (_, _, p, t) in &shared.drugs {
        yhat.extend_from_slice(p);
        y.extend_from_slice(t);
    }
    Ok((yhat, y))
}

/// Pearson over all shared (drug, cell) pairs.
pub fn global_r(pred: &PredictionTable, truth: &ResponseTable) -> Result<Option<f64>> {
    let (yhat, y) = shared_pairs_static(pred, truth)?;
    if y.len() < 2 {
        return Err(Error::data(format!(
            "global r needs at least 2 shared pairs, found {}",
            y.len()
        )));
    }
    Ok(pearson_unchecked(&yhat, &y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMetadata {
    pub min_obs: usize,
    pub zero_variance_policy: ZeroVariancePolicy,
    /// Denominator convention for `per_drug_r_sd`.
    pub sd_denominator: String,
    pub per_drug_min: Option<f64>,
    pub per_drug_max: Option<f64>,
}

/// Global r plus the per-drug r summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub global_r: Option<f64>,
    pub per_drug_r_mean: f64,
    pub per_drug_r_sd: f64,
    pub n_drugs_evaluated: usize,
    pub n_drugs_skipped: usize,
    pub per_drug_values: BTreeMap<String, f64>,
    pub metadata: MetricMetadata,
}

fn summarize_per_drug(
    per_drug_values: BTreeMap<String, f64>,
    n_drugs_skipped: usize,
    global_r: Option<f64>,
    min_obs: usize,
    policy: ZeroVariancePolicy,
) -> MetricReport {
    let values: Vec<f64> = per_drug_values.values().copied().collect();
    let per_drug_min = values.iter().copied().fold(None, |acc: Option<f64>, v| {
        Some(acc.map_or(v, |a| a.min(v)))
    });
    let per_drug_max = values.iter().copied().fold(None, |acc: Option<f64>, v| {
        Some(acc.map_or(v, |a| a.max(v)))
    });
    MetricReport {
        global_r,
        per_drug_r_mean: mean(&values),
        per_drug_r_sd: sample_sd(&values),
        n_drugs_evaluated: per_drug_values.len(),
        n_drugs_skipped,
        per_drug_values,
        metadata: MetricMetadata {
            min_obs,
            zero_variance_policy: policy,
            sd_denominator: "n-1".into(),
            per_drug_min,
            per_drug_max,
        },
    }
}

/// Per-drug Pearson r averaged over drugs with at least `min_obs` shared
/// cells. Drugs with zero truth variance are skipped; drugs with zero
/// prediction variance score 0 under `Zero` (default) or are skipped under
/// `Skip`.
pub fn per_drug_r(
    pred: &PredictionTable,
    truth: &ResponseTable,
    min_obs: usize,
    policy: ZeroVariancePolicy,
) -> Result<MetricReport> {
    let shared = shared_pairs(pred, truth)?;
    let mut per_drug_values = BTreeMap::new();
    let mut skipped = 0usize;
    let mut max_available = 0usize;
    for (drug, cells, predicted, observed) in &shared.drugs {
        max_available = max_available.max(cells.len());
        if cells.len() < min_obs {
            skipped += 1;
            continue;
        }
        if pop_var(observed) <= 0.0 {
            skipped += 1;
            continue;
        }
        match pearson_unchecked(predicted, observed) {
            Some(r) => {
                per_drug_values.insert((*drug).to_owned(), r);
            }
            None => match policy {
                ZeroVariancePolicy::Zero => {
                    per_drug_values.insert((*drug).to_owned(), 0.0);
                }
                ZeroVariancePolicy::Skip => skipped += 1,
            },
        }
    }
    if per_drug_values.is_empty() {
        return Err(Error::data(format!(
            "no drug meets min_obs = {min_obs} with nonzero truth variance \
             (largest shared-cell count available: {max_available})"
        )));
    }
    let global = {
        let (yhat, y) = shared_pairs_static(pred, truth)?;
        if y.len() >= 2 {
            pearson_unchecked(&yhat, &y)
        } else {
            None
        }
    };
    Ok(summarize_per_drug(
        per_drug_values,
        skipped,
        global,
        min_obs,
        policy,
    ))
}

/// The four-term covariance decomposition of global r.
///
/// Responses and predictions are each split into a per-drug mean and a
/// within-drug residual; the covariance between responses and predictions
/// then splits exactly into between, within, and two cross terms. The
/// weighted combination `omega_b * r_between + omega_w * r_within`
/// approximates global r with error bounded by the cross terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub cov_total: f64,
    pub cov_between: f64,
    pub cov_within: f64,
    pub cov_cross_1: f64,
    pub cov_cross_2: f64,
    pub r_between: Option<f64>,
    pub r_within: Option<f64>,
    pub omega_b: f64,
    pub omega_w: f64,
    pub global_r_exact: Option<f64>,
    pub global_r_approx: f64,
    pub sigma_between_truth: f64,
    pub sigma_within_truth: f64,
    pub sigma_between_pred: f64,
    pub sigma_within_pred: f64,
    pub n_drugs: usize,
    pub n_pairs: usize,
}

/// Split global r into between-drug and within-drug parts, exactly.
pub fn decompose_global_r(
    pred: &PredictionTable,
    truth: &ResponseTable,
) -> Result<DecompositionReport> {
    let shared = shared_pairs(pred, truth)?;
    if shared.drugs.len() < 2 {
        return Err(Error::data(format!(
            "decomposition needs at least 2 drugs, found {}",
            shared.drugs.len()
        )));
    }
    if shared.n_pairs < 2 {
        return Err(Error::data("decomposition needs at least 2 shared pairs"));
    }

    let n = shared.n_pairs;
    let mut y = Vec::with_capacity(n);
    let mut yhat = Vec::with_capacity(n);
    let mut y_bar = Vec::with_capacity(n);
    let mut yhat_bar = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    let mut eps_hat = Vec::with_capacity(n);
    for (_, _, predicted, observed) in &shared.drugs {
        let mt = mean(observed);
        let mp = mean(predicted);
        for (&p, &t) in predicted.iter().zip(observed) {
            y.push(t);
            yhat.push(p);
            y_bar.push(mt);
            yhat_bar.push(mp);
            eps.push(t - mt);
            eps_hat.push(p - mp);
        }
    }

    let sigma_y = pop_sd(&y);
    let sigma_yhat = pop_sd(&yhat);
    if sigma_y <= 0.0 {
        return Err(Error::data(
            "decomposition undefined: truth has zero variance",
        ));
    }

    let cov_total = pop_cov(&y, &yhat);
    let cov_between = pop_cov(&y_bar, &yhat_bar);
    let cov_within = pop_cov(&eps, &eps_hat);
    let cov_cross_1 = pop_cov(&y_bar, &eps_hat);
    let cov_cross_2 = pop_cov(&eps, &yhat_bar);

    let sigma_between_truth = pop_sd(&y_bar);
    let sigma_within_truth = pop_sd(&eps);
    let sigma_between_pred = pop_sd(&yhat_bar);
    let sigma_within_pred = pop_sd(&eps_hat);

    let r_between = if sigma_between_truth > 0.0 && sigma_between_pred > 0.0 {
        Some(cov_between / (sigma_between_truth * sigma_between_pred))
    } else {
        None
    };
    let r_within = if sigma_within_truth > 0.0 && sigma_within_pred > 0.0 {
        Some(cov_within / (sigma_within_truth * sigma_within_pred))
    } else {
        None
    };

    let (omega_b, omega_w, global_r_exact) = if sigma_yhat > 0.0 {
        (
            sigma_between_truth * sigma_between_pred / (sigma_y * sigma_yhat),
            sigma_within_truth * sigma_within_pred / (sigma_y * sigma_yhat),
            Some(cov_total / (sigma_y * sigma_yhat)),
        )
    } else {
        (0.0, 0.0, None)
    };
    // Null component correlations enter the approximation as 0 so the
    // weighted combination stays defined for degenerate predictors.
    let global_r_approx =
        omega_b * r_between.unwrap_or(0.0) + omega_w * r_within.unwrap_or(0.0);

    Ok(DecompositionReport {
        cov_total,
        cov_between,
        cov_within,
        cov_cross_1,
        cov_cross_2,
        r_between,
        r_within,
        omega_b,
        omega_w,
        global_r_exact,
        global_r_approx,
        sigma_between_truth,
        sigma_within_truth,
        sigma_between_pred,
        sigma_within_pred,
        n_drugs: shared.drugs.len(),
        n_pairs: shared.n_pairs,
    })
}

/// Outcome of a replicate-concordance run: the usual metric report over
/// anchor drugs plus the anchors that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceReport {
    pub report: MetricReport,
    pub skipped_anchors: BTreeMap<String, String>,
}

/// Per-drug Pearson between two assays' values on shared cells, for a set of
/// anchor drugs. The same `min_obs` rule applies as in `per_drug_r`.
pub fn replicate_concordance(
    table_a: &ResponseTable,
    table_b: &ResponseTable,
    anchor_drugs: &[String],
    min_obs: usize,
) -> Result<ConcordanceReport> {
    let mut per_drug_values = BTreeMap::new();
    let mut skipped_anchors = BTreeMap::new();
    let mut pooled_a = Vec::new();
    let mut pooled_b = Vec::new();
    let mut anchors = anchor_drugs.to_vec();
    anchors.sort();
    anchors.dedup();
    for drug in &anchors {
        let block_a = table_a.records_of(drug);
        if block_a.is_empty() {
            skipped_anchors.insert(drug.clone(), "absent from table A".into());
            continue;
        }
        if !table_b.contains_drug(drug) {
            skipped_anchors.insert(drug.clone(), "absent from table B".into());
            continue;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for record in block_a {
            if let Some(vb) = table_b.get(drug, &record.cell_id) {
                a.push(record.value);
                b.push(vb);
            }
        }
        if a.len() < min_obs {
            skipped_anchors.insert(
                drug.clone(),
                format!("only {} shared cells (min_obs = {min_obs})", a.len()),
            );
            continue;
        }
        match pearson_unchecked(&a, &b) {
            Some(r) => {
                per_drug_values.insert(drug.clone(), r);
                pooled_a.extend_from_slice(&a);
                pooled_b.extend_from_slice(&b);
            }
            None => {
                skipped_anchors.insert(drug.clone(), "zero variance on shared cells".into());
            }
        }
    }
    if per_drug_values.is_empty() {
        return Err(Error::data(
            "no anchor drug has enough shared cells across the two tables",
        ));
    }
    let global = if pooled_a.len() >= 2 {
        pearson_unchecked(&pooled_a, &pooled_b)
    } else {
        None
    };
    let n_skipped = skipped_anchors.len();
    Ok(ConcordanceReport {
        report: summarize_per_drug(
            per_drug_values,
            n_skipped,
            global,
            min_obs,
            ZeroVariancePolicy::Zero,
        ),
        skipped_anchors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConcordance {
    pub mean: f64,
    pub sd: f64,
    pub n_pairs: usize,
    pub class_label: String,
    pub skipped_pairs: usize,
}

/// Mean pairwise per-drug profile correlation within one MoA class, computed
/// on each pair's shared cells.
pub fn profile_concordance(
    truth: &ResponseTable,
    moa: &MoaMap,
    class_label: &str,
    min_obs: usize,
) -> Result<ProfileConcordance> {
    let mut drugs: Vec<&str> = moa
        .drugs_in_class(class_label)
        .into_iter()
        .filter(|d| truth.contains_drug(d))
        .collect();
    drugs.sort();
    if drugs.len() < 2 {
        return Err(Error::data(format!(
            "MoA class `{class_label}` has {} drug(s) with responses; need at least 2",
            drugs.len()
        )));
    }
    let mut values = Vec::new();
    let mut skipped_pairs = 0usize;
    for i in 0..drugs.len() {
        for j in (i + 1)..drugs.len() {
            let block_i = truth.records_of(drugs[i]);
            let mut a = Vec::new();
            let mut b = Vec::new();
            for record in block_i {
                if let Some(v) = truth.get(drugs[j], &record.cell_id) {
                    a.push(record.value);
                    b.push(v);
                }
            }
            if a.len() < min_obs {
                skipped_pairs += 1;
                continue;
            }
            match pearson_unchecked(&a, &b) {
                Some(r) => values.push(r),
                None => skipped_pairs += 1,
            }
        }
    }
    if values.is_empty() {
        return Err(Error::data(format!(
            "MoA class `{class_label}` has no drug pair with {min_obs}+ shared cells"
        )));
    }
    Ok(ProfileConcordance {
        mean: mean(&values),
        sd: sample_sd(&values),
        n_pairs: values.len(),
        class_label: class_label.to_owned(),
        skipped_pairs,
    })
}
