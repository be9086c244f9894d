//! Closed-form linear modeling and reference predictors: PCA feature
//! reduction, (weighted) ridge regression, drug-mean oracle, cell-mean
//! prior, and per-drug target z-scoring.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureMatrix, ResponseTable};
use crate::error::{Error, Result};
use crate::metrics::PredictionTable;

/// Mean-centered SVD-based PCA with a deterministic sign convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean_vector: Vec<f64>,
    /// Row-major, `k x n_features`; rows are orthonormal.
    pub components: Vec<f64>,
    pub k: usize,
    /// The k that was asked for; `k < requested_k` means the rank or the
    /// matrix shape forced a clip.
    pub requested_k: usize,
    /// Population variance captured by each component.
    pub explained_variance: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl PcaModel {
    pub fn component(&self, i: usize) -> &[f64] {
        let p = self.feature_names.len();
        &self.components[i * p..(i + 1) * p]
    }
}

/// Fit PCA on the rows of a feature matrix. `k` is clipped to
/// `min(n_samples, n_features)` and to the numerical rank, with the clip
/// visible via `requested_k`.
pub fn pca_fit(x: &FeatureMatrix, k: usize) -> Result<PcaModel> {
    if k < 1 {
        return Err(Error::usage("pca_fit: k must be >= 1"));
    }
    let n = x.n_entities();
    let p = x.n_features();
    if n < 2 {
        return Err(Error::data("pca_fit: need at least 2 rows"));
    }

    let mut mean_vector = vec![0.0; p];
    for i in 0..n {
        for (j, v) in x.row(i).iter().enumerate() {
            mean_vector[j] += v;
        }
    }
    for m in &mut mean_vector {
        *m /= n as f64;
    }

    let mut centered = DMatrix::zeros(n, p);
    for i in 0..n {
        for (j, v) in x.row(i).iter().enumerate() {
            centered[(i, j)] = v - mean_vector[j];
        }
    }

    let svd = centered.svd(true, true);
    let singular = &svd.singular_values;
    let v_t = svd.v_t.as_ref().expect("v_t requested");

    // Descending order by singular value (nalgebra sorts, but don't rely on it).
    let mut order: Vec<usize> = (0..singular.len()).collect();
    order.sort_by(|&a, &b| singular[b].partial_cmp(&singular[a]).expect("finite"));

    let max_sv = singular[order[0]];
    let tol = max_sv * (n.max(p) as f64) * f64::EPSILON;
    let rank = order.iter().filter(|&&i| singular[i] > tol).count();
    let effective_k = k.min(n.min(p)).min(rank.max(1));

    let mut components = Vec::with_capacity(effective_k * p);
    let mut explained_variance = Vec::with_capacity(effective_k);
    for &idx in order.iter().take(effective_k) {
        let mut row: Vec<f64> = (0..p).map(|j| v_t[(idx, j)]).collect();
        // Sign convention: the largest-|entry| coordinate is positive.
        let pivot = row
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.abs().partial_cmp(&b.abs()).expect("finite"))
            .map(|(j, _)| j)
            .unwrap_or(0);
        if row[pivot] < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        components.extend_from_slice(&row);
        explained_variance.push(singular[idx] * singular[idx] / n as f64);
    }

    Ok(PcaModel {
        mean_vector,
        components,
        k: effective_k,
        requested_k: k,
        explained_variance,
        feature_names: x.feature_names().to_vec(),
    })
}

/// Project rows onto the fitted components: `(x - mean) . components^T`.
/// Output feature names are `pc1..pck`.
pub fn pca_transform(model: &PcaModel, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    if x.feature_names() != model.feature_names.as_slice() {
        return Err(Error::Schema(
            "pca_transform: feature names do not match training order".into(),
        ));
    }
    let p = model.feature_names.len();
    let k = model.k;
    let mut values = Vec::with_capacity(x.n_entities() * k);
    for i in 0..x.n_entities() {
        let row = x.row(i);
        for c in 0..k {
            let comp = model.component(c);
            let mut dot = 0.0;
            for j in 0..p {
                dot += (row[j] - model.mean_vector[j]) * comp[j];
            }
            values.push(dot);
        }
    }
    let names = (1..=k).map(|i| format!("pc{i}")).collect();
    FeatureMatrix::new(x.entity_ids().to_vec(), names, values, x.kind())
}

/// Map component scores back to the original feature space:
/// `scores . components + mean`.
pub fn pca_inverse_transform(model: &PcaModel, scores: &FeatureMatrix) -> Result<FeatureMatrix> {
    if scores.n_features() != model.k {
        return Err(Error::Schema(format!(
            "pca_inverse_transform: expected {} score columns, got {}",
            model.k,
            scores.n_features()
        )));
    }
    let p = model.feature_names.len();
    let mut values = Vec::with_capacity(scores.n_entities() * p);
    for i in 0..scores.n_entities() {
        let row = scores.row(i);
        for j in 0..p {
            let mut v = model.mean_vector[j];
            for c in 0..model.k {
                v += row[c] * model.component(c)[j];
            }
            values.push(v);
        }
    }
    FeatureMatrix::new(
        scores.entity_ids().to_vec(),
        model.feature_names.clone(),
        values,
        scores.kind(),
    )
}

/// Closed-form ridge model with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub alpha: f64,
    pub feature_names: Vec<String>,
    /// Diagonal jitter added when the factorization needed rescuing; 0 when
    /// the plain solve succeeded.
    pub jitter: f64,
}

/// Solve `(Xc^T W Xc + alpha I) w = Xc^T W yc` where `Xc`, `yc` are
/// weighted-mean-centered, via Cholesky with jitter escalation
/// (alpha + 1e-10, then + 1e-8) on failure.
pub fn ridge_fit(
    x: &DMatrix<f64>,
    y: &[f64],
    alpha: f64,
    sample_weights: Option<&[f64]>,
    feature_names: Vec<String>,
) -> Result<RidgeModel> {
    let n = x.nrows();
    let p = x.ncols();
    if n != y.len() {
        return Err(Error::usage(format!(
            "ridge_fit: {} rows but {} targets",
            n,
            y.len()
        )));
    }
    if n < 2 {
        return Err(Error::usage("ridge_fit: need at least 2 rows"));
    }
    if !(alpha > 0.0) {
        return Err(Error::usage("ridge_fit: alpha must be > 0"));
    }
    if p != feature_names.len() {
        return Err(Error::usage(format!(
            "ridge_fit: {} columns but {} feature names",
            p,
            feature_names.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("ridge_fit: non-finite input"));
    }
    let weights: Vec<f64> = match sample_weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::usage("ridge_fit: weight length mismatch"));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::data("ridge_fit: weights must be finite and >= 0"));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::usage("ridge_fit: weights must not all be zero"));
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };

    let wsum: f64 = weights.iter().sum();
    let mut x_bar = vec![0.0; p];
    let mut y_bar = 0.0;
    for i in 0..n {
        let wi = weights[i];
        y_bar += wi * y[i];
        for j in 0..p {
            x_bar[j] += wi * x[(i, j)];
        }
    }
    y_bar /= wsum;
    for v in &mut x_bar {
        *v /= wsum;
    }

    // Gram matrix and right-hand side on centered data.
    let mut gram = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    let mut row = vec![0.0; p];
    for i in 0..n {
        let wi = weights[i];
        if wi == 0.0 {
            continue;
        }
        for j in 0..p {
            row[j] = x[(i, j)] - x_bar[j];
        }
        let yc = y[i] - y_bar;
        for j in 0..p {
            let wx = wi * row[j];
            rhs[j] += wx * yc;
            for l in j..p {
                gram[(j, l)] += wx * row[l];
            }
        }
    }
    for j in 0..p {
        for l in 0..j {
            gram[(j, l)] = gram[(l, j)];
        }
    }

    let mut jitter_used = 0.0;
    let solution = 'solve: {
        for jitter in [0.0, 1e-10, 1e-8] {
            let mut lhs = gram.clone();
            for j in 0..p {
                lhs[(j, j)] += alpha + jitter;
            }
            if let Some(chol) = lhs.cholesky() {
                jitter_used = jitter;
                break 'solve Some(chol.solve(&rhs));
            }
        }
        None
    };
    let weights_vec = match solution {
        Some(w) => w,
        None => {
            let diag_max = (0..p).map(|j| gram[(j, j)]).fold(0.0f64, f64::max);
            return Err(Error::numerical(format!(
                "ridge_fit: Cholesky failed even with jitter (alpha = {alpha}, \
                 max Gram diagonal = {diag_max:.3e})"
            )));
        }
    };

    let intercept = y_bar
        - weights_vec
            .iter()
            .zip(&x_bar)
            .map(|(w, m)| w * m)
            .sum::<f64>();
    Ok(RidgeModel {
        weights: weights_vec.iter().copied().collect(),
        intercept,
        alpha,
        feature_names,
        jitter: jitter_used,
    })
}

/// `X . w + intercept` for a design matrix in the model's feature order.
pub fn ridge_predict(model: &RidgeModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.weights.len() {
        return Err(Error::Schema(format!(
            "ridge_predict: model has {} features, design matrix has {} columns",
            model.weights.len(),
            x.ncols()
        )));
    }
    Ok((0..x.nrows())
        .map(|i| {
            model.intercept
                + (0..x.ncols()).map(|j| x[(i, j)] * model.weights[j]).sum::<f64>()
        })
        .collect())
}

/// Reference predictors over (drug, cell) keys. Total over any key domain:
/// unseen entities fall back to the training grand mean, and fallbacks are
/// counted in the prediction provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predictor {
    DrugMean {
        means: BTreeMap<String, f64>,
        grand_mean: f64,
    },
    CellMean {
        means: BTreeMap<String, f64>,
        grand_mean: f64,
    },
}

impl Predictor {
    pub fn kind(&self) -> &'static str {
        match self {
            Predictor::DrugMean { .. } => "drug_mean",
            Predictor::CellMean { .. } => "cell_mean",
        }
    }

    /// Predict one key; the flag reports a grand-mean fallback.
    pub fn predict(&self, drug_id: &str, cell_id: &str) -> (f64, bool) {
        match self {
            Predictor::DrugMean { means, grand_mean } => match means.get(drug_id) {
                Some(m) => (*m, false),
                None => (*grand_mean, true),
            },
            Predictor::CellMean { means, grand_mean } => match means.get(cell_id) {
                Some(m) => (*m, false),
                None => (*grand_mean, true),
            },
        }
    }

    /// Predict a set of keys; returns the table and the fallback count.
    pub fn predict_keys<'a>(
        &self,
        keys: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<(PredictionTable, usize)> {
        let mut records = Vec::new();
        let mut fallbacks = 0usize;
        for (drug, cell) in keys {
            let (value, fell_back) = self.predict(drug, cell);
            if fell_back {
                fallbacks += 1;
            }
            records.push((drug.to_owned(), cell.to_owned(), value));
        }
        Ok((PredictionTable::from_records(records)?, fallbacks))
    }

    /// Predict every key of a response table.
    pub fn predict_for(&self, table: &ResponseTable) -> Result<(PredictionTable, usize)> {
        self.predict_keys(
            table
                .records()
                .iter()
                .map(|r| (r.drug_id.as_str(), r.cell_id.as_str())),
        )
    }
}

fn grand_mean(train: &ResponseTable) -> f64 {
    train.records().iter().map(|r| r.value).sum::<f64>() / train.len() as f64
}

/// Predicts each drug's training mean regardless of cell.
pub fn drug_mean_predictor(train: &ResponseTable) -> Predictor {
    let means = train
        .per_drug()
        .map(|(drug, block)| {
            (
                drug.to_owned(),
                block.iter().map(|r| r.value).sum::<f64>() / block.len() as f64,
            )
        })
        .collect();
    Predictor::DrugMean {
        means,
        grand_mean: grand_mean(train),
    }
}

/// Predicts each cell's mean response over the training drugs.
pub fn cell_mean_predictor(train: &ResponseTable) -> Predictor {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in train.records() {
        let slot = sums.entry(r.cell_id.clone()).or_insert((0.0, 0));
        slot.0 += r.value;
        slot.1 += 1;
    }
    let means = sums
        .into_iter()
        .map(|(cell, (sum, n))| (cell, sum / n as f64))
        .collect();
    Predictor::CellMean {
        means,
        grand_mean: grand_mean(train),
    }
}

/// Within each drug, replace values by `(y - mean) / sd` (population sd).
/// Drugs with fewer than 2 observations or zero sd are centered only and
/// flagged.
pub fn zscore_per_drug(train: &ResponseTable) -> Result<(ResponseTable, Vec<String>)> {
    let mut records = Vec::with_capacity(train.len());
    let mut flagged = Vec::new();
    for (drug, block) in train.per_drug() {
        let n = block.len() as f64;
        let mean = block.iter().map(|r| r.value).sum::<f64>() / n;
        let var = block
            .iter()
            .map(|r| (r.value - mean) * (r.value - mean))
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        let degenerate = block.len() < 2 || sd <= 0.0;
        if degenerate {
            flagged.push(drug.to_owned());
        }
        for r in block {
            let centered = r.value - mean;
            let value = if degenerate { centered } else { centered / sd };
            records.push((r.drug_id.clone(), r.cell_id.clone(), value));
        }
    }
    let (table, _) = ResponseTable::from_records(records, train.units())?;
    Ok((table, flagged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{EntityKind, Units};
    use crate::metrics::{per_drug_r, ZeroVariancePolicy};
    use rand::Rng;

    fn features(ids: &[&str], names: &[&str], rows: &[&[f64]]) -> FeatureMatrix {
        let values: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMatrix::new(
            ids.iter().map(|s| s.to_string()).collect(),
            names.iter().map(|s| s.to_string()).collect(),
            values,
            EntityKind::Cell,
        )
        .unwrap()
    }

    #[test]
    fn pca_rank_one_matrix_captures_all_variance() {
        let x = features(
            &["a", "b", "c"],
            &["f1", "f2"],
            &[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]],
        );
        let model = pca_fit(&x, 1).unwrap();
        let total_var: f64 = {
            let n = 3.0;
            let m1 = 2.0;
            let m2 = 4.0;
            let v1 = ((1.0f64 - m1).powi(2) + (2.0 - m1).powi(2) + (3.0 - m1).powi(2)) / n;
            let v2 = ((2.0f64 - m2).powi(2) + (4.0 - m2).powi(2) + (6.0 - m2).powi(2)) / n;
            v1 + v2
        };
        assert!((model.explained_variance[0] - total_var).abs() < 1e-10);
    }

    #[test]
    fn pca_square_point_set_has_equal_axis_variances() {
        // Hand eigen-decomposition: centered points (+-1, +-1) give the
        // population covariance matrix I, so both eigenvalues are 1 and the
        // components span the plane.
        let x = features(
            &["a", "b", "c", "d"],
            &["f1", "f2"],
            &[&[0.0, 0.0], &[2.0, 0.0], &[0.0, 2.0], &[2.0, 2.0]],
        );
        let model = pca_fit(&x, 2).unwrap();
        assert_eq!(model.k, 2);
        assert!((model.explained_variance[0] - 1.0).abs() < 1e-10);
        assert!((model.explained_variance[1] - 1.0).abs() < 1e-10);
        // Orthonormal rows spanning R^2: projection matrix C^T C = I.
        let c0 = model.component(0);
        let c1 = model.component(1);
        assert!((c0[0] * c0[0] + c0[1] * c0[1] - 1.0).abs() < 1e-8);
        assert!((c1[0] * c1[0] + c1[1] * c1[1] - 1.0).abs() < 1e-8);
        assert!((c0[0] * c1[0] + c0[1] * c1[1]).abs() < 1e-8);
    }

    #[test]
    fn pca_k_is_clipped_to_rank_with_requested_recorded() {
        let x = features(
            &["a", "b", "c"],
            &["f1", "f2", "f3"],
            &[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[3.0, 6.0, 9.0]],
        );
        let model = pca_fit(&x, 3).unwrap();
        assert_eq!(model.requested_k, 3);
        assert_eq!(model.k, 1, "rank-1 data must clip k to 1");
    }

    #[test]
    fn pca_transform_of_mean_row_is_zero() {
        let x = features(
            &["a", "b"],
            &["f1", "f2"],
            &[&[1.0, 5.0], &[3.0, 9.0]],
        );
        let model = pca_fit(&x, 1).unwrap();
        let mean_row = features(&["m"], &["f1", "f2"], &[&[2.0, 7.0]]);
        let out = pca_transform(&model, &mean_row).unwrap();
        assert!(out.row(0)[0].abs() < 1e-12);
    }

    #[test]
    fn pca_transform_inverse_recovers_training_rows() {
        let mut rng = crate::rng::derive_rng(4, &["pca"]);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.random::<f64>() * 3.0).collect())
            .collect();
        let row_refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let x = features(&["a", "b", "c", "d", "e", "f"], &["f1", "f2", "f3", "f4"], &row_refs);
        let model = pca_fit(&x, 4).unwrap();
        let scores = pca_transform(&model, &x).unwrap();
        let back = pca_inverse_transform(&model, &scores).unwrap();
        for i in 0..x.n_entities() {
            for j in 0..x.n_features() {
                assert!((back.row(i)[j] - x.row(i)[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_transform_matches_direct_product_on_unseen_row() {
        let x = features(
            &["a", "b", "c"],
            &["f1", "f2"],
            &[&[1.0, 0.5], &[2.0, 1.5], &[4.0, -1.0]],
        );
        let model = pca_fit(&x, 2).unwrap();
        let unseen = features(&["u"], &["f1", "f2"], &[&[3.0, 2.0]]);
        let out = pca_transform(&model, &unseen).unwrap();
        // Brute-force (x - mu) C^T.
        for c in 0..model.k {
            let comp = model.component(c);
            let expected: f64 = (0..2)
                .map(|j| (unseen.row(0)[j] - model.mean_vector[j]) * comp[j])
                .sum();
            assert!((out.row(0)[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_transform_rejects_mismatched_features() {
        let x = features(&["a", "b"], &["f1", "f2"], &[&[1.0, 2.0], &[3.0, 4.0]]);
        let model = pca_fit(&x, 1).unwrap();
        let wrong = features(&["a", "b"], &["f2", "f1"], &[&[2.0, 1.0], &[4.0, 3.0]]);
        assert!(pca_transform(&model, &wrong).is_err());
    }

    #[test]
    fn pca_reconstruction_error_nonincreasing_in_k() {
        let mut rng = crate::rng::derive_rng(8, &["pca-recon"]);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..5).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let row_refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let ids: Vec<String> = (0..10).map(|i| format!("e{i}")).collect();
        let id_refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        let x = features(&id_refs, &["f1", "f2", "f3", "f4", "f5"], &row_refs);
        let mut previous = f64::INFINITY;
        for k in 1..=5 {
            let model = pca_fit(&x, k).unwrap();
            let scores = pca_transform(&model, &x).unwrap();
            let back = pca_inverse_transform(&model, &scores).unwrap();
            let mut err = 0.0;
            for i in 0..x.n_entities() {
                for j in 0..x.n_features() {
                    err += (back.row(i)[j] - x.row(i)[j]).powi(2);
                }
            }
            assert!(err <= previous + 1e-10, "k={k}: {err} > {previous}");
            previous = err;
        }
    }

    #[test]
    fn ridge_constant_targets_give_zero_weights() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = [7.0, 7.0, 7.0];
        let model = ridge_fit(&x, &y, 1.0, None, vec!["a".into(), "b".into()]).unwrap();
        assert!(model.weights.iter().all(|w| w.abs() < 1e-12));
        assert!((model.intercept - 7.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_single_feature_matches_scalar_closed_form() {
        // slope = Sxy / (Sxx + alpha) on centered data: 2 / (2 + 1) = 2/3,
        // intercept = 2 - (2/3) * 2 = 2/3.
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let y = [1.0, 2.0, 3.0];
        let model = ridge_fit(&x, &y, 1.0, None, vec!["f".into()]).unwrap();
        assert!((model.weights[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((model.intercept - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_constant_weights_match_unweighted_with_scaled_alpha() {
        let mut rng = crate::rng::derive_rng(6, &["ridge-weights"]);
        let n = 12;
        let p = 3;
        let data: Vec<f64> = (0..n * p).map(|_| rng.random::<f64>() * 2.0).collect();
        let x = DMatrix::from_row_slice(n, p, &data);
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0).collect();
        let names = vec!["a".into(), "b".into(), "c".into()];
        let c = 2.5;
        let alpha = 0.7;
        let weighted = ridge_fit(&x, &y, alpha * c, Some(&vec![c; n]), names.clone()).unwrap();
        let unweighted = ridge_fit(&x, &y, alpha, None, names).unwrap();
        for (a, b) in weighted.weights.iter().zip(&unweighted.weights) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!((weighted.intercept - unweighted.intercept).abs() < 1e-10);
    }

    #[test]
    fn ridge_satisfies_stationarity() {
        let mut rng = crate::rng::derive_rng(10, &["stationarity"]);
        for _ in 0..10 {
            let n = rng.random_range(5..30);
            let p = rng.random_range(1..8);
            let data: Vec<f64> = (0..n * p).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let x = DMatrix::from_row_slice(n, p, &data);
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 + 0.1).collect();
            let alpha = 0.5;
            let names = (0..p).map(|j| format!("f{j}")).collect();
            let model = ridge_fit(&x, &y, alpha, Some(&w), names).unwrap();

            // || Xc^T W (yc - Xc w) - alpha w ||_inf <= 1e-8 ||y||_inf
            let wsum: f64 = w.iter().sum();
            let mut x_bar = vec![0.0; p];
            let mut y_bar = 0.0;
            for i in 0..n {
                y_bar += w[i] * y[i];
                for j in 0..p {
                    x_bar[j] += w[i] * x[(i, j)];
                }
            }
            y_bar /= wsum;
            for v in &mut x_bar {
                *v /= wsum;
            }
            let mut grad = vec![0.0; p];
            for i in 0..n {
                let residual = (y[i] - y_bar)
                    - (0..p)
                        .map(|j| (x[(i, j)] - x_bar[j]) * model.weights[j])
                        .sum::<f64>();
                for j in 0..p {
                    grad[j] += w[i] * (x[(i, j)] - x_bar[j]) * residual;
                }
            }
            let y_max = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for j in 0..p {
                let g = grad[j] - alpha * model.weights[j];
                assert!(g.abs() <= 1e-8 * y_max.max(1.0), "stationarity violated: {g}");
            }
        }
    }

    /// Independent dense solver (Gauss-Jordan with partial pivoting) used as
    /// the normal-equation oracle.
    fn solve_dense_oracle(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            let diag = a[col][col];
            for j in col..n {
                a[col][j] /= diag;
            }
            b[col] /= diag;
            for i in 0..n {
                if i != col && a[i][col] != 0.0 {
                    let factor = a[i][col];
                    for j in col..n {
                        a[i][j] -= factor * a[col][j];
                    }
                    b[i] -= factor * b[col];
                }
            }
        }
        b
    }

    fn ridge_oracle(x: &DMatrix<f64>, y: &[f64], alpha: f64) -> (Vec<f64>, f64) {
        let n = x.nrows();
        let p = x.ncols();
        let x_bar: Vec<f64> = (0..p)
            .map(|j| (0..n).map(|i| x[(i, j)]).sum::<f64>() / n as f64)
            .collect();
        let y_bar = y.iter().sum::<f64>() / n as f64;
        let mut gram = vec![vec![0.0; p]; p];
        let mut rhs = vec![0.0; p];
        for i in 0..n {
            for j in 0..p {
                let xc = x[(i, j)] - x_bar[j];
                rhs[j] += xc * (y[i] - y_bar);
                for l in 0..p {
                    gram[j][l] += xc * (x[(i, l)] - x_bar[l]);
                }
            }
        }
        for (j, row) in gram.iter_mut().enumerate() {
            row[j] += alpha;
        }
        let w = solve_dense_oracle(gram, rhs);
        let intercept = y_bar - w.iter().zip(&x_bar).map(|(a, b)| a * b).sum::<f64>();
        (w, intercept)
    }

    #[test]
    fn ridge_matches_brute_force_normal_equations() {
        let mut rng = crate::rng::derive_rng(14, &["ridge-oracle"]);
        for _ in 0..10 {
            let n = rng.random_range(10..50);
            let p = rng.random_range(1..10);
            let data: Vec<f64> = (0..n * p).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let x = DMatrix::from_row_slice(n, p, &data);
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let names = (0..p).map(|j| format!("f{j}")).collect();
            let model = ridge_fit(&x, &y, 1.0, None, names).unwrap();
            let (w_oracle, b_oracle) = ridge_oracle(&x, &y, 1.0);
            for (a, b) in model.weights.iter().zip(&w_oracle) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
            assert!((model.intercept - b_oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn ridge_small_alpha_approaches_ols_residuals() {
        let mut rng = crate::rng::derive_rng(15, &["ols-limit"]);
        let n = 20;
        let p = 3;
        let data: Vec<f64> = (0..n * p).map(|_| rng.random::<f64>() * 2.0).collect();
        let x = DMatrix::from_row_slice(n, p, &data);
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 5.0).collect();
        let names = (0..p).map(|j| format!("f{j}")).collect();
        let model = ridge_fit(&x, &y, 1e-10, None, names).unwrap();
        let predictions = ridge_predict(&model, &x).unwrap();
        let (w_ols, b_ols) = ridge_oracle(&x, &y, 0.0);
        for i in 0..n {
            let ols_pred: f64 =
                b_ols + (0..p).map(|j| x[(i, j)] * w_ols[j]).sum::<f64>();
            let r1 = y[i] - predictions[i];
            let r2 = y[i] - ols_pred;
            assert!((r1 - r2).abs() < 1e-8);
        }
    }

    #[test]
    fn ridge_predict_single_row_matches_summation() {
        let model = RidgeModel {
            weights: vec![0.5, -2.0, 1.0],
            intercept: 3.0,
            alpha: 1.0,
            feature_names: vec!["a".into(), "b".into(), "c".into()],
            jitter: 0.0,
        };
        let x = DMatrix::from_row_slice(1, 3, &[2.0, 0.5, -1.0]);
        let out = ridge_predict(&model, &x).unwrap();
        let expected = 3.0 + 0.5 * 2.0 + (-2.0) * 0.5 + 1.0 * (-1.0);
        assert!((out[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn ridge_zero_weight_model_predicts_intercept() {
        let model = RidgeModel {
            weights: vec![0.0, 0.0],
            intercept: 4.5,
            alpha: 1.0,
            feature_names: vec!["a".into(), "b".into()],
            jitter: 0.0,
        };
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ridge_predict(&model, &x).unwrap(), vec![4.5, 4.5]);
    }

    fn toy_table(records: &[(&str, &str, f64)]) -> ResponseTable {
        ResponseTable::from_records(
            records
                .iter()
                .map(|(d, c, v)| (d.to_string(), c.to_string(), *v)),
            Units::LnIc50,
        )
        .unwrap()
        .0
    }

    #[test]
    fn drug_mean_predictor_on_training_drugs_has_zero_per_drug_r() {
        let truth = toy_table(&[
            ("d1", "c1", 1.0),
            ("d1", "c2", 2.0),
            ("d1", "c3", 3.0),
            ("d1", "c4", 4.0),
            ("d1", "c5", 5.0),
            ("d2", "c1", 6.0),
            ("d2", "c2", 8.0),
            ("d2", "c3", 10.0),
            ("d2", "c4", 12.0),
            ("d2", "c5", 14.0),
        ]);
        let predictor = drug_mean_predictor(&truth);
        let (pred, fallbacks) = predictor.predict_for(&truth).unwrap();
        assert_eq!(fallbacks, 0);
        let report = per_drug_r(&pred, &truth, 5, ZeroVariancePolicy::Zero).unwrap();
        assert_eq!(report.per_drug_r_mean, 0.0);
    }

    #[test]
    fn drug_mean_predictor_one_drug_and_unseen_fallback() {
        let train = toy_table(&[("d1", "c1", 2.0), ("d1", "c2", 4.0)]);
        let predictor = drug_mean_predictor(&train);
        assert_eq!(predictor.predict("d1", "cX"), (3.0, false));
        assert_eq!(predictor.predict("dX", "c1"), (3.0, true));
    }

    #[test]
    fn cell_mean_predictor_matches_direct_averaging() {
        let train = toy_table(&[
            ("d1", "c1", 1.0),
            ("d1", "c2", 2.0),
            ("d1", "c3", 3.0),
            ("d1", "c4", 4.0),
            ("d2", "c1", 3.0),
            ("d2", "c2", 4.0),
            ("d2", "c3", 5.0),
            ("d2", "c4", 6.0),
            ("d3", "c1", 5.0),
            ("d3", "c2", 6.0),
            ("d3", "c3", 7.0),
            ("d3", "c4", 8.0),
        ]);
        let predictor = cell_mean_predictor(&train);
        assert_eq!(predictor.predict("any", "c1"), (3.0, false));
        assert_eq!(predictor.predict("any", "c2"), (4.0, false));
        assert_eq!(predictor.predict("any", "c3"), (5.0, false));
        assert_eq!(predictor.predict("any", "c4"), (6.0, false));
    }

    #[test]
    fn cell_mean_predictor_single_observation_cell() {
        let train = toy_table(&[("d1", "c1", 7.0), ("d1", "c2", 1.0)]);
        let predictor = cell_mean_predictor(&train);
        assert_eq!(predictor.predict("d9", "c1"), (7.0, false));
    }

    #[test]
    fn cell_mean_prior_shift_property() {
        // Adding a constant c to one of D training drugs' profiles shifts
        // every cell's prediction by c/D, so per-drug r is unchanged.
        let base = [
            ("d1", "c1", 1.0),
            ("d1", "c2", 2.0),
            ("d1", "c3", 3.0),
            ("d1", "c4", 4.0),
            ("d1", "c5", 5.0),
            ("d2", "c1", 2.0),
            ("d2", "c2", 1.0),
            ("d2", "c3", 4.0),
            ("d2", "c4", 3.0),
            ("d2", "c5", 6.0),
            ("d3", "c1", 0.0),
            ("d3", "c2", 2.5),
            ("d3", "c3", 1.5),
            ("d3", "c4", 5.0),
            ("d3", "c5", 4.0),
        ];
        let train = toy_table(&base);
        let shifted: Vec<(&str, &str, f64)> = base
            .iter()
            .map(|(d, c, v)| (*d, *c, if *d == "d2" { v + 9.0 } else { *v }))
            .collect();
        let train_shifted = toy_table(&shifted);

        let p1 = cell_mean_predictor(&train);
        let p2 = cell_mean_predictor(&train_shifted);
        for cell in ["c1", "c2", "c3", "c4", "c5"] {
            let (v1, _) = p1.predict("x", cell);
            let (v2, _) = p2.predict("x", cell);
            assert!((v2 - v1 - 9.0 / 3.0).abs() < 1e-12);
        }
        let (pred1, _) = p1.predict_for(&train).unwrap();
        let (pred2, _) = p2.predict_for(&train).unwrap();
        let r1 = per_drug_r(&pred1, &train, 5, ZeroVariancePolicy::Zero).unwrap();
        let r2 = per_drug_r(&pred2, &train, 5, ZeroVariancePolicy::Zero).unwrap();
        for (drug, v1) in &r1.per_drug_values {
            assert!((v1 - r2.per_drug_values[drug]).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_per_drug_normalizes_and_flags() {
        let train = toy_table(&[
            ("d1", "c1", 1.0),
            ("d1", "c2", 2.0),
            ("d1", "c3", 6.0),
            ("d2", "c1", 5.0),
            ("d2", "c2", 5.0),
            ("d2", "c3", 5.0),
        ]);
        let (z, flagged) = zscore_per_drug(&train).unwrap();
        // d1 transformed to mean 0, population sd 1.
        let d1: Vec<f64> = z.records_of("d1").iter().map(|r| r.value).collect();
        let mean: f64 = d1.iter().sum::<f64>() / 3.0;
        let sd = (d1.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((sd - 1.0).abs() < 1e-12);
        // Constant-profile d2 is centered to zeros and flagged.
        assert!(z.records_of("d2").iter().all(|r| r.value == 0.0));
        assert_eq!(flagged, vec!["d2".to_owned()]);
    }

    #[test]
    fn zscore_preserves_per_drug_r_against_original() {
        let train = toy_table(&[
            ("d1", "c1", 1.0),
            ("d1", "c2", 3.0),
            ("d1", "c3", 2.0),
            ("d1", "c4", 5.0),
            ("d1", "c5", 4.0),
        ]);
        let (z, _) = zscore_per_drug(&train).unwrap();
        let pred = PredictionTable::from_records(
            z.records()
                .iter()
                .map(|r| (r.drug_id.clone(), r.cell_id.clone(), r.value)),
        )
        .unwrap();
        let report = per_drug_r(&pred, &train, 5, ZeroVariancePolicy::Zero).unwrap();
        assert!((report.per_drug_r_mean - 1.0).abs() < 1e-12);
    }
}
