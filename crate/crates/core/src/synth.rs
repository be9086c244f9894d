//! Deterministic synthetic-dataset generator with known ground-truth
//! structure.
//!
//! Responses follow `y[d,c] = mu_d + s_d * (u_d . z_c) + eps` with latent
//! standard-normal cell vectors `z_c`, unit drug direction vectors `u_d`
//! grouped into clusters (the MoA classes), and iid Gaussian noise. Cell
//! features expose `z_c` plus pure-noise distractor columns, so a regularized
//! model has to find the signal. Drug means carry a configurable cluster
//! (class potency) component, and every direction can share a common
//! fragility axis so that cross-cluster transfer has a floor.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataio::{EntityKind, FeatureMatrix, MoaMap, ResponseTable, Units};
use crate::error::{Error, Result};
use crate::rng::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_drugs: usize,
    pub n_cells: usize,
    pub latent_dim: usize,
    /// Standard deviation of drug means `mu_d`.
    pub sigma_between: f64,
    /// Fraction of the drug-mean variance carried by the cluster label
    /// (0 = iid potency, 1 = potency fully determined by class).
    pub class_potency_share: f64,
    /// Uniform range for the per-drug signal scale `s_d`.
    pub signal_scale: (f64, f64),
    pub n_clusters: usize,
    /// Per-drug tilt (radians) away from the cluster base direction,
    /// drawn uniformly from [0, angle].
    pub within_cluster_angle: f64,
    /// Pairwise cosine between cluster base directions (0 = orthogonal).
    pub inter_cluster_cos: f64,
    /// Weight of a shared fragility axis mixed into every drug direction.
    pub shared_axis_weight: f64,
    pub sigma_noise: f64,
    pub n_distractor_features: usize,
    pub seed: u64,
}

/// Generator internals exposed for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mu: BTreeMap<String, f64>,
    pub signal_scale: BTreeMap<String, f64>,
    pub direction: BTreeMap<String, Vec<f64>>,
    pub cell_latent: BTreeMap<String, Vec<f64>>,
    pub cluster: BTreeMap<String, String>,
    /// Per-drug noise-free correlation ceiling
    /// `s_d / sqrt(s_d^2 + sigma_noise^2)` (unit directions, unit latent
    /// variance).
    pub analytic_ceiling: BTreeMap<String, f64>,
    pub config: SynthConfig,
}

impl GroundTruth {
    /// The noise-free signal `mu_d + s_d * (u_d . z_c)`.
    pub fn noise_free_value(&self, drug_id: &str, cell_id: &str) -> Option<f64> {
        let mu = self.mu.get(drug_id)?;
        let s = self.signal_scale.get(drug_id)?;
        let u = self.direction.get(drug_id)?;
        let z = self.cell_latent.get(cell_id)?;
        let dot: f64 = u.iter().zip(z).map(|(a, b)| a * b).sum();
        Some(mu + s * dot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub response: ResponseTable,
    pub cell_features: FeatureMatrix,
    pub moa: MoaMap,
    pub ground_truth: GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Dominance,
    TwoCluster,
    NoAnalog,
    NoisyLeakage,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Dominance,
        Preset::TwoCluster,
        Preset::NoAnalog,
        Preset::NoisyLeakage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Dominance => "dominance",
            Preset::TwoCluster => "two-cluster",
            Preset::NoAnalog => "no-analog",
            Preset::NoisyLeakage => "noisy-leakage",
        }
    }

    pub fn parse(name: &str) -> Result<Preset> {
        match name {
            "dominance" => Ok(Preset::Dominance),
            "two-cluster" => Ok(Preset::TwoCluster),
            "no-analog" => Ok(Preset::NoAnalog),
            "noisy-leakage" => Ok(Preset::NoisyLeakage),
            other => Err(Error::usage(format!(
                "unknown preset `{other}` (expected dominance|two-cluster|no-analog|noisy-leakage)"
            ))),
        }
    }

    /// Preset configuration at the given seed.
    pub fn config(self, seed: u64) -> SynthConfig {
        match self {
            // Between-drug spread ten times the within-drug spread: the
            // trivial-predictor regime.
            Preset::Dominance => SynthConfig {
                n_drugs: 100,
                n_cells: 300,
                latent_dim: 8,
                sigma_between: 10.0,
                class_potency_share: 0.9,
                signal_scale: (0.7, 0.9),
                n_clusters: 5,
                within_cluster_angle: 0.25,
                inter_cluster_cos: 0.0,
                shared_axis_weight: 0.0,
                sigma_noise: 0.6,
                n_distractor_features: 12,
                seed,
            },
            // Two tight drug clusters with conflicting directions: the
            // within-class training and analog-matching regime.
            Preset::TwoCluster => SynthConfig {
                n_drugs: 70,
                n_cells: 160,
                latent_dim: 10,
                sigma_between: 2.0,
                class_potency_share: 0.8,
                signal_scale: (0.9, 1.1),
                n_clusters: 2,
                within_cluster_angle: 0.12,
                inter_cluster_cos: -0.15,
                shared_axis_weight: 0.0,
                sigma_noise: 0.35,
                n_distractor_features: 10,
                seed,
            },
            // Every drug its own direction plus a shared fragility axis:
            // the cell-mean prior works but profile matching has nothing
            // to transfer.
            Preset::NoAnalog => SynthConfig {
                n_drugs: 60,
                n_cells: 150,
                latent_dim: 64,
                sigma_between: 2.0,
                class_potency_share: 0.0,
                signal_scale: (0.9, 1.1),
                n_clusters: 60,
                within_cluster_angle: 0.0,
                inter_cluster_cos: 0.0,
                shared_axis_weight: 0.55,
                sigma_noise: 0.4,
                n_distractor_features: 8,
                seed,
            },
            // Small, noisy, and overparameterized: epoch-to-epoch metric
            // jitter for the checkpoint-selection audit.
            Preset::NoisyLeakage => SynthConfig {
                n_drugs: 40,
                n_cells: 60,
                latent_dim: 6,
                sigma_between: 3.0,
                class_potency_share: 0.5,
                signal_scale: (0.5, 0.8),
                n_clusters: 4,
                within_cluster_angle: 0.3,
                inter_cluster_cos: 0.0,
                shared_axis_weight: 0.0,
                sigma_noise: 2.0,
                n_distractor_features: 20,
                seed,
            },
        }
    }
}

fn validate(config: &SynthConfig) -> Result<()> {
    if config.n_drugs < 1 || config.n_cells < 1 || config.latent_dim < 1 || config.n_clusters < 1 {
        return Err(Error::usage("synth: all dimensions must be >= 1"));
    }
    if config.sigma_between < 0.0 || config.sigma_noise < 0.0 {
        return Err(Error::usage("synth: standard deviations must be >= 0"));
    }
    if !(0.0..=1.0).contains(&config.class_potency_share) {
        return Err(Error::usage("synth: class_potency_share must be in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&config.shared_axis_weight) {
        return Err(Error::usage("synth: shared_axis_weight must be in [0, 1]"));
    }
    let (lo, hi) = config.signal_scale;
    if !(lo >= 0.0 && hi >= lo) {
        return Err(Error::usage("synth: signal_scale range must be 0 <= lo <= hi"));
    }
    let needed = config.n_clusters + usize::from(config.shared_axis_weight > 0.0);
    if needed > config.latent_dim {
        return Err(Error::usage(format!(
            "synth: latent_dim {} too small for {} cluster directions{}",
            config.latent_dim,
            config.n_clusters,
            if config.shared_axis_weight > 0.0 {
                " plus a shared axis"
            } else {
                ""
            }
        )));
    }
    let g = config.n_clusters;
    if g > 1 {
        let c = config.inter_cluster_cos;
        if c >= 1.0 || c <= -1.0 / (g as f64 - 1.0) {
            return Err(Error::usage(format!(
                "synth: inter_cluster_cos {c} infeasible for {g} clusters"
            )));
        }
    }
    Ok(())
}

fn unit_normal_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt orthonormal basis of `count` seeded random directions.
fn orthonormal_basis(rng: &mut impl Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = unit_normal_vec(rng, dim);
        for b in &basis {
            let proj = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            for x in &mut v {
                *x /= n;
            }
            basis.push(v);
        }
    }
    basis
}

/// Generate a dataset with planted structure. Same seed, same bytes.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    validate(config)?;
    let dim = config.latent_dim;
    let use_shared = config.shared_axis_weight > 0.0;

    let drug_width = config.n_drugs.to_string().len().max(3);
    let cell_width = config.n_cells.to_string().len().max(3);
    let cluster_width = config.n_clusters.to_string().len().max(2);
    let drug_ids: Vec<String> = (0..config.n_drugs)
        .map(|i| format!("d{i:0drug_width$}"))
        .collect();
    let cell_ids: Vec<String> = (0..config.n_cells)
        .map(|i| format!("c{i:0cell_width$}"))
        .collect();

    // Cluster bases with the configured pairwise cosine, plus the shared
    // axis, all built from one orthonormal frame.
    let mut dir_rng = derive_rng(config.seed, &["synth", "directions"]);
    let frame = orthonormal_basis(&mut dir_rng, dim, config.n_clusters + usize::from(use_shared));
    let g = config.n_clusters;
    let bases: Vec<Vec<f64>> = if g == 1 {
        vec![frame[0].clone()]
    } else {
        // Cholesky of the cosine Gram matrix maps the orthonormal frame to
        // directions with the requested pairwise cosine.
        let c = config.inter_cluster_cos;
        let gram = nalgebra::DMatrix::from_fn(g, g, |i, j| if i == j { 1.0 } else { c });
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::usage("synth: cluster cosine matrix not positive definite"))?;
        let l = chol.l();
        (0..g)
            .map(|i| {
                let mut v = vec![0.0; dim];
                for k in 0..=i {
                    let w = l[(i, k)];
                    for (x, e) in v.iter_mut().zip(&frame[k]) {
                        *x += w * e;
                    }
                }
                v
            })
            .collect()
    };
    let shared_axis = use_shared.then(|| frame[g].clone());

    // Per-drug directions: tilt the cluster base inside the subspace
    // orthogonal to both the base and the shared axis, then mix in the
    // shared axis.
    let mut tilt_rng = derive_rng(config.seed, &["synth", "tilt"]);
    let angle_dist = Uniform::new_inclusive(0.0, config.within_cluster_angle.max(0.0))
        .map_err(|e| Error::usage(format!("synth: bad angle range: {e}")))?;
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(config.n_drugs);
    let mut clusters: Vec<usize> = Vec::with_capacity(config.n_drugs);
    for i in 0..config.n_drugs {
        let cluster = i % g;
        clusters.push(cluster);
        let base = &bases[cluster];
        let theta: f64 = if config.within_cluster_angle > 0.0 {
            angle_dist.sample(&mut tilt_rng)
        } else {
            0.0
        };
        let mut specific = base.clone();
        if theta > 0.0 {
            let mut w = unit_normal_vec(&mut tilt_rng, dim);
            let proj_base = dot(&w, base);
            for (x, b) in w.iter_mut().zip(base) {
                *x -= proj_base * b;
            }
            if let Some(axis) = &shared_axis {
                let proj_axis = dot(&w, axis);
                for (x, a) in w.iter_mut().zip(axis) {
                    *x -= proj_axis * a;
                }
            }
            let n = norm(&w);
            if n > 1e-10 {
                for x in &mut w {
                    *x /= n;
                }
                for j in 0..dim {
                    specific[j] = theta.cos() * base[j] + theta.sin() * w[j];
                }
            }
        }
        let beta = config.shared_axis_weight;
        let direction: Vec<f64> = match &shared_axis {
            Some(axis) => {
                let spec_scale = (1.0 - beta * beta).sqrt();
                (0..dim)
                    .map(|j| beta * axis[j] + spec_scale * specific[j])
                    .collect()
            }
            None => specific,
        };
        directions.push(direction);
    }

    // Potency: cluster component plus per-drug jitter, total sd sigma_between.
    let mut potency_rng = derive_rng(config.seed, &["synth", "potency"]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let cluster_sd = config.sigma_between * config.class_potency_share.sqrt();
    let drug_sd = config.sigma_between * (1.0 - config.class_potency_share).sqrt();
    let cluster_potency: Vec<f64> = (0..g)
        .map(|_| normal.sample(&mut potency_rng) * cluster_sd)
        .collect();
    let mu: Vec<f64> = (0..config.n_drugs)
        .map(|i| cluster_potency[clusters[i]] + normal.sample(&mut potency_rng) * drug_sd)
        .collect();

    let mut scale_rng = derive_rng(config.seed, &["synth", "signal-scale"]);
    let (lo, hi) = config.signal_scale;
    let signal: Vec<f64> = (0..config.n_drugs)
        .map(|_| {
            if hi > lo {
                lo + (hi - lo) * scale_rng.random::<f64>()
            } else {
                lo
            }
        })
        .collect();

    let mut cell_rng = derive_rng(config.seed, &["synth", "cells"]);
    let latent: Vec<Vec<f64>> = (0..config.n_cells)
        .map(|_| unit_normal_vec(&mut cell_rng, dim))
        .collect();

    let mut noise_rng = derive_rng(config.seed, &["synth", "noise"]);
    let mut records = Vec::with_capacity(config.n_drugs * config.n_cells);
    for (i, drug) in drug_ids.iter().enumerate() {
        for (c, cell) in cell_ids.iter().enumerate() {
            let signal_part = signal[i] * dot(&directions[i], &latent[c]);
            let eps = if config.sigma_noise > 0.0 {
                normal.sample(&mut noise_rng) * config.sigma_noise
            } else {
                0.0
            };
            records.push((drug.clone(), cell.clone(), mu[i] + signal_part + eps));
        }
    }
    let (response, _) = ResponseTable::from_records(records, Units::LnIc50)?;

    // Cell features: latent coordinates plus distractor noise columns.
    let mut distractor_rng = derive_rng(config.seed, &["synth", "distractors"]);
    let z_width = dim.to_string().len().max(2);
    let d_width = config.n_distractor_features.to_string().len().max(2);
    let mut feature_names: Vec<String> = (0..dim).map(|j| format!("z{j:0z_width$}")).collect();
    feature_names.extend((0..config.n_distractor_features).map(|j| format!("noise{j:0d_width$}")));
    let mut values = Vec::with_capacity(config.n_cells * feature_names.len());
    for z in &latent {
        values.extend_from_slice(z);
        for _ in 0..config.n_distractor_features {
            values.push(normal.sample(&mut distractor_rng));
        }
    }
    let cell_features = FeatureMatrix::new(
        cell_ids.clone(),
        feature_names,
        values,
        EntityKind::Cell,
    )?;

    let moa = MoaMap::from_pairs(
        drug_ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), format!("moa{:0cluster_width$}", clusters[i]))),
    )?;

    let mut gt_mu = BTreeMap::new();
    let mut gt_scale = BTreeMap::new();
    let mut gt_dir = BTreeMap::new();
    let mut gt_cluster = BTreeMap::new();
    let mut gt_ceiling = BTreeMap::new();
    for (i, drug) in drug_ids.iter().enumerate() {
        gt_mu.insert(drug.clone(), mu[i]);
        gt_scale.insert(drug.clone(), signal[i]);
        gt_dir.insert(drug.clone(), directions[i].clone());
        gt_cluster.insert(
            drug.clone(),
            format!("moa{:0cluster_width$}", clusters[i]),
        );
        let s = signal[i];
        let ceiling = if s > 0.0 || config.sigma_noise > 0.0 {
            s / (s * s + config.sigma_noise * config.sigma_noise).sqrt()
        } else {
            0.0
        };
        gt_ceiling.insert(drug.clone(), ceiling);
    }
    let mut gt_latent = BTreeMap::new();
    for (c, cell) in cell_ids.iter().enumerate() {
        gt_latent.insert(cell.clone(), latent[c].clone());
    }

    Ok(SynthOutput {
        response,
        cell_features,
        moa,
        ground_truth: GroundTruth {
            mu: gt_mu,
            signal_scale: gt_scale,
            direction: gt_dir,
            cell_latent: gt_latent,
            cluster: gt_cluster,
            analytic_ceiling: gt_ceiling,
            config: config.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{per_drug_r, PredictionTable, ZeroVariancePolicy};

    #[test]
    fn same_seed_is_byte_identical() {
        let config = Preset::TwoCluster.config(42);
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
        let c = generate(&Preset::TwoCluster.config(43)).unwrap();
        assert_ne!(a.response, c.response);
    }

    #[test]
    fn directions_are_unit_and_clusters_have_configured_cosine() {
        let config = Preset::TwoCluster.config(7);
        let out = generate(&config).unwrap();
        for u in out.ground_truth.direction.values() {
            assert!((norm(u) - 1.0).abs() < 1e-10);
        }
        // Drugs from different clusters have cosine near the configured
        // value (up to the within-cluster tilt).
        let drugs: Vec<&String> = out.ground_truth.direction.keys().collect();
        let (mut same, mut cross) = (Vec::new(), Vec::new());
        for i in 0..drugs.len() {
            for j in (i + 1)..drugs.len() {
                let ci = &out.ground_truth.cluster[drugs[i]];
                let cj = &out.ground_truth.cluster[drugs[j]];
                let cos = dot(
                    &out.ground_truth.direction[drugs[i]],
                    &out.ground_truth.direction[drugs[j]],
                );
                if ci == cj {
                    same.push(cos);
                } else {
                    cross.push(cos);
                }
            }
        }
        let mean_same: f64 = same.iter().sum::<f64>() / same.len() as f64;
        let mean_cross: f64 = cross.iter().sum::<f64>() / cross.len() as f64;
        assert!(mean_same > 0.95, "within-cluster cosine {mean_same}");
        assert!(
            (mean_cross - config.inter_cluster_cos).abs() < 0.05,
            "cross-cluster cosine {mean_cross}"
        );
    }

    #[test]
    fn noise_free_predictor_scores_one_without_noise() {
        let mut config = Preset::TwoCluster.config(5);
        config.sigma_noise = 0.0;
        config.n_drugs = 6;
        config.n_cells = 30;
        let out = generate(&config).unwrap();
        let pred = PredictionTable::from_records(out.response.records().iter().map(|r| {
            (
                r.drug_id.clone(),
                r.cell_id.clone(),
                out.ground_truth
                    .noise_free_value(&r.drug_id, &r.cell_id)
                    .unwrap(),
            )
        }))
        .unwrap();
        let report = per_drug_r(&pred, &out.response, 5, ZeroVariancePolicy::Zero).unwrap();
        assert!((report.per_drug_r_mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empirical_drug_means_converge_to_mu() {
        let mut config = Preset::Dominance.config(11);
        config.n_drugs = 3;
        config.n_cells = 10_000;
        let out = generate(&config).unwrap();
        for (drug, block) in out.response.per_drug() {
            let mean: f64 =
                block.iter().map(|r| r.value).sum::<f64>() / block.len() as f64;
            let mu = out.ground_truth.mu[drug];
            let s = out.ground_truth.signal_scale[drug];
            // Per-cell sd of (signal + noise) around mu.
            let sd = (s * s + config.sigma_noise * config.sigma_noise).sqrt();
            let se = sd / (config.n_cells as f64).sqrt();
            assert!(
                (mean - mu).abs() <= 3.0 * se,
                "{drug}: |{mean} - {mu}| > 3se ({se})"
            );
        }
    }

    #[test]
    fn attainable_r_matches_analytic_ceiling_at_scale() {
        let mut config = Preset::TwoCluster.config(19);
        config.n_drugs = 8;
        config.n_cells = 2_000;
        let out = generate(&config).unwrap();
        let pred = PredictionTable::from_records(out.response.records().iter().map(|r| {
            (
                r.drug_id.clone(),
                r.cell_id.clone(),
                out.ground_truth
                    .noise_free_value(&r.drug_id, &r.cell_id)
                    .unwrap(),
            )
        }))
        .unwrap();
        let report = per_drug_r(&pred, &out.response, 5, ZeroVariancePolicy::Zero).unwrap();
        for (drug, r) in &report.per_drug_values {
            let ceiling = out.ground_truth.analytic_ceiling[drug];
            assert!(
                (r - ceiling).abs() <= 0.03,
                "{drug}: attainable r {r} vs ceiling {ceiling}"
            );
        }
    }

    #[test]
    fn shared_axis_weight_is_respected() {
        let config = Preset::NoAnalog.config(3);
        let out = generate(&config).unwrap();
        // All pairwise direction cosines should be near beta^2 since the
        // specific parts are mutually orthogonal.
        let beta2 = config.shared_axis_weight * config.shared_axis_weight;
        let dirs: Vec<&Vec<f64>> = out.ground_truth.direction.values().collect();
        let mut cosines = Vec::new();
        for i in 0..dirs.len() {
            for j in (i + 1)..dirs.len() {
                cosines.push(dot(dirs[i], dirs[j]));
            }
        }
        let mean_cos: f64 = cosines.iter().sum::<f64>() / cosines.len() as f64;
        assert!(
            (mean_cos - beta2).abs() < 0.02,
            "mean pairwise cosine {mean_cos} vs beta^2 {beta2}"
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = Preset::Dominance.config(1);
        config.latent_dim = 2; // 5 clusters need 5 dims
        assert!(generate(&config).is_err());
        let mut config = Preset::Dominance.config(1);
        config.class_potency_share = 1.5;
        assert!(generate(&config).is_err());
    }
}
