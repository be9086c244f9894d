//! Nonparametric tests and effect sizes for condition comparisons and
//! biomarker stratification.
//!
//! Exact p-values are computed by full-distribution enumeration where the
//! sample size permits (Mann-Whitney: n1+n2 <= 12 and no ties; Wilcoxon:
//! <= 20 nonzero differences); otherwise a tie-corrected normal
//! approximation with continuity correction is used. The chosen path is
//! recorded in `TestResult::method`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataio::ResponseTable;
use crate::error::{Error, Result};

/// Crossover sizes between the exact and approximate paths.
pub const MWU_EXACT_MAX_N: usize = 12;
pub const WILCOXON_EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alternative {
    #[serde(rename = "two-sided")]
    TwoSided,
    #[serde(rename = "less")]
    Less,
    #[serde(rename = "greater")]
    Greater,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: String,
    pub alternative: Alternative,
    pub n1: usize,
    pub n2: usize,
}

/// Mid-ranks of `values` (average rank within tied runs) and the sizes of
/// tied groups larger than one.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &k in &order[i..=j] {
            ranks[k] = avg_rank;
        }
        if j > i {
            tie_sizes.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, tie_sizes)
}

fn tail_p(z_low: f64, z_high: f64, alternative: Alternative) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p_less = normal.cdf(z_low);
    let p_greater = 1.0 - normal.cdf(z_high);
    match alternative {
        Alternative::Less => p_less,
        Alternative::Greater => p_greater,
        Alternative::TwoSided => (2.0 * p_less.min(p_greater)).min(1.0),
    }
}

/// Exact null distribution of the Mann-Whitney U statistic for group sizes
/// (n1, n2) without ties: `dist[u]` is the number of rank subsets with
/// U = u, out of C(n1+n2, n1).
fn mwu_exact_distribution(n1: usize, n2: usize) -> Vec<f64> {
    let n = n1 + n2;
    let max_sum = n * (n + 1) / 2;
    // count[k][s]: k-subsets of {1..n} with rank sum s.
    let mut count = vec![vec![0.0f64; max_sum + 1]; n1 + 1];
    count[0][0] = 1.0;
    for rank in 1..=n {
        for k in (1..=n1.min(rank)).rev() {
            for s in (rank..=max_sum).rev() {
                let add = count[k - 1][s - rank];
                if add > 0.0 {
                    count[k][s] += add;
                }
            }
        }
    }
    let min_sum = n1 * (n1 + 1) / 2;
    let max_u = n1 * n2;
    (0..=max_u)
        .map(|u| count[n1][u + min_sum])
        .collect()
}

fn mwu_exact_p(u_obs: usize, n1: usize, n2: usize, alternative: Alternative) -> f64 {
    let dist = mwu_exact_distribution(n1, n2);
    let total: f64 = dist.iter().sum();
    let p_less: f64 = dist[..=u_obs].iter().sum::<f64>() / total;
    let p_greater: f64 = dist[u_obs..].iter().sum::<f64>() / total;
    match alternative {
        Alternative::Less => p_less,
        Alternative::Greater => p_greater,
        Alternative::TwoSided => (2.0 * p_less.min(p_greater)).min(1.0),
    }
}

fn mwu_normal_p(
    u_obs: f64,
    n1: usize,
    n2: usize,
    tie_sizes: &[usize],
    alternative: Alternative,
) -> f64 {
    let n = (n1 + n2) as f64;
    let mean = n1 as f64 * n2 as f64 / 2.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| (t * t * t - t) as f64)
        .sum::<f64>()
        / (n * (n - 1.0));
    let variance = n1 as f64 * n2 as f64 / 12.0 * ((n + 1.0) - tie_term);
    if variance <= 0.0 {
        return 1.0;
    }
    let sd = variance.sqrt();
    // Continuity correction: shift half a unit toward the mean for each tail.
    tail_p((u_obs + 0.5 - mean) / sd, (u_obs - 0.5 - mean) / sd, alternative)
}

/// Mann-Whitney U test with mid-rank ties. `group_a`'s U is reported; the
/// alternative `Less` means group A tends to smaller values than group B.
pub fn mann_whitney_u(
    group_a: &[f64],
    group_b: &[f64],
    alternative: Alternative,
) -> Result<TestResult> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::usage("mann_whitney_u: empty group"));
    }
    if group_a.iter().chain(group_b).any(|v| !v.is_finite()) {
        return Err(Error::usage("mann_whitney_u: non-finite value"));
    }
    let n1 = group_a.len();
    let n2 = group_b.len();
    let combined: Vec<f64> = group_a.iter().chain(group_b).copied().collect();
    let (ranks, tie_sizes) = midranks(&combined);
    let rank_sum_a: f64 = ranks[..n1].iter().sum();
    let u_a = rank_sum_a - (n1 * (n1 + 1)) as f64 / 2.0;

    let exact = n1 + n2 <= MWU_EXACT_MAX_N && tie_sizes.is_empty();
    let (p_value, method) = if exact {
        let u_int = u_a.round() as usize;
        (
            mwu_exact_p(u_int, n1, n2, alternative),
            "mann-whitney-u/exact-enumeration".to_owned(),
        )
    } else {
        (
            mwu_normal_p(u_a, n1, n2, &tie_sizes, alternative),
            "mann-whitney-u/normal-approximation,tie-corrected,continuity-corrected"
                .to_owned(),
        )
    };
    Ok(TestResult {
        statistic: u_a,
        p_value,
        method,
        alternative,
        n1,
        n2,
    })
}

/// Exact null distribution of the doubled Wilcoxon W+ statistic for the given
/// doubled ranks: `dist[s]` counts sign patterns with doubled W+ = s.
fn wilcoxon_exact_distribution(doubled_ranks: &[u64]) -> Vec<f64> {
    let max_sum: u64 = doubled_ranks.iter().sum();
    let mut dist = vec![0.0f64; max_sum as usize + 1];
    dist[0] = 1.0;
    for &r in doubled_ranks {
        for s in (r..=max_sum).rev() {
            let add = dist[(s - r) as usize];
            if add > 0.0 {
                dist[s as usize] += add;
            }
        }
    }
    dist
}

fn wilcoxon_exact_p(w2_obs: u64, doubled_ranks: &[u64], alternative: Alternative) -> f64 {
    let dist = wilcoxon_exact_distribution(doubled_ranks);
    let total: f64 = dist.iter().sum();
    let p_less: f64 = dist[..=(w2_obs as usize)].iter().sum::<f64>() / total;
    let p_greater: f64 = dist[(w2_obs as usize)..].iter().sum::<f64>() / total;
    match alternative {
        Alternative::Less => p_less,
        Alternative::Greater => p_greater,
        Alternative::TwoSided => (2.0 * p_less.min(p_greater)).min(1.0),
    }
}

fn wilcoxon_normal_p(
    w_obs: f64,
    n: usize,
    tie_sizes: &[usize],
    alternative: Alternative,
) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| (t * t * t - t) as f64)
        .sum::<f64>()
        / 48.0;
    let variance = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    if variance <= 0.0 {
        return 1.0;
    }
    let sd = variance.sqrt();
    tail_p((w_obs + 0.5 - mean) / sd, (w_obs - 0.5 - mean) / sd, alternative)
}

/// Wilcoxon signed-rank test on paired differences. Zero differences are
/// dropped (Wilcoxon's original rule); `n1` is the nonzero count and `n2`
/// the number of dropped zeros.
pub fn wilcoxon_signed_rank(
    paired_diffs: &[f64],
    alternative: Alternative,
) -> Result<TestResult> {
    if paired_diffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("wilcoxon_signed_rank: non-finite difference"));
    }
    let nonzero: Vec<f64> = paired_diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let zeros_dropped = paired_diffs.len() - nonzero.len();
    if nonzero.is_empty() {
        return Err(Error::data(
            "wilcoxon_signed_rank: all differences are zero",
        ));
    }
    let n = nonzero.len();
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let (ranks, tie_sizes) = midranks(&abs);
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    let (p_value, method) = if n <= WILCOXON_EXACT_MAX_N {
        // Mid-ranks are multiples of 1/2, so doubling gives exact integers.
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let w2 = (2.0 * w_plus).round() as u64;
        (
            wilcoxon_exact_p(w2, &doubled, alternative),
            "wilcoxon-signed-rank/exact-enumeration,zeros-dropped".to_owned(),
        )
    } else {
        (
            wilcoxon_normal_p(w_plus, n, &tie_sizes, alternative),
            "wilcoxon-signed-rank/normal-approximation,tie-corrected,continuity-corrected,zeros-dropped"
                .to_owned(),
        )
    };
    Ok(TestResult {
        statistic: w_plus,
        p_value,
        method,
        alternative,
        n1: n,
        n2: zeros_dropped,
    })
}

/// Pooled Cohen's d: (mean_a - mean_b) / pooled_sd with the (n1+n2-2)
/// denominator. `None` when the pooled standard deviation is zero.
pub fn cohens_d_pooled(group_a: &[f64], group_b: &[f64]) -> Result<Option<f64>> {
    if group_a.len() < 2 || group_b.len() < 2 {
        return Err(Error::usage(
            "cohens_d_pooled: each group needs at least 2 observations",
        ));
    }
    let n1 = group_a.len() as f64;
    let n2 = group_b.len() as f64;
    let mean_a = group_a.iter().sum::<f64>() / n1;
    let mean_b = group_b.iter().sum::<f64>() / n2;
    let ss_a: f64 = group_a.iter().map(|v| (v - mean_a) * (v - mean_a)).sum();
    let ss_b: f64 = group_b.iter().map(|v| (v - mean_b) * (v - mean_b)).sum();
    let pooled_var = (ss_a + ss_b) / (n1 + n2 - 2.0);
    if pooled_var <= 0.0 {
        return Ok(None);
    }
    Ok(Some((mean_a - mean_b) / pooled_var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerResult {
    pub test: TestResult,
    pub cohens_d: Option<f64>,
    pub n_mutant: usize,
    pub n_wildtype: usize,
    /// Cells with responses for the drug but no mutation status.
    pub n_unknown_status: usize,
}

/// Stratify one drug's responses by binary mutation status and test whether
/// mutant cells are more sensitive (lower values). Cohen's d uses the
/// mean(mutant) - mean(wild-type) sign convention.
pub fn biomarker_stratify(
    truth: &ResponseTable,
    mutation_status: &BTreeMap<String, bool>,
    drug_id: &str,
    alternative: Alternative,
) -> Result<BiomarkerResult> {
    let block = truth.records_of(drug_id);
    if block.is_empty() {
        return Err(Error::data(format!("drug `{drug_id}` has no responses")));
    }
    let mut mutant = Vec::new();
    let mut wildtype = Vec::new();
    let mut unknown = 0usize;
    for record in block {
        match mutation_status.get(&record.cell_id) {
            Some(true) => mutant.push(record.value),
            Some(false) => wildtype.push(record.value),
            None => unknown += 1,
        }
    }
    if mutant.is_empty() {
        return Err(Error::data(format!(
            "drug `{drug_id}`: mutant stratum is empty"
        )));
    }
    if wildtype.is_empty() {
        return Err(Error::data(format!(
            "drug `{drug_id}`: wild-type stratum is empty"
        )));
    }
    let test = mann_whitney_u(&mutant, &wildtype, alternative)?;
    let cohens_d = if mutant.len() >= 2 && wildtype.len() >= 2 {
        cohens_d_pooled(&mutant, &wildtype)?
    } else {
        None
    };
    Ok(BiomarkerResult {
        test,
        cohens_d,
        n_mutant: mutant.len(),
        n_wildtype: wildtype.len(),
        n_unknown_status: unknown,
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    //! Enumeration oracles, independent of the DP implementation path.
    use super::Alternative;
    use itertools::Itertools;

    /// Mann-Whitney p by enumerating every rank subset of the combined sample.
    pub fn mwu_enumeration_p(a: &[f64], b: &[f64], alternative: Alternative) -> f64 {
        let n1 = a.len();
        let combined: Vec<f64> = a.iter().chain(b).copied().collect();
        let (ranks, _) = super::midranks(&combined);
        let u_of = |subset: &[usize]| -> f64 {
            let rank_sum: f64 = subset.iter().map(|&i| ranks[i]).sum();
            rank_sum - (n1 * (n1 + 1)) as f64 / 2.0
        };
        let observed: Vec<usize> = (0..n1).collect();
        let u_obs = u_of(&observed);
        let mut at_most = 0usize;
        let mut at_least = 0usize;
        let mut total = 0usize;
        for subset in (0..combined.len()).combinations(n1) {
            let u = u_of(&subset);
            total += 1;
            if u <= u_obs + 1e-9 {
                at_most += 1;
            }
            if u >= u_obs - 1e-9 {
                at_least += 1;
            }
        }
        let p_less = at_most as f64 / total as f64;
        let p_greater = at_least as f64 / total as f64;
        match alternative {
            Alternative::Less => p_less,
            Alternative::Greater => p_greater,
            Alternative::TwoSided => (2.0 * p_less.min(p_greater)).min(1.0),
        }
    }

    /// Wilcoxon p by enumerating all 2^n sign patterns over the rank multiset.
    pub fn wilcoxon_enumeration_p(diffs: &[f64], alternative: Alternative) -> f64 {
        let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
        let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
        let (ranks, _) = super::midranks(&abs);
        let w_obs: f64 = nonzero
            .iter()
            .zip(&ranks)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, r)| *r)
            .sum();
        let n = ranks.len();
        let mut at_most = 0usize;
        let mut at_least = 0usize;
        let total = 1usize << n;
        for pattern in 0..total {
            let w: f64 = (0..n)
                .filter(|i| pattern & (1 << i) != 0)
                .map(|i| ranks[i])
                .sum();
            if w <= w_obs + 1e-9 {
                at_most += 1;
            }
            if w >= w_obs - 1e-9 {
                at_least += 1;
            }
        }
        let p_less = at_most as f64 / total as f64;
        let p_greater = at_least as f64 / total as f64;
        match alternative {
            Alternative::Less => p_less,
            Alternative::Greater => p_greater,
            Alternative::TwoSided => (2.0 * p_less.min(p_greater)).min(1.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::{mwu_enumeration_p, wilcoxon_enumeration_p};
    use super::*;
    use crate::dataio::Units;
    use rand::Rng;

    #[test]
    fn mwu_small_separated_groups_match_enumeration() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let oracle = mwu_enumeration_p(&a, &b, Alternative::Less);
        assert!((oracle - 1.0 / 6.0).abs() < 1e-12);
        let result = mann_whitney_u(&a, &b, Alternative::Less).unwrap();
        assert_eq!(result.statistic, 0.0);
        assert!((result.p_value - oracle).abs() < 1e-12);
        assert!(result.method.contains("exact"));
    }

    #[test]
    fn mwu_three_vs_three_matches_enumeration() {
        let a = [1.0, 2.0, 3.0];
        let b = [4.0, 5.0, 6.0];
        let oracle = mwu_enumeration_p(&a, &b, Alternative::Less);
        assert!((oracle - 1.0 / 20.0).abs() < 1e-12);
        let result = mann_whitney_u(&a, &b, Alternative::Less).unwrap();
        assert!((result.p_value - oracle).abs() < 1e-12);
    }

    #[test]
    fn mwu_identical_groups_center_of_null() {
        let a = [1.0, 2.0, 3.0];
        let result = mann_whitney_u(&a, &a, Alternative::TwoSided).unwrap();
        assert!(result.p_value >= 0.49, "p = {}", result.p_value);
        assert!(result.method.contains("approximation"));
    }

    #[test]
    fn mwu_empty_group_is_usage_error() {
        assert!(mann_whitney_u(&[], &[1.0], Alternative::Less).is_err());
    }

    #[test]
    fn mwu_exact_matches_enumeration_on_random_samples() {
        let mut rng = crate::rng::derive_rng(5, &["mwu"]);
        for _ in 0..60 {
            let n1 = rng.random_range(1..=6);
            let n2 = rng.random_range(1..=6);
            // Distinct values so the exact path is taken.
            let mut pool: Vec<f64> = (0..(n1 + n2)).map(|i| i as f64).collect();
            use rand::seq::SliceRandom;
            pool.shuffle(&mut rng);
            let a = pool[..n1].to_vec();
            let b = pool[n1..].to_vec();
            for alternative in [Alternative::Less, Alternative::Greater, Alternative::TwoSided] {
                let got = mann_whitney_u(&a, &b, alternative).unwrap();
                assert!(got.method.contains("exact"));
                let oracle = mwu_enumeration_p(&a, &b, alternative);
                assert!(
                    (got.p_value - oracle).abs() < 1e-12,
                    "n1={n1} n2={n2} alt={alternative:?}: {} vs {oracle}",
                    got.p_value
                );
            }
        }
    }

    #[test]
    fn mwu_exact_tails_sum_to_one_plus_point_mass() {
        let a = [2.0, 5.0, 1.0, 9.0];
        let b = [3.0, 7.0, 8.0];
        let less = mann_whitney_u(&a, &b, Alternative::Less).unwrap().p_value;
        let greater = mann_whitney_u(&a, &b, Alternative::Greater).unwrap().p_value;
        let u_obs = mann_whitney_u(&a, &b, Alternative::Less).unwrap().statistic as usize;
        let dist = mwu_exact_distribution(4, 3);
        let total: f64 = dist.iter().sum();
        let point_mass = dist[u_obs] / total;
        assert!((less + greater - (1.0 + point_mass)).abs() < 1e-12);
    }

    #[test]
    fn mwu_approx_close_to_exact_at_crossover() {
        let mut rng = crate::rng::derive_rng(9, &["crossover"]);
        for _ in 0..40 {
            let n1 = rng.random_range(4..=8);
            let n2 = 12 - n1;
            let mut pool: Vec<f64> = (0..12).map(|i| i as f64).collect();
            use rand::seq::SliceRandom;
            pool.shuffle(&mut rng);
            let a = pool[..n1].to_vec();
            let b = pool[n1..].to_vec();
            for alternative in [Alternative::Less, Alternative::Greater, Alternative::TwoSided] {
                let exact = mann_whitney_u(&a, &b, alternative).unwrap();
                let u = exact.statistic;
                let approx = mwu_normal_p(u, n1, n2, &[], alternative);
                assert!(
                    (exact.p_value - approx).abs() <= 0.02,
                    "exact {} vs approx {approx}",
                    exact.p_value
                );
            }
        }
    }

    #[test]
    fn wilcoxon_all_positive_diffs() {
        let diffs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let oracle = wilcoxon_enumeration_p(&diffs, Alternative::Greater);
        assert!((oracle - 1.0 / 32.0).abs() < 1e-12);
        let result = wilcoxon_signed_rank(&diffs, Alternative::Greater).unwrap();
        assert!((result.p_value - oracle).abs() < 1e-12);
        assert!(result.method.contains("exact"));
    }

    #[test]
    fn wilcoxon_symmetric_pair_two_sided() {
        let result = wilcoxon_signed_rank(&[-1.0, 1.0], Alternative::TwoSided).unwrap();
        assert_eq!(result.p_value, 1.0);
    }

    #[test]
    fn wilcoxon_mixed_signs_matches_enumeration() {
        let diffs = [1.0, -2.0, 3.0];
        let oracle = wilcoxon_enumeration_p(&diffs, Alternative::Greater);
        assert!((oracle - 3.0 / 8.0).abs() < 1e-12);
        let result = wilcoxon_signed_rank(&diffs, Alternative::Greater).unwrap();
        assert!((result.p_value - oracle).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_drops_zeros_and_errors_when_all_zero() {
        let result = wilcoxon_signed_rank(&[0.0, 1.0, -2.0], Alternative::TwoSided).unwrap();
        assert_eq!(result.n1, 2);
        assert_eq!(result.n2, 1);
        assert!(wilcoxon_signed_rank(&[0.0, 0.0], Alternative::TwoSided).is_err());
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration_with_ties() {
        let mut rng = crate::rng::derive_rng(13, &["wilcoxon"]);
        for _ in 0..40 {
            let n = rng.random_range(2..=10);
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    let magnitude = rng.random_range(1..=4) as f64;
                    if rng.random::<bool>() {
                        magnitude
                    } else {
                        -magnitude
                    }
                })
                .collect();
            for alternative in [Alternative::Less, Alternative::Greater, Alternative::TwoSided] {
                let got = wilcoxon_signed_rank(&diffs, alternative).unwrap();
                let oracle = wilcoxon_enumeration_p(&diffs, alternative);
                assert!(
                    (got.p_value - oracle).abs() < 1e-12,
                    "diffs {diffs:?} alt {alternative:?}: {} vs {oracle}",
                    got.p_value
                );
            }
        }
    }

    #[test]
    fn wilcoxon_approx_close_to_exact_at_crossover() {
        let mut rng = crate::rng::derive_rng(21, &["wilcoxon-crossover"]);
        for _ in 0..20 {
            let diffs: Vec<f64> = (0..20)
                .map(|i| {
                    let magnitude = (i + 1) as f64;
                    if rng.random::<bool>() {
                        magnitude
                    } else {
                        -magnitude
                    }
                })
                .collect();
            for alternative in [Alternative::Less, Alternative::Greater, Alternative::TwoSided] {
                let exact = wilcoxon_signed_rank(&diffs, alternative).unwrap();
                let approx = wilcoxon_normal_p(exact.statistic, 20, &[], alternative);
                assert!(
                    (exact.p_value - approx).abs() <= 0.02,
                    "exact {} vs approx {approx}",
                    exact.p_value
                );
            }
        }
    }

    #[test]
    fn cohens_d_identical_groups_is_zero() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(cohens_d_pooled(&a, &a).unwrap(), Some(0.0));
    }

    #[test]
    fn cohens_d_zero_pooled_sd_is_null() {
        assert_eq!(cohens_d_pooled(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), None);
    }

    #[test]
    fn cohens_d_matches_hand_formula() {
        // means 0.5 and 1.5; both sample variances 0.5; pooled variance
        // (0.5 + 0.5) / 2 = 0.5, so d = -1 / sqrt(0.5) = -sqrt(2).
        let d = cohens_d_pooled(&[0.0, 1.0], &[1.0, 2.0]).unwrap().unwrap();
        assert!((d - (-(2.0f64.sqrt()))).abs() < 1e-12, "d = {d}");
    }

    #[test]
    fn cohens_d_is_antisymmetric() {
        let mut rng = crate::rng::derive_rng(2, &["cohen"]);
        for _ in 0..20 {
            let a: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 4.0).collect();
            let b: Vec<f64> = (0..7).map(|_| rng.random::<f64>() * 4.0 + 1.0).collect();
            let d_ab = cohens_d_pooled(&a, &b).unwrap().unwrap();
            let d_ba = cohens_d_pooled(&b, &a).unwrap().unwrap();
            assert!((d_ab + d_ba).abs() < 1e-12);
        }
    }

    fn biomarker_fixture(shift: f64, seed: u64) -> (ResponseTable, BTreeMap<String, bool>) {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::derive_rng(seed, &["biomarker"]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut records = Vec::new();
        let mut status = BTreeMap::new();
        for i in 0..40 {
            let cell = format!("c{i:02}");
            let mutant = i < 20;
            let value: f64 = normal.sample(&mut rng) + if mutant { shift } else { 0.0 };
            records.push(("drug".to_owned(), cell.clone(), value));
            status.insert(cell, mutant);
        }
        let table = ResponseTable::from_records(records, Units::LnIc50).unwrap().0;
        (table, status)
    }

    #[test]
    fn biomarker_detects_strong_sensitization() {
        let (table, status) = biomarker_fixture(-3.0, 31);
        let out = biomarker_stratify(&table, &status, "drug", Alternative::Less).unwrap();
        assert!(out.test.p_value < 0.001, "p = {}", out.test.p_value);
        assert!(out.cohens_d.unwrap() < -1.0, "d = {:?}", out.cohens_d);
        assert_eq!(out.n_mutant, 20);
        assert_eq!(out.n_wildtype, 20);
    }

    #[test]
    fn biomarker_null_p_is_uniform_on_average() {
        let mut total = 0.0;
        let trials = 1000;
        for seed in 0..trials {
            let (table, status) = biomarker_fixture(0.0, 1000 + seed);
            let out = biomarker_stratify(&table, &status, "drug", Alternative::Less).unwrap();
            total += out.test.p_value;
        }
        let mean_p = total / trials as f64;
        assert!(
            (0.45..=0.55).contains(&mean_p),
            "mean null p = {mean_p}, expected near 0.5"
        );
    }

    #[test]
    fn biomarker_empty_stratum_is_data_error() {
        let (table, mut status) = biomarker_fixture(0.0, 77);
        for flag in status.values_mut() {
            *flag = false;
        }
        let err = biomarker_stratify(&table, &status, "drug", Alternative::Less).unwrap_err();
        assert!(err.to_string().contains("mutant"));
    }
}
