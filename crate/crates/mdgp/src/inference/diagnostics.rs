//! Convergence diagnostics: split R-hat and rank-normalized bulk ESS.
//!
//! Both operate on split chains (each chain halved, so C chains yield 2C
//! sequences), which catches within-chain drift as well as between-chain
//! disagreement. Bulk ESS first maps pooled draws through fractional ranks
//! and the standard-normal quantile function, making it robust to heavy
//! tails, then sums autocorrelations with Geyer's initial-monotone-sequence
//! truncation.

use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal};

use super::ChainStats;
use crate::error::{Error, Result};

/// Per-parameter convergence summary plus pooled sampler counters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Diagnostics {
    /// Split R-hat per parameter; NaN where the draws are constant.
    pub split_rhat: Vec<f64>,
    /// Rank-normalized bulk effective sample size per parameter.
    pub bulk_ess: Vec<f64>,
    pub divergences: usize,
    pub max_treedepth_hits: usize,
}

impl Diagnostics {
    /// Largest finite split R-hat (NaN if every parameter is degenerate).
    pub fn max_rhat(&self) -> f64 {
        self.split_rhat
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(
                f64::NAN,
                |acc, v| if acc.is_nan() || v > acc { v } else { acc },
            )
    }

    /// Smallest finite bulk ESS (NaN if every parameter is degenerate).
    pub fn min_ess(&self) -> f64 {
        self.bulk_ess
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(
                f64::NAN,
                |acc, v| if acc.is_nan() || v < acc { v } else { acc },
            )
    }
}

/// Splits each chain's column into two halves (dropping the middle draw of
/// odd-length chains), yielding `2C` sequences of equal length.
fn split_sequences(chains: &[DMatrix<f64>], param: usize) -> Vec<Vec<f64>> {
    let half = chains.iter().map(|c| c.nrows() / 2).min().unwrap_or(0);
    let mut seqs = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let n = c.nrows();
        seqs.push((0..half).map(|r| c[(r, param)]).collect());
        seqs.push((n - half..n).map(|r| c[(r, param)]).collect());
    }
    seqs
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Between/within variance decomposition over equal-length sequences:
/// returns `(W, var_plus)` with `var_plus = (n-1)/n W + B/n`.
fn variance_decomposition(seqs: &[Vec<f64>]) -> (f64, f64) {
    let n = seqs[0].len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let w = mean(&seqs.iter().map(|s| sample_var(s)).collect::<Vec<_>>());
    let b_over_n = sample_var(&means);
    (w, (n - 1.0) / n * w + b_over_n)
}

/// Split R-hat for one parameter: sqrt(var_plus / W). Constant chains give
/// 0/0 = NaN (reported as-is, never coerced to 1); disjoint constant chains
/// give +inf.
pub fn split_rhat(chains: &[DMatrix<f64>], param: usize) -> f64 {
    let seqs = split_sequences(chains, param);
    let (w, var_plus) = variance_decomposition(&seqs);
    (var_plus / w).sqrt()
}

/// Fractional ranks (ties averaged) mapped through the standard-normal
/// quantile: z = Phi^{-1}((rank - 3/8) / (S + 1/4)).
fn rank_normalize(seqs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = seqs.iter().map(|s| s.len()).sum();
    let mut indexed: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut offset = 0;
    let mut offsets = Vec::with_capacity(seqs.len());
    for s in seqs {
        offsets.push(offset);
        for (i, &v) in s.iter().enumerate() {
            indexed.push((v, offset + i));
        }
        offset += s.len();
    }
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("draws must not contain NaN"));
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && indexed[j + 1].0 == indexed[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &indexed[i..=j] {
            ranks[item.1] = avg_rank;
        }
        i = j + 1;
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let s = total as f64;
    seqs.iter()
        .zip(&offsets)
        .map(|(seq, &off)| {
            (0..seq.len())
                .map(|i| normal.inverse_cdf((ranks[off + i] - 0.375) / (s + 0.25)))
                .collect()
        })
        .collect()
}

/// Lag-`t` autocovariance (biased, divided by n) of one sequence.
fn autocovariance(seq: &[f64], seq_mean: f64, t: usize) -> f64 {
    let n = seq.len();
    (0..n - t)
        .map(|i| (seq[i] - seq_mean) * (seq[i + t] - seq_mean))
        .sum::<f64>()
        / n as f64
}

/// Rank-normalized bulk ESS for one parameter across chains.
///
/// Autocorrelations are combined across sequences as
/// `rho_t = 1 - (W - mean_c acov_{c,t}) / var_plus`, summed in Geyer pairs
/// `P_k = rho_{2k} + rho_{2k+1}` truncated at the first non-positive pair and
/// forced non-increasing; `tau = -1 + 2 sum P_k` and `ESS = S / tau`, capped
/// at `S log10(S)`.
pub fn bulk_ess(chains: &[DMatrix<f64>], param: usize) -> f64 {
    let seqs = rank_normalize(&split_sequences(chains, param));
    let n = seqs[0].len();
    let (w, var_plus) = variance_decomposition(&seqs);
    if !(var_plus > 0.0) || !var_plus.is_finite() {
        return f64::NAN;
    }
    let means: Vec<f64> = seqs.iter().map(|s| mean(s)).collect();
    let mean_acov = |t: usize| -> f64 {
        let sum: f64 = seqs
            .iter()
            .zip(&means)
            .map(|(s, &m)| autocovariance(s, m, t))
            .sum();
        sum / seqs.len() as f64
    };
    let rho = |t: usize| -> f64 { 1.0 - (w - mean_acov(t)) / var_plus };

    let mut pair_sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut k = 0;
    loop {
        let t0 = 2 * k;
        if t0 + 1 >= n {
            break;
        }
        let pair = if k == 0 {
            1.0 + rho(1)
        } else {
            rho(t0) + rho(t0 + 1)
        };
        if !(pair > 0.0) {
            break;
        }
        pair_sum += pair.min(prev_pair);
        prev_pair = pair.min(prev_pair);
        k += 1;
    }
    let tau = -1.0 + 2.0 * pair_sum;
    let s_total: usize = chains.iter().map(|c| c.nrows()).sum();
    let s_total = s_total as f64;
    let ess = s_total / tau.max(1e-12);
    ess.min(s_total * s_total.log10().max(1.0))
}

/// Computes split R-hat and bulk ESS for every parameter plus pooled sampler
/// counters. Requires at least 2 chains and at least 100 kept draws per
/// chain; shorter runs give autocorrelation estimates too noisy to report.
pub fn compute_diagnostics(chains: &[DMatrix<f64>], stats: &[ChainStats]) -> Result<Diagnostics> {
    if chains.len() < 2 {
        return Err(Error::Sampler(format!(
            "diagnostics need at least 2 chains, got {}",
            chains.len()
        )));
    }
    let dim = chains[0].ncols();
    for c in chains {
        if c.nrows() < 100 {
            return Err(Error::Sampler(format!(
                "diagnostics need at least 100 kept draws per chain, got {}",
                c.nrows()
            )));
        }
        if c.ncols() != dim {
            return Err(Error::Sampler("chains disagree on parameter count".into()));
        }
    }
    let split_rhat: Vec<f64> = (0..dim).map(|p| split_rhat(chains, p)).collect();
    let bulk: Vec<f64> = (0..dim).map(|p| bulk_ess(chains, p)).collect();
    Ok(Diagnostics {
        split_rhat,
        bulk_ess: bulk,
        divergences: stats.iter().map(|s| s.divergences).sum(),
        max_treedepth_hits: stats.iter().map(|s| s.max_treedepth_hits).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn normal_chains(
        chains: usize,
        draws: usize,
        dim: usize,
        seed: u64,
        shift_last: f64,
    ) -> Vec<DMatrix<f64>> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..chains)
            .map(|c| {
                DMatrix::from_fn(draws, dim, |_, _| {
                    let z: f64 = rng.sample(StandardNormal);
                    if c == chains - 1 {
                        z + shift_last
                    } else {
                        z
                    }
                })
            })
            .collect()
    }

    fn no_stats(chains: usize) -> Vec<ChainStats> {
        (0..chains)
            .map(|_| ChainStats {
                divergences: 0,
                max_treedepth_hits: 0,
                step_size: 0.5,
                mean_accept: 0.9,
            })
            .collect()
    }

    #[test]
    fn well_mixed_chains_pass_and_nearly_independent_draws_have_high_ess() {
        let chains = normal_chains(4, 1000, 3, 42, 0.0);
        let d = compute_diagnostics(&chains, &no_stats(4)).unwrap();
        for (p, &r) in d.split_rhat.iter().enumerate() {
            assert!(
                r < 1.01,
                "parameter {p}: R-hat {r} should be < 1.01 for iid chains"
            );
        }
        for (p, &e) in d.bulk_ess.iter().enumerate() {
            assert!(
                e > 2000.0,
                "parameter {p}: ESS {e} too low for 4000 iid draws"
            );
        }
        assert!(d.max_rhat() < 1.01);
        assert!(d.min_ess() > 2000.0);
    }

    #[test]
    fn shifted_chain_is_flagged() {
        let chains = normal_chains(4, 1000, 2, 7, 5.0);
        let d = compute_diagnostics(&chains, &no_stats(4)).unwrap();
        for (p, &r) in d.split_rhat.iter().enumerate() {
            assert!(
                r > 1.5,
                "parameter {p}: R-hat {r} should exceed 1.5 with a +5 shift"
            );
        }
        assert!(d.min_ess() < 100.0, "a shifted chain should crater the ESS");
    }

    #[test]
    fn constant_chains_report_nan_not_unity() {
        let chains: Vec<DMatrix<f64>> = (0..4)
            .map(|_| DMatrix::from_element(200, 2, 3.25))
            .collect();
        let d = compute_diagnostics(&chains, &no_stats(4)).unwrap();
        assert!(
            d.split_rhat.iter().all(|r| r.is_nan()),
            "constant draws have undefined R-hat"
        );
        assert!(d.bulk_ess.iter().all(|e| e.is_nan()));
        assert!(d.max_rhat().is_nan());
    }

    #[test]
    fn autocorrelated_chains_have_reduced_ess() {
        // AR(1) with phi = 0.9 has integrated autocorrelation time
        // (1+phi)/(1-phi) = 19, so ESS should be roughly S/19.
        let mut rng = StdRng::seed_from_u64(11);
        let phi: f64 = 0.9;
        let chains: Vec<DMatrix<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                DMatrix::from_fn(2000, 1, |_, _| {
                    let z: f64 = rng.sample(StandardNormal);
                    x = phi * x + (1.0 - phi * phi).sqrt() * z;
                    x
                })
            })
            .collect();
        let d = compute_diagnostics(&chains, &no_stats(4)).unwrap();
        let ess = d.bulk_ess[0];
        let s = 8000.0;
        assert!(
            ess > s / 60.0 && ess < s / 8.0,
            "AR(0.9) ESS {ess} should be near {} (S/19)",
            s / 19.0
        );
        assert!(
            d.split_rhat[0] < 1.05,
            "stationary AR chains still mix across chains"
        );
    }

    #[test]
    fn too_few_chains_or_draws_is_an_error() {
        let one = normal_chains(1, 500, 1, 3, 0.0);
        assert!(compute_diagnostics(&one, &no_stats(1)).is_err());
        let short = normal_chains(4, 50, 1, 3, 0.0);
        assert!(compute_diagnostics(&short, &no_stats(4)).is_err());
    }

    #[test]
    fn rank_normalization_is_monotone_and_tie_stable() {
        let seqs = vec![vec![3.0, 1.0, 2.0, 2.0], vec![0.0, 5.0, 2.0, 4.0]];
        let z = rank_normalize(&seqs);
        // Equal values map to equal z-scores.
        assert_eq!(z[0][2], z[0][3]);
        assert_eq!(z[0][2], z[1][2]);
        // Order preserved: 0 < 1 < 2 < 3 < 4 < 5.
        assert!(z[1][0] < z[0][1]);
        assert!(z[0][1] < z[0][2]);
        assert!(z[0][2] < z[0][0]);
        assert!(z[0][0] < z[1][3]);
        assert!(z[1][3] < z[1][1]);
        // Symmetric fractional ranks give a symmetric z range.
        assert!((z[1][0] + z[1][1]).abs() < 1e-12);
    }

    #[test]
    fn counters_are_pooled_from_stats() {
        let chains = normal_chains(2, 200, 1, 9, 0.0);
        let mut stats = no_stats(2);
        stats[0].divergences = 3;
        stats[1].divergences = 2;
        stats[1].max_treedepth_hits = 4;
        let d = compute_diagnostics(&chains, &stats).unwrap();
        assert_eq!(d.divergences, 5);
        assert_eq!(d.max_treedepth_hits, 4);
    }
}
