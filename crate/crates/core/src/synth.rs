//! Synthetic observers: RD-optimal channels for known costs, and
//! reproducible multinomial samples drawn from them.
//!
//! Sampling uses ChaCha8 seeded with `seed_from_u64(seed)`, one stream per
//! row (`set_stream(row)`). Each trial draws a 53-bit uniform from
//! `next_u64() >> 11` and maps it through the row's cumulative distribution.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::Channel;
use crate::cost::CostMatrix;
use crate::error::{Error, Result};
use crate::ingest::{BlockRef, ConfusionCounts, LabelSet};
use crate::rd::{ba_optimal_channel, BASettings};

/// Name recorded alongside every synthetic artifact.
pub const GENERATOR: &str = "chacha8-inverse-cdf";

/// Stream reserved for drawing random cost matrices.
const COST_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObserver {
    pub rho_true: CostMatrix,
    pub lambda_true: f64,
    pub prior: Vec<f64>,
    pub channel: Channel,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverRecord {
    pub generator: String,
    pub seed: u64,
    pub lambda_true: f64,
    pub prior: Vec<f64>,
    /// Row-major costs.
    pub rho_true: Vec<f64>,
    /// Row-major channel.
    pub channel: Vec<f64>,
}

impl SyntheticObserver {
    pub fn record(&self) -> ObserverRecord {
        ObserverRecord {
            generator: GENERATOR.to_string(),
            seed: self.seed,
            lambda_true: self.lambda_true,
            prior: self.prior.clone(),
            rho_true: row_major(self.rho_true.matrix()),
            channel: row_major(&self.channel.cond),
        }
    }
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

pub fn observer_settings() -> BASettings {
    BASettings::default().with_tol(1e-12)
}

pub fn make_observer(rho: CostMatrix, lambda: f64, prior: &[f64], seed: u64) -> Result<SyntheticObserver> {
    let point = ba_optimal_channel(rho.matrix(), prior, lambda, &observer_settings())?;
    if !point.converged {
        return Err(Error::NotConverged(format!(
            "observer channel at lambda = {lambda} did not converge (residual {})",
            point.residual
        )));
    }
    Ok(SyntheticObserver {
        rho_true: rho,
        lambda_true: lambda,
        prior: point.channel.prior.clone(),
        channel: point.channel,
        seed,
    })
}

fn row_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn sample_row(probs: &[f64], trials: u64, seed: u64, row: usize) -> Vec<u64> {
    let mut cum = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs {
        acc += p;
        cum.push(acc);
    }
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1);
    let mut rng = row_rng(seed, row as u64);
    let mut out = vec![0u64; probs.len()];
    for _ in 0..trials {
        let u = unit(&mut rng) * acc;
        let j = cum.iter().position(|&c| u < c).unwrap_or(last);
        out[j] += 1;
    }
    out
}

/// Draws `trials_per_class` responses for every class.
pub fn sample_counts(
    obs: &SyntheticObserver,
    trials_per_class: u64,
    key: BlockRef,
    labels: LabelSet,
) -> Result<ConfusionCounts> {
    if trials_per_class == 0 {
        return Err(Error::InvalidArgument("trials_per_class must be >= 1".into()));
    }
    let k = obs.channel.k();
    if labels.len() != k {
        return Err(Error::Dimension {
            expected: k,
            got: labels.len(),
        });
    }
    let rows: Vec<Vec<u64>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let probs: Vec<f64> = obs.channel.cond.row(i).iter().copied().collect();
            sample_row(&probs, trials_per_class, obs.seed, i)
        })
        .collect();
    let counts = DMatrix::from_fn(k, k, |i, j| rows[i][j]);
    ConfusionCounts::new(key, counts, labels)
}

/// Off-diagonal costs drawn uniformly from [lo, hi), then normalized.
pub fn random_cost_matrix(k: usize, lo: f64, hi: f64, seed: u64) -> Result<CostMatrix> {
    if k < 2 || !(lo >= 0.0) || !(hi > lo) || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "random costs need K >= 2 and 0 <= lo < hi, got K = {k}, [{lo}, {hi})"
        )));
    }
    let mut rng = row_rng(seed, COST_STREAM);
    let mut m = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            if i != j {
                m[(i, j)] = lo + (hi - lo) * unit(&mut rng);
            }
        }
    }
    CostMatrix::normalized(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> BlockRef {
        BlockRef {
            system: "synthetic".into(),
            family: "synthetic".into(),
            experiment: "e".into(),
            condition: "c".into(),
        }
    }

    #[test]
    fn binary_crossover() {
        let obs = make_observer(CostMatrix::zero_one(2), 9f64.ln(), &[0.5, 0.5], 1).unwrap();
        assert!((obs.channel.cond[(0, 1)] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn temperature_limits() {
        let rho = random_cost_matrix(4, 0.2, 2.0, 3).unwrap();
        let flat = make_observer(rho.clone(), 1e-6, &[0.25; 4], 0).unwrap();
        // Compression limit: every row carries the same response distribution.
        for i in 1..4 {
            for j in 0..4 {
                assert!((flat.channel.cond[(i, j)] - flat.channel.cond[(0, j)]).abs() < 1e-5);
            }
        }
        assert!(crate::channel::mutual_information(&flat.channel) < 1e-9);
        let sharp = make_observer(rho, 1e6, &[0.25; 4], 0).unwrap();
        for i in 0..4 {
            assert!(sharp.channel.cond[(i, i)] > 1.0 - 1e-6);
        }
    }

    #[test]
    fn sampling_is_deterministic_with_exact_row_mass() {
        let rho = random_cost_matrix(3, 0.2, 2.0, 5).unwrap();
        let obs = make_observer(rho, 1.0, &[1.0 / 3.0; 3], 42).unwrap();
        let labels = LabelSet::numbered(3).unwrap();
        let a = sample_counts(&obs, 500, key(), labels.clone()).unwrap();
        let b = sample_counts(&obs, 500, key(), labels.clone()).unwrap();
        assert_eq!(a, b);
        assert!(a.row_sums().iter().all(|&s| s == 500));
        let one = sample_counts(&obs, 1, key(), labels.clone()).unwrap();
        assert!(one.row_sums().iter().all(|&s| s == 1));
        assert!(sample_counts(&obs, 0, key(), labels).is_err());
    }

    #[test]
    fn random_costs_are_normalized() {
        let rho = random_cost_matrix(5, 0.2, 2.0, 9).unwrap();
        let off = rho.off_diagonal();
        assert!((off.iter().sum::<f64>() / off.len() as f64 - 1.0).abs() < 1e-12);
        assert_ne!(rho, random_cost_matrix(5, 0.2, 2.0, 10).unwrap());
    }
}
