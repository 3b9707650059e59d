//! Effective behavioral channels and their information-theoretic summaries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flags::{Flag, Flags};
use crate::ingest::ConfusionCounts;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    #[default]
    Empirical,
    Uniform,
}

/// Row-stochastic conditional p(y | x) with a class prior p(x).
///
/// Rows outside the support carry zero prior mass and an all-zero conditional row.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub cond: DMatrix<f64>,
    pub prior: Vec<f64>,
}

impl Channel {
    pub fn new(cond: DMatrix<f64>, prior: Vec<f64>) -> Result<Self> {
        let k = prior.len();
        if cond.nrows() != k || cond.ncols() != k {
            return Err(Error::Dimension {
                expected: k,
                got: cond.nrows(),
            });
        }
        Ok(Self { cond, prior })
    }

    pub fn k(&self) -> usize {
        self.prior.len()
    }

    pub fn is_supported(&self, i: usize) -> bool {
        self.prior[i] > 0.0
    }

    pub fn supported(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.k()).filter(|&i| self.is_supported(i))
    }

    /// Output marginal p(y) = Σ_x p(x) p(y|x).
    pub fn output_marginal(&self) -> Vec<f64> {
        marginal(&self.cond, &self.prior)
    }

    /// Prior-weighted trace of the conditional.
    pub fn accuracy(&self) -> f64 {
        self.supported()
            .map(|i| self.prior[i] * self.cond[(i, i)])
            .sum()
    }

    pub fn info_summary(&self, rho: &DMatrix<f64>) -> Result<InfoSummary> {
        Ok(InfoSummary {
            mutual_information: mutual_information(self),
            expected_distortion: expected_distortion(self, rho)?,
            accuracy: self.accuracy(),
        })
    }

    /// Simultaneous relabeling: new index i corresponds to old index perm[i].
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.k();
        Self {
            cond: DMatrix::from_fn(k, k, |i, j| self.cond[(perm[i], perm[j])]),
            prior: perm.iter().map(|&p| self.prior[p]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoSummary {
    /// Bits.
    pub mutual_information: f64,
    pub expected_distortion: f64,
    pub accuracy: f64,
}

pub(crate) fn marginal(cond: &DMatrix<f64>, prior: &[f64]) -> Vec<f64> {
    let k = prior.len();
    let mut out = vec![0.0; k];
    for (i, &p) in prior.iter().enumerate() {
        if p > 0.0 {
            for (j, o) in out.iter_mut().enumerate() {
                *o += p * cond[(i, j)];
            }
        }
    }
    out
}

/// Row-normalized counts. Rows with no trials are dropped from the support.
pub fn channel_from_counts(counts: &ConfusionCounts, prior_mode: PriorMode) -> Result<Channel> {
    let k = counts.k();
    let sums = counts.row_sums();
    let total: u64 = sums.iter().sum();
    if total == 0 {
        return Err(Error::Input("all rows of the confusion matrix are zero".into()));
    }
    let supported = sums.iter().filter(|&&s| s > 0).count();
    let mut cond = DMatrix::zeros(k, k);
    let mut prior = vec![0.0; k];
    for i in 0..k {
        if sums[i] == 0 {
            continue;
        }
        let s = sums[i] as f64;
        for j in 0..k {
            cond[(i, j)] = counts.counts[(i, j)] as f64 / s;
        }
        prior[i] = match prior_mode {
            PriorMode::Empirical => s / total as f64,
            PriorMode::Uniform => 1.0 / supported as f64,
        };
    }
    Channel::new(cond, prior)
}

/// Additive-pseudocount smoothing, (N_ij + α) / Σ_j' (N_ij' + α), with an empirical prior.
///
/// With α = 0 and a zero row this falls back to [`channel_from_counts`] and sets
/// [`Flag::ZeroAlphaFallback`].
pub fn smooth_counts(counts: &ConfusionCounts, alpha: f64) -> Result<(Channel, Flags)> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    let k = counts.k();
    let sums = counts.row_sums();
    if alpha == 0.0 && sums.contains(&0) {
        return Ok((
            channel_from_counts(counts, PriorMode::Empirical)?,
            Flag::ZeroAlphaFallback.into(),
        ));
    }
    let mut cond = DMatrix::zeros(k, k);
    let smoothed_sums: Vec<f64> = sums.iter().map(|&s| s as f64 + alpha * k as f64).collect();
    let grand: f64 = smoothed_sums.iter().sum();
    for i in 0..k {
        for j in 0..k {
            cond[(i, j)] = (counts.counts[(i, j)] as f64 + alpha) / smoothed_sums[i];
        }
    }
    let prior = smoothed_sums.iter().map(|s| s / grand).collect();
    Ok((Channel::new(cond, prior)?, Flags::new()))
}

/// I(X;Y) in bits, with the 0·log 0 = 0 convention.
pub fn mutual_information(ch: &Channel) -> f64 {
    mutual_information_parts(&ch.cond, &ch.prior)
}

pub(crate) fn mutual_information_parts(cond: &DMatrix<f64>, prior: &[f64]) -> f64 {
    let py = marginal(cond, prior);
    let mut nats = 0.0;
    for (i, &px) in prior.iter().enumerate() {
        if px <= 0.0 {
            continue;
        }
        let mut row = 0.0;
        for (j, &qy) in py.iter().enumerate() {
            let c = cond[(i, j)];
            if c > 0.0 && qy > 0.0 {
                row += c * (c / qy).ln();
            }
        }
        nats += px * row;
    }
    (nats / std::f64::consts::LN_2).max(0.0)
}

/// E[ρ(X,Y)] under the channel and its prior.
pub fn expected_distortion(ch: &Channel, rho: &DMatrix<f64>) -> Result<f64> {
    let k = ch.k();
    if rho.nrows() != k || rho.ncols() != k {
        return Err(Error::Dimension {
            expected: k,
            got: rho.nrows(),
        });
    }
    Ok(expected_distortion_parts(&ch.cond, &ch.prior, rho))
}

pub(crate) fn expected_distortion_parts(
    cond: &DMatrix<f64>,
    prior: &[f64],
    rho: &DMatrix<f64>,
) -> f64 {
    let mut d = 0.0;
    for (i, &px) in prior.iter().enumerate() {
        if px <= 0.0 {
            continue;
        }
        let row: f64 = (0..prior.len()).map(|j| cond[(i, j)] * rho[(i, j)]).sum();
        d += px * row;
    }
    d
}
