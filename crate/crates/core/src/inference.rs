//! MAP inference of the latent cost matrix from confusion counts.
//!
//! The likelihood compares counts with the RD-optimal channel at λ = 1:
//! `Σ_ij N_ij ln q(j|i)`. Costs are parameterized on the off-diagonal cells
//! through a softplus (capped at [`OptimizerSettings::cost_cap`]) and carry a
//! Gaussian prior on their symmetric and antisymmetric parts. The fitted
//! costs are reported normalized (unit off-diagonal mean); their overall
//! magnitude is kept separately as [`FitResult::scale`], the inverse
//! temperature at which the normalized costs reproduce the fitted channel.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::smooth_counts;
use crate::cost::{off_diagonal_mean, CostMatrix};
use crate::error::{Error, Result};
use crate::flags::{Flag, Flags};
use crate::ingest::ConfusionCounts;
use crate::optim::{bfgs, fd_hessian, is_valid, BfgsSettings};
use crate::rd::{ba_optimal_channel_from, BASettings, RDPoint};

/// Objective value returned when the inner solve fails.
pub const PENALTY: f64 = 1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Precision on the symmetric off-diagonal part.
    pub tau_sym: f64,
    /// Precision on the antisymmetric part.
    pub tau_asym: f64,
    /// Unused: the diagonal is fixed at zero.
    pub tau_diag: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            tau_sym: 1.0,
            tau_asym: 10.0,
            tau_diag: 0.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_sym", self.tau_sym),
            ("tau_asym", self.tau_asym),
            ("tau_diag", self.tau_diag),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// -½ τ_s ‖S‖² - ½ τ_a ‖A‖² over off-diagonal cells.
    pub fn log_density(&self, rho: &DMatrix<f64>) -> f64 {
        let k = rho.nrows();
        let (mut sym, mut asym) = (0.0, 0.0);
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    let s = 0.5 * (rho[(i, j)] + rho[(j, i)]);
                    let a = 0.5 * (rho[(i, j)] - rho[(j, i)]);
                    sym += s * s;
                    asym += a * a;
                }
            }
        }
        -0.5 * self.tau_sym * sym - 0.5 * self.tau_asym * asym
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    /// Stop when the gradient sup-norm falls below this.
    pub gtol: f64,
    /// Stop when the relative objective change falls below this.
    pub ftol: f64,
    /// Central-difference step in parameter space.
    pub fd_step: f64,
    /// Step for the Laplace Hessian.
    pub hessian_step: f64,
    /// Upper bound on any decoded cost.
    pub cost_cap: f64,
    /// Inner Blahut–Arimoto settings.
    pub ba: BASettings,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: 500,
            gtol: 1e-5,
            ftol: 1e-9,
            fd_step: 1e-4,
            hessian_step: 1e-3,
            cost_cap: 50.0,
            ba: BASettings::default().with_tol(1e-12),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartKind {
    ZeroOne,
    SmoothedLog,
    ChannelInverse,
    Given,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub rho_map: CostMatrix,
    /// Mean off-diagonal of the unnormalized fitted costs.
    pub scale: f64,
    /// Unconstrained parameters at the optimum (row-major off-diagonal).
    pub theta: Vec<f64>,
    pub log_posterior: f64,
    pub converged: bool,
    pub iters: usize,
    /// Gradient sup-norm at the returned point.
    pub grad_norm: f64,
    /// Laplace standard errors in normalized cost units.
    pub stderr: Option<DMatrix<f64>>,
    /// Log posterior after each accepted step.
    pub objective_trace: Vec<f64>,
    pub start: StartKind,
    pub flags: Flags,
}

impl FitResult {
    /// Costs before normalization (the scale at which λ = 1 fits the data).
    pub fn raw_costs(&self) -> DMatrix<f64> {
        self.rho_map.matrix() * self.scale
    }

    /// Model-implied channel at λ = 1 on the raw costs.
    pub fn implied_channel(&self, prior: &[f64], ba: &BASettings) -> Result<RDPoint> {
        ba_optimal_channel_from(&self.raw_costs(), prior, 1.0, ba, None)
    }
}

pub fn n_params(k: usize) -> usize {
    k * (k - 1)
}

fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t
    } else if t < -30.0 {
        t.exp()
    } else {
        t.exp().ln_1p()
    }
}

fn softplus_inv(r: f64) -> f64 {
    if r > 30.0 {
        r
    } else {
        r.exp_m1().ln()
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// θ → unnormalized costs: softplus, capped, zero diagonal.
pub fn decode(theta: &[f64], k: usize, cap: f64) -> Result<DMatrix<f64>> {
    if theta.len() != n_params(k) {
        return Err(Error::Dimension {
            expected: n_params(k),
            got: theta.len(),
        });
    }
    let mut rho = DMatrix::zeros(k, k);
    let mut it = theta.iter();
    for i in 0..k {
        for j in 0..k {
            if i != j {
                rho[(i, j)] = softplus(*it.next().expect("length checked")).min(cap);
            }
        }
    }
    Ok(rho)
}

/// Inverse of [`decode`] for costs strictly inside (0, cap).
pub fn encode(rho: &DMatrix<f64>) -> Vec<f64> {
    let k = rho.nrows();
    let mut out = Vec::with_capacity(n_params(k));
    for i in 0..k {
        for j in 0..k {
            if i != j {
                out.push(softplus_inv(rho[(i, j)].max(1e-12)));
            }
        }
    }
    out
}

pub fn empirical_prior(counts: &ConfusionCounts) -> Vec<f64> {
    let sums = counts.row_sums();
    let total: u64 = sums.iter().sum();
    sums.iter().map(|&s| s as f64 / total as f64).collect()
}

/// Objective with its inner-solve diagnostics.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub flags: Flags,
    pub marginal: Vec<f64>,
}

pub(crate) struct Objective<'a> {
    counts: &'a ConfusionCounts,
    prior_cfg: PriorConfig,
    class_prior: Vec<f64>,
    settings: OptimizerSettings,
}

impl<'a> Objective<'a> {
    pub(crate) fn new(
        counts: &'a ConfusionCounts,
        prior_cfg: PriorConfig,
        settings: OptimizerSettings,
    ) -> Self {
        Self {
            counts,
            prior_cfg,
            class_prior: empirical_prior(counts),
            settings,
        }
    }

    pub(crate) fn evaluate(&self, theta: &[f64], init: Option<&[f64]>) -> Result<Evaluation> {
        let k = self.counts.k();
        let rho = decode(theta, k, self.settings.cost_cap)?;
        let log_prior = self.prior_cfg.log_density(&rho);
        let point = ba_optimal_channel_from(&rho, &self.class_prior, 1.0, &self.settings.ba, init)?;
        let mut flags = Flags::new();
        if !point.converged {
            flags.insert(Flag::BaNotConverged);
            return Ok(Evaluation {
                value: PENALTY,
                log_likelihood: f64::NEG_INFINITY,
                log_prior,
                flags,
                marginal: point.marginal,
            });
        }
        let mut ll = 0.0;
        for i in 0..k {
            for j in 0..k {
                let n = self.counts.counts[(i, j)];
                if n > 0 {
                    ll += n as f64 * point.channel.cond[(i, j)].ln();
                }
            }
        }
        let value = -(ll + log_prior);
        Ok(Evaluation {
            value: if value.is_finite() { value } else { PENALTY },
            log_likelihood: ll,
            log_prior,
            flags,
            marginal: point.marginal,
        })
    }

    fn value(&self, theta: &[f64]) -> f64 {
        self.evaluate(theta, None).map(|e| e.value).unwrap_or(PENALTY)
    }
}

/// Negative log posterior at θ (λ fixed to 1). Inner non-convergence yields [`PENALTY`].
pub fn neg_log_posterior(
    theta: &[f64],
    counts: &ConfusionCounts,
    prior: &PriorConfig,
    settings: &OptimizerSettings,
) -> Result<f64> {
    prior.validate()?;
    Ok(Objective::new(counts, *prior, *settings).evaluate(theta, None)?.value)
}

/// Same objective with likelihood and prior terms reported separately.
pub fn evaluate_objective(
    theta: &[f64],
    counts: &ConfusionCounts,
    prior: &PriorConfig,
    settings: &OptimizerSettings,
) -> Result<Evaluation> {
    prior.validate()?;
    Objective::new(counts, *prior, *settings).evaluate(theta, None)
}

/// Starting points: 0-1 costs, −ln of the α = 0.5 smoothed confusion
/// probabilities, and the costs that make the smoothed channel an exact
/// fixed point at λ = 1 (floored at a small positive value). All normalized.
pub fn initializations(counts: &ConfusionCounts) -> Result<Vec<(StartKind, DMatrix<f64>)>> {
    let k = counts.k();
    let zero_one = CostMatrix::zero_one(k).into_matrix();
    let (smoothed, _) = smooth_counts(counts, 0.5)?;
    let neg_log = DMatrix::from_fn(k, k, |i, j| -smoothed.cond[(i, j)].ln());
    let neg_log = CostMatrix::normalized(neg_log)
        .map(CostMatrix::into_matrix)
        .unwrap_or_else(|_| zero_one.clone());
    // ρ(i,j) = ln(q(j)/W(j|i)) − ln(q(i)/W(i|i)) reproduces W exactly.
    let q = smoothed.output_marginal();
    let inverse = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            0.0
        } else {
            let w = &smoothed.cond;
            ((q[j] / w[(i, j)]).ln() - (q[i] / w[(i, i)]).ln()).max(1e-3)
        }
    });
    let inverse = CostMatrix::normalized(inverse)
        .map(CostMatrix::into_matrix)
        .unwrap_or_else(|_| zero_one.clone());
    Ok(vec![
        (StartKind::ZeroOne, zero_one),
        (StartKind::SmoothedLog, neg_log),
        (StartKind::ChannelInverse, inverse),
    ])
}

fn check_fit_preconditions(counts: &ConfusionCounts) -> Result<()> {
    if counts.supported_rows() < 2 {
        return Err(Error::Input(format!(
            "cost inference needs at least 2 rows with trials, found {}",
            counts.supported_rows()
        )));
    }
    if counts.total() < counts.k() as u64 {
        return Err(Error::Input(format!(
            "cost inference needs at least K = {} trials, found {}",
            counts.k(),
            counts.total()
        )));
    }
    Ok(())
}

/// Local MAP fit from one starting cost matrix (unnormalized units).
pub fn fit_from(
    counts: &ConfusionCounts,
    prior: &PriorConfig,
    opt: &OptimizerSettings,
    start: &DMatrix<f64>,
    kind: StartKind,
) -> Result<FitResult> {
    prior.validate()?;
    opt.ba.validate()?;
    check_fit_preconditions(counts)?;
    let k = counts.k();
    if start.nrows() != k {
        return Err(Error::Dimension {
            expected: k,
            got: start.nrows(),
        });
    }
    let objective = Objective::new(counts, *prior, *opt);
    let f = |theta: &[f64]| objective.value(theta);
    let theta0 = feasible_start(&objective, opt, start);
    let mut min = bfgs(
        &f,
        &theta0,
        &BfgsSettings {
            max_iters: opt.max_iters,
            gtol: opt.gtol,
            ftol: opt.ftol,
            fd_step: opt.fd_step,
        },
    );
    scale_polish(&objective, opt, &mut min);
    finish(counts, &objective, opt, min, kind)
}

/// Encodes a start, scaling it up if the implied channel gives zero
/// probability to observed responses. At high enough scale every presented
/// class keeps its own response letter alive, so doubling usually restores a
/// finite likelihood before the cap.
fn feasible_start(objective: &Objective, opt: &OptimizerSettings, start: &DMatrix<f64>) -> Vec<f64> {
    let limit = opt.cost_cap * (1.0 - 1e-9);
    let mut m = start.map(|v| v.min(limit));
    let theta = encode(&m);
    if is_valid(objective.value(&theta)) {
        return theta;
    }
    let top = m.max();
    if !(top > 0.0) {
        return theta;
    }
    loop {
        let c = (2.0f64).min(limit / m.max());
        m *= c;
        let candidate = encode(&m.map(|v| v.min(limit)));
        if is_valid(objective.value(&candidate)) || c <= 1.0 + 1e-12 {
            return candidate;
        }
    }
}

/// Scan ρ → cρ for c > 1 up to the cap. The gradient along the scale
/// direction vanishes as costs grow, so a local method stalls short of the
/// bound on near-perfect blocks; this step carries it the rest of the way.
fn scale_polish(objective: &Objective, opt: &OptimizerSettings, min: &mut crate::optim::Minimum) {
    let k = objective.counts.k();
    let Ok(raw) = decode(&min.x, k, opt.cost_cap) else {
        return;
    };
    let top = raw.max();
    if !(top > 0.0) || top >= opt.cost_cap {
        return;
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut c: f64 = 1.0;
    loop {
        c = (c * 2.0).min(opt.cost_cap / top);
        let theta = encode(&(&raw * c).map(|v| v.min(opt.cost_cap)));
        let value = objective.value(&theta);
        let current = best.as_ref().map_or(min.value, |b| b.1);
        if value < current {
            best = Some((theta, value));
        } else {
            break;
        }
        if c >= opt.cost_cap / top {
            break;
        }
    }
    if let Some((theta, value)) = best {
        min.x = theta;
        min.value = value;
        min.trace.push(value);
    }
}

fn finish(
    counts: &ConfusionCounts,
    objective: &Objective,
    opt: &OptimizerSettings,
    min: crate::optim::Minimum,
    kind: StartKind,
) -> Result<FitResult> {
    let k = counts.k();
    let raw = decode(&min.x, k, opt.cost_cap)?;
    let eval = objective.evaluate(&min.x, None)?;
    let mut flags = eval.flags.clone();
    if !min.converged {
        flags.insert(Flag::FitNotConverged);
    }
    if raw.iter().any(|&v| v >= opt.cost_cap) {
        flags.insert(Flag::ScaleCap);
    }
    let scale = off_diagonal_mean(&raw);
    Ok(FitResult {
        rho_map: CostMatrix::normalized(raw)?,
        scale,
        theta: min.x,
        log_posterior: -eval.value,
        converged: min.converged,
        iters: min.iters,
        grad_norm: min.grad_norm,
        stderr: None,
        objective_trace: min.trace.iter().map(|v| -v).collect(),
        start: kind,
        flags,
    })
}

/// Multi-start MAP fit; the start with the best final objective wins.
pub fn fit_cost_matrix(
    counts: &ConfusionCounts,
    prior: &PriorConfig,
    opt: &OptimizerSettings,
) -> Result<FitResult> {
    check_fit_preconditions(counts)?;
    let mut best: Option<FitResult> = None;
    for (kind, start) in initializations(counts)? {
        let fit = fit_from(counts, prior, opt, &start, kind)?;
        let better = match &best {
            None => true,
            Some(b) => fit.log_posterior > b.log_posterior,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Laplace standard errors of the normalized costs.
///
/// The Hessian of the objective in θ is taken by central differences; its
/// inverse is pushed through the softplus and the normalization (delta
/// method). A Hessian that is not positive definite yields `None` and
/// [`Flag::HessianNotPd`].
pub fn laplace_stderr(
    fit: &FitResult,
    counts: &ConfusionCounts,
    prior: &PriorConfig,
    opt: &OptimizerSettings,
) -> Result<(Option<DMatrix<f64>>, Flags)> {
    prior.validate()?;
    let k = counts.k();
    if fit.theta.len() != n_params(k) {
        return Err(Error::Dimension {
            expected: n_params(k),
            got: fit.theta.len(),
        });
    }
    let objective = Objective::new(counts, *prior, *opt);
    let f = |theta: &[f64]| objective.value(theta);
    let hess = fd_hessian(&f, &fit.theta, opt.hessian_step);
    let Some(cov_theta) = positive_definite_inverse(&hess) else {
        return Ok((None, Flag::HessianNotPd.into()));
    };

    let m = n_params(k);
    let raw: Vec<f64> = fit
        .theta
        .iter()
        .map(|&t| softplus(t).min(opt.cost_cap))
        .collect();
    let draw: Vec<f64> = fit
        .theta
        .iter()
        .zip(&raw)
        .map(|(&t, &r)| if r >= opt.cost_cap { 0.0 } else { sigmoid(t) })
        .collect();
    let scale = raw.iter().sum::<f64>() / m as f64;
    let normalized: Vec<f64> = raw.iter().map(|r| r / scale).collect();
    // d(norm_a)/d(theta_b) = (δ_ab - norm_a / m) * draw_b / scale
    let jac = DMatrix::from_fn(m, m, |a, b| {
        let delta = if a == b { 1.0 } else { 0.0 };
        (delta - normalized[a] / m as f64) * draw[b] / scale
    });
    let cov = &jac * cov_theta * jac.transpose();
    let mut out = DMatrix::zeros(k, k);
    let mut idx = 0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                out[(i, j)] = cov[(idx, idx)].max(0.0).sqrt();
                idx += 1;
            }
        }
    }
    Ok((Some(out), Flags::new()))
}

/// Inverse of a symmetric matrix when it is positive definite.
pub fn positive_definite_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return None;
    }
    sym.cholesky().map(|c| c.inverse())
}

/// Fit plus Laplace errors; flags from both steps are merged.
pub fn fit_with_stderr(
    counts: &ConfusionCounts,
    prior: &PriorConfig,
    opt: &OptimizerSettings,
) -> Result<FitResult> {
    let mut fit = fit_cost_matrix(counts, prior, opt)?;
    let (stderr, flags) = laplace_stderr(&fit, counts, prior, opt)?;
    fit.stderr = stderr;
    fit.flags.extend(&flags);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{BlockRef, LabelSet};

    fn counts(k: usize, data: &[u64]) -> ConfusionCounts {
        ConfusionCounts::new(
            BlockRef {
                system: "s".into(),
                family: "f".into(),
                experiment: "e".into(),
                condition: "c".into(),
            },
            DMatrix::from_row_slice(k, k, data),
            LabelSet::numbered(k).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn decode_encode_round_trip() {
        let rho = DMatrix::from_row_slice(3, 3, &[0.0, 0.5, 2.0, 1.0, 0.0, 3.0, 0.1, 0.7, 0.0]);
        let back = decode(&encode(&rho), 3, 50.0).unwrap();
        assert!((back - rho).abs().max() < 1e-12);
        assert!(decode(&[0.0; 5], 3, 50.0).is_err());
        assert_eq!(decode(&[100.0; 2], 2, 50.0).unwrap()[(0, 1)], 50.0);
    }

    #[test]
    fn prior_off_gives_pure_likelihood() {
        let c = counts(3, &[50, 10, 5, 8, 40, 12, 3, 9, 60]);
        let theta = encode(&CostMatrix::zero_one(3).into_matrix());
        let off = PriorConfig {
            tau_sym: 0.0,
            tau_asym: 0.0,
            tau_diag: 0.0,
        };
        let opt = OptimizerSettings::default();
        let v = neg_log_posterior(&theta, &c, &off, &opt).unwrap();
        let point = ba_optimal_channel_from(
            &CostMatrix::zero_one(3).into_matrix(),
            &empirical_prior(&c),
            1.0,
            &opt.ba,
            None,
        )
        .unwrap();
        let mut ll = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                ll += c.counts[(i, j)] as f64 * point.channel.cond[(i, j)].ln();
            }
        }
        assert!((v + ll).abs() < 1e-9 * ll.abs());
        let with_prior = neg_log_posterior(&theta, &c, &PriorConfig::default(), &opt).unwrap();
        assert!(with_prior > v);
    }

    #[test]
    fn binary_off_diagonals_normalize_to_one() {
        let c = counts(2, &[90, 10, 10, 90]);
        let fit = fit_cost_matrix(&c, &PriorConfig::default(), &OptimizerSettings::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.rho_map.matrix()[(0, 1)] - 1.0).abs() < 1e-6);
        assert!((fit.rho_map.matrix()[(1, 0)] - 1.0).abs() < 1e-6);
        assert!(fit.objective_trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn all_diagonal_counts_hit_the_cap_without_prior() {
        let c = counts(3, &[100, 0, 0, 0, 100, 0, 0, 0, 100]);
        let off = PriorConfig {
            tau_sym: 0.0,
            tau_asym: 0.0,
            tau_diag: 0.0,
        };
        let opt = OptimizerSettings::default();
        // Objective falls monotonically along the scale direction.
        let mut last = f64::INFINITY;
        for c_scale in [0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0] {
            let rho = CostMatrix::zero_one(3).into_matrix() * c_scale;
            let v = neg_log_posterior(&encode(&rho), &c, &off, &opt).unwrap();
            assert!(v < last);
            last = v;
        }
        let fit = fit_cost_matrix(&c, &off, &opt).unwrap();
        assert!(fit.flags.contains(Flag::ScaleCap));
        assert!(fit.scale > 40.0);
    }

    #[test]
    fn too_few_trials_or_rows() {
        let opt = OptimizerSettings::default();
        let one_row = counts(3, &[5, 1, 1, 0, 0, 0, 0, 0, 0]);
        assert!(fit_cost_matrix(&one_row, &PriorConfig::default(), &opt).is_err());
        let sparse = counts(4, &[1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert!(fit_cost_matrix(&sparse, &PriorConfig::default(), &opt).is_err());
    }

    #[test]
    fn non_pd_hessian_is_detected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(positive_definite_inverse(&m).is_none());
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!(positive_definite_inverse(&m).is_some());
    }
}
