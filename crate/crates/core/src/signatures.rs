//! Frontier signatures (β, κ, AUC), their within-group normalization,
//! exponential generalization fits and goodness-of-fit diagnostics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::channel::{channel_from_counts, smooth_counts, Channel, PriorMode};
use crate::cost::CostMatrix;
use crate::error::{Error, Result};
use crate::flags::{Flag, Flags};
use crate::inference::{empirical_prior, FitResult};
use crate::ingest::ConfusionCounts;
use crate::rd::{BASettings, RDCurve};

/// Default number of equal-width bins for generalization gradients.
pub const DEFAULT_BINS: usize = 12;
/// Floor applied to κ (and |β|) before taking log10.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RDSignature {
    /// Median finite-difference slope, bits per unit cost.
    pub beta_median: f64,
    pub beta_mean: f64,
    /// Population variance of the slopes.
    pub kappa: f64,
    /// Trapezoidal area under R(D) over the traced range.
    pub auc: f64,
    pub accuracy: f64,
    pub n_slopes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSignature {
    pub beta_n: f64,
    pub kappa_n: f64,
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub a: f64,
    pub s: f64,
    pub rmse: f64,
    pub n_bins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub rmse_conf_prob: f64,
    pub rmse_emp: f64,
    pub rmse_genexp: f64,
}

/// Median with the even-count convention (mean of the two central values).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// Sorts (D, R) pairs by D, drops non-finite pairs and collapses equal D to
/// the highest R.
pub fn dedup_frontier(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|(d, r)| d.is_finite() && r.is_finite())
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|later, kept| later.0 == kept.0);
    pts
}

/// Signature of a list of (distortion, rate) points.
pub fn signature_from_points(points: &[(f64, f64)], accuracy: f64) -> Result<RDSignature> {
    if !(0.0..=1.0).contains(&accuracy) {
        return Err(Error::InvalidArgument(format!(
            "accuracy must lie in [0, 1], got {accuracy}"
        )));
    }
    let pts = dedup_frontier(points);
    if pts.len() < 3 {
        return Err(Error::Degenerate(format!(
            "degenerate frontier: {} usable points, need 3",
            pts.len()
        )));
    }
    let slopes: Vec<f64> = pts
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
        .collect();
    let auc = pts
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
        .sum::<f64>();
    Ok(RDSignature {
        beta_median: median(&slopes).expect("at least two slopes"),
        beta_mean: mean(&slopes),
        kappa: population_variance(&slopes),
        auc,
        accuracy,
        n_slopes: slopes.len(),
    })
}

pub fn extract_signature(curve: &RDCurve, accuracy: f64) -> Result<RDSignature> {
    let pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.distortion, p.rate))
        .collect();
    signature_from_points(&pts, accuracy)
}

fn z_scores(values: &[f64]) -> (Vec<f64>, bool) {
    let m = mean(values);
    let sd = population_variance(values).sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return (vec![0.0; values.len()], true);
    }
    (values.iter().map(|v| (v - m) / sd).collect(), false)
}

/// z-scores of log10|β| and log10 max(κ, 1e-12) within each group.
///
/// Output order matches input order. Singleton groups and groups with no
/// spread yield zeros with a flag.
pub fn normalize_signatures<G: Ord + Clone>(items: &[(G, RDSignature)]) -> Vec<NormalizedSignature> {
    let mut groups: BTreeMap<G, Vec<usize>> = BTreeMap::new();
    for (idx, (g, _)) in items.iter().enumerate() {
        groups.entry(g.clone()).or_default().push(idx);
    }
    let mut out = vec![
        NormalizedSignature {
            beta_n: 0.0,
            kappa_n: 0.0,
            flags: Flags::new(),
        };
        items.len()
    ];
    for members in groups.values() {
        if members.len() < 2 {
            out[members[0]].flags.insert(Flag::SingletonGroup);
            continue;
        }
        let lb: Vec<f64> = members
            .iter()
            .map(|&i| items[i].1.beta_median.abs().max(LOG_FLOOR).log10())
            .collect();
        let lk: Vec<f64> = members
            .iter()
            .map(|&i| items[i].1.kappa.max(LOG_FLOOR).log10())
            .collect();
        let (zb, flat_b) = z_scores(&lb);
        let (zk, flat_k) = z_scores(&lk);
        for (pos, &i) in members.iter().enumerate() {
            out[i].beta_n = zb[pos];
            out[i].kappa_n = zk[pos];
            if flat_b || flat_k {
                out[i].flags.insert(Flag::ZeroVariance);
            }
        }
    }
    out
}

/// One (cost, probability) pair per off-diagonal cell of a supported row.
pub fn generalization_points(channel: &Channel, rho: &CostMatrix) -> Result<Vec<(f64, f64)>> {
    let k = channel.k();
    if rho.k() != k {
        return Err(Error::Dimension {
            expected: k,
            got: rho.k(),
        });
    }
    let mut out = Vec::with_capacity(k * (k - 1));
    for i in channel.supported() {
        for j in 0..k {
            if i != j {
                out.push((rho.matrix()[(i, j)], channel.cond[(i, j)]));
            }
        }
    }
    Ok(out)
}

/// Equal-width binning over the observed d range. Each nonempty bin is
/// represented by the mean d and mean g of its members.
pub fn bin_gradient(pairs: &[(f64, f64)], bins: usize) -> Result<Vec<(f64, f64)>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be positive".into()));
    }
    let finite: Vec<(f64, f64)> = pairs
        .iter()
        .copied()
        .filter(|(d, g)| d.is_finite() && g.is_finite())
        .collect();
    if finite.is_empty() {
        return Ok(Vec::new());
    }
    let lo = finite.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = finite.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut acc = vec![(0.0, 0.0, 0usize); bins];
    for (d, g) in finite {
        let b = if width > 0.0 {
            (((d - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        acc[b].0 += d;
        acc[b].1 += g;
        acc[b].2 += 1;
    }
    Ok(acc
        .into_iter()
        .filter(|a| a.2 > 0)
        .map(|(sd, sg, n)| (sd / n as f64, sg / n as f64))
        .collect())
}

fn rmse_against(binned: &[(f64, f64)], a: f64, s: f64) -> f64 {
    if binned.is_empty() {
        return 0.0;
    }
    let sse: f64 = binned
        .iter()
        .map(|&(d, g)| {
            let r = g - a * (-s * d).exp();
            r * r
        })
        .sum();
    (sse / binned.len() as f64).sqrt()
}

/// Least-squares fit of `a·exp(−s·d)` to a binned generalization gradient.
pub fn fit_exponential(pairs: &[(f64, f64)], bins: usize) -> Result<(ExpFit, Flags)> {
    if bins < 3 {
        return Err(Error::InvalidArgument(format!("bins must be >= 3, got {bins}")));
    }
    let mut ds: Vec<f64> = pairs.iter().map(|p| p.0).filter(|d| d.is_finite()).collect();
    ds.sort_by(f64::total_cmp);
    ds.dedup();
    if pairs.len() < 3 || ds.len() < 3 {
        return Err(Error::InvalidArgument(
            "exponential fit needs at least 3 pairs with distinct d".into(),
        ));
    }
    let binned = bin_gradient(pairs, bins)?;
    let n_bins = binned.len();
    if binned.iter().all(|&(_, g)| g == 0.0) {
        return Ok((
            ExpFit {
                a: 0.0,
                s: 0.0,
                rmse: rmse_against(&binned, 0.0, 0.0),
                n_bins,
            },
            Flag::ExpFitDegenerate.into(),
        ));
    }
    let (a0, s0) = log_linear_init(&binned);
    let (a, s, converged) = levenberg_marquardt(&binned, a0, s0, 200);
    let mut flags = Flags::new();
    if !converged {
        flags.insert(Flag::ExpFitNotConverged);
    }
    Ok((
        ExpFit {
            a,
            s,
            rmse: rmse_against(&binned, a, s),
            n_bins,
        },
        flags,
    ))
}

fn log_linear_init(binned: &[(f64, f64)]) -> (f64, f64) {
    let pos: Vec<(f64, f64)> = binned
        .iter()
        .filter(|p| p.1 > 0.0)
        .map(|&(d, g)| (d, g.ln()))
        .collect();
    if pos.len() < 2 {
        let g = pos.first().map_or(0.0, |p| p.1.exp());
        return (g, 0.0);
    }
    let md = pos.iter().map(|p| p.0).sum::<f64>() / pos.len() as f64;
    let ml = pos.iter().map(|p| p.1).sum::<f64>() / pos.len() as f64;
    let sxx: f64 = pos.iter().map(|p| (p.0 - md).powi(2)).sum();
    if sxx == 0.0 {
        return (ml.exp(), 0.0);
    }
    let sxy: f64 = pos.iter().map(|p| (p.0 - md) * (p.1 - ml)).sum();
    let slope = sxy / sxx;
    ((ml - slope * md).exp(), -slope)
}

fn sse(binned: &[(f64, f64)], a: f64, s: f64) -> f64 {
    binned
        .iter()
        .map(|&(d, g)| (g - a * (-s * d).exp()).powi(2))
        .sum()
}

/// Damped Gauss–Newton on (a, s). Returns the best iterate and whether it
/// met the stopping rule.
fn levenberg_marquardt(binned: &[(f64, f64)], a0: f64, s0: f64, max_iters: usize) -> (f64, f64, bool) {
    let (mut a, mut s) = (a0, s0);
    let mut cost = sse(binned, a, s);
    let mut mu = 1e-3;
    for _ in 0..max_iters {
        if cost == 0.0 {
            return (a, s, true);
        }
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for &(d, g) in binned {
            let e = (-s * d).exp();
            let r = g - a * e;
            // Jacobian of the model a·e^{−sd} with respect to (a, s).
            let j = Vector2::new(e, -a * d * e);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        if jtr.amax() <= 1e-15 * (1.0 + cost.sqrt()) {
            return (a, s, true);
        }
        let mut accepted = false;
        while mu < 1e16 {
            let damped = jtj + Matrix2::from_diagonal(&jtj.diagonal()) * mu + Matrix2::identity() * 1e-300;
            let Some(step) = damped.lu().solve(&jtr) else {
                mu *= 10.0;
                continue;
            };
            let (na, ns) = (a + step[0], s + step[1]);
            let new_cost = sse(binned, na, ns);
            if new_cost.is_finite() && new_cost < cost {
                let small = step[0].abs() <= 1e-14 * a.abs().max(1e-300)
                    && step[1].abs() <= 1e-14 * s.abs().max(1e-12);
                let rel = (cost - new_cost) / cost;
                a = na;
                s = ns;
                cost = new_cost;
                mu = (mu * 0.3).max(1e-12);
                accepted = true;
                if small || rel < 1e-15 {
                    return (a, s, true);
                }
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            // No descent direction left at machine precision.
            return (a, s, true);
        }
    }
    (a, s, false)
}

/// Goodness-of-fit diagnostics of a fitted cost matrix against its counts.
///
/// `rmse_genexp` compares the empirical gradient with `exp(−s·d)`, where `s`
/// comes from an exponential fit to the model-implied channel and `a` is
/// fixed at 1.
pub fn rmse_diagnostics(
    counts: &ConfusionCounts,
    fit: &FitResult,
    settings: &BASettings,
    bins: usize,
) -> Result<(FitDiagnostics, Flags)> {
    let k = counts.k();
    if fit.rho_map.k() != k {
        return Err(Error::Dimension {
            expected: k,
            got: fit.rho_map.k(),
        });
    }
    let mut flags = Flags::new();
    let empirical = channel_from_counts(counts, PriorMode::Empirical)?;
    let model = fit.implied_channel(&empirical_prior(counts), settings)?;
    if !model.converged {
        flags.insert(Flag::BaNotConverged);
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    for i in empirical.supported() {
        for j in 0..k {
            if i != j {
                sse += (empirical.cond[(i, j)] - model.channel.cond[(i, j)]).powi(2);
                n += 1;
            }
        }
    }
    let rmse_conf_prob = if n > 0 { (sse / n as f64).sqrt() } else { 0.0 };

    let emp_pairs = generalization_points(&empirical, &fit.rho_map)?;
    let (emp_fit, f1) = fit_exponential(&emp_pairs, bins)?;
    flags.extend(&f1);
    let model_pairs = generalization_points(&model.channel, &fit.rho_map)?;
    let (model_fit, f2) = fit_exponential(&model_pairs, bins)?;
    flags.extend(&f2);
    let binned = bin_gradient(&emp_pairs, bins)?;
    Ok((
        FitDiagnostics {
            rmse_conf_prob,
            rmse_emp: emp_fit.rmse,
            rmse_genexp: rmse_against(&binned, 1.0, model_fit.s),
        },
        flags,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityPoint {
    pub level: String,
    pub beta: f64,
    pub flags: Flags,
}

/// Least-squares slope of `ln p(j|i)` on `ρ(i, j)` over off-diagonal cells of
/// the smoothed channel, one slope per level.
pub fn severity_beta(
    counts_by_level: &[(String, ConfusionCounts)],
    rho: &CostMatrix,
    alpha: f64,
) -> Result<Vec<SeverityPoint>> {
    counts_by_level
        .iter()
        .map(|(level, counts)| {
            let (beta, flags) = log_linear_slope(counts, rho.matrix(), alpha)?;
            Ok(SeverityPoint {
                level: level.clone(),
                beta,
                flags,
            })
        })
        .collect()
}

fn log_linear_slope(counts: &ConfusionCounts, rho: &DMatrix<f64>, alpha: f64) -> Result<(f64, Flags)> {
    let k = counts.k();
    if rho.nrows() != k {
        return Err(Error::Dimension {
            expected: k,
            got: rho.nrows(),
        });
    }
    let (channel, mut flags) = smooth_counts(counts, alpha)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..k {
        if counts.row_sum(i) == 0 {
            continue;
        }
        for j in 0..k {
            if i == j {
                continue;
            }
            let p = channel.cond[(i, j)];
            if p > 0.0 {
                xs.push(rho[(i, j)]);
                ys.push(p.ln());
            } else {
                flags.insert(Flag::ZeroCells);
            }
        }
    }
    let mut distinct = xs.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Degenerate(
            "severity slope needs at least 2 distinct cost values".into(),
        ));
    }
    let mx = mean(&xs);
    let my = mean(&ys);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok((sxy / sxx, flags))
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
    fn exact_line() {
        let s = signature_from_points(&[(0.0, 4.0), (1.0, 2.0), (2.0, 0.0)], 0.5).unwrap();
        assert_eq!(s.beta_median, -2.0);
        assert_eq!(s.kappa, 0.0);
        assert_eq!(s.auc, 4.0);
        assert_eq!(s.n_slopes, 2);
    }

    #[test]
    fn duplicate_distortion_keeps_max_rate() {
        let s = signature_from_points(&[(0.0, 4.0), (1.0, 2.0), (1.0, 1.9), (2.0, 0.0)], 0.5).unwrap();
        assert_eq!(s.beta_median, -2.0);
        assert_eq!(s.kappa, 0.0);
        assert_eq!(s.auc, 4.0);
    }

    #[test]
    fn bent_line() {
        let s = signature_from_points(&[(0.0, 4.0), (1.0, 3.0), (2.0, 0.0)], 0.5).unwrap();
        assert_eq!(s.beta_median, -2.0);
        assert_eq!(s.beta_mean, -2.0);
        assert_eq!(s.kappa, 1.0);
        assert_eq!(s.auc, 5.0);
    }

    #[test]
    fn too_few_points() {
        assert!(signature_from_points(&[(0.0, 1.0), (1.0, 0.0), (1.0, 0.5)], 0.5).is_err());
        assert!(signature_from_points(&[(0.0, 1.0), (f64::NAN, 0.0), (1.0, 0.0)], 0.5).is_err());
    }

    #[test]
    fn even_median() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    fn sig(beta: f64, kappa: f64) -> RDSignature {
        RDSignature {
            beta_median: beta,
            beta_mean: beta,
            kappa,
            auc: 1.0,
            accuracy: 0.5,
            n_slopes: 2,
        }
    }

    #[test]
    fn z_normalization() {
        let items = vec![
            ("e", sig(-0.1, 1e-3)),
            ("e", sig(-1.0, 1e-2)),
            ("e", sig(-10.0, 1e-1)),
        ];
        let out = normalize_signatures(&items);
        let z = 1.5f64.sqrt();
        assert!((out[0].beta_n + z).abs() < 1e-12);
        assert!(out[1].beta_n.abs() < 1e-12);
        assert!((out[2].beta_n - z).abs() < 1e-12);
        assert!((out[2].kappa_n - z).abs() < 1e-12);
        assert!(out.iter().all(|o| o.flags.is_empty()));
    }

    #[test]
    fn flat_and_singleton_groups() {
        let items = vec![("a", sig(-1.0, 0.0)), ("a", sig(-1.0, 0.0)), ("b", sig(-2.0, 1.0))];
        let out = normalize_signatures(&items);
        assert_eq!(out[0].beta_n, 0.0);
        assert!(out[0].flags.contains(Flag::ZeroVariance));
        assert_eq!(out[2].kappa_n, 0.0);
        assert!(out[2].flags.contains(Flag::SingletonGroup));
    }

    #[test]
    fn generalization_support() {
        let cond = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let ch = Channel::new(cond, vec![0.5, 0.0, 0.5]).unwrap();
        let pts = generalization_points(&ch, &CostMatrix::zero_one(3)).unwrap();
        assert_eq!(pts.len(), 4);
        assert!(pts.iter().all(|&(d, g)| d == 1.0 && g == 0.0));
    }

    #[test]
    fn exponential_exact() {
        let pairs: Vec<(f64, f64)> = [0.0f64, 0.5, 1.0].iter().map(|&d| (d, (-2.0 * d).exp())).collect();
        let (fit, flags) = fit_exponential(&pairs, DEFAULT_BINS).unwrap();
        assert!(flags.is_empty());
        assert!((fit.a - 1.0).abs() < 1e-9);
        assert!((fit.s - 2.0).abs() < 1e-9);
        assert!(fit.rmse <= 1e-8);
    }

    #[test]
    fn exponential_flat_and_zero() {
        let flat: Vec<(f64, f64)> = [0.0, 0.5, 1.0, 2.0].iter().map(|&d| (d, 0.5)).collect();
        let (fit, _) = fit_exponential(&flat, DEFAULT_BINS).unwrap();
        assert!(fit.s.abs() <= 1e-6);
        assert!((fit.a - 0.5).abs() < 1e-9);
        assert!(fit.rmse <= 1e-8);
        let zero: Vec<(f64, f64)> = [0.0, 0.5, 1.0].iter().map(|&d| (d, 0.0)).collect();
        let (fit, flags) = fit_exponential(&zero, DEFAULT_BINS).unwrap();
        assert!(flags.contains(Flag::ExpFitDegenerate));
        assert_eq!((fit.a, fit.s), (0.0, 0.0));
        assert!(fit_exponential(&zero, 2).is_err());
        assert!(fit_exponential(&zero[..2], 3).is_err());
    }

    #[test]
    fn smoothing_a_one_sided_row() {
        let c = counts(2, &[4, 0, 0, 4]);
        let out = severity_beta(&[("x".into(), c.clone())], &CostMatrix::zero_one(2), 0.5);
        // Both off-diagonal cells share one cost value.
        assert!(out.is_err());
        let (ch, _) = smooth_counts(&c, 0.5).unwrap();
        assert_eq!(ch.cond[(0, 0)], 0.9);
        assert_eq!(ch.cond[(0, 1)], 0.1);
    }

    #[test]
    fn uniform_confusions_have_flat_slope() {
        let rho = CostMatrix::normalized(DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 2.0, 1.5, 0.0, 0.5, 3.0, 1.0, 0.0],
        ))
        .unwrap();
        let c = counts(3, &[80, 10, 10, 10, 80, 10, 10, 10, 80]);
        let out = severity_beta(&[("lvl".into(), c)], &rho, 0.5).unwrap();
        assert!(out[0].beta.abs() < 1e-9);
    }

    #[test]
    fn zero_alpha_with_zero_cells_is_flagged() {
        let rho = CostMatrix::normalized(DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 2.0, 1.5, 0.0, 0.5, 3.0, 1.0, 0.0],
        ))
        .unwrap();
        let c = counts(3, &[80, 0, 10, 10, 80, 10, 10, 10, 80]);
        let out = severity_beta(&[("lvl".into(), c)], &rho, 0.0).unwrap();
        assert!(out[0].flags.contains(Flag::ZeroCells));
    }
}
