//! Blahut–Arimoto solver and discrete rate–distortion frontiers.
//!
//! At inverse temperature λ the optimal channel satisfies
//! `q(y|x) ∝ q(y) exp(-λ ρ(x, y))` with `q(y) = Σ_x p(x) q(y|x)`. Sweeping λ
//! over a grid traces the frontier; only the product λρ enters the solution.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel::{expected_distortion_parts, marginal, mutual_information_parts, Channel};
use crate::error::{Error, Result};
use crate::flags::{Flag, Flags};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BASettings {
    pub max_iters: usize,
    /// Sup-norm change in q(y) per sweep.
    pub tol: f64,
    /// Weight on the previous marginal, in [0, 1).
    pub damping: f64,
    /// Start each grid point from the previous point's marginal.
    pub warm_start: bool,
    /// Frontier points whose rate gain over the previous kept point is below
    /// this many bits are merged into it when a curve is traced.
    pub rate_resolution: f64,
}

impl Default for BASettings {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            tol: 1e-10,
            damping: 0.0,
            warm_start: true,
            rate_resolution: 1e-7,
        }
    }
}

impl BASettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("tol must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::InvalidArgument("damping must be in [0, 1)".into()));
        }
        if !(self.rate_resolution >= 0.0) {
            return Err(Error::InvalidArgument("rate_resolution must be >= 0".into()));
        }
        Ok(())
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RDPoint {
    pub lambda: f64,
    /// Bits.
    pub rate: f64,
    pub distortion: f64,
    pub channel: Channel,
    /// Output marginal q(y) the channel was built from.
    pub marginal: Vec<f64>,
    pub converged: bool,
    pub iters: usize,
    /// Sup-norm change of the final sweep.
    pub residual: f64,
}

/// Log-spaced (or user-provided) inverse temperatures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LambdaGrid(Vec<f64>);

impl LambdaGrid {
    /// `n` values equispaced in log10 between `lo` and `hi`, endpoints included.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo > 0.0) || !hi.is_finite() || !(lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "lambda grid needs 0 < lo < hi, got lo={lo}, hi={hi}"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "lambda grid needs n >= 2, got {n}"
            )));
        }
        let (a, b) = (lo.log10(), hi.log10());
        let step = (b - a) / (n - 1) as f64;
        let mut v: Vec<f64> = (0..n).map(|k| 10f64.powf(a + step * k as f64)).collect();
        v[0] = lo;
        v[n - 1] = hi;
        Ok(Self(v))
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument("lambda grid needs >= 2 values".into()));
        }
        if let Some(bad) = values.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda values must be positive and finite, got {bad}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for LambdaGrid {
    /// 64 points on [1e-2, 1e3].
    fn default() -> Self {
        Self::log_spaced(1e-2, 1e3, 64).expect("static grid")
    }
}

impl TryFrom<Vec<f64>> for LambdaGrid {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_values(v)
    }
}

impl From<LambdaGrid> for Vec<f64> {
    fn from(g: LambdaGrid) -> Self {
        g.0
    }
}

fn check_problem(rho: &DMatrix<f64>, prior: &[f64]) -> Result<Vec<f64>> {
    let k = prior.len();
    if rho.nrows() != k || rho.ncols() != k {
        return Err(Error::Dimension {
            expected: k,
            got: rho.nrows(),
        });
    }
    if rho.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(
            "cost entries must be finite and nonnegative".into(),
        ));
    }
    if prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidArgument("prior entries must be nonnegative".into()));
    }
    let total: f64 = prior.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("prior has zero total mass".into()));
    }
    Ok(prior.iter().map(|p| p / total).collect())
}

/// Tolerance on the optimality condition `c(y) <= 1`, where `c(y)` is the
/// multiplicative BA update factor of output letter y.
const KKT_TOL: f64 = 1e-7;
/// Mass mixed into a warm-start marginal so that no output letter starts extinct.
const WARM_MIX: f64 = 1e-9;
/// Letters revived after a false extinction start at this mass.
const REVIVE_MASS: f64 = 1e-12;
/// Letters below this mass whose update factor is clearly below 1 are left out
/// of the Newton support.
const SUPPORT_MASS: f64 = 1e-4;
const SUPPORT_FACTOR: f64 = 1e-4;
/// Post-convergence refinement: letters below this mass whose update factor
/// is below 1 − PRUNE_FACTOR are treated as extinct.
const PRUNE_MASS: f64 = 1e-8;
const PRUNE_FACTOR: f64 = 1e-3;
const POLISH_STEPS: usize = 4;

/// One fixed-λ problem with precomputed Boltzmann weights.
struct Problem<'a> {
    rho: &'a DMatrix<f64>,
    lambda: f64,
    prior: &'a [f64],
    /// exp(-λ(ρ(x,y) - min_y ρ(x,y))): every row has a unit entry.
    weights: DMatrix<f64>,
    damping: f64,
}

impl<'a> Problem<'a> {
    fn new(rho: &'a DMatrix<f64>, prior: &'a [f64], lambda: f64, damping: f64) -> Self {
        let k = rho.nrows();
        let mut weights = DMatrix::zeros(k, k);
        for x in 0..k {
            let min = rho.row(x).min();
            for y in 0..k {
                weights[(x, y)] = (-lambda * (rho[(x, y)] - min)).exp();
            }
        }
        Self {
            rho,
            lambda,
            prior,
            weights,
            damping,
        }
    }

    fn k(&self) -> usize {
        self.prior.len()
    }

    /// Conditional q(y|x) ∝ q(y) exp(-λρ(x,y)); returns the per-row ln Z (shifted).
    fn conditional(&self, q: &[f64], cond: &mut DMatrix<f64>) -> Vec<f64> {
        let k = self.k();
        let mut log_z = vec![0.0; k];
        for x in 0..k {
            if self.prior[x] <= 0.0 {
                for y in 0..k {
                    cond[(x, y)] = 0.0;
                }
                continue;
            }
            let mut z = 0.0;
            for y in 0..k {
                let v = q[y] * self.weights[(x, y)];
                cond[(x, y)] = v;
                z += v;
            }
            if z > 1e-290 {
                for y in 0..k {
                    cond[(x, y)] /= z;
                }
                log_z[x] = z.ln();
            } else {
                // Underflow: redo the row in the log domain.
                let min = self.rho.row(x).min();
                let logits: Vec<f64> = (0..k)
                    .map(|y| {
                        if q[y] > 0.0 {
                            q[y].ln() - self.lambda * (self.rho[(x, y)] - min)
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for y in 0..k {
                    let v = (logits[y] - m).exp();
                    cond[(x, y)] = v;
                    z += v;
                }
                for y in 0..k {
                    cond[(x, y)] /= z;
                }
                log_z[x] = m + z.ln();
            }
        }
        log_z
    }

    /// Free energy -Σ_x p(x) ln Z(x) (up to a constant); BA sweeps never increase it.
    fn free_energy(&self, q: &[f64], scratch: &mut DMatrix<f64>) -> f64 {
        let log_z = self.conditional(q, scratch);
        -self
            .prior
            .iter()
            .zip(&log_z)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lz)| p * lz)
            .sum::<f64>()
    }

    /// One BA sweep. Returns the new marginal and the update factors
    /// c(y) = Σ_x p(x) exp(-λρ(x,y)) / Z(x), which are defined even where q(y) = 0.
    fn sweep(&self, q: &[f64], scratch: &mut DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        let k = self.k();
        let log_z = self.conditional(q, scratch);
        let mut factor = vec![0.0; k];
        for x in 0..k {
            let p = self.prior[x];
            if p <= 0.0 {
                continue;
            }
            for y in 0..k {
                factor[y] += p * (self.weights[(x, y)].ln() - log_z[x]).exp();
            }
        }
        let fresh = marginal(scratch, self.prior);
        let next = fresh
            .iter()
            .zip(q)
            .map(|(n, o)| (1.0 - self.damping) * n + self.damping * o)
            .collect();
        (next, factor)
    }

    /// Newton direction for the free energy on `support`, with the simplex
    /// constraint handled through a bordered KKT system.
    fn newton_direction(&self, q: &[f64], support: &[usize]) -> Option<Vec<f64>> {
        let k = self.k();
        let s = support.len();
        if s < 2 {
            return None;
        }
        // z(x) = Σ_y q(y) w(x,y) with the shifted weights.
        let z: Vec<f64> = (0..k)
            .map(|x| (0..k).map(|y| q[y] * self.weights[(x, y)]).sum::<f64>())
            .collect();
        if (0..k).any(|x| self.prior[x] > 0.0 && !(z[x] > 1e-290)) {
            return None;
        }
        let mut kkt = DMatrix::zeros(s + 1, s + 1);
        let mut rhs = nalgebra::DVector::zeros(s + 1);
        for (a, &ya) in support.iter().enumerate() {
            let mut grad = 0.0;
            for x in 0..k {
                let p = self.prior[x];
                if p <= 0.0 {
                    continue;
                }
                grad += p * self.weights[(x, ya)] / z[x];
                for (b, &yb) in support.iter().enumerate().skip(a) {
                    let h = p * self.weights[(x, ya)] * self.weights[(x, yb)] / (z[x] * z[x]);
                    kkt[(a, b)] += h;
                    if a != b {
                        kkt[(b, a)] += h;
                    }
                }
            }
            rhs[a] = grad;
            kkt[(a, s)] = 1.0;
            kkt[(s, a)] = 1.0;
        }
        let step = kkt.lu().solve(&rhs)?;
        if step.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(step.iter().take(s).copied().collect())
    }

    /// Guarded Newton step on the current support. Returns a candidate only if
    /// it lowers the free energy below that of `q`.
    fn newton_step(&self, q: &[f64], factor: &[f64], scratch: &mut DMatrix<f64>) -> Option<Vec<f64>> {
        let k = self.k();
        let support: Vec<usize> = (0..k)
            .filter(|&y| q[y] > 0.0 && (q[y] > SUPPORT_MASS || factor[y] > 1.0 - SUPPORT_FACTOR))
            .collect();
        let step = self.newton_direction(q, &support)?;
        let base = self.free_energy(q, scratch);
        let mut t = 1.0;
        for _ in 0..12 {
            let mut cand = vec![0.0; k];
            for (a, &y) in support.iter().enumerate() {
                cand[y] = (q[y] + t * step[a]).max(0.0);
            }
            let total: f64 = cand.iter().sum();
            if total > 0.0 {
                cand.iter_mut().for_each(|v| *v /= total);
                let f = self.free_energy(&cand, scratch);
                if f < base {
                    return Some(cand);
                }
            }
            t *= 0.5;
        }
        None
    }

    /// Refines a converged marginal to near machine precision, also in
    /// relative terms for small letters. Letters still decaying at negligible
    /// mass are removed (their optimum is zero), then full Newton steps are
    /// taken on the remaining support. Returns `None` if the result fails the
    /// optimality check.
    fn polish(&self, q: &[f64], scratch: &mut DMatrix<f64>) -> Option<Vec<f64>> {
        let k = self.k();
        let mut q = q.to_vec();
        for _ in 0..POLISH_STEPS {
            let (_, factor) = self.sweep(&q, scratch);
            let mut pruned = false;
            for y in 0..k {
                if q[y] > 0.0 && q[y] < PRUNE_MASS && factor[y] < 1.0 - PRUNE_FACTOR {
                    q[y] = 0.0;
                    pruned = true;
                }
            }
            if pruned {
                normalize_in_place(&mut q);
            }
            let support: Vec<usize> = (0..k).filter(|&y| q[y] > 0.0).collect();
            let Some(step) = self.newton_direction(&q, &support) else {
                break;
            };
            let mut cand = q.clone();
            for (a, &y) in support.iter().enumerate() {
                cand[y] += step[a];
            }
            if cand.iter().any(|v| *v < 0.0) {
                break;
            }
            normalize_in_place(&mut cand);
            let before = self.free_energy(&q, scratch);
            if self.free_energy(&cand, scratch) > before + 1e-15 * before.abs().max(1.0) {
                break;
            }
            let moved = cand
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs() / b.max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max);
            q = cand;
            if moved <= 1e-14 {
                break;
            }
        }
        let (_, factor) = self.sweep(&q, scratch);
        if factor.iter().any(|&c| c > 1.0 + KKT_TOL) {
            return None;
        }
        Some(q)
    }
}

fn normalize_in_place(q: &mut [f64]) {
    let s: f64 = q.iter().sum();
    q.iter_mut().for_each(|v| *v /= s);
}

/// RD-optimal channel at inverse temperature `lambda`, starting from a uniform marginal.
pub fn ba_optimal_channel(
    rho: &DMatrix<f64>,
    prior: &[f64],
    lambda: f64,
    settings: &BASettings,
) -> Result<RDPoint> {
    ba_optimal_channel_from(rho, prior, lambda, settings, None)
}

/// As [`ba_optimal_channel`], optionally starting from a given output marginal.
///
/// Plain BA sweeps alternate with Newton steps on the free energy over the
/// active support, each accepted only if it lowers the free energy. The
/// iterate is converged when one sweep moves q(y) by at most `tol` in sup norm
/// and no output letter has an update factor above 1 (the optimality
/// condition); the second test catches letters that are tiny but still
/// growing. A converged marginal is then refined by a few Newton steps.
pub fn ba_optimal_channel_from(
    rho: &DMatrix<f64>,
    prior: &[f64],
    lambda: f64,
    settings: &BASettings,
    init: Option<&[f64]>,
) -> Result<RDPoint> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive and finite, got {lambda}"
        )));
    }
    settings.validate()?;
    let prior = check_problem(rho, prior)?;
    let k = prior.len();

    let mut q: Vec<f64> = match init {
        None => vec![1.0 / k as f64; k],
        Some(q0) if q0.len() != k => {
            return Err(Error::Dimension {
                expected: k,
                got: q0.len(),
            })
        }
        Some(q0) => {
            let s: f64 = q0.iter().sum();
            if q0.iter().any(|v| !(*v >= 0.0)) || !(s > 0.0) {
                return Err(Error::InvalidArgument("initial marginal is not a distribution".into()));
            }
            q0.iter()
                .map(|v| (1.0 - WARM_MIX) * v / s + WARM_MIX / k as f64)
                .collect()
        }
    };

    let problem = Problem::new(rho, &prior, lambda, settings.damping);
    let mut scratch = DMatrix::zeros(k, k);
    let mut converged = false;
    let mut evals = 0;
    let mut residual = f64::INFINITY;

    while evals < settings.max_iters {
        let (q1, factor) = problem.sweep(&q, &mut scratch);
        evals += 1;
        residual = q1
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let growing: Vec<usize> = (0..k).filter(|&y| factor[y] > 1.0 + KKT_TOL).collect();
        if residual <= settings.tol && growing.is_empty() {
            converged = true;
            if let Some(polished) = problem.polish(&q, &mut scratch) {
                q = polished;
            }
            break;
        }
        if growing.iter().any(|&y| q[y] == 0.0) {
            for &y in &growing {
                if q[y] == 0.0 {
                    q[y] = REVIVE_MASS;
                }
            }
            normalize_in_place(&mut q);
            continue;
        }

        q = match problem.newton_step(&q1, &factor, &mut scratch) {
            Some(candidate) => candidate,
            None => q1,
        };
    }

    let mut cond = DMatrix::zeros(k, k);
    problem.conditional(&q, &mut cond);
    let rate = mutual_information_parts(&cond, &prior);
    let distortion = expected_distortion_parts(&cond, &prior, rho);
    Ok(RDPoint {
        lambda,
        rate,
        distortion,
        channel: Channel::new(cond, prior)?,
        marginal: q,
        converged,
        iters: evals,
        residual,
    })
}

/// Traced frontier: points sorted by increasing distortion with duplicates merged.
#[derive(Debug, Clone, PartialEq)]
pub struct RDCurve {
    pub points: Vec<RDPoint>,
    pub rho: DMatrix<f64>,
    pub prior: Vec<f64>,
    /// Number of solves (one per distinct grid value).
    pub n_solved: usize,
    pub flags: Flags,
}

impl RDCurve {
    pub fn distortions(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.distortion).collect()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.rate).collect()
    }

    pub fn all_converged(&self) -> bool {
        !self.flags.contains(Flag::BaNotConverged)
    }
}

/// Solves every grid value in grid order (repeated values are solved once).
pub fn solve_grid(
    rho: &DMatrix<f64>,
    prior: &[f64],
    grid: &LambdaGrid,
    settings: &BASettings,
) -> Result<Vec<RDPoint>> {
    settings.validate()?;
    check_problem(rho, prior)?;
    let mut out: Vec<RDPoint> = Vec::with_capacity(grid.len());
    for &lambda in grid.values() {
        if let Some(prev) = out.iter().find(|p| p.lambda == lambda) {
            out.push(prev.clone());
            continue;
        }
        let init = match (settings.warm_start, out.last()) {
            (true, Some(prev)) => Some(prev.marginal.as_slice()),
            _ => None,
        };
        out.push(ba_optimal_channel_from(rho, prior, lambda, settings, init)?);
    }
    Ok(out)
}

/// Sorts by distortion and merges duplicates, keeping the higher-rate point.
///
/// A point is also merged into its predecessor when its rate gain is below
/// `rate_resolution` bits; at saturated λ the rate differences fall under
/// floating-point resolution and their slopes carry no information.
pub fn frontier_points(mut points: Vec<RDPoint>, rate_resolution: f64) -> Vec<RDPoint> {
    points.retain(|p| p.distortion.is_finite() && p.rate.is_finite());
    points.sort_by(|a, b| {
        a.distortion
            .total_cmp(&b.distortion)
            .then(b.rate.total_cmp(&a.rate))
    });
    let mut out: Vec<RDPoint> = Vec::with_capacity(points.len());
    for p in points {
        match out.last() {
            Some(last) if p.distortion <= last.distortion => {}
            Some(last) if last.rate - p.rate < rate_resolution => {}
            _ => out.push(p),
        }
    }
    out
}

/// Class order keyed on (prior, sorted row costs, sorted column costs).
///
/// Relabelings of one problem share this order unless keys tie, so solving
/// in it makes a traced curve independent of the labeling bit for bit.
fn canonical_order(rho: &DMatrix<f64>, prior: &[f64]) -> Vec<usize> {
    let k = prior.len();
    let sorted = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v
    };
    let keys: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..k)
        .map(|x| {
            let row = (0..k).filter(|&y| y != x).map(|y| rho[(x, y)]).collect();
            let col = (0..k).filter(|&y| y != x).map(|y| rho[(y, x)]).collect();
            (prior[x], sorted(row), sorted(col))
        })
        .collect();
    let cmp_vec = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (&keys[a], &keys[b]);
        ka.0.total_cmp(&kb.0)
            .then_with(|| cmp_vec(&ka.1, &kb.1))
            .then_with(|| cmp_vec(&ka.2, &kb.2))
    });
    order
}

/// Traces the frontier over `grid`. Classes are solved in a canonical order
/// and mapped back, so the curve does not depend on how classes are labeled.
pub fn trace_curve(
    rho: &DMatrix<f64>,
    prior: &[f64],
    grid: &LambdaGrid,
    settings: &BASettings,
) -> Result<RDCurve> {
    check_problem(rho, prior)?;
    let k = prior.len();
    let order = canonical_order(rho, prior);
    let mut inverse = vec![0; k];
    for (pos, &x) in order.iter().enumerate() {
        inverse[x] = pos;
    }
    let rho_c = DMatrix::from_fn(k, k, |i, j| rho[(order[i], order[j])]);
    let prior_c: Vec<f64> = order.iter().map(|&x| prior[x]).collect();
    let mut raw = solve_grid(&rho_c, &prior_c, grid, settings)?;
    for p in &mut raw {
        p.channel = p.channel.permuted(&inverse);
        p.marginal = inverse.iter().map(|&i| p.marginal[i]).collect();
    }
    let mut flags = Flags::new();
    if raw.iter().any(|p| !p.converged) {
        flags.insert(Flag::BaNotConverged);
    }
    let mut distinct: Vec<f64> = grid.values().to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let prior_norm = check_problem(rho, prior)?;
    Ok(RDCurve {
        points: frontier_points(raw, settings.rate_resolution),
        rho: rho.clone(),
        prior: prior_norm,
        n_solved: distinct.len(),
        flags,
    })
}
