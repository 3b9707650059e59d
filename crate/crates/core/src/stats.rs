//! Block-paired tests, FDR control and block fixed-effects regressions.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::ingest::BlockKey;
use crate::signatures::median;

/// Largest n_eff for which `Auto` uses the exact distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    #[default]
    System,
    Family,
}

/// One metric value for one system in one block; `None` marks an unusable value.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub system: String,
    pub family: String,
    pub block: BlockKey,
    pub value: Option<f64>,
}

impl MetricRow {
    fn id(&self, level: Level) -> &str {
        match level {
            Level::System => &self.system,
            Level::Family => &self.family,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPairs {
    /// (block, value of a, value of b), ordered by block.
    pub pairs: Vec<(BlockKey, f64, f64)>,
    /// Blocks present on both sides but dropped for unusable values.
    pub excluded: usize,
}

impl MatchedPairs {
    pub fn differences(&self) -> Vec<f64> {
        self.pairs.iter().map(|(_, a, b)| a - b).collect()
    }
}

fn collapse(rows: &[MetricRow], id: &str, level: Level) -> BTreeMap<BlockKey, Option<f64>> {
    let mut by_block: BTreeMap<BlockKey, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.id(level) == id) {
        let entry = by_block.entry(r.block.clone()).or_default();
        if let Some(v) = r.value.filter(|v| v.is_finite()) {
            entry.push(v);
        }
    }
    by_block.into_iter().map(|(k, v)| (k, median(&v))).collect()
}

/// Inner join of two ids on block. Repeated instances within a block are
/// collapsed by their median first.
pub fn match_blocks(a: &str, b: &str, level: Level, rows: &[MetricRow]) -> Result<MatchedPairs> {
    let left = collapse(rows, a, level);
    let right = collapse(rows, b, level);
    let mut pairs = Vec::new();
    let mut excluded = 0;
    for (block, va) in &left {
        let Some(vb) = right.get(block) else {
            continue;
        };
        match (va, vb) {
            (Some(x), Some(y)) => pairs.push((block.clone(), *x, *y)),
            _ => excluded += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoMatchedBlocks {
            a: a.to_string(),
            b: b.to_string(),
        });
    }
    Ok(MatchedPairs { pairs, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMode {
    Exact,
    Normal,
    #[default]
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub n_eff: usize,
    pub exact: bool,
}

/// Mid-ranks (1-based) of the values, ties sharing their average rank.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let r = 0.5 * ((start + 1) + end) as f64;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Two-sided signed-rank test with zero-dropping and mid-ranks.
///
/// The exact mode is conditional on the observed ranks: every sign pattern
/// is counted, via a subset-sum recursion over doubled (integer) ranks.
pub fn wilcoxon_signed_rank(diffs: &[f64], mode: WilcoxonMode) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("differences must be finite".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Err(Error::Degenerate("degenerate: no nonzero differences".into()));
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = mid_ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let exact = match mode {
        WilcoxonMode::Exact => true,
        WilcoxonMode::Normal => false,
        WilcoxonMode::Auto => n <= EXACT_MAX_N,
    };
    let p_value = if exact {
        exact_p(&ranks, w_plus)?
    } else {
        normal_p(&ranks, w_plus)
    };
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        p_value,
        n_eff: n,
        exact,
    })
}

fn exact_p(ranks: &[f64], w_plus: f64) -> Result<f64> {
    let n = ranks.len();
    if n > 62 {
        return Err(Error::InvalidArgument(format!(
            "exact signed-rank test supports at most 62 differences, got {n}"
        )));
    }
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    // counts[s] = number of sign patterns with doubled positive-rank sum s.
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let obs = (2.0 * w_plus).round() as usize;
    let le: u64 = counts[..=obs].iter().sum();
    let ge: u64 = counts[obs..].iter().sum();
    let patterns = 2f64.powi(n as i32);
    Ok((2.0 * le.min(ge) as f64 / patterns).min(1.0))
}

fn normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    if !(var > 0.0) {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.sf(z)).min(1.0)
}

/// (T+ − T−)/(T+ + T−).
pub fn rank_biserial(w_plus: f64, w_minus: f64) -> f64 {
    let t = w_plus + w_minus;
    if t > 0.0 {
        (w_plus - w_minus) / t
    } else {
        0.0
    }
}

/// Benjamini–Hochberg step-up adjusted p-values, in input order.
pub fn bh_fdr(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &i) in order.iter().enumerate().rev() {
        let candidate = p_values[i] * m as f64 / (pos + 1) as f64;
        running = running.min(candidate);
        // The clamp only absorbs rounding; it keeps q >= p and the ordering.
        q[i] = running.min(1.0).max(p_values[i]);
    }
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub n_blocks: usize,
    /// Median of the blockwise differences a − b.
    pub delta_median: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    /// Filled in by an FDR pass over the declared comparison set.
    pub q_value: Option<f64>,
    pub r_rb: f64,
    pub excluded_blocks: usize,
}

/// Blockwise paired contrast a − b on one metric.
pub fn paired_compare(
    a: &str,
    b: &str,
    level: Level,
    rows: &[MetricRow],
    mode: WilcoxonMode,
) -> Result<PairedTestResult> {
    let matched = match_blocks(a, b, level, rows)?;
    let diffs = matched.differences();
    let w = wilcoxon_signed_rank(&diffs, mode)?;
    Ok(PairedTestResult {
        n_blocks: diffs.len(),
        delta_median: median(&diffs).expect("nonempty"),
        w_plus: w.w_plus,
        w_minus: w.w_minus,
        p_value: w.p_value,
        q_value: None,
        r_rb: rank_biserial(w.w_plus, w.w_minus),
        excluded_blocks: matched.excluded,
    })
}

/// Fills `q_value` across one comparison set.
pub fn assign_q_values(results: &mut [&mut PairedTestResult]) -> Result<()> {
    let ps: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    let qs = bh_fdr(&ps)?;
    for (r, q) in results.iter_mut().zip(qs) {
        r.q_value = Some(q);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub stderr: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub rss: f64,
    pub df_resid: usize,
    pub n: usize,
    pub n_blocks: usize,
}

impl RegressionResult {
    pub fn coef_of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coef[i])
    }
}

/// Ordinary least squares with the given named columns (no implicit intercept).
/// `absorbed` counts parameters removed beforehand (e.g. block means).
pub fn ols(y: &[f64], columns: &[(String, Vec<f64>)], absorbed: usize) -> Result<RegressionResult> {
    let n = y.len();
    let p = columns.len();
    for (name, col) in columns {
        if col.len() != n {
            return Err(Error::InvalidArgument(format!(
                "column {name} has {} rows, outcome has {n}",
                col.len()
            )));
        }
    }
    if p == 0 {
        return Err(Error::InvalidArgument("regression needs at least one column".into()));
    }
    if n <= absorbed + p {
        return Err(Error::InvalidArgument(format!(
            "no residual degrees of freedom: n = {n}, absorbed = {absorbed}, coefficients = {p}"
        )));
    }
    check_rank(columns)?;
    let x = DMatrix::from_fn(n, p, |i, j| columns[j].1[i]);
    let yv = DVector::from_column_slice(y);
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient(columns.iter().map(|c| c.0.clone()).collect()))?;
    let resid = &yv - &x * &beta;
    let rss = resid.norm_squared();
    let df = n - absorbed - p;
    let sigma2 = rss / df as f64;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient(columns.iter().map(|c| c.0.clone()).collect()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let t_dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut stderr = Vec::with_capacity(p);
    let mut t = Vec::with_capacity(p);
    let mut pv = Vec::with_capacity(p);
    for j in 0..p {
        let se = (sigma2 * xtx_inv[(j, j)]).max(0.0).sqrt();
        let tj = if se > 0.0 {
            beta[j] / se
        } else if beta[j] == 0.0 {
            0.0
        } else {
            f64::INFINITY * beta[j].signum()
        };
        stderr.push(se);
        t.push(tj);
        pv.push(if tj.is_finite() { (2.0 * t_dist.sf(tj.abs())).min(1.0) } else { 0.0 });
    }
    Ok(RegressionResult {
        names: columns.iter().map(|c| c.0.clone()).collect(),
        coef: beta.iter().copied().collect(),
        stderr,
        t,
        p: pv,
        rss,
        df_resid: df,
        n,
        n_blocks: absorbed,
    })
}

/// Greedy collinearity scan: a column whose residual after projection on the
/// preceding accepted columns is negligible is reported by name.
fn check_rank(columns: &[(String, Vec<f64>)]) -> Result<()> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut bad = Vec::new();
    for (name, col) in columns {
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = col.clone();
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= dot * qi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            bad.push(name.clone());
        } else {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient(bad))
    }
}

/// Subtracts the block mean from every entry.
pub fn demean_within(values: &[f64], blocks: &[BlockKey]) -> Vec<f64> {
    let mut sums: BTreeMap<&BlockKey, (f64, usize)> = BTreeMap::new();
    for (v, b) in values.iter().zip(blocks) {
        let e = sums.entry(b).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    values
        .iter()
        .zip(blocks)
        .map(|(v, b)| {
            let (s, n) = sums[b];
            v - s / n as f64
        })
        .collect()
}

/// OLS on block-demeaned outcome and columns.
pub fn block_demeaned_ols(
    y: &[f64],
    columns: &[(String, Vec<f64>)],
    blocks: &[BlockKey],
) -> Result<RegressionResult> {
    if blocks.len() != y.len() {
        return Err(Error::InvalidArgument("one block key per row is required".into()));
    }
    let mut sizes: BTreeMap<&BlockKey, usize> = BTreeMap::new();
    for b in blocks {
        *sizes.entry(b).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fixed-effects regression needs at least 2 blocks, got {}",
            sizes.len()
        )));
    }
    if let Some((b, _)) = sizes.iter().find(|(_, &n)| n < 2) {
        return Err(Error::InvalidArgument(format!(
            "block {}/{} has a single row",
            b.experiment, b.condition
        )));
    }
    let yd = demean_within(y, blocks);
    let cols: Vec<(String, Vec<f64>)> = columns
        .iter()
        .map(|(n, c)| (n.clone(), demean_within(c, blocks)))
        .collect();
    ols(&yd, &cols, sizes.len())
}

/// One observation for the fixed-effects regressions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionRow {
    pub block: BlockKey,
    pub family: String,
    pub accuracy: f64,
    pub outcome: f64,
}

/// Design columns: accuracy, one indicator per non-reference family, and
/// optionally accuracy × indicator interactions.
pub fn design_columns(
    rows: &[RegressionRow],
    reference_family: &str,
    interaction: bool,
) -> Result<Vec<(String, Vec<f64>)>> {
    let families: BTreeSet<&str> = rows.iter().map(|r| r.family.as_str()).collect();
    if !families.contains(reference_family) {
        return Err(Error::InvalidArgument(format!(
            "reference family {reference_family} not present"
        )));
    }
    let mut cols = vec![("accuracy".to_string(), rows.iter().map(|r| r.accuracy).collect())];
    let others: Vec<&str> = families.into_iter().filter(|f| *f != reference_family).collect();
    for f in &others {
        cols.push((
            format!("family[{f}]"),
            rows.iter().map(|r| if r.family == *f { 1.0 } else { 0.0 }).collect(),
        ));
    }
    if interaction {
        for f in &others {
            cols.push((
                format!("accuracy:family[{f}]"),
                rows.iter()
                    .map(|r| if r.family == *f { r.accuracy } else { 0.0 })
                    .collect(),
            ));
        }
    }
    Ok(cols)
}

/// outcome ~ accuracy + family (+ accuracy×family) + block, by block demeaning.
pub fn fe_regression(rows: &[RegressionRow], reference_family: &str, interaction: bool) -> Result<RegressionResult> {
    let y: Vec<f64> = rows.iter().map(|r| r.outcome).collect();
    let blocks: Vec<BlockKey> = rows.iter().map(|r| r.block.clone()).collect();
    let cols = design_columns(rows, reference_family, interaction)?;
    block_demeaned_ols(&y, &cols, &blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedTest {
    pub f_stat: f64,
    pub p_value: f64,
    pub df1: usize,
    pub df2: usize,
}

/// F test of a full model against a restricted model fitted on the same rows.
pub fn nested_f_test(restricted: &RegressionResult, full: &RegressionResult) -> Result<NestedTest> {
    if restricted.n != full.n {
        return Err(Error::InvalidArgument("nested models were fitted on different rows".into()));
    }
    if full.df_resid >= restricted.df_resid {
        return Err(Error::InvalidArgument(format!(
            "full model must use more parameters: df {} vs {}",
            full.df_resid, restricted.df_resid
        )));
    }
    let df1 = restricted.df_resid - full.df_resid;
    let df2 = full.df_resid;
    let num = ((restricted.rss - full.rss) / df1 as f64).max(0.0);
    let den = full.rss / df2 as f64;
    let (f_stat, p_value) = if den > 0.0 {
        let f = num / den;
        let dist = FisherSnedecor::new(df1 as f64, df2 as f64)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        (f, dist.sf(f).clamp(0.0, 1.0))
    } else if num > 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        (0.0, 1.0)
    };
    Ok(NestedTest {
        f_stat,
        p_value,
        df1,
        df2,
    })
}

/// Tests the accuracy × family interaction against the additive model.
pub fn nested_interaction_test(rows: &[RegressionRow], reference_family: &str) -> Result<NestedTest> {
    let restricted = fe_regression(rows, reference_family, false)?;
    let full = fe_regression(rows, reference_family, true)?;
    nested_f_test(&restricted, &full)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(e: &str) -> BlockKey {
        BlockKey {
            experiment: e.into(),
            condition: "c".into(),
        }
    }

    fn row(system: &str, block: &str, value: Option<f64>) -> MetricRow {
        MetricRow {
            system: system.into(),
            family: format!("fam-{system}"),
            block: key(block),
            value,
        }
    }

    #[test]
    fn wilcoxon_fixtures() {
        let w = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0], WilcoxonMode::Auto).unwrap();
        assert_eq!((w.w_plus, w.w_minus), (15.0, 0.0));
        assert_eq!(w.p_value, 0.0625);
        let w = wilcoxon_signed_rank(&[1.0, -1.0], WilcoxonMode::Exact).unwrap();
        assert_eq!((w.w_plus, w.w_minus, w.p_value), (1.5, 1.5, 1.0));
        let w = wilcoxon_signed_rank(&[0.0, 0.0, 3.0], WilcoxonMode::Exact).unwrap();
        assert_eq!((w.n_eff, w.p_value), (1, 1.0));
        assert!(wilcoxon_signed_rank(&[0.0, 0.0], WilcoxonMode::Auto).is_err());
    }

    #[test]
    fn normal_approximation_is_close_to_exact() {
        let d: Vec<f64> = (1..=20).map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 + 0.5 }).collect();
        let e = wilcoxon_signed_rank(&d, WilcoxonMode::Exact).unwrap();
        let n = wilcoxon_signed_rank(&d, WilcoxonMode::Normal).unwrap();
        assert!((e.p_value - n.p_value).abs() < 0.01);
        assert!(!n.exact);
    }

    #[test]
    fn bh_fixtures() {
        assert_eq!(bh_fdr(&[0.01, 0.04, 0.03, 0.02]).unwrap(), vec![0.04; 4]);
        assert_eq!(bh_fdr(&[0.2]).unwrap(), vec![0.2]);
        assert_eq!(bh_fdr(&[0.001, 1.0]).unwrap(), vec![0.002, 1.0]);
        assert!(bh_fdr(&[1.5]).is_err());
    }

    #[test]
    fn matching_and_collapse() {
        let rows = vec![
            row("a", "x", Some(1.0)),
            row("a", "y", Some(2.0)),
            row("a", "z", Some(3.0)),
            row("b", "y", Some(1.0)),
            row("b", "y", Some(5.0)),
            row("b", "y", Some(2.0)),
            row("b", "z", None),
            row("b", "w", Some(0.0)),
        ];
        let m = match_blocks("a", "b", Level::System, &rows).unwrap();
        assert_eq!(m.pairs, vec![(key("y"), 2.0, 2.0)]);
        assert_eq!(m.excluded, 1);
        assert!(match_blocks("a", "nobody", Level::System, &rows).is_err());
        let fam = match_blocks("fam-a", "fam-b", Level::Family, &rows).unwrap();
        assert_eq!(fam.pairs.len(), 1);
    }

    #[test]
    fn sign_convention() {
        let mut rows = Vec::new();
        for (i, d) in [0.5, 1.2, -0.3, 2.0, 0.7, 1.1].iter().enumerate() {
            rows.push(row("a", &format!("b{i}"), Some(1.0 + d)));
            rows.push(row("b", &format!("b{i}"), Some(1.0)));
        }
        let ab = paired_compare("a", "b", Level::System, &rows, WilcoxonMode::Auto).unwrap();
        let ba = paired_compare("b", "a", Level::System, &rows, WilcoxonMode::Auto).unwrap();
        assert_eq!(ab.delta_median, -ba.delta_median);
        assert_eq!((ab.w_plus, ab.w_minus), (ba.w_minus, ba.w_plus));
        assert_eq!(ab.p_value, ba.p_value);
    }

    #[test]
    fn all_positive_effect_size() {
        let mut rows = Vec::new();
        for i in 0..5 {
            rows.push(row("a", &format!("b{i}"), Some(2.0 + i as f64)));
            rows.push(row("b", &format!("b{i}"), Some(0.0)));
        }
        let r = paired_compare("a", "b", Level::System, &rows, WilcoxonMode::Auto).unwrap();
        assert_eq!(r.r_rb, 1.0);
        assert!(paired_compare("a", "a", Level::System, &rows, WilcoxonMode::Auto).is_err());
    }

    fn fixture() -> Vec<RegressionRow> {
        // y = 2·acc + block effect, no family effect.
        let mut rows = Vec::new();
        let accs = [0.1, 0.4, 0.35, 0.9];
        for (b, effect) in [("p", 10.0), ("q", -3.0)] {
            for (i, &acc) in accs.iter().enumerate() {
                let acc = acc + if b == "q" { 0.05 * i as f64 } else { 0.0 };
                rows.push(RegressionRow {
                    block: key(b),
                    family: if i % 2 == 0 { "f1" } else { "f2" }.into(),
                    accuracy: acc,
                    outcome: 2.0 * acc + effect,
                });
            }
        }
        rows
    }

    #[test]
    fn fixed_effects_recover_slope() {
        let fit = fe_regression(&fixture(), "f1", false).unwrap();
        assert!((fit.coef_of("accuracy").unwrap() - 2.0).abs() < 1e-9);
        assert!(fit.coef_of("family[f2]").unwrap().abs() < 1e-9);
        assert_eq!(fit.df_resid, 8 - 2 - 2);
    }

    #[test]
    fn constant_within_blocks() {
        let mut rows = fixture();
        for r in &mut rows {
            r.outcome = if r.block.experiment == "p" { 4.0 } else { -1.0 };
        }
        let fit = fe_regression(&rows, "f1", false).unwrap();
        assert!(fit.coef.iter().all(|c| *c == 0.0));
        assert_eq!(fit.rss, 0.0);
    }

    #[test]
    fn single_block_and_missing_reference() {
        let rows: Vec<_> = fixture().into_iter().filter(|r| r.block.experiment == "p").collect();
        assert!(fe_regression(&rows, "f1", false).is_err());
        assert!(fe_regression(&fixture(), "nope", false).is_err());
    }

    #[test]
    fn zero_column_is_named() {
        let rows = fixture();
        let y: Vec<f64> = rows.iter().map(|r| r.outcome).collect();
        let blocks: Vec<BlockKey> = rows.iter().map(|r| r.block.clone()).collect();
        let mut cols = design_columns(&rows, "f1", false).unwrap();
        cols.push(("zero".into(), vec![0.0; rows.len()]));
        match block_demeaned_ols(&y, &cols, &blocks) {
            Err(Error::RankDeficient(names)) => assert_eq!(names, vec!["zero".to_string()]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
