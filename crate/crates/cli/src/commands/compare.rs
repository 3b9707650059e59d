//! Block-paired contrasts and fixed-effects regressions over a signature table.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use anyhow::{bail, Context, Result};
use rdsig_core::flags::{Flag, Flags};
use rdsig_core::ingest::BlockKey;
use rdsig_core::records::{
    is_log_metric, read_signature_table, write_comparison_csv, ComparisonRow, SignatureRow,
    METRICS, SCHEMA_VERSION,
};
use rdsig_core::stats::{
    bh_fdr, fe_regression, match_blocks, nested_interaction_test, paired_compare, Level,
    MetricRow, NestedTest, RegressionResult, RegressionRow, WilcoxonMode,
};
use rdsig_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::{csv_bytes, OutDir};
use crate::Outcome;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contrasts {
    #[serde(default)]
    pub wilcoxon_mode: Option<WilcoxonMode>,
    #[serde(default)]
    pub comparisons: Vec<ComparisonSpec>,
    #[serde(default)]
    pub regressions: Vec<RegressionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSpec {
    pub name: String,
    pub a: String,
    pub b: String,
    #[serde(default)]
    pub level: Level,
    pub metrics: Vec<String>,
    /// Comparisons sharing an FDR set are corrected together.
    #[serde(default = "default_fdr_set")]
    pub fdr_set: String,
}

fn default_fdr_set() -> String {
    "default".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSpec {
    pub name: String,
    pub outcome: String,
    pub reference_family: String,
    #[serde(default)]
    pub interaction_test: bool,
}

#[derive(Debug, Serialize)]
struct RegressionReport {
    name: String,
    outcome: String,
    reference_family: String,
    n_rows: usize,
    additive: RegressionResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    interaction: Option<RegressionResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nested: Option<NestedTest>,
}

#[derive(Debug, Serialize)]
struct CompareReport<'a> {
    schema_version: u32,
    wilcoxon_mode: WilcoxonMode,
    comparisons: &'a [ComparisonRow],
    regressions: Vec<RegressionReport>,
}

fn metric_rows(rows: &[SignatureRow], metric: &str) -> Result<Vec<MetricRow>> {
    rows.iter()
        .map(|r| {
            Ok(MetricRow {
                system: r.system.clone(),
                family: r.family.clone(),
                block: BlockKey {
                    experiment: r.experiment.clone(),
                    condition: r.condition.clone(),
                },
                value: r.metric(metric)?,
            })
        })
        .collect()
}

fn check_ids(spec: &ComparisonSpec, rows: &[SignatureRow]) -> Result<()> {
    let known: BTreeSet<&str> = rows
        .iter()
        .map(|r| match spec.level {
            Level::System => r.system.as_str(),
            Level::Family => r.family.as_str(),
        })
        .collect();
    let missing: Vec<&str> = [spec.a.as_str(), spec.b.as_str()]
        .into_iter()
        .filter(|id| !known.contains(id))
        .collect();
    if !missing.is_empty() {
        bail!(
            "contrast {}: unknown {:?} id(s): {}",
            spec.name,
            spec.level,
            missing.join(", ")
        );
    }
    for m in &spec.metrics {
        if !METRICS.contains(&m.as_str()) {
            bail!("contrast {}: unknown metric {m:?}", spec.name);
        }
    }
    Ok(())
}

fn compare_one(
    spec: &ComparisonSpec,
    metric: &str,
    rows: &[MetricRow],
    mode: WilcoxonMode,
) -> Result<ComparisonRow> {
    let mut row = ComparisonRow {
        contrast: spec.name.clone(),
        metric: metric.to_string(),
        fdr_set: spec.fdr_set.clone(),
        n_blocks: 0,
        delta_median: None,
        fold: None,
        w_plus: None,
        w_minus: None,
        p: None,
        q: None,
        r_rb: None,
        excluded_blocks: 0,
        flags: Flags::new(),
    };
    let matched = match_blocks(&spec.a, &spec.b, spec.level, rows)
        .with_context(|| format!("contrast {}, metric {metric}", spec.name))?;
    row.n_blocks = matched.pairs.len();
    row.excluded_blocks = matched.excluded;
    if matched.excluded > 0 {
        row.flags.insert(Flag::ExcludedBlocks);
    }
    match paired_compare(&spec.a, &spec.b, spec.level, rows, mode) {
        Ok(t) => {
            row.delta_median = Some(t.delta_median);
            row.w_plus = Some(t.w_plus);
            row.w_minus = Some(t.w_minus);
            row.p = Some(t.p_value);
            row.r_rb = Some(t.r_rb);
        }
        Err(Error::Degenerate(_)) => {
            row.flags.insert(Flag::DegenerateTest);
            row.delta_median = rdsig_core::signatures::median(&matched.differences());
        }
        Err(e) => {
            return Err(e).with_context(|| format!("contrast {}, metric {metric}", spec.name))
        }
    }
    if is_log_metric(metric) {
        row.fold = row.delta_median.map(|d| 10f64.powf(d));
    }
    Ok(row)
}

fn regression_rows(rows: &[SignatureRow], outcome: &str) -> Result<Vec<RegressionRow>> {
    let mut out = Vec::new();
    for r in rows {
        if let (Some(acc), Some(y)) = (r.accuracy, r.metric(outcome)?) {
            if acc.is_finite() && y.is_finite() {
                out.push(RegressionRow {
                    block: BlockKey {
                        experiment: r.experiment.clone(),
                        condition: r.condition.clone(),
                    },
                    family: r.family.clone(),
                    accuracy: acc,
                    outcome: y,
                });
            }
        }
    }
    Ok(out)
}

fn run_regression(spec: &RegressionSpec, rows: &[SignatureRow]) -> Result<RegressionReport> {
    let ctx = || format!("regression {}", spec.name);
    let data = regression_rows(rows, &spec.outcome).with_context(ctx)?;
    let additive = fe_regression(&data, &spec.reference_family, false).with_context(ctx)?;
    let (interaction, nested) = if spec.interaction_test {
        (
            Some(fe_regression(&data, &spec.reference_family, true).with_context(ctx)?),
            Some(nested_interaction_test(&data, &spec.reference_family).with_context(ctx)?),
        )
    } else {
        (None, None)
    };
    Ok(RegressionReport {
        name: spec.name.clone(),
        outcome: spec.outcome.clone(),
        reference_family: spec.reference_family.clone(),
        n_rows: data.len(),
        additive,
        interaction,
        nested,
    })
}

pub fn run(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome> {
    let sig_path = cfg
        .signatures
        .as_deref()
        .context("no signature table given (use --signatures)")?;
    let file = fs::File::open(sig_path)
        .with_context(|| format!("cannot open signature table {}", sig_path.display()))?;
    let rows = read_signature_table(std::io::BufReader::new(file))
        .with_context(|| format!("signature table {}", sig_path.display()))?;
    let contrasts_path = cfg
        .contrasts
        .as_deref()
        .context("no contrasts file given (use --contrasts)")?;
    let text = fs::read_to_string(contrasts_path)
        .with_context(|| format!("cannot read contrasts file {}", contrasts_path.display()))?;
    let contrasts: Contrasts = serde_json::from_str(&text)
        .with_context(|| format!("invalid contrasts file {}", contrasts_path.display()))?;
    let mode = contrasts.wilcoxon_mode.unwrap_or(cfg.wilcoxon_mode);

    let mut by_metric: BTreeMap<&str, Vec<MetricRow>> = BTreeMap::new();
    for spec in &contrasts.comparisons {
        check_ids(spec, &rows)?;
        for m in &spec.metrics {
            if !by_metric.contains_key(m.as_str()) {
                by_metric.insert(m, metric_rows(&rows, m)?);
            }
        }
    }
    for spec in &contrasts.regressions {
        if !METRICS.contains(&spec.outcome.as_str()) {
            bail!("regression {}: unknown outcome metric {:?}", spec.name, spec.outcome);
        }
    }

    let mut results = Vec::new();
    for spec in &contrasts.comparisons {
        for m in &spec.metrics {
            results.push(compare_one(spec, m, &by_metric[m.as_str()], mode)?);
        }
    }
    let mut sets: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in results.iter().enumerate() {
        if r.p.is_some() {
            sets.entry(r.fdr_set.clone()).or_default().push(i);
        }
    }
    for members in sets.values() {
        let ps: Vec<f64> = members.iter().map(|&i| results[i].p.expect("filtered")).collect();
        for (&i, q) in members.iter().zip(bh_fdr(&ps)?) {
            results[i].q = Some(q);
        }
    }
    let regressions = contrasts
        .regressions
        .iter()
        .map(|s| run_regression(s, &rows))
        .collect::<Result<Vec<_>>>()?;

    let mut outcome = Outcome::clean();
    for r in &results {
        outcome.note_flags(&format!("{}/{}", r.contrast, r.metric), &r.flags);
    }
    out.write("comparisons.csv", csv_bytes(|w| write_comparison_csv(w, &results))?)?;
    let report = CompareReport {
        schema_version: SCHEMA_VERSION,
        wilcoxon_mode: mode,
        comparisons: &results,
        regressions,
    };
    out.write("comparisons.json", serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(outcome)
}
