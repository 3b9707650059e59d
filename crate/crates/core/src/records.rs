//! On-disk forms of fits, curves, signature tables and comparison reports.
//!
//! Numbers are written in shortest round-trip form; non-finite values become
//! empty CSV cells.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cost::CostMatrix;
use crate::error::{Error, Result};
use crate::flags::Flags;
use crate::inference::{encode, FitResult, PriorConfig, StartKind};
use crate::rd::RDCurve;
use crate::signatures::{NormalizedSignature, RDSignature};

pub const SCHEMA_VERSION: u32 = 1;

/// Shortest representation that parses back to the same value.
pub fn fmt_num(v: f64) -> String {
    if !v.is_finite() {
        return String::new();
    }
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

fn parse_opt(field: &str, text: &str, row: usize) -> Result<Option<f64>> {
    let t = text.trim();
    if t.is_empty() {
        return Ok(None);
    }
    t.parse::<f64>().map(Some).map_err(|_| Error::Row {
        row,
        field: field.to_string(),
        message: format!("not a number: {t:?}"),
    })
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

fn from_row_major(k: usize, values: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if values.len() != k * k {
        return Err(Error::Input(format!(
            "{what} has {} entries, expected {}",
            values.len(),
            k * k
        )));
    }
    Ok(DMatrix::from_row_slice(k, k, values))
}

/// Identity of a fitted unit; `condition` is absent when conditions are pooled.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitKey {
    pub system: String,
    pub family: String,
    pub experiment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub schema_version: u32,
    pub unit: UnitKey,
    pub labels: Vec<String>,
    /// Normalized costs, row-major.
    pub rho: Vec<f64>,
    /// Laplace standard errors, row-major, in the units of `rho`.
    pub stderr: Option<Vec<f64>>,
    /// Mean off-diagonal of the fitted costs before normalization.
    pub scale: f64,
    pub log_posterior: f64,
    pub converged: bool,
    pub iters: usize,
    pub grad_norm: f64,
    pub start: StartKind,
    pub objective_trace: Vec<f64>,
    pub prior: PriorConfig,
    pub n_trials: u64,
    pub flags: Flags,
}

impl FitRecord {
    pub fn new(unit: UnitKey, labels: Vec<String>, fit: &FitResult, prior: PriorConfig, n_trials: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            unit,
            labels,
            rho: row_major(fit.rho_map.matrix()),
            stderr: fit.stderr.as_ref().map(row_major),
            scale: fit.scale,
            log_posterior: fit.log_posterior,
            converged: fit.converged,
            iters: fit.iters,
            grad_norm: fit.grad_norm,
            start: fit.start,
            objective_trace: fit.objective_trace.clone(),
            prior,
            n_trials,
            flags: fit.flags.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn rho(&self) -> Result<CostMatrix> {
        CostMatrix::normalized(from_row_major(self.k(), &self.rho, "rho")?)
    }

    pub fn stderr_matrix(&self) -> Result<Option<DMatrix<f64>>> {
        self.stderr
            .as_ref()
            .map(|s| from_row_major(self.k(), s, "stderr"))
            .transpose()
    }

    /// Rebuilds the fit; `theta` is re-encoded from the stored costs.
    pub fn to_fit_result(&self) -> Result<FitResult> {
        let rho_map = self.rho()?;
        let theta = encode(&(rho_map.matrix() * self.scale));
        Ok(FitResult {
            rho_map,
            scale: self.scale,
            theta,
            log_posterior: self.log_posterior,
            converged: self.converged,
            iters: self.iters,
            grad_norm: self.grad_norm,
            stderr: self.stderr_matrix()?,
            objective_trace: self.objective_trace.clone(),
            start: self.start,
            flags: self.flags.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: Self = serde_json::from_str(text)?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                rec.schema_version
            )));
        }
        Ok(rec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lambda: f64,
    pub distortion: f64,
    pub rate_bits: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub schema_version: u32,
    pub prior: Vec<f64>,
    /// Distinct λ values solved.
    pub n_solved: usize,
    /// Frontier points after sorting and de-duplication.
    pub points: Vec<CurvePoint>,
    pub flags: Flags,
}

impl CurveRecord {
    pub fn new(curve: &RDCurve) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            prior: curve.prior.clone(),
            n_solved: curve.n_solved,
            points: curve
                .points
                .iter()
                .map(|p| CurvePoint {
                    lambda: p.lambda,
                    distortion: p.distortion,
                    rate_bits: p.rate,
                    converged: p.converged,
                })
                .collect(),
            flags: curve.flags.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// `lambda,distortion,rate_bits`, one row per frontier point.
pub fn write_curve_csv<W: Write>(sink: W, curve: &RDCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["lambda", "distortion", "rate_bits"])?;
    for p in &curve.points {
        w.write_record([fmt_num(p.lambda), fmt_num(p.distortion), fmt_num(p.rate)])?;
    }
    w.flush()?;
    Ok(())
}

pub const SIGNATURE_COLUMNS: [&str; 12] = [
    "system",
    "family",
    "experiment",
    "condition",
    "accuracy",
    "beta_median",
    "beta_mean",
    "kappa",
    "auc",
    "beta_n",
    "kappa_n",
    "flags",
];

/// One system × block row of the signature table. Numeric fields are absent
/// when the frontier was degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureRow {
    pub system: String,
    pub family: String,
    pub experiment: String,
    pub condition: String,
    pub accuracy: Option<f64>,
    pub signature: Option<RDSignature>,
    pub normalized: Option<NormalizedSignature>,
    pub flags: Flags,
}

impl SignatureRow {
    /// Value of a named metric; `log10_abs_beta` and `log10_kappa` are derived.
    pub fn metric(&self, name: &str) -> Result<Option<f64>> {
        let sig = self.signature.as_ref();
        let norm = self.normalized.as_ref();
        Ok(match name {
            "accuracy" => self.accuracy,
            "beta_median" => sig.map(|s| s.beta_median),
            "beta_mean" => sig.map(|s| s.beta_mean),
            "kappa" => sig.map(|s| s.kappa),
            "auc" => sig.map(|s| s.auc),
            "beta_n" => norm.map(|n| n.beta_n),
            "kappa_n" => norm.map(|n| n.kappa_n),
            "log10_abs_beta" => sig.map(|s| s.beta_median.abs().max(crate::signatures::LOG_FLOOR).log10()),
            "log10_kappa" => sig.map(|s| s.kappa.max(crate::signatures::LOG_FLOOR).log10()),
            other => return Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        })
    }
}

/// Metrics whose differences are reported as a fold change 10^Δ.
pub fn is_log_metric(name: &str) -> bool {
    matches!(name, "log10_abs_beta" | "log10_kappa")
}

pub const METRICS: [&str; 9] = [
    "accuracy",
    "beta_median",
    "beta_mean",
    "kappa",
    "auc",
    "beta_n",
    "kappa_n",
    "log10_abs_beta",
    "log10_kappa",
];

pub fn write_signature_table<W: Write>(sink: W, rows: &[SignatureRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(SIGNATURE_COLUMNS)?;
    for r in rows {
        let s = r.signature.as_ref();
        let n = r.normalized.as_ref();
        w.write_record([
            r.system.clone(),
            r.family.clone(),
            r.experiment.clone(),
            r.condition.clone(),
            fmt_opt(r.accuracy),
            fmt_opt(s.map(|s| s.beta_median)),
            fmt_opt(s.map(|s| s.beta_mean)),
            fmt_opt(s.map(|s| s.kappa)),
            fmt_opt(s.map(|s| s.auc)),
            fmt_opt(n.map(|n| n.beta_n)),
            fmt_opt(n.map(|n| n.kappa_n)),
            r.flags.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_signature_table<R: Read>(source: R) -> Result<Vec<SignatureRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != SIGNATURE_COLUMNS {
        return Err(Error::Input(format!(
            "signature table header must be {}",
            SIGNATURE_COLUMNS.join(",")
        )));
    }
    let mut out = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = idx + 2;
        let num = |i: usize| parse_opt(SIGNATURE_COLUMNS[i], &rec[i], row);
        let flags = Flags::parse(&rec[11]).ok_or_else(|| Error::Row {
            row,
            field: "flags".into(),
            message: format!("unknown flag in {:?}", &rec[11]),
        })?;
        let accuracy = num(4)?;
        let signature = match (num(5)?, num(6)?, num(7)?, num(8)?) {
            (Some(beta_median), Some(beta_mean), Some(kappa), Some(auc)) => Some(RDSignature {
                beta_median,
                beta_mean,
                kappa,
                auc,
                accuracy: accuracy.unwrap_or(f64::NAN),
                n_slopes: 0,
            }),
            _ => None,
        };
        let normalized = match (num(9)?, num(10)?) {
            (Some(beta_n), Some(kappa_n)) => Some(NormalizedSignature {
                beta_n,
                kappa_n,
                flags: Flags::new(),
            }),
            _ => None,
        };
        out.push(SignatureRow {
            system: rec[0].to_string(),
            family: rec[1].to_string(),
            experiment: rec[2].to_string(),
            condition: rec[3].to_string(),
            accuracy,
            signature,
            normalized,
            flags,
        });
    }
    Ok(out)
}

pub const COMPARISON_COLUMNS: [&str; 12] = [
    "contrast",
    "metric",
    "n_blocks",
    "delta_median",
    "fold",
    "w_plus",
    "w_minus",
    "p",
    "q",
    "r_rb",
    "excluded_blocks",
    "flags",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub contrast: String,
    pub metric: String,
    pub fdr_set: String,
    pub n_blocks: usize,
    pub delta_median: Option<f64>,
    pub fold: Option<f64>,
    pub w_plus: Option<f64>,
    pub w_minus: Option<f64>,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub r_rb: Option<f64>,
    pub excluded_blocks: usize,
    pub flags: Flags,
}

pub fn write_comparison_csv<W: Write>(sink: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(COMPARISON_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.contrast.clone(),
            r.metric.clone(),
            r.n_blocks.to_string(),
            fmt_opt(r.delta_median),
            fmt_opt(r.fold),
            fmt_opt(r.w_plus),
            fmt_opt(r.w_minus),
            fmt_opt(r.p),
            fmt_opt(r.q),
            fmt_opt(r.r_rb),
            r.excluded_blocks.to_string(),
            r.flags.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
