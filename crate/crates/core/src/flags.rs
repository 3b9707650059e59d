//! Advisory flags attached to results that are usable but carry a caveat.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// A Blahut–Arimoto solve hit its iteration cap.
    BaNotConverged,
    /// Cost-matrix optimizer stopped without meeting gtol/ftol.
    FitNotConverged,
    /// Laplace Hessian was not positive definite; no standard errors.
    HessianNotPd,
    /// Fewer than three resolvable frontier points.
    DegenerateFrontier,
    /// Normalization group had a single member.
    SingletonGroup,
    /// Normalization group had zero variance.
    ZeroVariance,
    /// Smoothing requested with alpha = 0 on a matrix with zero rows.
    ZeroAlphaFallback,
    /// Exponential fit on an all-zero gradient.
    ExpFitDegenerate,
    /// Exponential fit hit its iteration cap.
    ExpFitNotConverged,
    /// Paired test had no nonzero differences.
    DegenerateTest,
    /// A fitted parameter hit the cost cap.
    ScaleCap,
    /// Zero-probability cells were left out of a log-linear fit.
    ZeroCells,
    /// A metric was missing or unusable for some matched blocks.
    ExcludedBlocks,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::BaNotConverged => "ba_not_converged",
            Flag::FitNotConverged => "fit_not_converged",
            Flag::HessianNotPd => "hessian_not_pd",
            Flag::DegenerateFrontier => "degenerate_frontier",
            Flag::SingletonGroup => "singleton_group",
            Flag::ZeroVariance => "zero_variance",
            Flag::ZeroAlphaFallback => "zero_alpha_fallback",
            Flag::ExpFitDegenerate => "exp_fit_degenerate",
            Flag::ExpFitNotConverged => "exp_fit_not_converged",
            Flag::DegenerateTest => "degenerate_test",
            Flag::ScaleCap => "scale_cap",
            Flag::ZeroCells => "zero_cells",
            Flag::ExcludedBlocks => "excluded_blocks",
        }
    }

    pub fn parse(s: &str) -> Option<Flag> {
        ALL.iter().copied().find(|f| f.as_str() == s)
    }
}

const ALL: [Flag; 13] = [
    Flag::BaNotConverged,
    Flag::FitNotConverged,
    Flag::HessianNotPd,
    Flag::DegenerateFrontier,
    Flag::SingletonGroup,
    Flag::ZeroVariance,
    Flag::ZeroAlphaFallback,
    Flag::ExpFitDegenerate,
    Flag::ExpFitNotConverged,
    Flag::DegenerateTest,
    Flag::ScaleCap,
    Flag::ZeroCells,
    Flag::ExcludedBlocks,
];

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered, de-duplicated set of flags.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Flags(BTreeSet<Flag>);

impl Flags {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, flag: Flag) {
        self.0.insert(flag);
    }

    pub fn extend(&mut self, other: &Flags) {
        self.0.extend(other.0.iter().copied());
    }

    pub fn contains(&self, flag: Flag) -> bool {
        self.0.contains(&flag)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Flag> + '_ {
        self.0.iter().copied()
    }

    /// Parses the `;`-joined form written to CSV files. Unknown names are an error.
    pub fn parse(s: &str) -> Option<Flags> {
        let mut out = Flags::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            out.insert(Flag::parse(part)?);
        }
        Some(out)
    }
}

impl From<Flag> for Flags {
    fn from(flag: Flag) -> Self {
        let mut f = Flags::new();
        f.insert(flag);
        f
    }
}

impl fmt::Display for Flags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for flag in &self.0 {
            if !first {
                f.write_str(";")?;
            }
            first = false;
            f.write_str(flag.as_str())?;
        }
        Ok(())
    }
}
