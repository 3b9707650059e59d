//! Goodness-of-fit diagnostics per block and their family aggregates.

use std::collections::BTreeMap;

use anyhow::Result;
use rdsig_core::flags::{Flag, Flags};
use rdsig_core::records::fmt_opt;
use rdsig_core::signatures::{median, rmse_diagnostics, FitDiagnostics};
use rdsig_core::Error;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{load_counts, Fits};
use crate::output::OutDir;
use crate::Outcome;

pub fn run(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome> {
    let (_, counts) = load_counts(cfg)?;
    let fits = Fits::load(cfg.fits_dir()?)?;
    let records = fits.for_blocks(&counts)?;
    let diags: Vec<(Option<FitDiagnostics>, Flags)> = counts
        .par_iter()
        .zip(records.par_iter())
        .map(|(c, rec)| -> Result<_> {
            let fit = rec.to_fit_result()?;
            match rmse_diagnostics(c, &fit, &cfg.optimizer.ba, cfg.bins) {
                Ok((d, f)) => Ok((Some(d), f)),
                Err(Error::Degenerate(_)) => Ok((None, Flag::ExpFitDegenerate.into())),
                Err(e) => Err(e.into()),
            }
        })
        .collect::<Result<_>>()?;

    let mut outcome = Outcome::clean();
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record([
        "system",
        "family",
        "experiment",
        "condition",
        "rmse_conf_prob",
        "rmse_emp",
        "rmse_genexp",
        "flags",
    ])?;
    let mut by_family: BTreeMap<&str, [Vec<f64>; 3]> = BTreeMap::new();
    for (c, (d, flags)) in counts.iter().zip(&diags) {
        outcome.note_flags(
            &format!("{}/{}/{}", c.key.system, c.key.experiment, c.key.condition),
            flags,
        );
        let vals = d.map(|d| [d.rmse_conf_prob, d.rmse_emp, d.rmse_genexp]);
        if let Some(v) = vals {
            let e = by_family.entry(c.key.family.as_str()).or_default();
            for (acc, x) in e.iter_mut().zip(v) {
                acc.push(x);
            }
        }
        table.write_record([
            c.key.system.as_str(),
            &c.key.family,
            &c.key.experiment,
            &c.key.condition,
            &fmt_opt(vals.map(|v| v[0])),
            &fmt_opt(vals.map(|v| v[1])),
            &fmt_opt(vals.map(|v| v[2])),
            &flags.to_string(),
        ])?;
    }
    out.write("diagnostics.csv", table.into_inner()?)?;

    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record(["family", "metric", "n", "median", "mean"])?;
    for (family, cols) in &by_family {
        for (name, v) in ["rmse_conf_prob", "rmse_emp", "rmse_genexp"].iter().zip(cols) {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            summary.write_record([
                *family,
                name,
                &v.len().to_string(),
                &fmt_opt(median(v)),
                &fmt_opt(Some(mean)),
            ])?;
        }
    }
    out.write("family_summary.csv", summary.into_inner()?)?;
    Ok(outcome)
}
