//! Cost-matrix fits per unit, and frontier tracing per unit or per block.

use std::collections::BTreeMap;

use anyhow::{Context, Result};
use rdsig_core::channel::channel_from_counts;
use rdsig_core::cost::CostMatrix;
use rdsig_core::flags::Flags;
use rdsig_core::inference::{fit_cost_matrix, fit_with_stderr};
use rdsig_core::ingest::ConfusionCounts;
use rdsig_core::rd::{trace_curve, RDCurve};
use rdsig_core::records::{fmt_num, write_curve_csv, CurveRecord, FitRecord, UnitKey};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{
    block_dir, check_distinct_dirs, load_counts, unit_dir, unit_key, unit_label, FitIndex,
    FitIndexEntry, Fits, FIT_INDEX,
};
use crate::output::OutDir;
use crate::Outcome;

/// Groups blocks into fitting units and pools their counts.
pub fn pooled_units(
    counts: &[ConfusionCounts],
    cfg: &RunConfig,
) -> Result<Vec<(UnitKey, ConfusionCounts)>> {
    let mut groups: BTreeMap<UnitKey, Vec<&ConfusionCounts>> = BTreeMap::new();
    for c in counts {
        groups.entry(unit_key(&c.key, cfg.fit_grouping)).or_default().push(c);
    }
    groups
        .into_iter()
        .map(|(unit, parts)| {
            let mut key = parts[0].key.clone();
            if unit.condition.is_none() {
                key.condition = String::new();
            }
            let pooled = ConfusionCounts::pooled(key, parts)
                .with_context(|| format!("pooling counts for {}", unit_label(&unit)))?;
            Ok((unit, pooled))
        })
        .collect()
}

pub fn trace_for(counts: &ConfusionCounts, rho: &CostMatrix, cfg: &RunConfig) -> Result<RDCurve> {
    let channel = channel_from_counts(counts, cfg.prior_mode)?;
    Ok(trace_curve(rho.matrix(), &channel.prior, &cfg.grid.grid()?, &cfg.ba)?)
}

fn write_curve(out: &mut OutDir, dir: &std::path::Path, curve: &RDCurve) -> Result<()> {
    let mut buf = Vec::new();
    write_curve_csv(&mut buf, curve)?;
    out.write(dir.join("curve.csv"), buf)?;
    out.write(dir.join("curve.json"), CurveRecord::new(curve).to_json()?)?;
    Ok(())
}

pub fn run_fit(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome> {
    let (labels, counts) = load_counts(cfg)?;
    let units = pooled_units(&counts, cfg)?;
    check_distinct_dirs(units.iter().map(|(u, _)| (unit_dir(u), u)))?;

    let results: Vec<(FitRecord, RDCurve)> = units
        .par_iter()
        .map(|(unit, pooled)| -> Result<_> {
            let fit = if cfg.stderr {
                fit_with_stderr(pooled, &cfg.prior, &cfg.optimizer)
            } else {
                fit_cost_matrix(pooled, &cfg.prior, &cfg.optimizer)
            }
            .with_context(|| format!("fitting {}", unit_label(unit)))?;
            let curve = trace_for(pooled, &fit.rho_map, cfg)
                .with_context(|| format!("tracing {}", unit_label(unit)))?;
            let record = FitRecord::new(
                unit.clone(),
                labels.labels().to_vec(),
                &fit,
                cfg.prior,
                pooled.total(),
            );
            Ok((record, curve))
        })
        .collect::<Result<_>>()?;

    let mut outcome = Outcome::clean();
    let mut entries = Vec::new();
    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record([
        "system",
        "family",
        "experiment",
        "condition",
        "converged",
        "iters",
        "log_posterior",
        "scale",
        "start",
        "flags",
    ])?;
    for (record, curve) in &results {
        let dir = unit_dir(&record.unit);
        out.write(dir.join("rho.json"), record.to_json()?)?;
        write_curve(out, &dir, curve)?;
        let mut flags = record.flags.clone();
        flags.extend(&curve.flags);
        outcome.note_flags(&unit_label(&record.unit), &flags);
        let u = &record.unit;
        summary.write_record([
            u.system.as_str(),
            &u.family,
            &u.experiment,
            u.condition.as_deref().unwrap_or(""),
            if record.converged { "true" } else { "false" },
            &record.iters.to_string(),
            &fmt_num(record.log_posterior),
            &fmt_num(record.scale),
            serde_json::to_value(record.start)?.as_str().unwrap_or(""),
            &flags.to_string(),
        ])?;
        entries.push(FitIndexEntry {
            unit: record.unit.clone(),
            dir,
        });
    }
    out.write("fits.csv", summary.into_inner()?)?;
    let index = FitIndex::new(cfg.fit_grouping, entries);
    out.write(FIT_INDEX, serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(outcome)
}

/// Per-block frontiers under each block's unit cost matrix.
pub fn run_trace(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome> {
    let (_, counts) = load_counts(cfg)?;
    let fits = Fits::load(cfg.fits_dir()?)?;
    let records = fits.for_blocks(&counts)?;
    check_distinct_dirs(counts.iter().map(|c| (block_dir(&c.key), &c.key)))?;
    let curves: Vec<RDCurve> = counts
        .par_iter()
        .zip(records.par_iter())
        .map(|(c, rec)| -> Result<_> {
            let rho = rec.rho()?;
            trace_for(c, &rho, cfg)
        })
        .collect::<Result<_>>()?;

    let mut outcome = Outcome::clean();
    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record(["system", "family", "experiment", "condition", "n_points", "flags"])?;
    for (c, curve) in counts.iter().zip(&curves) {
        write_curve(out, &block_dir(&c.key), curve)?;
        let flags: Flags = curve.flags.clone();
        outcome.note_flags(&format!("{}/{}/{}", c.key.system, c.key.experiment, c.key.condition), &flags);
        summary.write_record([
            c.key.system.as_str(),
            &c.key.family,
            &c.key.experiment,
            &c.key.condition,
            &curve.points.len().to_string(),
            &flags.to_string(),
        ])?;
    }
    out.write("curves.csv", summary.into_inner()?)?;
    Ok(outcome)
}
