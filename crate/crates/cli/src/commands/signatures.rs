//! Signature table: one row per system × block.

use anyhow::Result;
use rdsig_core::channel::{channel_from_counts, PriorMode};
use rdsig_core::flags::{Flag, Flags};
use rdsig_core::ingest::ConfusionCounts;
use rdsig_core::records::{write_signature_table, FitRecord, SignatureRow};
use rdsig_core::signatures::{extract_signature, normalize_signatures};
use rdsig_core::Error;
use rayon::prelude::*;

use crate::commands::fit::trace_for;
use crate::config::{NormGrouping, RunConfig};
use crate::data::{load_counts, Fits};
use crate::output::{csv_bytes, OutDir};
use crate::Outcome;

fn signature_row(block: &ConfusionCounts, fit: &FitRecord, cfg: &RunConfig) -> Result<SignatureRow> {
    let rho = fit.rho()?;
    let accuracy = channel_from_counts(block, PriorMode::Empirical)?.accuracy();
    let curve = trace_for(block, &rho, cfg)?;
    let mut flags = fit.flags.clone();
    flags.extend(&curve.flags);
    let signature = match extract_signature(&curve, accuracy) {
        Ok(s) => Some(s),
        Err(Error::Degenerate(_)) => {
            flags.insert(Flag::DegenerateFrontier);
            None
        }
        Err(e) => return Err(e.into()),
    };
    Ok(SignatureRow {
        system: block.key.system.clone(),
        family: block.key.family.clone(),
        experiment: block.key.experiment.clone(),
        condition: block.key.condition.clone(),
        accuracy: Some(accuracy),
        signature,
        normalized: None,
        flags,
    })
}

/// Computes normalized signatures in place, per normalization group.
pub fn normalize_rows(rows: &mut [SignatureRow], grouping: NormGrouping) {
    let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].signature.is_some()).collect();
    let items: Vec<((String, String), _)> = idx
        .iter()
        .map(|&i| {
            let r = &rows[i];
            let key = match grouping {
                NormGrouping::Experiment => (r.experiment.clone(), String::new()),
                NormGrouping::Block => (r.experiment.clone(), r.condition.clone()),
                NormGrouping::All => (String::new(), String::new()),
            };
            (key, r.signature.expect("filtered"))
        })
        .collect();
    for (&i, n) in idx.iter().zip(normalize_signatures(&items)) {
        rows[i].flags.extend(&n.flags);
        rows[i].normalized = Some(n);
    }
}

pub fn run(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome> {
    let (_, counts) = load_counts(cfg)?;
    let fits = Fits::load(cfg.fits_dir()?)?;
    let records = fits.for_blocks(&counts)?;
    let mut rows: Vec<SignatureRow> = counts
        .par_iter()
        .zip(records.par_iter())
        .map(|(c, rec)| signature_row(c, rec, cfg))
        .collect::<Result<_>>()?;
    normalize_rows(&mut rows, cfg.normalization);

    let mut outcome = Outcome::clean();
    for r in &rows {
        let flags: &Flags = &r.flags;
        outcome.note_flags(&format!("{}/{}/{}", r.system, r.experiment, r.condition), flags);
    }
    out.write("signatures.csv", csv_bytes(|w| write_signature_table(w, &rows))?)?;
    Ok(outcome)
}
