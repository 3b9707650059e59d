//! Canonical counts CSV from trial or count inputs.

use anyhow::Result;
use rdsig_core::ingest::write_counts_csv;

use crate::config::RunConfig;
use crate::data::load_counts;
use crate::output::OutDir;
use crate::Outcome;

pub fn run(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome> {
    let (labels, counts) = load_counts(cfg)?;
    let mut buf = Vec::new();
    write_counts_csv(&mut buf, &counts)?;
    out.write("counts.csv", buf)?;
    out.write("labels.txt", labels.to_text())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["system", "family", "experiment", "condition", "total", "supported_rows"])?;
    for c in &counts {
        w.write_record([
            c.key.system.as_str(),
            &c.key.family,
            &c.key.experiment,
            &c.key.condition,
            &c.total().to_string(),
            &c.supported_rows().to_string(),
        ])?;
    }
    out.write("blocks.csv", w.into_inner()?)?;
    Ok(Outcome::clean())
}
