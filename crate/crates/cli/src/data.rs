//! Loading counts and fit artifacts shared by several commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rdsig_core::ingest::{aggregate_counts, load_trials, BlockRef, ConfusionCounts, LabelSet};
use rdsig_core::records::{FitRecord, UnitKey, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};

use crate::config::{FitGrouping, RunConfig};
use crate::output::path_component;

pub const FIT_INDEX: &str = "units.json";

pub fn load_labels(path: &Path) -> Result<LabelSet> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read labels file {}", path.display()))?;
    LabelSet::parse(&text).with_context(|| format!("labels file {}", path.display()))
}

/// Reads every input (trial or counts CSV) and aggregates by block.
pub fn load_counts(cfg: &RunConfig) -> Result<(LabelSet, Vec<ConfusionCounts>)> {
    let labels = load_labels(cfg.labels_path()?)?;
    if cfg.inputs.is_empty() {
        bail!("no input files given (use --input)");
    }
    let mut records = Vec::new();
    for path in &cfg.inputs {
        let file = fs::File::open(path)
            .with_context(|| format!("cannot open input {}", path.display()))?;
        let recs = load_trials(std::io::BufReader::new(file), &labels)
            .with_context(|| format!("input {}", path.display()))?;
        records.extend(recs);
    }
    let counts = aggregate_counts(&records, &labels);
    Ok((labels, counts))
}

pub fn unit_key(block: &BlockRef, grouping: FitGrouping) -> UnitKey {
    UnitKey {
        system: block.system.clone(),
        family: block.family.clone(),
        experiment: block.experiment.clone(),
        condition: match grouping {
            FitGrouping::Experiment => None,
            FitGrouping::Condition => Some(block.condition.clone()),
        },
    }
}

pub fn unit_label(u: &UnitKey) -> String {
    match &u.condition {
        Some(c) => format!("{}/{}/{}", u.system, u.experiment, c),
        None => format!("{}/{}", u.system, u.experiment),
    }
}

/// Relative directory of a unit inside a fit directory.
pub fn unit_dir(u: &UnitKey) -> PathBuf {
    let mut p = PathBuf::from("units");
    p.push(path_component(&u.system));
    p.push(path_component(&u.experiment));
    if let Some(c) = &u.condition {
        p.push(path_component(c));
    }
    p
}

/// Relative directory of a block (used for per-block curves).
pub fn block_dir(b: &BlockRef) -> PathBuf {
    let mut p = PathBuf::from("blocks");
    p.push(path_component(&b.system));
    p.push(path_component(&b.experiment));
    p.push(path_component(&b.condition));
    p
}

/// Checks that distinct keys do not map onto the same directory.
pub fn check_distinct_dirs<'a, K: std::fmt::Debug + 'a>(
    items: impl IntoIterator<Item = (PathBuf, &'a K)>,
) -> Result<()> {
    let mut seen: BTreeMap<PathBuf, &K> = BTreeMap::new();
    for (dir, key) in items {
        if let Some(prev) = seen.insert(dir.clone(), key) {
            bail!(
                "{prev:?} and {key:?} map to the same directory {}; rename one of them",
                dir.display()
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitIndexEntry {
    pub unit: UnitKey,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitIndex {
    pub schema_version: u32,
    pub grouping: FitGrouping,
    pub units: Vec<FitIndexEntry>,
}

impl FitIndex {
    pub fn new(grouping: FitGrouping, units: Vec<FitIndexEntry>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            grouping,
            units,
        }
    }
}

/// Fit records of a fit directory, keyed by unit.
pub struct Fits {
    pub grouping: FitGrouping,
    pub records: BTreeMap<UnitKey, FitRecord>,
}

impl Fits {
    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(FIT_INDEX);
        let text = fs::read_to_string(&index_path)
            .with_context(|| format!("cannot read fit index {}", index_path.display()))?;
        let index: FitIndex = serde_json::from_str(&text)
            .with_context(|| format!("invalid fit index {}", index_path.display()))?;
        if index.schema_version != SCHEMA_VERSION {
            bail!("{}: unsupported schema_version {}", index_path.display(), index.schema_version);
        }
        let mut records = BTreeMap::new();
        let mut missing = Vec::new();
        for e in index.units {
            let path = dir.join(&e.dir).join("rho.json");
            match fs::read_to_string(&path) {
                Ok(t) => {
                    let rec = FitRecord::from_json(&t)
                        .with_context(|| format!("invalid fit record {}", path.display()))?;
                    records.insert(e.unit, rec);
                }
                Err(_) => missing.push(path.display().to_string()),
            }
        }
        if !missing.is_empty() {
            bail!("missing fit records: {}", missing.join(", "));
        }
        Ok(Self {
            grouping: index.grouping,
            records,
        })
    }

    /// Fit for each block, in block order. Fails listing every absent unit.
    pub fn for_blocks<'a>(&'a self, blocks: &[ConfusionCounts]) -> Result<Vec<&'a FitRecord>> {
        let mut out = Vec::with_capacity(blocks.len());
        let mut absent = std::collections::BTreeSet::new();
        for b in blocks {
            let key = unit_key(&b.key, self.grouping);
            match self.records.get(&key) {
                Some(r) => out.push(r),
                None => {
                    absent.insert(unit_label(&key));
                }
            }
        }
        if !absent.is_empty() {
            bail!(
                "no fit for unit(s): {}",
                absent.into_iter().collect::<Vec<_>>().join(", ")
            );
        }
        for (b, r) in blocks.iter().zip(&out) {
            if r.labels != b.labels.labels() {
                bail!("fit for {} was made with a different label set", unit_label(&r.unit));
            }
        }
        Ok(out)
    }
}
