//! Synthetic observers with known costs, sampled into counts.

use std::fs;

use anyhow::{bail, Context, Result};
use rdsig_core::cost::CostMatrix;
use rdsig_core::ingest::{write_counts_csv, BlockRef, LabelSet};
use rdsig_core::synth::{make_observer, random_cost_matrix, sample_counts, ObserverRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::{csv_bytes, OutDir};
use crate::Outcome;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub k: usize,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    pub trials_per_class: u64,
    /// Range of the uniform off-diagonal draws before normalization.
    #[serde(default = "default_cost_range")]
    pub cost_range: [f64; 2],
    pub experiments: Vec<ExperimentSpec>,
    pub systems: Vec<SystemSpec>,
}

fn default_cost_range() -> [f64; 2] {
    [0.2, 2.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub conditions: Vec<ConditionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub name: String,
    /// Multiplies each system's λ in this condition.
    #[serde(default = "one")]
    pub lambda_scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    pub family: String,
    pub lambda: f64,
    /// Costs are raised elementwise to this power before normalization.
    #[serde(default = "one")]
    pub cost_power: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Serialize)]
struct ObserverEntry {
    system: String,
    family: String,
    experiment: String,
    condition: String,
    observer: ObserverRecord,
}

#[derive(Debug, Serialize)]
struct ObserverFile {
    schema_version: u32,
    trials_per_class: u64,
    observers: Vec<ObserverEntry>,
}

/// SplitMix64 finalizer folded over `parts`.
fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.experiments.is_empty() || self.systems.is_empty() {
            bail!("synth spec needs at least one experiment and one system");
        }
        for s in &self.systems {
            if !(s.lambda > 0.0) || !s.lambda.is_finite() {
                bail!("system {}: lambda must be positive", s.name);
            }
            if !(s.cost_power > 0.0) || !s.cost_power.is_finite() {
                bail!("system {}: cost_power must be positive", s.name);
            }
        }
        for e in &self.experiments {
            if e.conditions.is_empty() {
                bail!("experiment {} has no conditions", e.name);
            }
            for c in &e.conditions {
                if !(c.lambda_scale > 0.0) || !c.lambda_scale.is_finite() {
                    bail!("condition {}/{}: lambda_scale must be positive", e.name, c.name);
                }
            }
        }
        Ok(())
    }
}

pub fn run(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome> {
    let path = cfg
        .synth_spec
        .as_deref()
        .context("no synth spec given (use --spec)")?;
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read synth spec {}", path.display()))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .with_context(|| format!("invalid synth spec {}", path.display()))?;
    spec.validate()?;
    let labels = match &spec.labels {
        Some(l) => LabelSet::new(l.iter().cloned())?,
        None => LabelSet::numbered(spec.k)?,
    };
    if labels.len() != spec.k {
        bail!("synth spec lists {} labels for k = {}", labels.len(), spec.k);
    }
    let k = spec.k;
    let prior = vec![1.0 / k as f64; k];
    let [lo, hi] = spec.cost_range;

    let mut jobs = Vec::new();
    for (ei, e) in spec.experiments.iter().enumerate() {
        let base = random_cost_matrix(k, lo, hi, derive_seed(cfg.seed, &[ei as u64]))?;
        for (si, s) in spec.systems.iter().enumerate() {
            let rho = if s.cost_power == 1.0 {
                base.clone()
            } else {
                CostMatrix::normalized(base.matrix().map(|v| v.powf(s.cost_power)))?
            };
            for (ci, c) in e.conditions.iter().enumerate() {
                let seed = derive_seed(cfg.seed, &[ei as u64, ci as u64, si as u64, 1]);
                let key = BlockRef {
                    system: s.name.clone(),
                    family: s.family.clone(),
                    experiment: e.name.clone(),
                    condition: c.name.clone(),
                };
                jobs.push((key, rho.clone(), s.lambda * c.lambda_scale, seed));
            }
        }
    }
    let results: Vec<_> = jobs
        .into_par_iter()
        .map(|(key, rho, lambda, seed)| -> Result<_> {
            let obs = make_observer(rho, lambda, &prior, seed)?;
            let counts = sample_counts(&obs, spec.trials_per_class, key.clone(), labels.clone())?;
            Ok((key, obs.record(), counts))
        })
        .collect::<Result<_>>()?;

    let mut matrices = Vec::with_capacity(results.len());
    let mut observers = Vec::with_capacity(results.len());
    for (key, record, counts) in results {
        observers.push(ObserverEntry {
            system: key.system,
            family: key.family,
            experiment: key.experiment,
            condition: key.condition,
            observer: record,
        });
        matrices.push(counts);
    }
    matrices.sort_by(|a, b| a.key.cmp(&b.key));

    out.write("labels.txt", labels.to_text())?;
    out.write("counts.csv", csv_bytes(|w| write_counts_csv(w, &matrices))?)?;
    let file = ObserverFile {
        schema_version: rdsig_core::records::SCHEMA_VERSION,
        trials_per_class: spec.trials_per_class,
        observers,
    };
    out.write("observers.json", serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(Outcome::clean())
}
