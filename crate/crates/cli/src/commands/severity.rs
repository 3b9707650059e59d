//! Severity slopes across ordered conditions of one experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use anyhow::{bail, Context, Result};
use rdsig_core::cost::CostMatrix;
use rdsig_core::ingest::ConfusionCounts;
use rdsig_core::records::{fmt_num, FitRecord, UnitKey};
use rdsig_core::signatures::{severity_beta, SeverityPoint};

use crate::config::RunConfig;
use crate::data::{load_counts, unit_label, Fits};
use crate::output::OutDir;
use crate::Outcome;

struct Series {
    system: String,
    family: String,
    points: Vec<SeverityPoint>,
}

fn cost_for(cfg: &RunConfig, fits: Option<&Fits>, system: &str, family: &str, experiment: &str) -> Result<CostMatrix> {
    if let Some(path) = &cfg.rho {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read cost matrix {}", path.display()))?;
        return Ok(FitRecord::from_json(&text)
            .with_context(|| format!("invalid fit record {}", path.display()))?
            .rho()?);
    }
    let fits = fits.expect("fits loaded when no --rho");
    let key = UnitKey {
        system: system.to_string(),
        family: family.to_string(),
        experiment: experiment.to_string(),
        condition: None,
    };
    match fits.records.get(&key) {
        Some(r) => Ok(r.rho()?),
        None => bail!(
            "no per-experiment fit for {} (fit with grouping `experiment` or pass --rho)",
            unit_label(&key)
        ),
    }
}

pub fn run(cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome> {
    let experiment = cfg
        .experiment
        .as_deref()
        .context("no experiment given (use --experiment)")?;
    if cfg.levels.is_empty() {
        bail!("no condition ordering given (use --levels)");
    }
    let (_, counts) = load_counts(cfg)?;
    let in_exp: Vec<&ConfusionCounts> = counts
        .iter()
        .filter(|c| c.key.experiment == experiment)
        .collect();
    if in_exp.is_empty() {
        bail!("unknown experiment {experiment:?}");
    }
    for level in &cfg.levels {
        if !in_exp.iter().any(|c| &c.key.condition == level) {
            bail!("unknown level {level:?} for experiment {experiment:?}");
        }
    }
    let fits = match cfg.rho {
        Some(_) => None,
        None => Some(Fits::load(cfg.fits_dir()?)?),
    };

    let mut systems: BTreeMap<(&str, &str), Vec<&ConfusionCounts>> = BTreeMap::new();
    for c in &in_exp {
        systems
            .entry((c.key.system.as_str(), c.key.family.as_str()))
            .or_default()
            .push(c);
    }
    let mut series = Vec::new();
    for ((system, family), blocks) in systems {
        let ordered: Vec<(String, ConfusionCounts)> = cfg
            .levels
            .iter()
            .filter_map(|l| {
                blocks
                    .iter()
                    .find(|c| &c.key.condition == l)
                    .map(|c| (l.clone(), (*c).clone()))
            })
            .collect();
        let rho = cost_for(cfg, fits.as_ref(), system, family, experiment)?;
        let points = severity_beta(&ordered, &rho, cfg.alpha)
            .with_context(|| format!("severity slopes for {system}"))?;
        series.push(Series {
            system: system.to_string(),
            family: family.to_string(),
            points,
        });
    }

    let mut outcome = Outcome::clean();
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["system", "family", "experiment", "level", "beta", "flags"])?;
    let mut plot = csv::Writer::from_writer(Vec::new());
    plot.write_record(["system", "level", "beta"])?;
    for s in &series {
        for p in &s.points {
            outcome.note_flags(&format!("{}/{}", s.system, p.level), &p.flags);
            table.write_record([
                s.system.as_str(),
                &s.family,
                experiment,
                &p.level,
                &fmt_num(p.beta),
                &p.flags.to_string(),
            ])?;
            plot.write_record([s.system.as_str(), &p.level, &fmt_num(p.beta)])?;
        }
    }
    out.write("severity.csv", table.into_inner()?)?;
    out.write("severity_plot.csv", plot.into_inner()?)?;
    if cfg.svg {
        out.write("severity.svg", svg(&series, &cfg.levels, experiment))?;
    }
    Ok(outcome)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line chart of β against level position, one polyline per system.
fn svg(series: &[Series], levels: &[String], experiment: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 70.0;
    const R: f64 = 130.0;
    const T: f64 = 40.0;
    const B: f64 = 60.0;
    let betas: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.beta))
        .filter(|b| b.is_finite())
        .collect();
    let (mut lo, mut hi) = betas
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (-1.0, 0.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let n = levels.len();
    let x = |i: usize| {
        if n == 1 {
            L + (W - L - R) / 2.0
        } else {
            L + (W - L - R) * i as f64 / (n - 1) as f64
        }
    };
    let y = |b: f64| T + (H - T - B) * (hi - b) / (hi - lo);
    let pos: BTreeMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">severity slope: {}</text>"#,
        W / 2.0,
        escape(experiment)
    );
    let _ = writeln!(
        s,
        r#"<polyline points="{L},{T} {L},{} {},{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R,
        H - B
    );
    for (i, l) in levels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x(i),
            H - B + 18.0,
            escape(l)
        );
    }
    for v in [lo, hi] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{:.3}</text>"#,
            L - 6.0,
            y(v) + 4.0,
            v
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">level</text>"#,
        (L + W - R) / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">beta</text>"#,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0
    );
    for ser in series {
        let pts: Vec<(f64, f64)> = ser
            .points
            .iter()
            .filter(|p| p.beta.is_finite())
            .map(|p| (x(pos[p.level.as_str()]), y(p.beta)))
            .collect();
        let coords: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="black"/>"#,
            coords.join(" ")
        );
        for (a, b) in &pts {
            let _ = writeln!(s, r#"<circle cx="{a:.2}" cy="{b:.2}" r="2"/>"#);
        }
        if let Some((a, b)) = pts.last() {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
                a + 6.0,
                b + 4.0,
                escape(&ser.system)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
