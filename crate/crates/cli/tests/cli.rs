mod common;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use common::{code, fixture, rdsig, s, snapshot, stderr, Pipeline};
use rdsig_core::inference::{PriorConfig, StartKind};
use rdsig_core::records::{read_signature_table, FitRecord, UnitKey, SCHEMA_VERSION};
use rdsig_core::synth::random_cost_matrix;

const LABELS: &str = "dog\ncat\ncar\nboat\n";

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn read_csv(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|r| r.unwrap()).collect()
}

fn header(path: &Path) -> csv::StringRecord {
    csv::Reader::from_path(path).unwrap().headers().unwrap().clone()
}

fn column(path: &Path, name: &str) -> usize {
    header(path).iter().position(|h| h == name).unwrap()
}

/// Counts CSV rows for one block, row-major over the 4 labels.
fn block_rows(out: &mut String, system: &str, family: &str, exp: &str, cond: &str, counts: &[u64]) {
    let labels = ["dog", "cat", "car", "boat"];
    for (n, c) in counts.iter().enumerate() {
        if *c > 0 {
            writeln!(
                out,
                "{system},{family},{exp},{cond},{},{},{c}",
                labels[n / 4],
                labels[n % 4]
            )
            .unwrap();
        }
    }
}

const COUNTS_HEADER: &str = "system,family,experiment,condition,true_class,response_class,count\n";

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tmp.path());
    for (stage, o) in p.run() {
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    for d in p.dirs() {
        assert!(d.join("config.lock.json").is_file(), "{}", d.display());
    }
    // 4 systems, 2 experiments x 3 conditions.
    let rows = read_signature_table(
        fs::File::open(p.signatures.join("signatures.csv")).unwrap(),
    )
    .unwrap();
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| r.signature.is_some() && r.flags.is_empty()));
    assert_eq!(read_csv(&p.compare.join("comparisons.csv")).len(), 9);
    assert_eq!(read_csv(&p.severity.join("severity.csv")).len(), 12);
    let svg = fs::read_to_string(p.severity.join("severity.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(read_csv(&p.trace.join("curves.csv")).len(), 24);
    assert_eq!(read_csv(&p.ingest.join("blocks.csv")).len(), 24);
}

#[test]
fn trial_level_input_matches_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let labels = tmp.path().join("labels.txt");
    write(&labels, LABELS);
    let trials = tmp.path().join("trials.csv");
    write(
        &trials,
        "system,family,experiment,condition,true_class,response_class\n\
         s,f,e,c,dog,dog\ns,f,e,c,dog,cat\ns,f,e,c,dog,dog\ns,f,e,c,car,boat\n",
    );
    let out = tmp.path().join("out");
    let o = rdsig(&["ingest", "--labels", s(&labels), "--input", s(&trials), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("counts.csv")).unwrap();
    assert_eq!(
        text,
        format!("{COUNTS_HEADER}s,f,e,c,dog,dog,2\ns,f,e,c,dog,cat,1\ns,f,e,c,car,boat,1\n")
    );
    // Re-ingesting canonical counts is the identity.
    let again = tmp.path().join("again");
    let o = rdsig(&[
        "ingest",
        "--labels",
        s(&labels),
        "--input",
        s(&out.join("counts.csv")),
        "--out",
        s(&again),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(again.join("counts.csv")).unwrap(), text);
}

#[test]
fn missing_labels_fail_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.txt");
    let out = tmp.path().join("out");
    let o = rdsig(&[
        "ingest",
        "--labels",
        s(&missing),
        "--input",
        s(&fixture("synth.json")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.txt"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unwritable_output_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    write(&blocker, "x");
    let o = rdsig(&["synth", "--spec", s(&fixture("synth.json")), "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&o), 1);
    let o = rdsig(&["synth", "--spec", s(&fixture("synth.json")), "--out", s(&blocker)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn unknown_label_in_input_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let labels = tmp.path().join("labels.txt");
    write(&labels, LABELS);
    let input = tmp.path().join("counts.csv");
    write(&input, &format!("{COUNTS_HEADER}s,f,e,c,dog,zebra,3\n"));
    let out = tmp.path().join("out");
    let o = rdsig(&["ingest", "--labels", s(&labels), "--input", s(&input), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("zebra"), "{}", stderr(&o));
}

#[test]
fn lock_for_another_command_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = tmp.path().join("synth");
    let o = rdsig(&["synth", "--spec", s(&fixture("synth.json")), "--out", s(&synth)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = rdsig(&["fit", "--config", s(&synth.join("config.lock.json"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn degenerate_block_gets_flagged_row() {
    let tmp = tempfile::tempdir().unwrap();
    let labels = tmp.path().join("labels.txt");
    write(&labels, LABELS);
    let mut text = COUNTS_HEADER.to_string();
    let full = [800, 60, 90, 50, 70, 850, 30, 50, 40, 20, 900, 40, 60, 90, 30, 820];
    block_rows(&mut text, "s", "f", "e", "full", &full);
    // Only one class presented: the frontier collapses to a point.
    let one = [700, 100, 150, 50, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
    block_rows(&mut text, "s", "f", "e", "single", &one);
    let input = tmp.path().join("counts.csv");
    write(&input, &text);
    let fit = tmp.path().join("fit");
    let o = rdsig(&["fit", "--labels", s(&labels), "--input", s(&input), "--out", s(&fit)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sig = tmp.path().join("sig");
    let o = rdsig(&[
        "signatures",
        "--labels",
        s(&labels),
        "--input",
        s(&input),
        "--fits",
        s(&fit),
        "--out",
        s(&sig),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let table = sig.join("signatures.csv");
    let rows = read_csv(&table);
    assert_eq!(rows.len(), 2);
    let flags = column(&table, "flags");
    let beta = column(&table, "beta_median");
    let single = rows.iter().find(|r| &r[3] == "single").unwrap();
    assert!(single[flags].contains("degenerate_frontier"));
    assert_eq!(&single[beta], "");
    assert_eq!(&single[column(&table, "auc")], "");
    assert_eq!(&single[column(&table, "accuracy")], "0.7");
    let ok = rows.iter().find(|r| &r[3] == "full").unwrap();
    assert!(ok[beta].parse::<f64>().unwrap() < 0.0);
}

#[test]
fn signatures_require_every_unit_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tmp.path());
    let o = rdsig(&["synth", "--spec", s(&fixture("synth.json")), "--out", s(&p.synth)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // Fit only the noise experiment.
    let all = fs::read_to_string(p.synth.join("counts.csv")).unwrap();
    let mut noise = String::new();
    for (n, line) in all.lines().enumerate() {
        if n == 0 || line.split(',').nth(2) == Some("noise") {
            noise.push_str(line);
            noise.push('\n');
        }
    }
    let partial = tmp.path().join("noise.csv");
    write(&partial, &noise);
    let labels = p.labels();
    let o = rdsig(&["fit", "--labels", s(&labels), "--input", s(&partial), "--out", s(&p.fit)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = rdsig(&[
        "signatures",
        "--labels",
        s(&labels),
        "--input",
        s(&p.synth.join("counts.csv")),
        "--fits",
        s(&p.fit),
        "--out",
        s(&p.signatures),
    ]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("observer-a/blur"), "{err}");
    assert!(!p.signatures.exists());
}

/// Signature table with `n` blocks; system b sits `offset` below a in log10 |β|.
fn offset_table(path: &Path, n: usize, offset: f64) {
    let mut w = String::from(
        "system,family,experiment,condition,accuracy,beta_median,beta_mean,kappa,auc,beta_n,kappa_n,flags\n",
    );
    for i in 0..n {
        let base = 0.5 + 0.1 * i as f64;
        let jitter = 0.01 * ((i * 7 % 5) as f64 - 2.0);
        for (sys, fam, lg) in [("a", "fa", base), ("b", "fb", base - offset + jitter)] {
            let beta = -(10f64.powf(lg));
            writeln!(
                w,
                "{sys},{fam},e,c{i},0.8,{beta},{beta},1,0.3,1,1,"
            )
            .unwrap();
        }
    }
    write(path, &w);
}

fn compare(dir: &Path, table: &Path, contrasts: &str) -> (i32, String, std::path::PathBuf) {
    let cpath = dir.join("contrasts.json");
    write(&cpath, contrasts);
    let out = dir.join("cmp");
    let o = rdsig(&[
        "compare",
        "--signatures",
        s(table),
        "--contrasts",
        s(&cpath),
        "--out",
        s(&out),
    ]);
    (code(&o), stderr(&o), out)
}

#[test]
fn paired_contrast_recovers_known_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("sig.csv");
    offset_table(&table, 12, 0.3);
    let (c, err, out) = compare(
        tmp.path(),
        &table,
        r#"{"wilcoxon_mode": "exact", "comparisons": [
            {"name": "a_vs_b", "a": "a", "b": "b", "metrics": ["log10_abs_beta", "auc"]}]}"#,
    );
    assert_eq!(c, 2, "{err}"); // auc differences are all zero: degenerate test
    let file = out.join("comparisons.csv");
    let rows = read_csv(&file);
    let beta = rows.iter().find(|r| &r[1] == "log10_abs_beta").unwrap();
    let delta: f64 = beta[column(&file, "delta_median")].parse().unwrap();
    assert!((delta - 0.3).abs() < 0.011, "delta {delta}");
    let fold: f64 = beta[column(&file, "fold")].parse().unwrap();
    assert!((fold - 10f64.powf(delta)).abs() < 1e-12);
    let p: f64 = beta[column(&file, "p")].parse().unwrap();
    assert!((p - 2.0 / 4096.0).abs() < 1e-15, "p {p}");
    let auc = rows.iter().find(|r| &r[1] == "auc").unwrap();
    assert!(auc[column(&file, "flags")].contains("degenerate_test"));
    assert_eq!(&auc[column(&file, "p")], "");
}

#[test]
fn self_contrast_is_degenerate() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("sig.csv");
    offset_table(&table, 6, 0.3);
    let (c, err, out) = compare(
        tmp.path(),
        &table,
        r#"{"comparisons": [{"name": "self", "a": "a", "b": "a", "metrics": ["auc", "kappa"]}]}"#,
    );
    assert_eq!(c, 2, "{err}");
    let file = out.join("comparisons.csv");
    for r in read_csv(&file) {
        assert!(r[column(&file, "flags")].contains("degenerate_test"));
        assert_eq!(&r[column(&file, "delta_median")], "0");
    }
}

#[test]
fn compare_input_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let table = tmp.path().join("sig.csv");
    offset_table(&table, 6, 0.3);
    let (c, err, out) = compare(
        tmp.path(),
        &table,
        r#"{"comparisons": [{"name": "x", "a": "a", "b": "zzz", "metrics": ["auc"]}]}"#,
    );
    assert_eq!(c, 1);
    assert!(err.contains("zzz"), "{err}");
    assert!(!out.exists());
    let (c, _, _) = compare(
        tmp.path(),
        &table,
        r#"{"comparisons": [{"name": "x", "a": "a", "b": "b", "metrics": ["nope"]}]}"#,
    );
    assert_eq!(c, 1);
    // One block only: block fixed effects absorb everything.
    let single = tmp.path().join("single.csv");
    offset_table(&single, 1, 0.3);
    let (c, err, _) = compare(
        tmp.path(),
        &single,
        r#"{"comparisons": [], "regressions": [
            {"name": "r", "outcome": "log10_abs_beta", "reference_family": "fa", "interaction_test": true}]}"#,
    );
    assert_eq!(c, 1, "{err}");
}

/// Channel with off-diagonal `c·exp(−β ρ)`, so ln p is exactly linear in ρ.
fn log_linear_counts(rho: &nalgebra::DMatrix<f64>, beta: f64, scale: f64) -> Vec<u64> {
    let k = rho.nrows();
    let mut out = vec![0u64; k * k];
    for i in 0..k {
        let mut off = 0.0;
        for j in 0..k {
            if i != j {
                let p = 0.05 * (-beta * rho[(i, j)]).exp();
                off += p;
                out[i * k + j] = (p * scale).round() as u64;
            }
        }
        out[i * k + i] = ((1.0 - off) * scale).round() as u64;
    }
    out
}

fn rho_record(path: &Path, rho: &nalgebra::DMatrix<f64>) {
    let rec = FitRecord {
        schema_version: SCHEMA_VERSION,
        unit: UnitKey {
            system: "s".into(),
            family: "f".into(),
            experiment: "e".into(),
            condition: None,
        },
        labels: LABELS.lines().map(String::from).collect(),
        rho: rho.transpose().as_slice().to_vec(),
        stderr: None,
        scale: 1.0,
        log_posterior: 0.0,
        converged: true,
        iters: 0,
        grad_norm: 0.0,
        start: StartKind::Given,
        objective_trace: Vec::new(),
        prior: PriorConfig::default(),
        n_trials: 0,
        flags: Default::default(),
    };
    write(path, &rec.to_json().unwrap());
}

struct SeverityCase {
    dir: tempfile::TempDir,
    labels: std::path::PathBuf,
    input: std::path::PathBuf,
    rho: std::path::PathBuf,
}

fn severity_case(betas: &[f64], scale: f64, extra: &str) -> SeverityCase {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.txt");
    write(&labels, LABELS);
    let rho = random_cost_matrix(4, 0.2, 2.0, 11).unwrap();
    let rho_path = dir.path().join("rho.json");
    rho_record(&rho_path, rho.matrix());
    let mut text = COUNTS_HEADER.to_string();
    for (n, &b) in betas.iter().enumerate() {
        block_rows(&mut text, "s", "f", "e", &format!("l{}", n + 1), &log_linear_counts(rho.matrix(), b, scale));
    }
    text.push_str(extra);
    let input = dir.path().join("counts.csv");
    write(&input, &text);
    SeverityCase {
        dir,
        labels,
        input,
        rho: rho_path,
    }
}

fn severity(case: &SeverityCase, levels: &str, extra: &[&str]) -> (std::process::Output, std::path::PathBuf) {
    let out = case.dir.path().join("sev");
    let mut args = vec![
        "severity",
        "--labels",
        s(&case.labels),
        "--input",
        s(&case.input),
        "--rho",
        s(&case.rho),
        "--experiment",
        "e",
        "--levels",
        levels,
        "--out",
        s(&out),
    ];
    args.extend_from_slice(extra);
    (rdsig(&args), out)
}

#[test]
fn severity_recovers_constructed_slopes() {
    let case = severity_case(&[1.0, 2.0, 3.0], 1e13, "");
    let (o, out) = severity(&case, "l1,l2,l3", &["--svg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_csv(&out.join("severity.csv"));
    let betas: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    for (b, want) in betas.iter().zip([-1.0, -2.0, -3.0]) {
        assert!((b - want).abs() < 1e-6, "{b} vs {want}");
    }
    let levels: Vec<&str> = rows.iter().map(|r| r.get(3).unwrap()).collect();
    assert_eq!(levels, ["l1", "l2", "l3"]);
    assert_eq!(read_csv(&out.join("severity_plot.csv")).len(), 3);
}

#[test]
fn single_level_still_plots() {
    let case = severity_case(&[1.0, 2.0], 1e6, "");
    let (o, out) = severity(&case, "l2", &["--svg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(out.join("severity.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("l2") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(read_csv(&out.join("severity.csv")).len(), 1);
}

#[test]
fn severity_zero_cells_are_flagged() {
    let case = severity_case(&[1.0], 1e6, "s,f,e,l2,dog,dog,10\ns,f,e,l2,dog,cat,3\ns,f,e,l2,cat,cat,9\ns,f,e,l2,cat,car,2\n");
    let (o, out) = severity(&case, "l1,l2", &["--alpha", "0"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let rows = read_csv(&out.join("severity.csv"));
    assert_eq!(&rows[0][5], "");
    assert!(rows[1][5].contains("zero_cells") || rows[1][5].contains("zero_alpha_fallback"));
}

#[test]
fn severity_input_errors() {
    let case = severity_case(&[1.0, 2.0], 1e6, "");
    let (o, _) = severity(&case, "l1,l9", &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("l9"));
    let out = case.dir.path().join("sev2");
    let o = rdsig(&[
        "severity",
        "--labels",
        s(&case.labels),
        "--input",
        s(&case.input),
        "--rho",
        s(&case.rho),
        "--experiment",
        "other",
        "--levels",
        "l1",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn report_writes_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tmp.path());
    let o = rdsig(&["synth", "--spec", s(&fixture("synth.json")), "--out", s(&p.synth)]);
    assert_eq!(code(&o), 0);
    let labels = p.labels();
    let counts = p.synth.join("counts.csv");
    let o = rdsig(&["fit", "--labels", s(&labels), "--input", s(&counts), "--out", s(&p.fit), "--no-stderr", "--grouping", "condition"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = tmp.path().join("report");
    let o = rdsig(&["report", "--labels", s(&labels), "--input", s(&counts), "--fits", s(&p.fit), "--out", s(&rep)]);
    assert!(code(&o) == 0 || code(&o) == 2, "{}", stderr(&o));
    let diag = rep.join("diagnostics.csv");
    let rows = read_csv(&diag);
    assert_eq!(rows.len(), 24);
    let col = column(&diag, "rmse_conf_prob");
    for r in &rows {
        let v: f64 = r[col].parse().unwrap();
        assert!((0.0..0.02).contains(&v), "{v}");
    }
    assert!(rep.join("family_summary.csv").is_file());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tmp.path());
    let o = rdsig(&["synth", "--spec", s(&fixture("synth.json")), "--out", s(&p.synth)]);
    assert_eq!(code(&o), 0);
    let labels = p.labels();
    let counts = p.synth.join("counts.csv");
    let mut snaps = Vec::new();
    for threads in ["1", "4"] {
        let out = tmp.path().join(format!("fit{threads}"));
        let o = rdsig(&[
            "fit", "--labels", s(&labels), "--input", s(&counts), "--out", s(&out), "--threads", threads,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let mut snap = snapshot(&out);
        snap.remove(Path::new("config.lock.json"));
        snaps.push(snap);
    }
    assert_eq!(snaps[0], snaps[1]);
}
