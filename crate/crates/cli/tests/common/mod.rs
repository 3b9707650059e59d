#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn rdsig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdsig"))
        .args(args)
        .output()
        .expect("spawn rdsig")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Output directories of one pipeline run.
pub struct Pipeline {
    pub synth: PathBuf,
    pub ingest: PathBuf,
    pub fit: PathBuf,
    pub trace: PathBuf,
    pub signatures: PathBuf,
    pub compare: PathBuf,
    pub severity: PathBuf,
}

impl Pipeline {
    pub fn new(root: &Path) -> Self {
        Self {
            synth: root.join("synth"),
            ingest: root.join("ingest"),
            fit: root.join("fit"),
            trace: root.join("trace"),
            signatures: root.join("signatures"),
            compare: root.join("compare"),
            severity: root.join("severity"),
        }
    }

    pub fn labels(&self) -> PathBuf {
        self.synth.join("labels.txt")
    }

    pub fn counts(&self) -> PathBuf {
        self.ingest.join("counts.csv")
    }

    /// Runs every stage on the shipped fixtures; returns (stage, output) pairs.
    pub fn run(&self) -> Vec<(&'static str, Output)> {
        let labels = self.labels();
        let counts = self.counts();
        let mut out = Vec::new();
        out.push((
            "synth",
            rdsig(&["synth", "--spec", s(&fixture("synth.json")), "--out", s(&self.synth)]),
        ));
        out.push((
            "ingest",
            rdsig(&[
                "ingest",
                "--labels",
                s(&labels),
                "--input",
                s(&self.synth.join("counts.csv")),
                "--out",
                s(&self.ingest),
            ]),
        ));
        let common = ["--labels", s(&labels), "--input", s(&counts)];
        let with = |cmd: &'static str, extra: &[&str], out_dir: &Path| {
            let mut args = vec![cmd];
            args.extend_from_slice(&common);
            args.extend_from_slice(extra);
            args.extend_from_slice(&["--out", s(out_dir)]);
            rdsig(&args)
        };
        out.push(("fit", with("fit", &[], &self.fit)));
        out.push(("trace", with("trace", &["--fits", s(&self.fit)], &self.trace)));
        out.push((
            "signatures",
            with("signatures", &["--fits", s(&self.fit)], &self.signatures),
        ));
        out.push((
            "compare",
            rdsig(&[
                "compare",
                "--signatures",
                s(&self.signatures.join("signatures.csv")),
                "--contrasts",
                s(&fixture("contrasts.json")),
                "--out",
                s(&self.compare),
            ]),
        ));
        out.push((
            "severity",
            with(
                "severity",
                &[
                    "--fits",
                    s(&self.fit),
                    "--experiment",
                    "noise",
                    "--levels",
                    "low,mid,high",
                    "--svg",
                ],
                &self.severity,
            ),
        ));
        out
    }

    pub fn dirs(&self) -> [&PathBuf; 7] {
        [
            &self.synth,
            &self.ingest,
            &self.fit,
            &self.trace,
            &self.signatures,
            &self.compare,
            &self.severity,
        ]
    }
}
