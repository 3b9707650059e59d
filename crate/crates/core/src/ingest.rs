//! Label sets, trial/count CSV ingestion and per-block aggregation.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered set of K ≥ 2 distinct class names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::Labels(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() {
                return Err(Error::Labels(format!("empty label at position {i}")));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Labels(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    /// Parses a labels file: one label per line, blank lines ignored.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(|l| l.trim_end_matches('\r').trim())
                .filter(|l| !l.is_empty()),
        )
    }

    /// Labels `c0..c{k-1}`; used by synthetic fixtures.
    pub fn numbered(k: usize) -> Result<Self> {
        Self::new((0..k).map(|i| format!("c{i}")))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.labels {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

/// Experiment × condition pair shared by all systems evaluated on the same stimuli.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockKey {
    pub experiment: String,
    pub condition: String,
}

/// Full identity of one confusion matrix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockRef {
    pub system: String,
    pub family: String,
    pub experiment: String,
    pub condition: String,
}

impl BlockRef {
    pub fn block(&self) -> BlockKey {
        BlockKey {
            experiment: self.experiment.clone(),
            condition: self.condition.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub key: BlockRef,
    pub true_class: usize,
    pub response_class: usize,
    pub count: u64,
}

/// K×K count matrix; row = true class, column = response.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionCounts {
    pub key: BlockRef,
    pub counts: DMatrix<u64>,
    pub labels: LabelSet,
}

impl ConfusionCounts {
    pub fn new(key: BlockRef, counts: DMatrix<u64>, labels: LabelSet) -> Result<Self> {
        let k = labels.len();
        if counts.nrows() != k || counts.ncols() != k {
            return Err(Error::Dimension {
                expected: k,
                got: counts.nrows().max(counts.ncols()),
            });
        }
        let c = Self {
            key,
            counts,
            labels,
        };
        if c.total() == 0 {
            return Err(Error::Input("confusion matrix has no counts".into()));
        }
        Ok(c)
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts.row(i).iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.k()).map(|i| self.row_sum(i)).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn supported_rows(&self) -> usize {
        self.row_sums().iter().filter(|&&s| s > 0).count()
    }

    pub fn transpose(&self) -> Self {
        Self {
            key: self.key.clone(),
            counts: self.counts.transpose(),
            labels: self.labels.clone(),
        }
    }

    /// Sum of several matrices over the same label set; the key is taken from `key`.
    pub fn pooled<'a, I>(key: BlockRef, parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ConfusionCounts>,
    {
        let mut it = parts.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Input("nothing to pool".into()))?;
        let mut counts = first.counts.clone();
        for c in it {
            if c.labels != first.labels {
                return Err(Error::Labels("pooled matrices use different label sets".into()));
            }
            counts += &c.counts;
        }
        Self::new(key, counts, first.labels.clone())
    }
}

const REQUIRED_COLUMNS: [&str; 6] = [
    "system",
    "family",
    "experiment",
    "condition",
    "true_class",
    "response_class",
];

/// Reads a trial or counts CSV. The `count` column is optional and defaults to 1.
pub fn load_trials<R: Read>(source: R, labels: &LabelSet) -> Result<Vec<TrialRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let header = reader.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Input("empty file".into()));
    }
    let has_count = match header.len() {
        6 => false,
        7 => true,
        n => {
            return Err(Error::Row {
                row: 1,
                field: "header".into(),
                message: format!("expected 6 or 7 columns, found {n}"),
            })
        }
    };
    for (i, name) in REQUIRED_COLUMNS.iter().enumerate() {
        if &header[i] != *name {
            return Err(Error::Row {
                row: 1,
                field: "header".into(),
                message: format!("column {} must be {name:?}, found {:?}", i + 1, &header[i]),
            });
        }
    }
    if has_count && &header[6] != "count" {
        return Err(Error::Row {
            row: 1,
            field: "header".into(),
            message: format!("column 7 must be \"count\", found {:?}", &header[6]),
        });
    }

    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() != header.len() {
            return Err(Error::Row {
                row,
                field: "arity".into(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        let class = |col: usize| -> Result<usize> {
            labels.position(&rec[col]).ok_or_else(|| Error::Row {
                row,
                field: REQUIRED_COLUMNS[col].into(),
                message: format!("unknown label {:?}", &rec[col]),
            })
        };
        let true_class = class(4)?;
        let response_class = class(5)?;
        let count = if has_count {
            let raw = &rec[6];
            let c: u64 = raw.parse().map_err(|_| Error::Row {
                row,
                field: "count".into(),
                message: format!("not a non-negative integer: {raw:?}"),
            })?;
            if c == 0 {
                return Err(Error::Row {
                    row,
                    field: "count".into(),
                    message: "count must be at least 1".into(),
                });
            }
            c
        } else {
            1
        };
        out.push(TrialRecord {
            key: BlockRef {
                system: rec[0].to_string(),
                family: rec[1].to_string(),
                experiment: rec[2].to_string(),
                condition: rec[3].to_string(),
            },
            true_class,
            response_class,
            count,
        });
    }
    if out.is_empty() {
        return Err(Error::Input("no data rows".into()));
    }
    Ok(out)
}

/// Groups records by (system, family, experiment, condition) and sums counts per cell.
/// Output is ordered by key.
pub fn aggregate_counts(records: &[TrialRecord], labels: &LabelSet) -> Vec<ConfusionCounts> {
    let k = labels.len();
    let mut groups: BTreeMap<&BlockRef, DMatrix<u64>> = BTreeMap::new();
    for r in records {
        let m = groups
            .entry(&r.key)
            .or_insert_with(|| DMatrix::zeros(k, k));
        m[(r.true_class, r.response_class)] += r.count;
    }
    groups
        .into_iter()
        .map(|(key, counts)| ConfusionCounts {
            key: key.clone(),
            counts,
            labels: labels.clone(),
        })
        .collect()
}

/// Writes matrices in counts-CSV form: one row per nonzero cell.
pub fn write_counts_csv<W: Write>(sink: W, matrices: &[ConfusionCounts]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(REQUIRED_COLUMNS.iter().chain(std::iter::once(&"count")))?;
    for m in matrices {
        for i in 0..m.k() {
            for j in 0..m.k() {
                let c = m.counts[(i, j)];
                if c == 0 {
                    continue;
                }
                w.write_record([
                    m.key.system.as_str(),
                    m.key.family.as_str(),
                    m.key.experiment.as_str(),
                    m.key.condition.as_str(),
                    m.labels.label(i),
                    m.labels.label(j),
                    &c.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
