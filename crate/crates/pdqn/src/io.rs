//! File formats: trace, summary and seed CSVs, and abort snapshots.
//!
//! Every CSV starts with a `#` line naming its schema and version, then a
//! column header.
//!
//! | schema           | columns |
//! |------------------|---------|
//! | `pdqn-trace v1`  | `iteration,error,consensus_residual,exchanges,update_norm`, then with diagnostics `sigma_norm,lyapunov_before,lyapunov_after,kappa,primal_margin,dual_margin,range_defect` |
//! | `pdqn-summary v1`| see [`SummaryRow`] |
//! | `pdqn-seeds v1`  | see [`SeedRow`] |
//!
//! `exchanges` counts synchronous rounds per node. Multiply by the node
//! degree to count directed messages sent.
//!
//! Floats are written in shortest round-trip form, so parsing a written
//! file gives back the exact values.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use pdqn_core::simulator::{ConvergenceTrace, Snapshot};
use serde::{Deserialize, Serialize};

pub const TRACE_SCHEMA: &str = "pdqn-trace v1";
pub const SUMMARY_SCHEMA: &str = "pdqn-summary v1";
pub const SEEDS_SCHEMA: &str = "pdqn-seeds v1";

const BASE_COLUMNS: [&str; 5] = ["iteration", "error", "consensus_residual", "exchanges", "update_norm"];
const DIAG_COLUMNS: [&str; 7] = [
    "sigma_norm",
    "lyapunov_before",
    "lyapunov_after",
    "kappa",
    "primal_margin",
    "dual_margin",
    "range_defect",
];

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("missing or unknown schema line (expected {expected:?}, got {got:?})")]
    Schema { expected: &'static str, got: String },
    #[error("bad metadata: {0}")]
    Meta(String),
    #[error("unexpected columns: {0}")]
    Columns(String),
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceMetaLine {
    pub label: String,
    pub seed: u64,
    pub problem_digest: u64,
    /// The algorithm configuration as one-line JSON.
    pub config: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagColumns {
    pub sigma_norm: f64,
    pub lyapunov_before: f64,
    pub lyapunov_after: f64,
    pub kappa: f64,
    pub primal_margin: f64,
    pub dual_margin: f64,
    pub range_defect: f64,
}

impl DiagColumns {
    fn values(&self) -> [f64; 7] {
        [
            self.sigma_norm,
            self.lyapunov_before,
            self.lyapunov_after,
            self.kappa,
            self.primal_margin,
            self.dual_margin,
            self.range_defect,
        ]
    }

    fn from_values(v: &[f64]) -> Self {
        Self {
            sigma_norm: v[0],
            lyapunov_before: v[1],
            lyapunov_after: v[2],
            kappa: v[3],
            primal_margin: v[4],
            dual_margin: v[5],
            range_defect: v[6],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub error: f64,
    pub consensus_residual: f64,
    pub exchanges: usize,
    pub update_norm: f64,
    pub diagnostics: Option<DiagColumns>,
}

/// The CSV view of a convergence trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceTable {
    pub meta: TraceMetaLine,
    pub with_diagnostics: bool,
    pub rows: Vec<TraceRecord>,
}

impl TraceTable {
    pub fn from_trace(trace: &ConvergenceTrace) -> Self {
        let with_diagnostics = trace.rows.iter().any(|r| r.diagnostics.is_some());
        let rows = trace
            .rows
            .iter()
            .map(|r| TraceRecord {
                iteration: r.iteration,
                error: r.error,
                consensus_residual: r.consensus_residual,
                exchanges: r.exchanges,
                update_norm: r.update_norm,
                diagnostics: r.diagnostics.as_ref().map(|d| DiagColumns {
                    sigma_norm: d.sigma_norm,
                    lyapunov_before: d.lyapunov_before,
                    lyapunov_after: d.lyapunov_after,
                    kappa: d.kappa,
                    primal_margin: d.primal_inverse.margin(),
                    dual_margin: d.dual_inverse.margin(),
                    range_defect: d.range_defect,
                }),
            })
            .collect();
        Self {
            meta: TraceMetaLine {
                label: trace.meta.label.clone(),
                seed: trace.meta.seed,
                problem_digest: trace.meta.problem_digest,
                config: trace.meta.config.clone(),
            },
            with_diagnostics,
            rows,
        }
    }

    pub fn errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.error).collect()
    }

    pub fn first_below(&self, threshold: f64) -> Option<&TraceRecord> {
        self.rows.iter().find(|r| r.error <= threshold)
    }

    pub fn to_csv(&self) -> String {
        let m = &self.meta;
        let mut s = format!(
            "# {TRACE_SCHEMA} label={} seed={} problem_digest={:016x} config={}\n",
            m.label, m.seed, m.problem_digest, m.config
        );
        s.push_str(&BASE_COLUMNS.join(","));
        if self.with_diagnostics {
            s.push(',');
            s.push_str(&DIAG_COLUMNS.join(","));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{:e},{:e},{},{:e}",
                r.iteration, r.error, r.consensus_residual, r.exchanges, r.update_norm
            );
            if self.with_diagnostics {
                let vals = r.diagnostics.map_or([f64::NAN; 7], |d| d.values());
                for v in vals {
                    let _ = write!(s, ",{v:e}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let (first, body) = text.split_once('\n').unwrap_or((text, ""));
        let meta = parse_trace_meta(first)?;
        let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let base: Vec<String> = BASE_COLUMNS.iter().map(|c| c.to_string()).collect();
        let full: Vec<String> = BASE_COLUMNS.iter().chain(DIAG_COLUMNS.iter()).map(|c| c.to_string()).collect();
        let with_diagnostics = if headers == base {
            false
        } else if headers == full {
            true
        } else {
            return Err(FormatError::Columns(headers.join(",")));
        };
        let mut rows = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 3;
            let bad = |message: String| FormatError::Row { line, message };
            let f = |i: usize| -> Result<f64, FormatError> {
                rec.get(i)
                    .ok_or_else(|| bad(format!("missing column {i}")))?
                    .parse::<f64>()
                    .map_err(|e| bad(format!("column {i}: {e}")))
            };
            let u = |i: usize| -> Result<usize, FormatError> {
                rec.get(i)
                    .ok_or_else(|| bad(format!("missing column {i}")))?
                    .parse::<usize>()
                    .map_err(|e| bad(format!("column {i}: {e}")))
            };
            let diagnostics = if with_diagnostics {
                let vals = (5..12).map(f).collect::<Result<Vec<_>, _>>()?;
                (!vals.iter().all(|v| v.is_nan())).then(|| DiagColumns::from_values(&vals))
            } else {
                None
            };
            rows.push(TraceRecord {
                iteration: u(0)?,
                error: f(1)?,
                consensus_residual: f(2)?,
                exchanges: u(3)?,
                update_norm: f(4)?,
                diagnostics,
            });
        }
        Ok(Self {
            meta,
            with_diagnostics,
            rows,
        })
    }
}

fn schema_body<'a>(line: &'a str, schema: &'static str) -> Result<&'a str, FormatError> {
    line.strip_prefix("# ")
        .and_then(|l| l.strip_prefix(schema))
        .ok_or_else(|| FormatError::Schema {
            expected: schema,
            got: line.to_string(),
        })
        .map(str::trim_start)
}

fn parse_trace_meta(line: &str) -> Result<TraceMetaLine, FormatError> {
    let rest = schema_body(line, TRACE_SCHEMA)?;
    let (head, config) = rest
        .split_once("config=")
        .ok_or_else(|| FormatError::Meta("missing config".into()))?;
    let mut meta = TraceMetaLine {
        config: config.to_string(),
        ..TraceMetaLine::default()
    };
    for kv in head.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| FormatError::Meta(kv.to_string()))?;
        match k {
            "label" => meta.label = v.to_string(),
            "seed" => meta.seed = v.parse().map_err(|_| FormatError::Meta(kv.to_string()))?,
            "problem_digest" => {
                meta.problem_digest = u64::from_str_radix(v, 16).map_err(|_| FormatError::Meta(kv.to_string()))?
            }
            _ => return Err(FormatError::Meta(format!("unknown key {k}"))),
        }
    }
    Ok(meta)
}

/// One line of a run, compare or sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// Sweep cell, e.g. `eta=1`; empty outside sweeps.
    pub cell: String,
    pub label: String,
    pub variant: String,
    pub threshold: f64,
    pub iterations: Option<usize>,
    pub exchanges: Option<usize>,
    pub final_error: f64,
    pub alpha: f64,
    pub eps_d: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub primal_step: f64,
    /// `ok`, or the failure that ended the cell.
    pub status: String,
}

fn write_rows<T: Serialize>(schema: &str, meta: &str, rows: &[T], headers: &[&str]) -> Result<String, FormatError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(headers)?;
    for r in rows {
        w.serialize(r)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| FormatError::Io(e.into_error()))?)
        .expect("csv output is utf-8");
    let sep = if meta.is_empty() { "" } else { " " };
    Ok(format!("# {schema}{sep}{meta}\n{body}"))
}

fn read_rows<T: for<'de> Deserialize<'de>>(body: &str) -> Result<Vec<T>, FormatError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    rdr.deserialize().map(|r| r.map_err(FormatError::from)).collect()
}

const SUMMARY_HEADERS: [&str; 12] = [
    "cell",
    "label",
    "variant",
    "threshold",
    "iterations",
    "exchanges",
    "final_error",
    "alpha",
    "eps_d",
    "K",
    "primal_step",
    "status",
];

pub fn summary_to_csv(rows: &[SummaryRow]) -> Result<String, FormatError> {
    write_rows(SUMMARY_SCHEMA, "", rows, &SUMMARY_HEADERS)
}

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>, FormatError> {
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    schema_body(first, SUMMARY_SCHEMA)?;
    read_rows(body)
}

/// One trial of a seed sweep; `exchanges` is empty for censored trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub label: String,
    pub seed: u64,
    pub iterations: Option<usize>,
    pub exchanges: Option<usize>,
    pub failure: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedTable {
    pub threshold: f64,
    pub budget: usize,
    pub rows: Vec<SeedRow>,
}

const SEED_HEADERS: [&str; 5] = ["label", "seed", "iterations", "exchanges", "failure"];

impl SeedTable {
    pub fn to_csv(&self) -> Result<String, FormatError> {
        write_rows(
            SEEDS_SCHEMA,
            &format!("threshold={:e} budget={}", self.threshold, self.budget),
            &self.rows,
            &SEED_HEADERS,
        )
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let (first, body) = text.split_once('\n').unwrap_or((text, ""));
        let rest = schema_body(first, SEEDS_SCHEMA)?;
        let (mut threshold, mut budget) = (None, None);
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("threshold", v)) => threshold = v.parse().ok(),
                Some(("budget", v)) => budget = v.parse().ok(),
                _ => return Err(FormatError::Meta(kv.to_string())),
            }
        }
        Ok(Self {
            threshold: threshold.ok_or_else(|| FormatError::Meta("missing threshold".into()))?,
            budget: budget.ok_or_else(|| FormatError::Meta("missing budget".into()))?,
            rows: read_rows(body)?,
        })
    }

    /// Labels in first-appearance order.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }
}

/// Iterates at the moment a run aborted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotFile {
    pub label: String,
    pub reason: String,
    pub iteration: usize,
    pub n: usize,
    pub p: usize,
    /// Node-major stacked iterates; non-finite entries are strings.
    #[serde(with = "lossless")]
    pub x: Vec<f64>,
    #[serde(with = "lossless")]
    pub y: Vec<f64>,
}

mod lossless {
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};
    use serde_json::Value;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|&x| {
                if x.is_finite() {
                    Value::from(x)
                } else {
                    Value::String(x.to_string())
                }
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Value>::deserialize(d)?
            .into_iter()
            .map(|v| match v {
                Value::Number(n) => n.as_f64().ok_or_else(|| D::Error::custom("number out of range")),
                Value::String(s) => s.parse().map_err(D::Error::custom),
                other => Err(D::Error::custom(format!("expected a number, got {other}"))),
            })
            .collect()
    }
}

impl SnapshotFile {
    pub fn new(label: &str, reason: &str, s: &Snapshot) -> Self {
        Self {
            label: label.to_string(),
            reason: reason.to_string(),
            iteration: s.iteration,
            n: s.x.n(),
            p: s.x.p(),
            x: s.x.as_slice().to_vec(),
            y: s.y.as_slice().to_vec(),
        }
    }
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}
