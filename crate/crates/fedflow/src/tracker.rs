//! Metric collection, persistence as newline-delimited JSON, and summaries.
//!
//! Each line of a metric file is one object with the fields `task_id`,
//! `round_index`, `scope`, `name`, `value`, `wall_time`, in that order.
//! `scope` is `server`, `client:<id>` or `cluster:<id>`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("metric `{name}` has non-finite value {value}")]
    NonFinite { name: String, value: f64 },
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Server,
    Client(usize),
    Cluster(usize),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Server => f.write_str("server"),
            Scope::Client(id) => write!(f, "client:{id}"),
            Scope::Cluster(id) => write!(f, "cluster:{id}"),
        }
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "server" {
            return Ok(Scope::Server);
        }
        let parse = |rest: &str| rest.parse::<usize>().map_err(|_| format!("bad scope `{s}`"));
        match s.split_once(':') {
            Some(("client", id)) => parse(id).map(Scope::Client),
            Some(("cluster", id)) => parse(id).map(Scope::Cluster),
            _ => Err(format!("bad scope `{s}`")),
        }
    }
}

impl Serialize for Scope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub task_id: String,
    pub round_index: u64,
    pub scope: Scope,
    pub name: String,
    pub value: f64,
    /// Seconds since the tracker was created.
    pub wall_time: f64,
}

impl MetricRecord {
    pub fn new(task_id: impl Into<String>, round_index: u64, scope: Scope, name: impl Into<String>, value: f64) -> Self {
        Self {
            task_id: task_id.into(),
            round_index,
            scope,
            name: name.into(),
            value,
            wall_time: 0.0,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

/// Lower is better for losses; higher for everything else.
pub fn lower_is_better(name: &str) -> bool {
    name.contains("loss")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub best: f64,
    pub best_round: u64,
    pub final_value: f64,
    pub final_round: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub metrics: BTreeMap<(Scope, String), MetricSummary>,
    /// Sum of every `comm_bytes_*` record.
    pub total_bytes: f64,
    pub wall_time: f64,
    /// Rounds in which each client was selected.
    pub selection_counts: BTreeMap<usize, u64>,
}

impl Summary {
    pub fn get(&self, scope: Scope, name: &str) -> Option<&MetricSummary> {
        self.metrics.get(&(scope, name.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("scope\tmetric\tbest\tbest_round\tfinal\tfinal_round\tcount\n");
        for ((scope, name), m) in &self.metrics {
            out.push_str(&format!(
                "{scope}\t{name}\t{}\t{}\t{}\t{}\t{}\n",
                m.best, m.best_round, m.final_value, m.final_round, m.count
            ));
        }
        out.push_str(&format!("total_bytes\t{}\nwall_time\t{:.3}\n", self.total_bytes, self.wall_time));
        out.push_str("client\tselected\n");
        for (id, n) in &self.selection_counts {
            out.push_str(&format!("{id}\t{n}\n"));
        }
        out
    }
}

/// Summarizes the records of one task, in stream order.
pub fn summarize_records(records: &[MetricRecord], task_id: &str) -> Summary {
    let mut s = Summary::default();
    for r in records.iter().filter(|r| r.task_id == task_id) {
        s.wall_time = s.wall_time.max(r.wall_time);
        if r.name.starts_with("comm_bytes") {
            s.total_bytes += r.value;
        }
        if let (Scope::Client(id), "selected") = (r.scope, r.name.as_str()) {
            *s.selection_counts.entry(id).or_default() += 1;
        }
        let lower = lower_is_better(&r.name);
        s.metrics
            .entry((r.scope, r.name.clone()))
            .and_modify(|m| {
                let better = if lower { r.value < m.best } else { r.value > m.best };
                if better {
                    m.best = r.value;
                    m.best_round = r.round_index;
                }
                m.final_value = r.value;
                m.final_round = r.round_index;
                m.count += 1;
            })
            .or_insert(MetricSummary {
                best: r.value,
                best_round: r.round_index,
                final_value: r.value,
                final_round: r.round_index,
                count: 1,
            });
    }
    s
}

/// Parses a metric file.
pub fn import(path: &Path) -> Result<Vec<MetricRecord>, TrackerError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TrackerError::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

struct Inner {
    records: Vec<MetricRecord>,
    sink: Option<File>,
}

/// Append-only metric store; safe to share between threads.
pub struct Tracker {
    inner: Mutex<Inner>,
    started: Instant,
}

impl Default for Tracker {
    fn default() -> Self {
        Self::new()
    }
}

impl Tracker {
    /// In-memory tracker.
    pub fn new() -> Self {
        Self {
            inner: Mutex::new(Inner {
                records: Vec::new(),
                sink: None,
            }),
            started: Instant::now(),
        }
    }

    /// Tracker that also appends every record to `path`, creating or
    /// truncating it first.
    pub fn with_file(path: &Path) -> Result<Self, TrackerError> {
        let t = Self::new();
        t.inner.lock().unwrap().sink = Some(File::create(path)?);
        Ok(t)
    }

    pub fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    /// Appends a record as given.
    pub fn record(&self, r: MetricRecord) -> Result<(), TrackerError> {
        if !r.value.is_finite() {
            return Err(TrackerError::NonFinite {
                name: r.name,
                value: r.value,
            });
        }
        let mut inner = self.inner.lock().unwrap();
        if let Some(f) = inner.sink.as_mut() {
            let mut line = r.to_line();
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        inner.records.push(r);
        Ok(())
    }

    /// Appends a record stamped with the current wall time.
    pub fn log(&self, task_id: &str, round: u64, scope: Scope, name: &str, value: f64) -> Result<(), TrackerError> {
        let mut r = MetricRecord::new(task_id, round, scope, name, value);
        r.wall_time = self.elapsed();
        self.record(r)
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        self.inner.lock().unwrap().records.clone()
    }

    pub fn summarize(&self, task_id: &str) -> Summary {
        let inner = self.inner.lock().unwrap();
        summarize_records(&inner.records, task_id)
    }

    /// Writes the records of one task to `path`, one per line.
    pub fn export(&self, task_id: &str, path: &Path) -> Result<(), TrackerError> {
        let mut f = File::create(path)?;
        for r in self.records().iter().filter(|r| r.task_id == task_id) {
            writeln!(f, "{}", r.to_line())?;
        }
        f.flush()?;
        Ok(())
    }
}
