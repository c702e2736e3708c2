use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_text, write_file};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        stage: String,
        epoch: usize,
        step: usize,
        losses: BTreeMap<String, f64>,
    },
    Epoch {
        stage: String,
        epoch: usize,
        metrics: BTreeMap<String, f64>,
    },
}

/// Append-only training log. Wall-clock seconds are kept apart from the
/// records so that the JSON-lines file is a pure function of config and seed.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    records: Vec<LogRecord>,
    pub timings: BTreeMap<String, f64>,
}

fn to_map(values: &[(&str, f64)]) -> BTreeMap<String, f64> {
    values.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, stage: &str, epoch: usize, step: usize, losses: &[(&str, f64)]) {
        self.records.push(LogRecord::Step {
            stage: stage.into(),
            epoch,
            step,
            losses: to_map(losses),
        });
    }

    pub fn epoch(&mut self, stage: &str, epoch: usize, metrics: &[(&str, f64)]) {
        self.records.push(LogRecord::Epoch {
            stage: stage.into(),
            epoch,
            metrics: to_map(metrics),
        });
    }

    pub fn add_time(&mut self, stage: &str, seconds: f64) {
        *self.timings.entry(stage.into()).or_default() += seconds;
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
        for (k, v) in other.timings {
            *self.timings.entry(k).or_default() += v;
        }
    }

    /// Loss maps of every step record of `stage`, in order.
    pub fn steps<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a BTreeMap<String, f64>> + 'a {
        self.records.iter().filter_map(move |r| match r {
            LogRecord::Step { stage: s, losses, .. } if s == stage => Some(losses),
            _ => None,
        })
    }

    /// Metric maps of every epoch record of `stage`, in order.
    pub fn epochs<'a>(&'a self, stage: &'a str) -> impl Iterator<Item = &'a BTreeMap<String, f64>> + 'a {
        self.records.iter().filter_map(move |r| match r {
            LogRecord::Epoch { stage: s, metrics, .. } if s == stage => Some(metrics),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            writeln!(s, "{}", serde_json::to_string(r).expect("log records serialize")).unwrap();
        }
        s
    }

    /// Writes `path` (JSON lines) and `path.timing.json`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_jsonl().as_bytes())?;
        let mut timing = path.as_os_str().to_owned();
        timing.push(".timing.json");
        let json = serde_json::to_string_pretty(&self.timings).expect("timings serialize");
        write_file(Path::new(&timing), json.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let records = read_text(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self {
            records,
            timings: BTreeMap::new(),
        })
    }
}
