//! Append-only JSON-lines event log.
//!
//! Each line is `{"run": <u32>, "t_us": <u64>, "kind": "<KIND>", "data": {...}}`.
//! `run` numbers the simulations written to one log; each starts its clock
//! at zero. Object keys inside `data` are emitted in sorted order, so
//! identical runs give byte-identical files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    #[serde(default)]
    pub run: u32,
    pub t_us: u64,
    pub kind: String,
    pub data: Value,
}

#[derive(Clone, Debug, Default)]
pub struct EventLog {
    records: Vec<LogRecord>,
    enabled: bool,
    run: u32,
    started: bool,
}

impl EventLog {
    pub fn new() -> Self {
        EventLog {
            enabled: true,
            ..Default::default()
        }
    }

    /// A log that drops every record; used for bulk trials.
    pub fn disabled() -> Self {
        EventLog::default()
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Starts a new simulation segment. The first call is a no-op.
    pub fn begin_run(&mut self) {
        if self.started {
            self.run += 1;
        }
        self.started = true;
    }

    pub fn current_run(&self) -> u32 {
        self.run
    }

    pub fn push(&mut self, at: SimTime, kind: &str, data: Value) {
        if self.enabled {
            self.records.push(LogRecord {
                run: self.run,
                t_us: at.as_micros(),
                kind: kind.to_string(),
                data,
            });
        }
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stable-sorts by run, then timestamp. Sub-simulations may append records
    /// out of time order; records with equal keys keep insertion order.
    pub fn finish(&mut self) {
        self.records.sort_by_key(|r| (r.run, r.t_us));
    }

    /// Timestamps never decrease within a run.
    pub fn is_time_ordered(&self) -> bool {
        self.records
            .windows(2)
            .all(|w| (w[0].run, w[0].t_us) <= (w[1].run, w[1].t_us))
    }

    pub fn records_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl().as_bytes())?;
        f.flush()
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<LogRecord>, serde_json::Error> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn jsonl_round_trip_and_order() {
        let mut log = EventLog::new();
        log.push(SimTime(5), "B", json!({"z": 1, "a": 2}));
        log.push(SimTime(1), "A", json!({}));
        assert!(!log.is_time_ordered());
        log.finish();
        assert!(log.is_time_ordered());
        let text = log.to_jsonl();
        assert!(text.starts_with(r#"{"run":0,"t_us":1,"kind":"A","data":{}}"#));
        assert!(text.contains(r#""data":{"a":2,"z":1}"#));
        assert_eq!(EventLog::parse_jsonl(&text).unwrap(), log.records());
    }

    #[test]
    fn runs_order_before_time() {
        let mut log = EventLog::new();
        log.begin_run();
        log.push(SimTime(9), "A", json!({}));
        log.begin_run();
        log.push(SimTime(1), "B", json!({}));
        log.finish();
        assert!(log.is_time_ordered());
        assert_eq!(log.records()[1].run, 1);
        assert_eq!(log.records()[1].kind, "B");
    }

    #[test]
    fn disabled_log_drops_records() {
        let mut log = EventLog::disabled();
        log.push(SimTime(1), "A", json!({}));
        assert!(log.is_empty());
    }
}
