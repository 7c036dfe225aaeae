use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One experiment row. Field order is the export order for both formats.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub experiment: String,
    pub seed: u64,
    pub committee_n: u64,
    pub distance_km: Option<f64>,
    pub link: Option<String>,
    pub duration_s: f64,
    pub traffic_kbps: f64,
    pub rate_bps: Option<f64>,
    pub demand_bps: Option<f64>,
    pub sustainable: Option<bool>,
    pub bits_generated: u64,
    /// One-time-pad bits drawn for payloads.
    pub bits_consumed: u64,
    /// MAC key bits drawn alongside the pads.
    pub mac_key_bits: u64,
    /// `bits_generated / bits_consumed`.
    pub surplus_ratio: Option<f64>,
    /// `bits_generated / (bits_consumed + mac_key_bits)`.
    pub key_surplus_ratio: Option<f64>,
    pub packets_sent: u64,
    pub missed_packets: u64,
    pub utilization_pct: f64,
    pub sealed_messages: u64,
    pub overlapping_ranges: u64,
    pub conservation_checks: u64,
    pub conservation_violations: u64,
    pub rounds_attempted: u64,
    pub rounds_finalized: u64,
    pub per_round_latency_s: Option<f64>,
    pub crypto_overhead_s: Option<f64>,
    pub end_to_end_latency_s: Option<f64>,
    pub proof_bundle_bytes: Option<u64>,
}

impl Metrics {
    /// Fills the ratio fields from the bit counters.
    pub fn derive_ratios(&mut self) {
        self.surplus_ratio =
            (self.bits_consumed > 0).then(|| self.bits_generated as f64 / self.bits_consumed as f64);
        let key = self.bits_consumed + self.mac_key_bits;
        self.key_surplus_ratio = (key > 0).then(|| self.bits_generated as f64 / key as f64);
        self.utilization_pct = if self.packets_sent == 0 {
            100.0
        } else {
            100.0 * (self.packets_sent - self.missed_packets) as f64 / self.packets_sent as f64
        };
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Json,
    Csv,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Column names in export order.
pub fn csv_header() -> Vec<&'static str> {
    vec![
        "experiment", "seed", "committee_n", "distance_km", "link", "duration_s", "traffic_kbps",
        "rate_bps", "demand_bps", "sustainable", "bits_generated", "bits_consumed", "mac_key_bits",
        "surplus_ratio", "key_surplus_ratio", "packets_sent", "missed_packets", "utilization_pct",
        "sealed_messages", "overlapping_ranges", "conservation_checks", "conservation_violations",
        "rounds_attempted", "rounds_finalized", "per_round_latency_s", "crypto_overhead_s",
        "end_to_end_latency_s", "proof_bundle_bytes",
    ]
}

pub fn metrics_to_csv(rows: &[Metrics]) -> Result<String, ExportError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(csv_header())?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<Metrics>, ExportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn metrics_to_json(rows: &[Metrics]) -> Result<String, ExportError> {
    let mut s = serde_json::to_string_pretty(rows)?;
    s.push('\n');
    Ok(s)
}

pub fn metrics_from_json(text: &str) -> Result<Vec<Metrics>, ExportError> {
    Ok(serde_json::from_str(text)?)
}

pub fn render_metrics(rows: &[Metrics], format: ExportFormat) -> Result<String, ExportError> {
    match format {
        ExportFormat::Json => metrics_to_json(rows),
        ExportFormat::Csv => metrics_to_csv(rows),
    }
}

pub fn export_metrics(rows: &[Metrics], format: ExportFormat, path: &Path) -> Result<(), ExportError> {
    std::fs::write(path, render_metrics(rows, format)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(i: u64) -> Metrics {
        let mut m = Metrics {
            experiment: "keyrate".into(),
            seed: i,
            distance_km: Some(5.0 * i as f64),
            duration_s: 50.0,
            traffic_kbps: 20.0,
            bits_generated: 655_000_000 / (i + 1),
            bits_consumed: 999_500,
            mac_key_bits: 511_744,
            packets_sent: 2000,
            missed_packets: 1,
            sustainable: Some(i.is_multiple_of(2)),
            ..Default::default()
        };
        m.derive_ratios();
        m
    }

    #[test]
    fn csv_header_matches_fields() {
        let v = serde_json::to_value(Metrics::default()).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        let mut header: Vec<_> = csv_header().into_iter().map(String::from).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        header.sort();
        assert_eq!(sorted, header);
    }

    #[test]
    fn empty_list_is_header_only() {
        let s = metrics_to_csv(&[]).unwrap();
        assert_eq!(s.lines().count(), 1);
        assert!(s.starts_with("experiment,seed,committee_n,"));
        assert!(metrics_from_csv(&s).unwrap().is_empty());
    }

    #[test]
    fn round_trips() {
        let rows: Vec<_> = (0..3).map(sample).collect();
        let csv = metrics_to_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(metrics_from_csv(&csv).unwrap(), rows);
        let json = metrics_to_json(&rows).unwrap();
        assert_eq!(metrics_from_json(&json).unwrap(), rows);
    }

    #[test]
    fn ratios() {
        let m = sample(0);
        assert!((m.surplus_ratio.unwrap() - 655_000_000.0 / 999_500.0).abs() < 1e-9);
        assert!((m.utilization_pct - 99.95).abs() < 1e-9);
        let mut z = Metrics::default();
        z.derive_ratios();
        assert_eq!(z.surplus_ratio, None);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = export_metrics(&[], ExportFormat::Csv, Path::new("/nonexistent-dir/x.csv")).unwrap_err();
        assert!(matches!(err, ExportError::Io(_)));
    }
}
