//! Per-round metrics records and the line-delimited JSON stream.
//!
//! The stream is fully determined by (config, seed): wall time stays in the
//! in-memory record but is never serialized, so reruns are byte-identical.

use crate::aggregation::AggregationRule;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Metrics schema version.
    pub v: u32,
    pub round: u64,
    pub rule: AggregationRule,
    /// Participating client ids, ascending.
    pub participants: Vec<u64>,
    /// Winning client for selection rules (Krum).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub selected_client: Option<u64>,
    /// Kept-set size per coordinate for trimming rules.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kept_per_coordinate: Option<usize>,
    pub attack_active: bool,
    pub colluders_active: usize,
    /// Clients that aborted this round (NaN or attack failure).
    pub aborted_clients: Vec<u64>,
    /// True when aggregation could not run and the round left the global
    /// model unchanged.
    pub skipped: bool,
    /// Squared L2 distance of the malicious submission to the mean of the
    /// honest updates (attack rounds only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub malicious_l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clean_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clean_acc_client_avg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_acc_pgd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_acc_logit_scaled: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_acc_transfer: Option<f64>,
    /// Wall-clock round time; excluded from the metrics stream so reruns
    /// byte-compare equal.
    #[serde(skip)]
    pub wall_ms: u64,
}

impl RoundRecord {
    pub fn has_eval(&self) -> bool {
        self.clean_acc.is_some()
    }

    /// (metric name, value) pairs present on this record, in a fixed order.
    pub fn metric_values(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        let mut push = |name, v: Option<f64>| {
            if let Some(v) = v {
                out.push((name, v));
            }
        };
        push("clean_acc", self.clean_acc);
        push("clean_acc_client_avg", self.clean_acc_client_avg);
        push("adv_acc_pgd", self.adv_acc_pgd);
        push("adv_acc_logit_scaled", self.adv_acc_logit_scaled);
        push("adv_acc_transfer", self.adv_acc_transfer);
        out
    }
}

/// Append one record as a JSON line.
pub fn write_record(w: &mut impl Write, record: &RoundRecord) -> std::io::Result<()> {
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(w, "{line}")
}

/// Parse a metrics stream, enforcing the schema version.
pub fn read_records(text: &str) -> Result<Vec<RoundRecord>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RoundRecord = serde_json::from_str(line)
            .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        if rec.v != METRICS_SCHEMA_VERSION {
            return Err(format!(
                "line {}: schema version {} (expected {METRICS_SCHEMA_VERSION})",
                lineno + 1,
                rec.v
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: u64) -> RoundRecord {
        RoundRecord {
            v: METRICS_SCHEMA_VERSION,
            round,
            rule: AggregationRule::Fedavg,
            participants: vec![0, 1],
            selected_client: None,
            kept_per_coordinate: None,
            attack_active: false,
            colluders_active: 0,
            aborted_clients: vec![],
            skipped: false,
            malicious_l2: None,
            clean_acc: Some(0.5),
            clean_acc_client_avg: None,
            adv_acc_pgd: Some(0.25),
            adv_acc_logit_scaled: None,
            adv_acc_transfer: None,
            wall_ms: 12345,
        }
    }

    #[test]
    fn wall_time_never_reaches_the_stream() {
        let mut buf = Vec::new();
        write_record(&mut buf, &record(3)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains("wall"), "{text}");
        let back = read_records(&text).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].round, 3);
        assert_eq!(back[0].wall_ms, 0);
    }

    #[test]
    fn schema_version_is_enforced() {
        let mut rec = record(0);
        rec.v = 99;
        let line = serde_json::to_string(&rec).unwrap();
        assert!(read_records(&line).unwrap_err().contains("schema version 99"));
    }

    #[test]
    fn metric_values_enumerates_present_metrics() {
        let rec = record(0);
        let vals = rec.metric_values();
        assert_eq!(vals, vec![("clean_acc", 0.5), ("adv_acc_pgd", 0.25)]);
    }
}
