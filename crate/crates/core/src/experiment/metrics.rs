//! Run logs, their JSON and CSV forms, and the accuracy summaries derived
//! from them.
//!
//! The CSV form has one row per client per round:
//!
//! ```text
//! round,client_id,selected,test_acc,distill_layer,loss_kl,loss_ce
//! ```
//!
//! `selected` is `1` or `0`; absent values are empty cells. Floats are
//! written in shortest round-trip form, so loading and re-emitting a file
//! reproduces it byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, RunConfig};
use crate::protocol::{ClientRecord, RoundRecord};

pub const CSV_COLUMNS: [&str; 7] =
    ["round", "client_id", "selected", "test_acc", "distill_layer", "loss_kl", "loss_ce"];

/// Everything recorded during a run. Round 0 holds the initial evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    /// Resolved configuration; absent when loaded from CSV.
    pub config: Option<RunConfig>,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricsFormat {
    Json,
    Csv,
}

impl MetricsFormat {
    /// `.csv` selects CSV; anything else is JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => MetricsFormat::Csv,
            _ => MetricsFormat::Json,
        }
    }
}

impl MetricsLog {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rounds {
            for c in &r.clients {
                let line = [
                    r.round.to_string(),
                    c.client_id.to_string(),
                    (c.selected as u8).to_string(),
                    c.test_acc.to_string(),
                    c.distill_layer.map(|l| l.to_string()).unwrap_or_default(),
                    opt(c.loss_kl),
                    opt(c.loss_ce),
                ];
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| e.to_string())?.clone();
        let mut pos = [0usize; 7];
        for (slot, name) in pos.iter_mut().zip(CSV_COLUMNS) {
            *slot = headers.iter().position(|h| h.trim() == name).ok_or_else(|| format!("missing column '{name}'"))?;
        }
        let mut rounds: Vec<RoundRecord> = Vec::new();
        let mut pending: Vec<ClientRecord> = Vec::new();
        let mut current: Option<u32> = None;
        for (i, rec) in reader.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| format!("row {row}: {e}"))?;
            let cell = |k: usize| rec.get(pos[k]).unwrap_or("").trim();
            let bad = |k: usize| format!("row {row}, column '{}': cannot parse '{}'", CSV_COLUMNS[k], cell(k));
            let float = |k: usize| -> Result<Option<f64>, String> {
                match cell(k) {
                    "" => Ok(None),
                    s => s.parse().map(Some).map_err(|_| bad(k)),
                }
            };
            let round: u32 = cell(0).parse().map_err(|_| bad(0))?;
            let client = ClientRecord {
                client_id: cell(1).parse().map_err(|_| bad(1))?,
                selected: match cell(2) {
                    "1" | "true" => true,
                    "0" | "false" => false,
                    _ => return Err(bad(2)),
                },
                test_acc: float(3)?.ok_or_else(|| bad(3))?,
                distill_layer: match cell(4) {
                    "" => None,
                    s => Some(s.parse().map_err(|_| bad(4))?),
                },
                loss_kl: float(5)?,
                loss_ce: float(6)?,
            };
            if current != Some(round) {
                if let Some(prev) = current {
                    if round < prev {
                        return Err(format!("row {row}: round {round} after round {prev}"));
                    }
                    rounds.push(RoundRecord::from_clients(prev, std::mem::take(&mut pending)));
                }
                current = Some(round);
            }
            pending.push(client);
        }
        if let Some(prev) = current {
            rounds.push(RoundRecord::from_clients(prev, pending));
        }
        Ok(MetricsLog { config: None, rounds })
    }
}

/// Writes the log as JSON or CSV according to the file extension.
pub fn emit_metrics(log: &MetricsLog, path: &Path) -> Result<(), ExperimentError> {
    let text = match MetricsFormat::from_path(path) {
        MetricsFormat::Json => log.to_json(),
        MetricsFormat::Csv => log.to_csv(),
    };
    std::fs::write(path, text).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

/// Reads a log written by [`emit_metrics`].
pub fn load_metrics(path: &Path) -> Result<MetricsLog, ExperimentError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    let parsed = match MetricsFormat::from_path(path) {
        MetricsFormat::Json => MetricsLog::from_json(&text),
        MetricsFormat::Csv => MetricsLog::from_csv(&text),
    };
    parsed.map_err(|msg| ExperimentError::Parse { path: path.to_path_buf(), msg })
}

fn check_window(log: &MetricsLog, window: usize) -> Result<&[RoundRecord], ExperimentError> {
    if window == 0 || window > log.rounds.len() {
        return Err(ExperimentError::Config(format!(
            "window {window} outside 1..={} recorded rounds",
            log.rounds.len()
        )));
    }
    Ok(&log.rounds[log.rounds.len() - window..])
}

/// Mean over the last `window` rounds of the mean client accuracy, in percent.
pub fn average_ua(log: &MetricsLog, window: usize) -> Result<f64, ExperimentError> {
    let tail = check_window(log, window)?;
    Ok(100.0 * tail.iter().map(RoundRecord::mean_accuracy).sum::<f64>() / window as f64)
}

/// Per-client accuracy averaged over the last `window` rounds, in percent,
/// ordered by client id.
pub fn client_ua(log: &MetricsLog, window: usize) -> Result<Vec<(usize, f64)>, ExperimentError> {
    let tail = check_window(log, window)?;
    let ids: Vec<usize> = tail[0].clients.iter().map(|c| c.client_id).collect();
    ids.iter()
        .map(|&id| {
            let mut total = 0.0;
            for r in tail {
                let c =
                    r.clients.iter().find(|c| c.client_id == id).ok_or_else(|| {
                        ExperimentError::Config(format!("client {id} missing from round {}", r.round))
                    })?;
                total += c.test_acc;
            }
            Ok((id, 100.0 * total / window as f64))
        })
        .collect()
}

/// `(round, mean client accuracy in percent)` for every recorded round.
pub fn accuracy_curve(log: &MetricsLog) -> Vec<(u32, f64)> {
    log.rounds.iter().map(|r| (r.round, 100.0 * r.mean_accuracy())).collect()
}

/// Count of values in `[lo, hi)`; the last bucket also holds 100.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub lo: u32,
    pub hi: u32,
    pub count: usize,
}

/// Buckets percent values into `100 / width` equal bins.
pub fn fairness_histogram(values: &[f64], width: u32) -> Result<Vec<Bucket>, ExperimentError> {
    if width == 0 || 100 % width != 0 {
        return Err(ExperimentError::Config(format!("bucket width must divide 100, got {width}")));
    }
    let n = (100 / width) as usize;
    let mut buckets: Vec<Bucket> =
        (0..n as u32).map(|i| Bucket { lo: i * width, hi: (i + 1) * width, count: 0 }).collect();
    for &v in values {
        if !(0.0..=100.0).contains(&v) {
            return Err(ExperimentError::Config(format!("accuracy {v} outside [0, 100]")));
        }
        let i = ((v / width as f64).floor() as usize).min(n - 1);
        buckets[i].count += 1;
    }
    Ok(buckets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn client(id: usize, acc: f64, selected: bool) -> ClientRecord {
        ClientRecord {
            client_id: id,
            selected,
            test_acc: acc,
            distill_layer: selected.then_some(7),
            loss_kl: selected.then_some(0.1 + id as f64 / 3.0),
            loss_ce: selected.then_some(1.0 / 3.0),
        }
    }

    fn fixture() -> MetricsLog {
        MetricsLog {
            config: None,
            rounds: vec![
                RoundRecord::from_clients(0, vec![client(0, 0.25, false), client(1, 0.25, false)]),
                RoundRecord::from_clients(1, vec![client(0, 0.5, true), client(1, 0.7, false)]),
                RoundRecord::from_clients(2, vec![client(0, 0.6, false), client(1, 0.8, true)]),
            ],
        }
    }

    #[test]
    fn hand_computed_ua() {
        // Round means 0.6 and 0.7 over the last two rounds.
        let ua = average_ua(&fixture(), 2).unwrap();
        assert!((ua - 65.0).abs() < 1e-12, "{ua}");
        let per = client_ua(&fixture(), 2).unwrap();
        assert!((per[0].1 - 55.0).abs() < 1e-12 && (per[1].1 - 75.0).abs() < 1e-12);
        assert!(average_ua(&fixture(), 0).is_err());
        assert!(average_ua(&fixture(), 4).is_err());
    }

    #[test]
    fn histogram_buckets() {
        let h = fairness_histogram(&[12.0, 18.0, 25.0], 10).unwrap();
        assert_eq!(h.len(), 10);
        assert_eq!((h[1].lo, h[1].hi, h[1].count), (10, 20, 2));
        assert_eq!((h[2].lo, h[2].count), (20, 1));
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 3);
        assert_eq!(fairness_histogram(&[100.0], 25).unwrap()[3].count, 1);
        assert!(fairness_histogram(&[1.0], 7).is_err());
        assert!(fairness_histogram(&[1.0], 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let log = fixture();
        let text = log.to_csv();
        assert!(text.starts_with("round,client_id,selected,test_acc,distill_layer,loss_kl,loss_ce\n"));
        let back = MetricsLog::from_csv(&text).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let log = fixture();
        let text = log.to_json();
        assert_eq!(MetricsLog::from_json(&text).unwrap().to_json(), text);
    }

    #[test]
    fn missing_column_is_named() {
        let text = "round,client_id,selected,test_acc,distill_layer,loss_kl\n0,0,0,0.5,,\n";
        let err = MetricsLog::from_csv(text).unwrap_err();
        assert!(err.contains("loss_ce"), "{err}");
    }
}
