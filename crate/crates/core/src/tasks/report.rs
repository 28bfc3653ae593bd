//! Evaluation reports: one JSON document per run plus a CSV row per run.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::write_atomic;

/// Metric columns of the sweep CSV, in order.
pub const CSV_METRICS: [&str; 9] = [
    "mae",
    "rmse",
    "mape",
    "acc@1",
    "acc@5",
    "mean_rank",
    "baseline_mae",
    "baseline_rmse",
    "n_test",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub task: String,
    pub mode: String,
    pub metrics: BTreeMap<String, f64>,
    pub seed: u64,
    pub config_hash: String,
    /// RFC 3339, UTC.
    pub timestamp: String,
}

impl EvalReport {
    pub fn new(task: &str, mode: &str, metrics: BTreeMap<String, f64>, seed: u64, config_hash: &str) -> Result<Self> {
        if let Some((k, v)) = metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Input(format!("metric {k} is not finite: {v}")));
        }
        Ok(Self {
            task: task.into(),
            mode: mode.into(),
            metrics,
            seed,
            config_hash: config_hash.into(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        })
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Equality ignoring the timestamp.
    pub fn same_result(&self, other: &Self) -> bool {
        Self {
            timestamp: String::new(),
            ..self.clone()
        } == Self {
            timestamp: String::new(),
            ..other.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn csv_header() -> Vec<String> {
        let mut h: Vec<String> = ["task", "mode", "seed", "config_hash", "timestamp"].map(String::from).to_vec();
        h.extend(CSV_METRICS.iter().map(|m| m.to_string()));
        h
    }

    /// Appends one row to `path`, writing the header when the file is new.
    /// Metrics outside [`CSV_METRICS`] are left out; absent ones are empty.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        if fresh {
            w.write_record(Self::csv_header()).map_err(|e| Error::csv(path, e))?;
        }
        let mut row = vec![
            self.task.clone(),
            self.mode.clone(),
            self.seed.to_string(),
            self.config_hash.clone(),
            self.timestamp.clone(),
        ];
        row.extend(CSV_METRICS.iter().map(|m| self.metric(m).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mae: f64) -> EvalReport {
        let metrics = BTreeMap::from([("mae".to_string(), mae), ("rmse".to_string(), 2.0 * mae)]);
        EvalReport::new("destination", "frozen", metrics, 7, "abc").unwrap()
    }

    #[test]
    fn json_round_trip_and_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(1.5);
        r.save(&dir.path().join("r.json")).unwrap();
        assert_eq!(EvalReport::load(&dir.path().join("r.json")).unwrap(), r);
        let csv_path = dir.path().join("sweep.csv");
        r.append_csv(&csv_path).unwrap();
        report(2.5).append_csv(&csv_path).unwrap();
        let text = fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("task,mode,seed,config_hash,timestamp,mae,rmse,mape,acc@1"));
        assert!(lines[2].starts_with("destination,frozen,7,abc,"));
        assert!(lines[2].contains(",2.5,5,,"));
    }

    #[test]
    fn non_finite_metrics_rejected_and_timestamp_ignored() {
        let m = BTreeMap::from([("mae".to_string(), f64::NAN)]);
        assert!(EvalReport::new("x", "frozen", m, 0, "h").is_err());
        let mut a = report(1.0);
        let b = report(1.0);
        a.timestamp = "1999-01-01T00:00:00Z".into();
        assert!(a.same_result(&b));
        assert!(!a.same_result(&report(1.1)));
    }
}
