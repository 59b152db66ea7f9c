//! Metric reports: rows keyed by experiment condition, emitted as CSV and
//! JSON with an environment header tracing every row to its config.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportHeader {
    pub experiment: String,
    pub config_hash: String,
    pub image_size: usize,
    /// Domain quality metrics are computed in.
    pub pixel_domain: String,
    pub crate_version: String,
    pub seed: u64,
}

impl ReportHeader {
    pub fn new(experiment: &str, config_hash: &str, image_size: usize, seed: u64) -> ReportHeader {
        ReportHeader {
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            image_size,
            pixel_domain: "[0,1]".to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub condition: String,
    pub metric: String,
    #[serde(serialize_with = "serialize_value")]
    pub value: f64,
    pub units: String,
    pub seed: u64,
}

/// JSON has no Infinity literal; the sentinel serializes as a string.
fn serialize_value<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str(&v.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub header: ReportHeader,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn new(header: ReportHeader) -> MetricsReport {
        MetricsReport {
            header,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, condition: &str, metric: &str, value: f64, units: &str) {
        self.rows.push(ReportRow {
            condition: condition.to_string(),
            metric: metric.to_string(),
            value,
            units: units.to_string(),
            seed: self.header.seed,
        });
    }

    /// Value of the first row matching a condition and metric.
    pub fn value(&self, condition: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# experiment={}\n", self.header.experiment));
        out.push_str(&format!("# config_hash={}\n", self.header.config_hash));
        out.push_str(&format!("# image_size={}\n", self.header.image_size));
        out.push_str(&format!("# pixel_domain={}\n", self.header.pixel_domain));
        out.push_str(&format!("# crate_version={}\n", self.header.crate_version));
        out.push_str(&format!("# seed={}\n", self.header.seed));
        out.push_str("condition,metric,value,units,seed\n");
        for r in &self.rows {
            let value = if r.value.is_finite() {
                format!("{}", r.value)
            } else {
                "inf".to_string()
            };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.condition, r.metric, value, r.units, r.seed
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Write both `<stem>.csv` and `<stem>.json` under a directory.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.to_json()).map_err(|e| Error::io(&json_path, e))?;
        Ok(())
    }
}
