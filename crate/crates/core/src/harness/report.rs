//! Versioned evaluation reports and run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SeatError};
use crate::metrics::{MetricReport, SeatCertificate};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub version: u32,
    pub method: String,
    pub config_hash: String,
    pub metrics: Option<MetricReport>,
    pub certificate: Option<SeatCertificate>,
    /// Seconds per phase; empty unless timings are enabled in the config.
    pub timings: BTreeMap<String, f64>,
}

impl Report {
    pub fn parse(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text)?;
        if r.version != REPORT_VERSION {
            return Err(SeatError::Data(format!(
                "report version {}, expected {REPORT_VERSION}",
                r.version
            )));
        }
        Ok(r)
    }
}

/// SEAT-over-vanilla quotients of the stability aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub version: u32,
    pub suite: String,
    pub jsd_mean_ratio: f64,
    pub jsd_sum_ratio: f64,
    pub tvd_mean_ratio: f64,
    pub tvd_sum_ratio: f64,
}

impl Comparison {
    pub fn new(suite: &str, seat: &MetricReport, vanilla: &MetricReport) -> Self {
        Self {
            version: REPORT_VERSION,
            suite: suite.to_string(),
            jsd_mean_ratio: seat.jsd_mean / vanilla.jsd_mean,
            jsd_sum_ratio: seat.jsd_sum / vanilla.jsd_sum,
            tvd_mean_ratio: seat.tvd_mean / vanilla.tvd_mean,
            tvd_sum_ratio: seat.tvd_sum / vanilla.tvd_sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub rng_algorithm: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    /// Content hashes of inputs and outputs, keyed by file name.
    pub hashes: BTreeMap<String, String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    /// Command-specific scalars such as final loss or F1.
    pub summary: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: &super::RunConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            rng_algorithm: crate::rng::ALGORITHM.to_string(),
            command: command.to_string(),
            config: config.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            hashes: BTreeMap::new(),
            timings: BTreeMap::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        super::checkpoint::save_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(super::checkpoint::load_json(path)?.0)
    }
}
