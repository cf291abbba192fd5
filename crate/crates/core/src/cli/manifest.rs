use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::grouping::HeadGrouping;
use crate::merge::ConversionReport;
use crate::model::Projection;

use super::Command;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Absolute for inputs; relative to the output directory for outputs.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub layer_index: usize,
    pub projection: Projection,
    pub best_acc: Option<f64>,
    pub oracle_calls: usize,
    pub grouping: HeadGrouping,
}

impl SearchSummary {
    pub fn from_report(report: &ConversionReport) -> Vec<Self> {
        report
            .layers
            .iter()
            .flat_map(|l| {
                [&l.key, &l.value].map(|p| SearchSummary {
                    layer_index: l.layer_index,
                    projection: p.projection,
                    best_acc: p.search.as_ref().map(|s| s.best_acc),
                    oracle_calls: p.search.as_ref().map_or(0, |s| s.oracle_calls),
                    grouping: p.grouping.clone(),
                })
            })
            .collect()
    }
}

/// Self-contained record of one command run: enough to rerun it and to
/// check that the rerun produced the same bytes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: Command,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_secs: f64,
    pub search_summaries: Vec<SearchSummary>,
}

impl RunManifest {
    pub fn new(command: Command) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
            search_summaries: Vec::new(),
        }
    }

    pub fn output_hash(&self, name: &str) -> Option<&str> {
        self.outputs
            .iter()
            .find(|o| o.path == name)
            .map(|o| o.sha256.as_str())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
