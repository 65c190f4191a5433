use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

use crate::Failure;

/// What a run needs to be re-executed: the exact arguments, the merged
/// settings and every seed that was derived from the base seed.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub command_line: Vec<String>,
    pub settings: serde_json::Value,
    pub base_seed: Option<u64>,
    pub derived_seeds: Vec<u64>,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
}

pub struct ManifestBuilder {
    command: String,
    started: DateTime<Utc>,
    settings: serde_json::Value,
    base_seed: Option<u64>,
    derived_seeds: Vec<u64>,
    outputs: Vec<PathBuf>,
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            started: Utc::now(),
            settings: serde_json::Value::Null,
            base_seed: None,
            derived_seeds: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn settings(mut self, s: &impl Serialize) -> Self {
        self.settings = serde_json::to_value(s).expect("settings serialize");
        self
    }

    pub fn seed(mut self, base: u64) -> Self {
        self.base_seed = Some(base);
        self
    }

    pub fn derived(&mut self, seeds: impl IntoIterator<Item = u64>) {
        self.derived_seeds.extend(seeds);
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn finish(self, dir: &Path) -> Result<(), Failure> {
        let m = RunManifest {
            tool: "ziptf",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            command_line: std::env::args().collect(),
            settings: self.settings,
            base_seed: self.base_seed,
            derived_seeds: self.derived_seeds,
            started: stamp(self.started),
            finished: stamp(Utc::now()),
            outputs: self.outputs,
        };
        crate::write_json(&dir.join("manifest.json"), &m)
    }
}
