// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned report envelopes and CSV writers.

use std::fs;
use std::path::Path;

use heuristic_forge::Result;
use serde::Serialize;

use crate::config::{RunConfig, Stream};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub schema_version: u32,
    pub command: &'a str,
    pub config_hash: String,
    /// Root seed of the run.
    pub seed: u64,
    /// Seed of the command's own stream.
    pub stream_seed: u64,
    pub report: T,
}

/// Provenance shared by every file a command writes.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub stream_seed: u64,
}

impl Stamp {
    pub fn new(command: &'static str, cfg: &RunConfig, stream: Stream) -> Self {
        Self {
            command,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            stream_seed: cfg.stream_seed(stream),
        }
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, report: T) -> Result<()> {
        let env = Envelope {
            schema_version: SCHEMA_VERSION,
            command: self.command,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            stream_seed: self.stream_seed,
            report,
        };
        ensure_parent(path)?;
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// CSV whose first line is a `#` comment carrying the stamp.
    pub fn write_csv<R: Serialize>(&self, path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
        ensure_parent(path)?;
        let mut buf = format!(
            "# schema_version={} command={} config_hash={} seed={} stream_seed={}\n",
            SCHEMA_VERSION, self.command, self.config_hash, self.seed, self.stream_seed
        )
        .into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        fs::write(path, buf)?;
        Ok(())
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}
