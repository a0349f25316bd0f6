//! Run directories: manifest, JSONL traces and CSV summaries.
//!
//! `manifest.json` is written before anything else and lists every other
//! output by path relative to the run directory. Apart from `timing.json`,
//! every byte is a function of the config and seed.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use perf_lmdp_core::retraining::RoundRecord;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Driver, ExperimentConfig};
use crate::csvio::fmt_f64;
use crate::error::CliError;

pub const TOOL: &str = "perf-lmdp";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub driver: String,
    pub seed: u64,
    /// SHA-256 of the canonical TOML form of the config.
    pub config_sha256: String,
    pub outputs: Vec<String>,
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig, driver: Driver, outputs: Vec<String>) -> Self {
        Manifest {
            tool: TOOL,
            version: VERSION,
            core_version: perf_lmdp_core::VERSION,
            driver: driver.as_str().to_string(),
            seed: cfg.seed,
            config_sha256: config_hash(cfg),
            outputs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates `root` and writes the manifest into it.
    pub fn create(root: &Path, manifest: &Manifest) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let dir = RunDir { root: root.to_path_buf() };
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        dir.write("manifest.json", format!("{}\n", text))?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Creates `rel` as a subdirectory.
    pub fn subdir(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(rel);
        fs::write(&p, contents).map_err(|e| CliError::io(&p, e))
    }
}

/// One trace line. Missing values (`dist_to_ref` without a reference, an
/// uncomputed stability gap) serialize as `null`.
#[derive(Debug, Serialize)]
pub struct TraceLine<'a> {
    pub round: usize,
    pub step_norm: f64,
    pub dist_to_ref: Option<f64>,
    pub reg_objective: f64,
    pub perf_value: f64,
    pub stability_gap: Option<f64>,
    pub rng_digest: String,
    pub d: &'a [f64],
    pub policy: Vec<Vec<f64>>,
}

impl<'a> TraceLine<'a> {
    pub fn new(rec: &'a RoundRecord) -> Self {
        let m = rec.policy.matrix();
        TraceLine {
            round: rec.round,
            step_norm: rec.step_norm,
            dist_to_ref: rec.dist_to_ref,
            reg_objective: rec.reg_objective,
            perf_value: rec.perf_value,
            stability_gap: finite(rec.stability_gap),
            rng_digest: format!("{:016x}", rec.rng_digest),
            d: rec.d.as_vector().as_slice(),
            policy: (0..m.nrows()).map(|s| m.row(s).iter().copied().collect()).collect(),
        }
    }
}

fn finite(x: f64) -> Option<f64> {
    if x.is_nan() {
        None
    } else {
        Some(x)
    }
}

/// JSONL sink flushed after every round, so a killed run leaves a valid
/// prefix.
pub struct TraceWriter {
    path: PathBuf,
    out: BufWriter<fs::File>,
    lines: usize,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(TraceWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            lines: 0,
        })
    }

    pub fn append(&mut self, rec: &RoundRecord) -> Result<(), CliError> {
        let line = serde_json::to_string(&TraceLine::new(rec)).map_err(|e| CliError::io(&self.path, e))?;
        writeln!(self.out, "{}", line).map_err(|e| CliError::io(&self.path, e))?;
        self.out.flush().map_err(|e| CliError::io(&self.path, e))?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> usize {
        self.lines
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

/// Per-round summary; empty cells for missing values.
pub fn write_round_summary(path: &Path, records: &[RoundRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    let io = |e: csv::Error| CliError::io(path, e);
    w.write_record(["round", "step_norm", "dist_to_ref", "reg_objective", "perf_value", "stability_gap"])
        .map_err(io)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            fmt_f64(r.step_norm),
            opt(r.dist_to_ref),
            fmt_f64(r.reg_objective),
            fmt_f64(r.perf_value),
            opt(finite(r.stability_gap)),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Ordered `key,value` rows.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    rows: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num(&mut self, key: &str, x: f64) -> &mut Self {
        self.rows.push((key.to_string(), fmt_f64(x)));
        self
    }

    pub fn text(&mut self, key: &str, v: impl ToString) -> &mut Self {
        self.rows.push((key.to_string(), v.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.rows.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
        let io = |e: csv::Error| CliError::io(path, e);
        w.write_record(["key", "value"]).map_err(io)?;
        for (k, v) in &self.rows {
            w.write_record([k, v]).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }
}

/// Generic table with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    let io = |e: csv::Error| CliError::io(path, e);
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct Timing {
    wall_seconds: f64,
}

/// Wall-clock time, kept out of every deterministic output.
pub fn write_timing(dir: &RunDir, seconds: f64) -> Result<(), CliError> {
    let text = serde_json::to_string(&Timing { wall_seconds: seconds }).expect("timing serializes");
    dir.write("timing.json", format!("{}\n", text))
}
