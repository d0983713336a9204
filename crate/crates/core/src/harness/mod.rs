//! Scenarios, experiment orchestration and CSV output.
//!
//! Every experiment is a pure function of a [`Scenario`] (which includes the
//! master seed); the worker count only changes wall time.

pub mod experiments;
pub mod scenario;
pub mod table;

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::error::Result;
use crate::rng::SeedTree;

pub use experiments::Report;
pub use scenario::Scenario;
pub use table::{Provenance, ResultTable};

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "DCMG_OUT_DIR";

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Solve,
    Train,
    /// Optionally reads a directory written by `train`.
    Estimate { input: Option<PathBuf> },
    Crlb,
    Doed,
    SweepRrmse,
    SweepRci,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Train => "train",
            Command::Estimate { .. } => "estimate",
            Command::Crlb => "crlb",
            Command::Doed => "doed",
            Command::SweepRrmse => "sweep-rrmse",
            Command::SweepRci => "sweep-rci",
        }
    }
}

/// `$DCMG_OUT_DIR`, or `dcmg-out` in the working directory.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("dcmg-out"))
}

pub fn run(cmd: &Command, sc: &Scenario, threads: usize) -> Result<Report> {
    sc.validate()?;
    match cmd {
        Command::Solve => experiments::solve(sc),
        Command::Train => experiments::train(sc),
        Command::Estimate { input } => experiments::estimate(sc, input.as_deref(), threads),
        Command::Crlb => experiments::crlb(sc, threads),
        Command::Doed => experiments::doed(sc),
        Command::SweepRrmse => experiments::sweep_rrmse(sc, threads),
        Command::SweepRci => experiments::sweep_rci(sc, threads),
    }
}

pub fn provenance(sc: &Scenario) -> Provenance {
    Provenance {
        scenario_hash: sc.hash(),
        seed: sc.seed,
        version: VERSION.to_string(),
    }
}

/// Writes the tables, artifacts and `manifest.json`; returns the paths.
pub fn write_report(dir: &Path, cmd: &Command, sc: &Scenario, report: &Report) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let prov = provenance(sc);
    let mut files = Vec::new();
    for t in &report.tables {
        files.push(t.write(dir, &prov)?);
    }
    for (name, text) in &report.artifacts {
        let p = dir.join(name);
        std::fs::write(&p, text)?;
        files.push(p);
    }
    let names: Vec<String> = files
        .iter()
        .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
        .collect();
    let manifest = json!({
        "command": cmd.name(),
        "version": VERSION,
        "scenario_sha256": prov.scenario_hash,
        "seed": sc.seed,
        "trials": sc.trials,
        "rng": SeedTree::contract(),
        "files": names,
        "summary": report.summary,
        "scenario": sc,
    });
    let p = dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&manifest)?)?;
    files.push(p);
    Ok(files)
}

/// Diagnostic dump written when an experiment fails numerically.
pub fn write_failure(dir: &Path, cmd: &Command, sc: &Scenario, err: &crate::Error) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let dump = json!({
        "command": cmd.name(),
        "version": VERSION,
        "error": err.to_string(),
        "error_debug": format!("{err:?}"),
        "scenario_sha256": sc.hash(),
        "scenario": sc,
    });
    let p = dir.join("failure.json");
    std::fs::write(&p, serde_json::to_string_pretty(&dump)?)?;
    Ok(p)
}
