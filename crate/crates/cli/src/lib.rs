//! Command-line front end: configuration, figure presets, run manifests and
//! the subcommands that drive `dimer-core`.

pub mod commands;
pub mod config;
pub mod manifest;

use anyhow::Result;

use crate::config::RunConfig;
use crate::manifest::{RunDir, RunManifest};

/// Runs a resolved config end to end. The manifest is written before the run
/// and finalised afterwards, also on failure; the run's error is returned
/// after finalising.
pub fn run(cfg: &RunConfig, overrides: Vec<String>) -> Result<RunManifest> {
    let mut rd = RunDir::create(cfg, overrides)?;
    let outcome = commands::execute(cfg, &mut rd);
    let manifest = rd.finish(&outcome)?;
    outcome.map(|()| manifest)
}
