//! Run configuration: JSON schema, figure presets and flag overrides.
//!
//! Precedence is preset < config file < command-line flags. Every field has an
//! explicit default, and the resolved config (all defaults materialised) is what
//! the manifest records.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dimer_core::hilbert::PhysicalParams;
use dimer_core::semiclassical::{scaled_params, ContinuationSettings, ScaledParams, SweepSettings};
use dimer_core::trajectory::{DEFAULT_DT, DEFAULT_JUMP_TIME_TOL, DEFAULT_RAMP_RATE, EDGE_POPULATION_LIMIT};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Bumped whenever the config or manifest layout changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Photon-number scale from which runs count as heavy and need `--heavy`.
pub const HEAVY_MU: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Sweep,
    Trajectory,
    Ensemble,
    Ramp,
    Stats,
    Indicators,
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CommandKind::Sweep => "sweep",
            CommandKind::Trajectory => "trajectory",
            CommandKind::Ensemble => "ensemble",
            CommandKind::Ramp => "ramp",
            CommandKind::Stats => "stats",
            CommandKind::Indicators => "indicators",
        };
        f.write_str(s)
    }
}

/// Physical model. `U` is the unscaled nonlinearity; the simulated one is `U / mu`.
/// The drive is given either as the scaled `f` or as the physical `F_mu`; after
/// resolution both are present and consistent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "J", default = "d_hopping")]
    pub hopping: f64,
    #[serde(rename = "Delta", default = "d_detuning")]
    pub detuning: f64,
    #[serde(rename = "U", default = "d_onsite")]
    pub onsite: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_one")]
    pub mu: f64,
    #[serde(default)]
    pub f: Option<f64>,
    #[serde(rename = "F_mu", default)]
    pub f_mu: Option<f64>,
}

fn d_hopping() -> f64 {
    -3.5
}
fn d_detuning() -> f64 {
    4.5
}
fn d_onsite() -> f64 {
    0.5
}
fn d_gamma() -> f64 {
    2.0
}
fn d_one() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hopping: -3.5, detuning: 4.5, onsite: 0.5, gamma: 2.0, mu: 1.0, f: None, f_mu: None }
    }
}

impl ModelConfig {
    /// `F_mu = sqrt(mu) F` with `F = f gamma^(3/2) / (4 sqrt|U|)`.
    pub fn f_mu_from_f(&self, f: f64) -> f64 {
        self.mu.sqrt() * f * self.gamma.powf(1.5) / (4.0 * self.onsite.abs().sqrt())
    }

    pub fn f_from_f_mu(&self, f_mu: f64) -> f64 {
        f_mu / self.f_mu_from_f(1.0)
    }

    fn resolve(&mut self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            bail!("model.mu must be positive (got {})", self.mu);
        }
        if self.onsite == 0.0 || !(self.gamma > 0.0) {
            bail!("model needs U != 0 and gamma > 0");
        }
        match (self.f, self.f_mu) {
            (None, None) => {
                self.f = Some(2.0);
                self.f_mu = Some(self.f_mu_from_f(2.0));
            }
            (Some(f), None) => self.f_mu = Some(self.f_mu_from_f(f)),
            (None, Some(fm)) => self.f = Some(self.f_from_f_mu(fm)),
            (Some(f), Some(fm)) => {
                let expect = self.f_mu_from_f(f);
                if (expect - fm).abs() > 1e-12 * expect.abs().max(1.0) {
                    bail!("model.f = {f} and model.F_mu = {fm} disagree (F_mu for this f is {expect})");
                }
            }
        }
        if self.f.unwrap() < 0.0 {
            bail!("model drive must be non-negative");
        }
        Ok(())
    }

    pub fn drive_f(&self) -> f64 {
        self.f.expect("resolved model")
    }

    /// Parameters for the simulator at scaled drive `f`.
    pub fn physical_at(&self, f: f64) -> PhysicalParams {
        PhysicalParams {
            hopping: self.hopping,
            detuning: self.detuning,
            onsite: self.onsite / self.mu,
            loss_rate: self.gamma,
            drive: self.f_mu_from_f(f),
            mu: self.mu,
        }
    }

    pub fn physical(&self) -> PhysicalParams {
        self.physical_at(self.drive_f())
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        let mut m = Self { mu, ..self.clone() };
        m.f_mu = Some(m.f_mu_from_f(self.drive_f()));
        m
    }

    pub fn scaled(&self) -> Result<ScaledParams> {
        Ok(scaled_params(&self.physical())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub t_final: f64,
    pub dt: f64,
    pub sample_interval: f64,
    pub jump_time_tol: f64,
    /// Fixed symmetric truncation; `null` selects the adaptive rule.
    pub n_max: Option<usize>,
    pub n_max_start: usize,
    pub n_max_limit: usize,
    pub pilot_time: f64,
    pub compute_entropy: bool,
    pub edge_limit: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            t_final: 100.0,
            dt: DEFAULT_DT,
            sample_interval: 0.05,
            jump_time_tol: DEFAULT_JUMP_TIME_TOL,
            n_max: None,
            n_max_start: 8,
            n_max_limit: 200,
            pilot_time: 20.0,
            compute_entropy: false,
            edge_limit: EDGE_POPULATION_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub f_min: f64,
    pub f_max: f64,
    pub ds: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    pub limit_cycle_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let c = ContinuationSettings::default();
        Self {
            f_min: c.f_min,
            f_max: c.f_max,
            ds: c.ds_initial,
            ds_min: c.ds_min,
            ds_max: c.ds_max,
            limit_cycle_samples: SweepSettings::default().limit_cycle_samples,
        }
    }
}

impl SweepConfig {
    pub fn settings(&self) -> SweepSettings {
        let base = SweepSettings::default();
        SweepSettings {
            continuation: ContinuationSettings {
                f_min: self.f_min,
                f_max: self.f_max,
                ds_initial: self.ds,
                ds_min: self.ds_min,
                ds_max: self.ds_max,
                ..base.continuation
            },
            limit_cycle_samples: self.limit_cycle_samples,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub n_traj: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { n_traj: 3 }
    }
}

/// Linear ramp of `F_mu` from `F_start` to `F_end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RampConfig {
    pub rate: f64,
    #[serde(rename = "F_start")]
    pub f_start: f64,
    #[serde(rename = "F_end")]
    pub f_end: f64,
}

impl Default for RampConfig {
    fn default() -> Self {
        Self { rate: DEFAULT_RAMP_RATE, f_start: 0.0, f_end: 50.0 }
    }
}

impl RampConfig {
    pub fn duration(&self) -> f64 {
        (self.f_end - self.f_start) / self.rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    None,
    Hann,
}

/// `start, start + step, ...` up to `stop` inclusive (with a small tolerance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor();
        if !(n >= 0.0 && self.step > 0.0) {
            return Vec::new();
        }
        (0..=n as usize).map(|k| self.start + self.step * k as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    /// Sample CSV files to analyse. When empty, trajectories are generated for
    /// every `(mu, f)` pair of `mu_values` x `f_values`.
    pub inputs: Vec<PathBuf>,
    pub mu_values: Vec<f64>,
    /// Added to `mu_values` only with `--heavy`.
    pub heavy_mu_values: Vec<f64>,
    pub f_values: Vec<f64>,
    /// Replaces `f_values` and switches on the per-drive 1D histogram sweep.
    pub violin: Option<Grid>,
    pub n_traj: usize,
    pub t_final: f64,
    pub n_samples: usize,
    pub discard: f64,
    pub symmetrize: bool,
    pub bins_2d: usize,
    pub bins_1d: usize,
    /// Histogram range for photon numbers; default `[0, 1.1 mu max branch intensity]`.
    pub range: Option<[f64; 2]>,
    /// Peak height of scaled 1D histograms in units of `mu`.
    pub scale_max: f64,
    /// Smoothed local maxima below this fraction of the highest are ignored.
    pub peak_fraction: f64,
    pub spectrum: bool,
    pub window: WindowKind,
    /// Frequency band searched for the spectral peak; default `[nu/2, 2 nu]`
    /// around the limit-cycle frequency `nu` when one exists at the drive.
    pub band: Option<[f64; 2]>,
    /// Switching hysteresis; default a quarter of the asymmetric `|D|` at the drive.
    pub hysteresis: Option<f64>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            mu_values: Vec::new(),
            heavy_mu_values: Vec::new(),
            f_values: Vec::new(),
            violin: None,
            n_traj: 3,
            t_final: 1e4,
            n_samples: 50_000,
            discard: 0.0,
            symmetrize: true,
            bins_2d: 200,
            bins_1d: 80,
            range: None,
            scale_max: 0.5,
            peak_fraction: 0.05,
            spectrum: true,
            window: WindowKind::None,
            band: None,
            hysteresis: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndicatorsConfig {
    pub mu_values: Vec<f64>,
    /// Scaled drives; each run uses `F_mu = sqrt(mu) F(f)`.
    pub f_grid: Grid,
    pub t_final: f64,
    pub sample_interval: f64,
    /// Initial transient excluded from the time averages.
    pub discard: f64,
}

impl Default for IndicatorsConfig {
    fn default() -> Self {
        Self {
            mu_values: vec![0.5, 1.0, 2.0, 3.0],
            f_grid: Grid { start: 1.0, stop: 22.0, step: 0.5 },
            t_final: 500.0,
            sample_interval: 0.05,
            discard: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandKind,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub ramp: RampConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub indicators: IndicatorsConfig,
    #[serde(default = "d_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub heavy: bool,
}

fn d_out() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub heavy: bool,
}

impl Overrides {
    /// Names of the flags that were set, for the manifest.
    pub fn applied(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(s) = self.seed {
            v.push(format!("--seed {s}"));
        }
        if let Some(o) = &self.out {
            v.push(format!("--out {}", o.display()));
        }
        if let Some(t) = self.threads {
            v.push(format!("--threads {t}"));
        }
        if self.heavy {
            v.push("--heavy".into());
        }
        v
    }
}

pub const PRESETS: [&str; 11] =
    ["fig1", "fig1b", "fig2", "fig3", "fig4", "fig5", "fig6", "fig7", "fig8", "fig9", "fig10"];

/// Figure recipes as partial configs. Figures 2-4 and 6-8 are the interval
/// histograms at `f = 2, 4, 6, 10, 13, 17`; 5 is the spectrum comparison,
/// 9 the per-drive histogram sweep and 10 the antibunching/entropy scan.
pub fn preset(name: &str) -> Result<Value> {
    let interval = |f: f64| {
        json!({
            "command": "stats",
            "stats": { "f_values": [f], "mu_values": [1.0, 3.0] }
        })
    };
    Ok(match name {
        "fig1" => json!({ "command": "sweep" }),
        "fig1b" => json!({ "command": "ramp", "model": { "mu": 3.0 } }),
        "fig2" => interval(2.0),
        "fig3" => interval(4.0),
        "fig4" => interval(6.0),
        "fig5" => json!({
            "command": "stats",
            "stats": { "f_values": [6.0], "mu_values": [1.0, 3.0], "heavy_mu_values": [20.0], "spectrum": true }
        }),
        "fig6" => interval(10.0),
        "fig7" => interval(13.0),
        "fig8" => interval(17.0),
        "fig9" => json!({
            "command": "stats",
            "stats": { "mu_values": [1.0, 3.0], "violin": { "start": 2.0, "stop": 15.75, "step": 0.5 } }
        }),
        "fig10" => json!({ "command": "indicators" }),
        other => bail!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
    })
}

/// Recursive object merge; `top` wins on leaves.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

/// Deserialize with field-path diagnostics (`stats.window: unknown variant ...`).
pub fn from_value(v: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("config error at `{path}`: {}", e.into_inner())
    })?;
    Ok(cfg)
}

/// Reads a config file. A run manifest is accepted too; its `config` is used.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if v.get("schema_version").is_some() && v.get("config").is_some() {
        v = v["config"].take();
    }
    Ok(v)
}

/// Layers preset, file and flags, fills defaults and checks consistency.
pub fn parse_config(
    command: CommandKind,
    preset_name: Option<&str>,
    file: Option<&Path>,
    overrides: &Overrides,
) -> Result<RunConfig> {
    let mut v = json!({ "command": command });
    if let Some(p) = preset_name {
        let pv = preset(p)?;
        if pv["command"] != json!(command) {
            bail!("preset `{p}` is for `{}`, not `{command}`", pv["command"].as_str().unwrap_or("?"));
        }
        merge(&mut v, pv);
    }
    if let Some(path) = file {
        let fv = read_config_file(path)?;
        if let Some(c) = fv.get("command") {
            if *c != json!(command) {
                bail!("config file is for `{}`, but `{command}` was requested", c.as_str().unwrap_or("?"));
            }
        }
        merge(&mut v, fv);
    }
    let mut cfg = from_value(v)?;
    if let Some(s) = overrides.seed {
        cfg.base_seed = s;
    }
    if let Some(o) = &overrides.out {
        cfg.out = o.clone();
    }
    if let Some(t) = overrides.threads {
        cfg.threads = Some(t);
    }
    cfg.heavy |= overrides.heavy;
    cfg.resolve()?;
    Ok(cfg)
}

impl RunConfig {
    /// Materialises defaults that depend on other fields and validates ranges.
    pub fn resolve(&mut self) -> Result<()> {
        self.model.resolve()?;
        let it = &self.integrator;
        if !(it.dt > 0.0 && it.sample_interval >= it.dt && it.t_final >= it.sample_interval) {
            bail!("integrator needs 0 < dt <= sample_interval <= t_final");
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        match self.command {
            CommandKind::Ensemble if self.ensemble.n_traj == 0 => bail!("ensemble.n_traj must be positive"),
            CommandKind::Ramp => {
                let r = &self.ramp;
                if !(r.rate > 0.0 && r.f_end > r.f_start && r.f_start >= 0.0) {
                    bail!("ramp needs rate > 0 and 0 <= F_start < F_end");
                }
            }
            CommandKind::Stats => {
                let s = &mut self.stats;
                if s.mu_values.is_empty() {
                    s.mu_values = vec![self.model.mu];
                }
                if s.f_values.is_empty() {
                    s.f_values = vec![self.model.drive_f()];
                }
                if s.bins_1d == 0 || s.bins_2d == 0 || s.n_samples < 16 || s.n_traj == 0 {
                    bail!("stats needs positive bin counts, n_traj >= 1 and n_samples >= 16");
                }
                if !(s.t_final > 0.0) {
                    bail!("stats.t_final must be positive");
                }
            }
            CommandKind::Indicators => {
                if self.indicators.f_grid.values().is_empty() || self.indicators.mu_values.is_empty() {
                    bail!("indicators needs a non-empty mu list and f grid");
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// All `mu` values a command will simulate (stats includes heavy ones only with `--heavy`).
    pub fn simulated_mus(&self) -> Vec<f64> {
        match self.command {
            CommandKind::Sweep => Vec::new(),
            CommandKind::Stats if self.stats.inputs.is_empty() => {
                let mut v = self.stats.mu_values.clone();
                if self.heavy {
                    v.extend(&self.stats.heavy_mu_values);
                }
                v
            }
            CommandKind::Stats => Vec::new(),
            CommandKind::Indicators => self.indicators.mu_values.clone(),
            _ => vec![self.model.mu],
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let f = write_tmp(r#"{"command": "trajectory", "model": {"f": 4.0}}"#);
        let cfg = parse_config(CommandKind::Trajectory, None, Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(cfg.model.hopping, -3.5);
        assert_eq!(cfg.integrator.dt, DEFAULT_DT);
        assert!((cfg.model.f_mu.unwrap() - 4.0).abs() < 1e-12);
        assert!((cfg.model.scaled().unwrap().f - 4.0).abs() < 1e-12);
    }

    #[test]
    fn misspelled_key_is_named() {
        let f = write_tmp(r#"{"command": "trajectory", "model": {"gamam": 2.0}}"#);
        let err = parse_config(CommandKind::Trajectory, None, Some(f.path()), &Overrides::default()).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("gamam") && msg.contains("model"), "{msg}");
    }

    #[test]
    fn flags_override_file() {
        let f = write_tmp(r#"{"command": "ensemble", "base_seed": 5, "out": "a"}"#);
        let ov = Overrides { seed: Some(9), out: Some("b".into()), ..Default::default() };
        let cfg = parse_config(CommandKind::Ensemble, None, Some(f.path()), &ov).unwrap();
        assert_eq!(cfg.base_seed, 9);
        assert_eq!(cfg.out, PathBuf::from("b"));
        assert_eq!(ov.applied(), vec!["--seed 9".to_string(), "--out b".to_string()]);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = parse_config(CommandKind::Stats, Some("fig7"), None, &Overrides::default()).unwrap();
        let again = from_value(cfg.to_value()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.stats.f_values, vec![13.0]);
    }

    #[test]
    fn command_mismatch_is_rejected() {
        assert!(parse_config(CommandKind::Sweep, Some("fig2"), None, &Overrides::default()).is_err());
        let f = write_tmp(r#"{"command": "sweep"}"#);
        assert!(parse_config(CommandKind::Ramp, None, Some(f.path()), &Overrides::default()).is_err());
    }

    #[test]
    fn drive_forms_must_agree() {
        let mut m = ModelConfig { mu: 3.0, f: Some(6.0), f_mu: Some(6.0), ..Default::default() };
        assert!(m.resolve().is_err());
        let mut m = ModelConfig { mu: 3.0, f_mu: Some(3f64.sqrt() * 6.0), ..Default::default() };
        m.resolve().unwrap();
        assert!((m.drive_f() - 6.0).abs() < 1e-12);
        assert!((m.physical().onsite - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn grid_includes_endpoint_when_hit() {
        let g = Grid { start: 2.0, stop: 15.75, step: 0.5 };
        let v = g.values();
        assert_eq!(v.len(), 28);
        assert_eq!(*v.last().unwrap(), 15.5);
        assert_eq!(Grid { start: 1.0, stop: 22.0, step: 0.5 }.values().len(), 43);
    }

    #[test]
    fn every_preset_parses() {
        for p in PRESETS {
            let cmd: CommandKind = serde_json::from_value(preset(p).unwrap()["command"].clone()).unwrap();
            parse_config(cmd, Some(p), None, &Overrides::default()).unwrap();
        }
    }
}
