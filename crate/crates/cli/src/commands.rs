//! The six subcommands. Each takes a resolved [`RunConfig`] and a [`RunDir`]
//! and writes its outputs through it.

use std::io::Write;

use anyhow::{bail, Context, Result};
use dimer_core::hilbert::{Mode, ModeTruncation, PhysicalParams, WaveFunction};
use dimer_core::observables::{time_average, time_averaged_g2, SampleObservables};
use dimer_core::semiclassical::{
    bifurcation_sweep, write_bifurcations_csv, write_branch_csv, write_limit_cycles_csv, BifurcationKind, Stability,
    SweepResult,
};
use dimer_core::stats::{
    dominant_frequency, histogram1d_scaled, histogram2d, peak_prominence, power_spectrum_sampled, symmetrize_points,
    BinRange, Histogram1D, Histogram2D, Window,
};
use dimer_core::trajectory::{
    adaptive_truncation, read_samples_csv, run_ensemble, run_trajectory, write_jumps_ndjson, write_samples_csv,
    RampSchedule, TrajectoryConfig, TrajectoryError,
};
use serde::{Deserialize, Serialize};

use crate::config::{CommandKind, IntegratorConfig, ModelConfig, RunConfig, StatsConfig, WindowKind, HEAVY_MU};
use crate::manifest::RunDir;

/// Dispatches on `cfg.command`.
pub fn execute(cfg: &RunConfig, rd: &mut RunDir) -> Result<()> {
    check_heavy(cfg)?;
    match cfg.command {
        CommandKind::Sweep => cmd_sweep(cfg, rd),
        CommandKind::Trajectory => cmd_trajectory(cfg, rd),
        CommandKind::Ensemble => cmd_ensemble(cfg, rd),
        CommandKind::Ramp => cmd_ramp(cfg, rd),
        CommandKind::Stats => cmd_stats(cfg, rd),
        CommandKind::Indicators => cmd_indicators(cfg, rd),
    }
}

/// Sweep of the mean-field model used for truncation hints, ranges and
/// hysteresis defaults; limit cycles only when asked for.
pub fn reference_sweep(model: &ModelConfig, f_max: f64, cycles: usize) -> Result<SweepResult> {
    let mut settings = crate::config::SweepConfig::default().settings();
    settings.continuation.f_max = settings.continuation.f_max.max(f_max + 1.0);
    settings.limit_cycle_samples = cycles;
    Ok(bifurcation_sweep(&model.scaled()?, &settings).context("reference sweep")?)
}

/// Largest mean-field intensity among equilibria and nearby limit cycles at `f`.
pub fn max_intensity(sweep: &SweepResult, f: f64) -> f64 {
    let eq = sweep
        .equilibria_at(f)
        .iter()
        .map(|(s, _)| s.intensity_a().max(s.intensity_b()))
        .fold(0.0, f64::max);
    let cyc = sweep
        .nearest_limit_cycle(f)
        .filter(|c| (c.f - f).abs() < 0.5)
        .map_or(0.0, |c| c.max_intensity_a.max(c.max_intensity_b));
    eq.max(cyc)
}

/// Starting truncation that holds a Poisson-like spread around `mu x` with
/// four standard deviations of headroom. The pilot run checks it.
fn truncation_hint(mu: f64, x: f64, floor: usize) -> usize {
    let n = mu * x;
    ((n + 4.0 * n.sqrt() + 4.0).ceil() as usize).max(floor)
}

fn is_overflow(e: &TrajectoryError) -> bool {
    match e {
        TrajectoryError::TruncationOverflow { .. } => true,
        TrajectoryError::Ensemble { source, .. } => is_overflow(source),
        _ => false,
    }
}

/// Runs `job`; if an adaptive truncation overflows mid-run, grows it by 25%
/// (up to `it.n_max_limit`) and reruns from the start with the same seeds.
fn with_regrowth<T>(
    mut tc: TrajectoryConfig,
    it: &IntegratorConfig,
    job: impl Fn(&TrajectoryConfig) -> Result<T, TrajectoryError>,
) -> Result<(T, TrajectoryConfig)> {
    loop {
        match job(&tc) {
            Ok(v) => return Ok((v, tc)),
            Err(e) if it.n_max.is_none() && is_overflow(&e) => {
                let n = ((tc.trunc.n_max_1() as f64) * 1.25).ceil() as usize;
                if n > it.n_max_limit {
                    return Err(e.into());
                }
                let trunc = ModeTruncation::symmetric(n)?;
                tc = TrajectoryConfig { trunc, initial_state: WaveFunction::vacuum(&trunc), ..tc }.with_stable_dt();
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Builds a trajectory config: fixed or adaptive truncation, stable step.
/// `peak_drive` is the largest physical drive the run will see.
#[allow(clippy::too_many_arguments)]
pub fn prepare(
    p: &PhysicalParams,
    it: &IntegratorConfig,
    t_final: f64,
    sample_interval: f64,
    seed: u64,
    ramp: Option<RampSchedule>,
    n_hint: usize,
    peak_drive: f64,
) -> Result<TrajectoryConfig> {
    let base = |trunc: ModeTruncation| TrajectoryConfig {
        dt: it.dt,
        jump_time_tol: it.jump_time_tol,
        compute_entropy: it.compute_entropy,
        edge_limit: it.edge_limit,
        ramp,
        ..TrajectoryConfig::new(*p, trunc, t_final, sample_interval, seed)
    };
    let trunc = match it.n_max {
        Some(n) => ModeTruncation::symmetric(n)?,
        None => {
            let pilot = TrajectoryConfig {
                params: p.with_drive(peak_drive),
                ramp: None,
                ..base(ModeTruncation::symmetric(n_hint)?)
            };
            adaptive_truncation(&pilot, n_hint, it.n_max_limit, it.pilot_time.min(t_final).max(sample_interval))?.0
        }
    };
    let cfg = base(trunc).with_stable_dt();
    cfg.validate()?;
    Ok(cfg)
}

/// Per-step cost seen on one core, seconds per amplitude per RK4 step.
const COST_PER_AMPLITUDE_STEP: f64 = 2.7e-8;

/// Rough single-core wall time of one run.
pub fn estimate_seconds(mu: f64, x: f64, t_final: f64, dt: f64) -> f64 {
    let n = truncation_hint(mu, x, 0) as f64;
    COST_PER_AMPLITUDE_STEP * (n + 1.0).powi(2) * t_final / dt
}

fn check_heavy(cfg: &RunConfig) -> Result<()> {
    let heavy: Vec<f64> = cfg.simulated_mus().into_iter().filter(|&m| m >= HEAVY_MU).collect();
    if heavy.is_empty() {
        return Ok(());
    }
    let (t, f) = match cfg.command {
        CommandKind::Stats => (cfg.stats.t_final * cfg.stats.n_traj as f64, cfg.stats.f_values.iter().cloned().fold(0.0, f64::max)),
        CommandKind::Indicators => (cfg.indicators.t_final * cfg.indicators.f_grid.values().len() as f64, cfg.indicators.f_grid.stop),
        CommandKind::Ensemble => (cfg.integrator.t_final * cfg.ensemble.n_traj as f64, cfg.model.drive_f()),
        CommandKind::Ramp => (cfg.ramp.duration(), cfg.model.f_from_f_mu(cfg.ramp.f_end)),
        _ => (cfg.integrator.t_final, cfg.model.drive_f()),
    };
    // Symmetric-branch intensity is enough for an order-of-magnitude figure.
    let q = cfg.model.scaled()?.with_drive(f);
    let x = dimer_core::semiclassical::symmetric_equilibria(&q).iter().map(|s| s.intensity_a()).fold(1.0, f64::max);
    let secs: f64 = heavy.iter().map(|&m| estimate_seconds(m, 1.5 * x, t, cfg.integrator.dt)).sum();
    let msg = format!(
        "heavy run: mu = {heavy:?}, estimated {:.1} core-hours ({:.0} s) before parallel speed-up",
        secs / 3600.0,
        secs
    );
    if !cfg.heavy {
        bail!("{msg}; pass --heavy to run it");
    }
    eprintln!("{msg}");
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, rd: &mut RunDir) -> Result<()> {
    let q = cfg.model.scaled()?;
    let res = bifurcation_sweep(&q, &cfg.sweep.settings()).context("semiclassical sweep")?;
    write_sweep(&res, rd)
}

pub fn write_sweep(res: &SweepResult, rd: &mut RunDir) -> Result<()> {
    rd.write("branches.csv", |w| write_branch_csv(std::iter::once(&res.symmetric).chain(&res.asymmetric), w))?;
    rd.write("bifurcations.csv", |w| write_bifurcations_csv(&res.bifurcations, w))?;
    rd.write("limit_cycles.csv", |w| write_limit_cycles_csv(&res.limit_cycles, w))?;
    Ok(())
}

fn single_config(cfg: &RunConfig, seed: u64) -> Result<TrajectoryConfig> {
    let f = cfg.model.drive_f();
    let it = &cfg.integrator;
    let hint = if it.n_max.is_some() {
        it.n_max_start
    } else {
        let sweep = reference_sweep(&cfg.model, f, 0)?;
        truncation_hint(cfg.model.mu, max_intensity(&sweep, f), it.n_max_start)
    };
    let p = cfg.model.physical();
    prepare(&p, it, it.t_final, it.sample_interval, seed, None, hint, p.drive)
}

fn cmd_trajectory(cfg: &RunConfig, rd: &mut RunDir) -> Result<()> {
    let (rec, tc) = with_regrowth(single_config(cfg, cfg.base_seed)?, &cfg.integrator, run_trajectory)?;
    rd.record_truncation("trajectory", &tc.trunc, tc.dt);
    rd.write("samples.csv", |w| write_samples_csv(&rec.samples, w))?;
    rd.write("jumps.ndjson", |w| write_jumps_ndjson(&rec.jumps, w))?;
    Ok(())
}

fn cmd_ensemble(cfg: &RunConfig, rd: &mut RunDir) -> Result<()> {
    let n = cfg.ensemble.n_traj;
    let (ens, tc) =
        with_regrowth(single_config(cfg, cfg.base_seed)?, &cfg.integrator, |tc| run_ensemble(tc, n, cfg.base_seed))?;
    rd.record_truncation("ensemble", &tc.trunc, tc.dt);
    for (k, rec) in ens.records.iter().enumerate() {
        rd.write(&format!("samples_{k:03}.csv"), |w| write_samples_csv(&rec.samples, w))?;
        rd.write(&format!("jumps_{k:03}.ndjson"), |w| write_jumps_ndjson(&rec.jumps, w))?;
    }
    rd.write("mean.csv", |w| {
        writeln!(w, "t,mean_n1,mean_n2,sem_n1,sem_n2")?;
        for i in 0..ens.times.len() {
            writeln!(w, "{},{},{},{},{}", ens.times[i], ens.mean_n1[i], ens.mean_n2[i], ens.sem_n1[i], ens.sem_n2[i])?;
        }
        Ok(())
    })?;
    Ok(())
}

fn cmd_ramp(cfg: &RunConfig, rd: &mut RunDir) -> Result<()> {
    let r = &cfg.ramp;
    let model = &cfg.model;
    let f_end = model.f_from_f_mu(r.f_end);
    let it = &cfg.integrator;
    let hint = if it.n_max.is_some() {
        it.n_max_start
    } else {
        let sweep = reference_sweep(model, f_end, 0)?;
        let x = (0..=100).map(|k| max_intensity(&sweep, f_end * k as f64 / 100.0)).fold(0.0, f64::max);
        truncation_hint(model.mu, x, it.n_max_start)
    };
    let p = model.physical_at(model.f_from_f_mu(r.f_start));
    let schedule = RampSchedule { rate: r.rate, f_start: r.f_start };
    let tc = prepare(&p, it, r.duration(), it.sample_interval, cfg.base_seed, Some(schedule), hint, r.f_end)?;
    let (rec, tc) = with_regrowth(tc, it, run_trajectory)?;
    rd.record_truncation("ramp", &tc.trunc, tc.dt);
    rd.write("samples.csv", |w| write_samples_csv(&rec.samples, w))?;
    rd.write("jumps.ndjson", |w| write_jumps_ndjson(&rec.jumps, w))?;
    let unit = model.f_mu_from_f(1.0);
    rd.write("ramp.csv", |w| {
        writeln!(w, "t,F_mu,f,n1,n2")?;
        for (s, d) in rec.samples.iter().zip(&rec.drive) {
            writeln!(w, "{},{},{},{},{}", s.t, d, d / unit, s.n1, s.n2)?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Mean-field context of one `(mu, f)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupContext {
    pub mu: f64,
    pub f: f64,
    /// Largest mean-field intensity at `f` (unscaled by `mu`).
    pub x_max: f64,
    /// Largest `| |A|^2 - |B|^2 |` over stable asymmetric equilibria at `f`,
    /// or over all asymmetric ones when none is stable.
    pub asymmetry: Option<f64>,
    /// Limit-cycle frequency in physical time units, when `f` is in a Hopf interval.
    pub cycle_frequency: Option<f64>,
    /// Stable equilibria as `(mu |A|^2, mu |B|^2)`.
    pub stable: Vec<[f64; 2]>,
}

impl GroupContext {
    pub fn from_sweep(sweep: &SweepResult, model: &ModelConfig, mu: f64, f: f64) -> Self {
        let eq = sweep.equilibria_at(f);
        let largest_d = |stable_only: bool| {
            eq.iter()
                .filter(|(s, st)| !s.is_symmetric() && (!stable_only || *st == Stability::Stable))
                .map(|(s, _)| (s.intensity_a() - s.intensity_b()).abs())
                .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.max(d))))
        };
        let asymmetry = largest_d(true).or_else(|| largest_d(false));
        let cycle_frequency = in_hopf_interval(sweep, f)
            .then(|| sweep.nearest_limit_cycle(f))
            .flatten()
            .map(|c| dimer_core::semiclassical::scaled_to_physical_frequency(c.frequency, model.gamma));
        let stable = sweep
            .stable_equilibria_at(f)
            .iter()
            .map(|s| [mu * s.intensity_a(), mu * s.intensity_b()])
            .collect();
        Self { mu, f, x_max: max_intensity(sweep, f), asymmetry, cycle_frequency, stable }
    }
}

fn in_hopf_interval(sweep: &SweepResult, f: f64) -> bool {
    let hopf: Vec<f64> =
        sweep.bifurcations.iter().filter(|b| b.kind == BifurcationKind::Hopf).map(|b| b.f).collect();
    hopf.chunks(2).any(|c| c.len() == 2 && f > c[0] && f < c[1])
}

/// Everything `stats` derives from the sample series of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub context: GroupContext,
    #[serde(rename = "F_mu")]
    pub f_mu: f64,
    pub n_traj: usize,
    pub samples: usize,
    pub mean_n1: f64,
    pub mean_n2: f64,
    #[serde(rename = "mean_O")]
    pub mean_o: f64,
    pub range: [f64; 2],
    pub overflow_2d: u64,
    /// Smoothed 2D maxima `(n1, n2, height)`, highest first.
    pub maxima_2d: Vec<(f64, f64, f64)>,
    pub maxima_d: Vec<f64>,
    pub maxima_n: Vec<f64>,
    pub band: Option<[f64; 2]>,
    pub dominant_frequency: Vec<f64>,
    pub prominence: Vec<f64>,
    pub hysteresis: Option<f64>,
    pub switches: Vec<usize>,
    /// Switches per unit time, pooled over trajectories.
    pub switch_rate: Option<f64>,
}

pub struct GroupAnalysis {
    pub summary: GroupSummary,
    pub hist_2d: Histogram2D,
    pub hist_n: Histogram1D,
    pub hist_d: Histogram1D,
    pub spectra: Vec<dimer_core::stats::PowerSpectrum>,
}

fn kept(series: &[SampleObservables], discard: f64) -> impl Iterator<Item = &SampleObservables> {
    series.iter().filter(move |s| s.t > discard)
}

/// Histograms, spectra and switching statistics of one group of trajectories.
pub fn analyse_group(series: &[Vec<SampleObservables>], ctx: &GroupContext, sc: &StatsConfig) -> Result<GroupAnalysis> {
    if series.is_empty() {
        bail!("no trajectories to analyse");
    }
    let mu = ctx.mu;
    let hi = match sc.range {
        Some([lo, hi]) if lo == 0.0 => hi,
        Some([lo, _]) => bail!("stats.range must start at 0 (got {lo})"),
        None => 1.1 * mu * ctx.x_max.max(1e-3),
    };
    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| kept(s, sc.discard).map(|s| (s.n1, s.n2))).collect();
    if points.is_empty() {
        bail!("every sample lies inside the discarded transient");
    }
    let pts = if sc.symmetrize { symmetrize_points(&points) } else { points.clone() };
    let r2 = BinRange::new(0.0, hi, sc.bins_2d)?;
    let hist_2d = histogram2d(&pts, r2, r2);

    let mut n_vals: Vec<f64> = points.iter().map(|p| p.0).collect();
    let mut d_vals: Vec<f64> = points.iter().map(|p| p.0 - p.1).collect();
    if sc.symmetrize {
        n_vals.extend(points.iter().map(|p| p.1));
        d_vals.extend(points.iter().map(|p| p.1 - p.0));
    }
    let target = sc.scale_max * mu;
    let hist_n = histogram1d_scaled(&n_vals, BinRange::new(0.0, hi, sc.bins_1d)?, target);
    let hist_d = histogram1d_scaled(&d_vals, BinRange::new(-hi, hi, sc.bins_1d)?, target);

    let window = match sc.window {
        WindowKind::None => Window::None,
        WindowKind::Hann => Window::Hann,
    };
    let mut spectra = Vec::new();
    let mut dominant = Vec::new();
    let mut prominence = Vec::new();
    let mut band = None;
    if sc.spectrum {
        for s in series {
            let (t, so): (Vec<f64>, Vec<f64>) = kept(s, sc.discard).map(|s| (s.t, s.n1 + s.n2)).unzip();
            if t.len() < 16 {
                continue;
            }
            let spec = power_spectrum_sampled(&t, &so, window)?;
            let nyquist = *spec.frequencies.last().unwrap_or(&0.0);
            let b = sc.band.unwrap_or_else(|| match ctx.cycle_frequency {
                Some(nu) => [0.5 * nu, (2.0 * nu).min(nyquist)],
                None => [10.0 * spec.resolution(), nyquist],
            });
            band = Some(b);
            if let Ok(fd) = dominant_frequency(&spec, (b[0], b[1])) {
                dominant.push(fd);
                prominence.push(peak_prominence(&spec, (b[0], b[1]))?);
            }
            spectra.push(spec);
        }
    }

    let hysteresis = sc.hysteresis.or(ctx.asymmetry.map(|a| 0.25 * mu * a));
    let mut switches = Vec::new();
    let mut switch_rate = None;
    if let Some(h) = hysteresis {
        let mut span = 0.0;
        for s in series {
            let d: Vec<f64> = kept(s, sc.discard).map(|s| s.n1 - s.n2).collect();
            switches.push(dimer_core::stats::count_switches(&d, h)?);
            let t: Vec<f64> = kept(s, sc.discard).map(|s| s.t).collect();
            if let (Some(a), Some(b)) = (t.first(), t.last()) {
                span += b - a;
            }
        }
        if span > 0.0 {
            switch_rate = Some(switches.iter().sum::<usize>() as f64 / span);
        }
    }

    let mean = |g: &dyn Fn(&SampleObservables) -> f64| {
        let v: Vec<f64> = series.iter().flat_map(|s| kept(s, sc.discard).map(g)).filter(|x| x.is_finite()).collect();
        if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
    };
    let summary = GroupSummary {
        context: ctx.clone(),
        f_mu: f64::NAN,
        n_traj: series.len(),
        samples: points.len(),
        mean_n1: mean(&|s| s.n1),
        mean_n2: mean(&|s| s.n2),
        mean_o: mean(&|s| s.o),
        range: [0.0, hi],
        overflow_2d: hist_2d.overflow,
        maxima_2d: hist_2d.local_maxima(sc.peak_fraction),
        maxima_d: hist_d.local_maxima(sc.peak_fraction),
        maxima_n: hist_n.local_maxima(sc.peak_fraction),
        band,
        dominant_frequency: dominant,
        prominence,
        hysteresis,
        switches,
        switch_rate,
    };
    Ok(GroupAnalysis { summary, hist_2d, hist_n, hist_d, spectra })
}

fn label(mu: f64, f: f64) -> String {
    format!("mu{mu}_f{f}")
}

/// Runs `n_traj` trajectories for one `(mu, f)` group.
pub fn simulate_group(
    cfg: &RunConfig,
    sweep: &SweepResult,
    mu: f64,
    f: f64,
    seed: u64,
    rd: Option<&mut RunDir>,
) -> Result<Vec<Vec<SampleObservables>>> {
    let sc = &cfg.stats;
    let model = cfg.model.with_mu(mu);
    let it = &cfg.integrator;
    let hint = truncation_hint(mu, max_intensity(sweep, f), it.n_max_start);
    let interval = sc.t_final / sc.n_samples as f64;
    let p = model.physical_at(f);
    let tc = prepare(&p, it, sc.t_final, interval, seed, None, hint, p.drive)?;
    let n = sc.n_traj;
    let (ens, tc) = with_regrowth(tc, it, |tc| run_ensemble(tc, n, seed))
        .with_context(|| format!("trajectories at mu = {mu}, f = {f}"))?;
    if let Some(rd) = rd {
        rd.record_truncation(label(mu, f), &tc.trunc, tc.dt);
    }
    Ok(ens.records.into_iter().map(|r| r.samples).collect())
}

fn cmd_stats(cfg: &RunConfig, rd: &mut RunDir) -> Result<()> {
    let sc = &cfg.stats;
    if !sc.inputs.is_empty() {
        let mut series = Vec::new();
        for path in &sc.inputs {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let s = read_samples_csv(std::io::BufReader::new(file))
                .with_context(|| format!("reading samples from {}", path.display()))?;
            series.push(s);
        }
        let f = cfg.model.drive_f();
        let sweep = reference_sweep(&cfg.model, f, 4)?;
        let ctx = GroupContext::from_sweep(&sweep, &cfg.model, cfg.model.mu, f);
        let mut a = analyse_group(&series, &ctx, sc)?;
        a.summary.f_mu = cfg.model.f_mu_from_f(f);
        return write_group(rd, "", &a, &[]);
    }

    let mus = cfg.simulated_mus();
    if let Some(grid) = &sc.violin {
        let fs = grid.values();
        let f_top = fs.iter().cloned().fold(0.0, f64::max);
        let sweep = reference_sweep(&cfg.model, f_top, 0)?;
        let x_top = fs.iter().map(|&f| max_intensity(&sweep, f)).fold(0.0, f64::max);
        let mut seed = cfg.base_seed;
        for &mu in &mus {
            let model = cfg.model.with_mu(mu);
            let local = StatsConfig { range: sc.range.or(Some([0.0, 1.1 * mu * x_top])), spectrum: false, ..sc.clone() };
            let mut rows_n = Vec::new();
            let mut rows_d = Vec::new();
            for &f in &fs {
                let series = simulate_group(cfg, &sweep, mu, f, seed, Some(&mut *rd))?;
                seed += sc.n_traj as u64;
                let ctx = GroupContext::from_sweep(&sweep, &model, mu, f);
                let a = analyse_group(&series, &ctx, &local)?;
                let fm = model.f_mu_from_f(f);
                rows_n.push((fm, f, a.hist_n));
                rows_d.push((fm, f, a.hist_d));
            }
            for (name, rows) in [("n", &rows_n), ("D", &rows_d)] {
                rd.write(&format!("violin_mu{mu}_{name}.csv"), |w| {
                    writeln!(w, "F_mu,f,center,count,value")?;
                    for (fm, f, h) in rows {
                        for k in 0..h.counts.len() {
                            writeln!(w, "{fm},{f},{},{},{}", h.range.center(k), h.counts[k], h.values[k])?;
                        }
                    }
                    Ok(())
                })?;
            }
        }
        return Ok(());
    }

    let f_top = sc.f_values.iter().cloned().fold(0.0, f64::max);
    let sweep = reference_sweep(&cfg.model, f_top, cfg.sweep.limit_cycle_samples)?;
    let mut seed = cfg.base_seed;
    for &mu in &mus {
        let model = cfg.model.with_mu(mu);
        for &f in &sc.f_values {
            let series = simulate_group(cfg, &sweep, mu, f, seed, Some(&mut *rd))?;
            seed += sc.n_traj as u64;
            let ctx = GroupContext::from_sweep(&sweep, &model, mu, f);
            let mut a = analyse_group(&series, &ctx, sc)?;
            a.summary.f_mu = model.f_mu_from_f(f);
            write_group(rd, &format!("{}/", label(mu, f)), &a, &series)?;
        }
    }
    Ok(())
}

fn write_group(rd: &mut RunDir, prefix: &str, a: &GroupAnalysis, series: &[Vec<SampleObservables>]) -> Result<()> {
    for (k, s) in series.iter().enumerate() {
        rd.write(&format!("{prefix}samples_{k:03}.csv"), |w| write_samples_csv(s, w))?;
    }
    rd.write(&format!("{prefix}hist2d.csv"), |w| a.hist_2d.write_csv(w))?;
    rd.write(&format!("{prefix}hist_n.csv"), |w| a.hist_n.write_csv(w))?;
    rd.write(&format!("{prefix}hist_D.csv"), |w| a.hist_d.write_csv(w))?;
    for (k, spec) in a.spectra.iter().enumerate() {
        rd.write(&format!("{prefix}spectrum_{k:03}.csv"), |w| spec.write_csv(w))?;
    }
    rd.write(&format!("{prefix}summary.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &a.summary)?;
        writeln!(w)
    })?;
    Ok(())
}

/// One indicator point: time-averaged `min(g2_11, g2_22)` and entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorPoint {
    pub mu: f64,
    #[serde(rename = "F_mu")]
    pub f_mu: f64,
    pub g2min: f64,
    pub entropy: f64,
}

pub fn indicator_point(cfg: &RunConfig, sweep: &SweepResult, mu: f64, f: f64, seed: u64) -> Result<(IndicatorPoint, TrajectoryConfig)> {
    let ic = &cfg.indicators;
    let model = cfg.model.with_mu(mu);
    let it = IntegratorConfig { compute_entropy: true, ..cfg.integrator.clone() };
    let hint = truncation_hint(mu, max_intensity(sweep, f), it.n_max_start);
    let p = model.physical_at(f);
    let tc = prepare(&p, &it, ic.t_final, ic.sample_interval, seed, None, hint, p.drive)?;
    let (rec, tc) =
        with_regrowth(tc, &it, run_trajectory).with_context(|| format!("indicator run at mu = {mu}, f = {f}"))?;
    let g1 = time_averaged_g2(&rec.samples, Mode::First, ic.discard)?;
    let g2 = time_averaged_g2(&rec.samples, Mode::Second, ic.discard)?;
    let t: Vec<f64> = rec.samples.iter().map(|s| s.t).collect();
    let e: Vec<f64> = rec.samples.iter().map(|s| s.entropy).collect();
    let entropy = time_average(&t, &e, ic.discard)?.mean;
    Ok((IndicatorPoint { mu, f_mu: model.f_mu_from_f(f), g2min: g1.min(g2), entropy }, tc))
}

fn cmd_indicators(cfg: &RunConfig, rd: &mut RunDir) -> Result<()> {
    let ic = &cfg.indicators;
    let fs = ic.f_grid.values();
    let sweep = reference_sweep(&cfg.model, ic.f_grid.stop, 0)?;
    let mut jobs = Vec::new();
    for &mu in &ic.mu_values {
        for &f in &fs {
            jobs.push((mu, f, cfg.base_seed + jobs.len() as u64));
        }
    }
    use rayon::prelude::*;
    let results: Vec<Result<(IndicatorPoint, TrajectoryConfig)>> =
        jobs.par_iter().map(|&(mu, f, seed)| indicator_point(cfg, &sweep, mu, f, seed)).collect();
    let mut points = Vec::new();
    for (r, (mu, f, _)) in results.into_iter().zip(&jobs) {
        let (pt, tc) = r?;
        rd.record_truncation(label(*mu, *f), &tc.trunc, tc.dt);
        points.push(pt);
    }
    rd.write("indicators.csv", |w| write_indicators_csv(&points, w))?;
    Ok(())
}

pub const INDICATOR_HEADER: &str = "mu,F_mu,g2min,entropy";

pub fn write_indicators_csv<W: Write + ?Sized>(points: &[IndicatorPoint], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "{INDICATOR_HEADER}")?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.mu, p.f_mu, p.g2min, p.entropy)?;
    }
    Ok(())
}
