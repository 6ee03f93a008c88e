//! Monte Carlo wave-function trajectories under the effective Hamiltonian,
//! linear drive ramps, seeded ensembles and a dense master-equation oracle.

use std::io::{self, BufRead, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hilbert::{
    build_effective_hamiltonian, mode_annihilator, HilbertError, Mode, ModeTruncation, PhysicalParams,
    SparseOperator, WaveFunction,
};
use crate::observables::{sample_observables, ObservablesError, SampleObservables};
use crate::C64;

/// Identifier of the per-trajectory random stream, recorded in manifests.
pub const PRNG_ID: &str = "ChaCha8Rng (rand_chacha 0.9), seed_from_u64";
pub const DEFAULT_DT: f64 = 0.002;
pub const DEFAULT_JUMP_TIME_TOL: f64 = 1e-6;
pub const DEFAULT_RAMP_RATE: f64 = 0.216;
/// Normalised population on the truncation edge that aborts a run.
pub const EDGE_POPULATION_LIMIT: f64 = 1e-4;
/// Edge population a pilot run must stay below for a truncation to be accepted.
pub const PILOT_EDGE_LIMIT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("invalid trajectory config: {0}")]
    InvalidConfig(String),
    #[error("non-finite amplitudes at t = {t} (step size too large?)")]
    NonFinite { t: f64 },
    #[error("truncation overflow at t = {t}: edge population {population:.3e} with n_max = ({n_max_1}, {n_max_2})")]
    TruncationOverflow { t: f64, population: f64, n_max_1: usize, n_max_2: usize },
    #[error("jump requested at t = {t} but both mode populations vanish")]
    NoJump { t: f64 },
    #[error("jump time not bracketed: norm {start} at start, {end} at end, threshold {threshold}")]
    NoBracket { start: f64, end: f64, threshold: f64 },
    #[error("master equation trace drift {drift:.3e} at t = {t}")]
    TraceDrift { t: f64, drift: f64 },
    #[error("trajectory {index} failed")]
    Ensemble { index: usize, source: Box<TrajectoryError> },
    #[error("adaptive truncation exceeded n_max = {0}")]
    TruncationLimit(usize),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
    #[error(transparent)]
    Observables(#[from] ObservablesError),
}

/// `F(t) = F_start + rate t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RampSchedule {
    pub rate: f64,
    #[serde(rename = "F_start")]
    pub f_start: f64,
}

impl RampSchedule {
    pub fn drive_at(&self, t: f64) -> f64 {
        self.f_start + self.rate * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub params: PhysicalParams,
    pub trunc: ModeTruncation,
    pub t_final: f64,
    pub dt: f64,
    pub sample_interval: f64,
    pub seed: u64,
    pub jump_time_tol: f64,
    pub initial_state: WaveFunction,
    pub ramp: Option<RampSchedule>,
    /// Entropy needs an eigen-solve per sample; off by default.
    pub compute_entropy: bool,
    pub edge_limit: f64,
    /// Order in which the two channels partition the uniform draw at a jump.
    pub channel_order: [Mode; 2],
}

impl TrajectoryConfig {
    /// Vacuum start with default step, tolerance and guard settings.
    pub fn new(params: PhysicalParams, trunc: ModeTruncation, t_final: f64, sample_interval: f64, seed: u64) -> Self {
        Self {
            params,
            trunc,
            t_final,
            dt: DEFAULT_DT,
            sample_interval,
            seed,
            jump_time_tol: DEFAULT_JUMP_TIME_TOL,
            initial_state: WaveFunction::vacuum(&trunc),
            ramp: None,
            compute_entropy: false,
            edge_limit: EDGE_POPULATION_LIMIT,
            channel_order: [Mode::First, Mode::Second],
        }
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let bad = |m: String| Err(TrajectoryError::InvalidConfig(m));
        self.params.validate()?;
        if !(self.dt > 0.0 && self.dt <= self.sample_interval && self.sample_interval <= self.t_final) {
            return bad(format!(
                "need 0 < dt <= sample_interval <= t_final (got {}, {}, {})",
                self.dt, self.sample_interval, self.t_final
            ));
        }
        if !self.t_final.is_finite() {
            return bad("t_final must be finite".into());
        }
        if !(self.jump_time_tol > 0.0 && self.jump_time_tol < self.dt) {
            return bad(format!("need 0 < jump_time_tol < dt (got {})", self.jump_time_tol));
        }
        if self.initial_state.dim() != self.trunc.dim() {
            return bad(format!("initial state dimension {} != {}", self.initial_state.dim(), self.trunc.dim()));
        }
        if (self.initial_state.norm_sqr() - 1.0).abs() > 1e-10 {
            return bad("initial state is not normalised".into());
        }
        if let Some(r) = self.ramp {
            if !(r.f_start >= 0.0 && r.drive_at(self.t_final) >= 0.0 && r.rate.is_finite()) {
                return bad("ramp drive must stay non-negative".into());
            }
        }
        if self.channel_order[0] == self.channel_order[1] {
            return bad("channel order must list both modes".into());
        }
        Ok(())
    }

    /// Largest RK4 step that stays inside the stability region for this
    /// truncation and the largest drive reached: `2.5 / radius`.
    pub fn stable_step(&self) -> f64 {
        let drive = self.drive_at(0.0).abs().max(self.drive_at(self.t_final).abs());
        let r = DimerGenerator::new(&self.params, &self.trunc).spectral_bound(drive);
        if r > 0.0 {
            2.5 / r
        } else {
            f64::INFINITY
        }
    }

    /// Lower `dt` to [`Self::stable_step`] when needed.
    pub fn with_stable_dt(mut self) -> Self {
        self.dt = self.dt.min(self.stable_step());
        self
    }

    pub fn drive_at(&self, t: f64) -> f64 {
        self.ramp.map_or(self.params.drive, |r| r.drive_at(t))
    }

    /// SHA-256 over every field that influences the record.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            params: &'a PhysicalParams,
            trunc: &'a ModeTruncation,
            t_final: f64,
            dt: f64,
            sample_interval: f64,
            seed: u64,
            jump_time_tol: f64,
            ramp: &'a Option<RampSchedule>,
            compute_entropy: bool,
            edge_limit: f64,
            channel_order: [Mode; 2],
        }
        let view = View {
            params: &self.params,
            trunc: &self.trunc,
            t_final: self.t_final,
            dt: self.dt,
            sample_interval: self.sample_interval,
            seed: self.seed,
            jump_time_tol: self.jump_time_tol,
            ramp: &self.ramp,
            compute_entropy: self.compute_entropy,
            edge_limit: self.edge_limit,
            channel_order: self.channel_order,
        };
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&view).expect("config view serialises"));
        for a in self.initial_state.amplitudes() {
            h.update(a.re.to_le_bytes());
            h.update(a.im.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub t: f64,
    pub channel: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub samples: Vec<SampleObservables>,
    /// Drive amplitude at each sample time.
    pub drive: Vec<f64>,
    pub jumps: Vec<JumpEvent>,
    pub seed: u64,
    pub config_digest: String,
    pub max_edge_population: f64,
    /// Largest `| ||psi||^2 - 1 |` right after a jump.
    pub max_post_jump_norm_error: f64,
    pub steps: u64,
}

impl TrajectoryRecord {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// Equality of every stored float by bit pattern, so NaN markers compare equal.
    pub fn bit_identical(&self, other: &Self) -> bool {
        let sample_bits = |s: &SampleObservables| [s.t, s.n1, s.n2, s.o, s.g2m1, s.g2m2, s.entropy].map(f64::to_bits);
        self.samples.len() == other.samples.len()
            && self.samples.iter().zip(&other.samples).all(|(a, b)| sample_bits(a) == sample_bits(b))
            && self.drive.iter().map(|f| f.to_bits()).eq(other.drive.iter().map(|f| f.to_bits()))
            && self.jumps.len() == other.jumps.len()
            && self.jumps.iter().zip(&other.jumps).all(|(a, b)| a.t.to_bits() == b.t.to_bits() && a.channel == b.channel)
            && self.seed == other.seed
            && self.config_digest == other.config_digest
            && self.steps == other.steps
    }
}

/// `-i H_eff` for the dimer with index arithmetic instead of a stored matrix.
/// Inputs are zero-padded by one row (`n_max_2 + 1` entries) on each side so
/// every neighbour offset is in bounds; coefficients vanish where a neighbour
/// does not exist.
#[derive(Debug, Clone)]
pub struct DimerGenerator {
    dim: usize,
    cols: usize,
    diag: Vec<C64>,
    s2_up: Vec<f64>,
    s2_dn: Vec<f64>,
    s1_up: Vec<f64>,
    s1_dn: Vec<f64>,
    hop_a: Vec<f64>,
    hop_b: Vec<f64>,
    occupation: Vec<f64>,
}

impl DimerGenerator {
    pub fn new(p: &PhysicalParams, trunc: &ModeTruncation) -> Self {
        let dim = trunc.dim();
        let cols = trunc.mode_dim(Mode::Second);
        let (m1, m2) = (trunc.n_max_1(), trunc.n_max_2());
        let mut g = Self {
            dim,
            cols,
            diag: Vec::with_capacity(dim),
            s2_up: Vec::with_capacity(dim),
            s2_dn: Vec::with_capacity(dim),
            s1_up: Vec::with_capacity(dim),
            s1_dn: Vec::with_capacity(dim),
            hop_a: Vec::with_capacity(dim),
            hop_b: Vec::with_capacity(dim),
            occupation: Vec::with_capacity(dim),
        };
        for i in 0..dim {
            let (n1, n2) = trunc.levels(i);
            let (f1, f2) = (n1 as f64, n2 as f64);
            let e = -p.detuning * (f1 + f2) + p.onsite * (f1 * (f1 - 1.0) + f2 * (f2 - 1.0));
            g.diag.push(C64::new(e, -0.5 * p.loss_rate * (f1 + f2)));
            g.s2_up.push(if n2 < m2 { (f2 + 1.0).sqrt() } else { 0.0 });
            g.s2_dn.push(f2.sqrt());
            g.s1_up.push(if n1 < m1 { (f1 + 1.0).sqrt() } else { 0.0 });
            g.s1_dn.push(f1.sqrt());
            g.hop_a.push(if n1 > 0 && n2 < m2 { -p.hopping * (f1 * (f2 + 1.0)).sqrt() } else { 0.0 });
            g.hop_b.push(if n1 < m1 && n2 > 0 { -p.hopping * ((f1 + 1.0) * f2).sqrt() } else { 0.0 });
            g.occupation.push(f1 + f2);
        }
        g
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn padding(&self) -> usize {
        self.cols
    }

    pub fn padded_len(&self) -> usize {
        self.dim + 2 * self.cols
    }

    /// Gershgorin bound on the spectral radius of `H_eff` at drive `drive`.
    pub fn spectral_bound(&self, drive: f64) -> f64 {
        (0..self.dim)
            .map(|i| {
                self.diag[i].norm()
                    + self.hop_a[i].abs()
                    + self.hop_b[i].abs()
                    + drive.abs() * (self.s1_up[i] + self.s1_dn[i] + self.s2_up[i] + self.s2_dn[i])
            })
            .fold(0.0, f64::max)
    }

    /// `y = -i H_eff(drive) x` with `x` padded and `y` unpadded.
    pub fn apply(&self, x: &[C64], drive: f64, y: &mut [C64]) {
        let (d, c) = (self.dim, self.cols);
        assert_eq!(x.len(), d + 2 * c);
        let x0 = &x[c..c + d];
        let left = &x[c - 1..c - 1 + d];
        let right = &x[c + 1..c + 1 + d];
        let up = &x[..d];
        let down = &x[2 * c..2 * c + d];
        let diag_up = &x[1..1 + d];
        let diag_down = &x[2 * c - 1..2 * c - 1 + d];
        let (diag, s2u, s2d, s1u, s1d, ha, hb) = (
            &self.diag[..d],
            &self.s2_up[..d],
            &self.s2_dn[..d],
            &self.s1_up[..d],
            &self.s1_dn[..d],
            &self.hop_a[..d],
            &self.hop_b[..d],
        );
        let y = &mut y[..d];
        for i in 0..d {
            let drive_sum = right[i] * s2u[i] + left[i] * s2d[i] + down[i] * s1u[i] + up[i] * s1d[i];
            let h = diag[i] * x0[i] + drive_sum * drive + diag_up[i] * ha[i] + diag_down[i] * hb[i];
            y[i] = C64::new(h.im, -h.re);
        }
    }

    /// `sum_i (n1 + n2) |x_i|^2` over the unpadded vector.
    fn occupation_weight(&self, x: &[C64]) -> f64 {
        x.iter().zip(&self.occupation).map(|(a, n)| a.norm_sqr() * n).sum()
    }
}

fn norm_sqr(x: &[C64]) -> f64 {
    x.iter().map(|a| a.norm_sqr()).sum()
}

/// Work buffers for RK4 on padded vectors.
struct Stepper {
    gen: DimerGenerator,
    k: [Vec<C64>; 4],
    stage: Vec<C64>,
}

impl Stepper {
    fn new(gen: DimerGenerator) -> Self {
        let d = gen.dim();
        let stage = vec![C64::new(0.0, 0.0); gen.padded_len()];
        Self { k: std::array::from_fn(|_| vec![C64::new(0.0, 0.0); d]), stage, gen }
    }

    /// One classical RK4 step of length `h` from `x` (padded) into `out` (padded).
    fn step(&mut self, x: &[C64], h: f64, drive: [f64; 3], out: &mut [C64]) {
        let p = self.gen.padding();
        let d = self.gen.dim();
        let [k1, k2, k3, k4] = &mut self.k;
        self.gen.apply(x, drive[0], k1);
        for ((s, &a), &k) in self.stage[p..p + d].iter_mut().zip(&x[p..p + d]).zip(k1.iter()) {
            *s = a + k * (0.5 * h);
        }
        self.gen.apply(&self.stage, drive[1], k2);
        for ((s, &a), &k) in self.stage[p..p + d].iter_mut().zip(&x[p..p + d]).zip(k2.iter()) {
            *s = a + k * (0.5 * h);
        }
        self.gen.apply(&self.stage, drive[1], k3);
        for ((s, &a), &k) in self.stage[p..p + d].iter_mut().zip(&x[p..p + d]).zip(k3.iter()) {
            *s = a + k * h;
        }
        self.gen.apply(&self.stage, drive[2], k4);
        let w = h / 6.0;
        for i in 0..d {
            out[p + i] = x[p + i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * w;
        }
    }
}

fn check_finite(x: &[C64], t: f64) -> Result<(), TrajectoryError> {
    if x.iter().all(|a| a.re.is_finite() && a.im.is_finite()) {
        Ok(())
    } else {
        Err(TrajectoryError::NonFinite { t })
    }
}

fn padded(psi: &WaveFunction, pad: usize) -> Vec<C64> {
    let mut v = vec![C64::new(0.0, 0.0); psi.dim() + 2 * pad];
    v[pad..pad + psi.dim()].copy_from_slice(psi.amplitudes());
    v
}

/// One RK4 step of `d psi/dt = -i H_eff psi` with a stored operator.
pub fn evolve_segment(psi: &WaveFunction, h_eff: &SparseOperator, dt: f64) -> Result<WaveFunction, TrajectoryError> {
    if !(dt > 0.0) {
        return Err(TrajectoryError::InvalidConfig(format!("dt must be positive (got {dt})")));
    }
    h_eff.check_dim(psi.dim())?;
    let d = psi.dim();
    let f = |x: &[C64]| -> Vec<C64> {
        let mut y = vec![C64::new(0.0, 0.0); d];
        h_eff.mul_vec_into(x, &mut y);
        y.iter().map(|h| C64::new(h.im, -h.re)).collect()
    };
    let x = psi.amplitudes();
    let axpy = |k: &[C64], s: f64| -> Vec<C64> { x.iter().zip(k).map(|(a, b)| a + b * s).collect() };
    let k1 = f(x);
    let k2 = f(&axpy(&k1, 0.5 * dt));
    let k3 = f(&axpy(&k2, 0.5 * dt));
    let k4 = f(&axpy(&k3, dt));
    let out: Vec<C64> =
        (0..d).map(|i| x[i] + (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (dt / 6.0)).collect();
    check_finite(&out, dt)?;
    Ok(WaveFunction::from_amplitudes(out))
}

/// Time in `[t0, t0 + dt]` at which the squared norm of the no-jump evolution
/// from `psi0` falls to `r`, located by bisection on RK4 substeps of `psi0`.
pub fn find_jump_time(
    psi0: &WaveFunction,
    h_eff: &SparseOperator,
    t0: f64,
    dt: f64,
    r: f64,
    tol: f64,
) -> Result<f64, TrajectoryError> {
    let start = psi0.norm_sqr();
    let end = evolve_segment(psi0, h_eff, dt)?.norm_sqr();
    if !(start > r && end <= r) {
        return Err(TrajectoryError::NoBracket { start, end, threshold: r });
    }
    let (mut lo, mut hi) = (0.0, dt);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if evolve_segment(psi0, h_eff, mid)?.norm_sqr() > r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(t0 + 0.5 * (lo + hi))
}

/// Cubic Hermite interpolant of the squared norm on `[0, h]` from its values
/// and derivatives at the ends, bisected for the crossing of `r`.
fn hermite_crossing(n0: f64, dn0: f64, n1: f64, dn1: f64, h: f64, r: f64, tol: f64) -> f64 {
    let p = |tau: f64| {
        let t2 = tau * tau;
        let t3 = t2 * tau;
        (2.0 * t3 - 3.0 * t2 + 1.0) * n0
            + (t3 - 2.0 * t2 + tau) * h * dn0
            + (-2.0 * t3 + 3.0 * t2) * n1
            + (t3 - t2) * h * dn1
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while (hi - lo) * h > tol {
        let mid = 0.5 * (lo + hi);
        if p(mid) > r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi) * h
}

fn annihilate_into(x: &[C64], trunc: &ModeTruncation, mode: Mode, out: &mut [C64]) {
    let cols = trunc.mode_dim(Mode::Second);
    for i in 0..trunc.dim() {
        let (n1, n2) = trunc.levels(i);
        out[i] = match mode {
            Mode::First if n1 < trunc.n_max_1() => x[i + cols] * ((n1 + 1) as f64).sqrt(),
            Mode::Second if n2 < trunc.n_max_2() => x[i + 1] * ((n2 + 1) as f64).sqrt(),
            _ => C64::new(0.0, 0.0),
        };
    }
}

fn mode_weights(x: &[C64], trunc: &ModeTruncation) -> (f64, f64) {
    let cols = trunc.mode_dim(Mode::Second);
    let (mut p1, mut p2) = (0.0, 0.0);
    for (row, chunk) in x.chunks_exact(cols).enumerate() {
        let mut w_row = 0.0;
        for (k, a) in chunk.iter().enumerate() {
            let w = a.norm_sqr();
            w_row += w;
            p2 += w * k as f64;
        }
        p1 += w_row * row as f64;
    }
    (p1, p2)
}

fn choose_channel(p: (f64, f64), order: [Mode; 2], u: f64) -> Mode {
    let weight = |m: Mode| if m == Mode::First { p.0 } else { p.1 };
    if u * (p.0 + p.1) < weight(order[0]) {
        order[0]
    } else {
        order[1]
    }
}

/// Quantum jump with channel probabilities `<n_i> / <n_1 + n_2>`; the result
/// is `a_i psi` renormalised.
pub fn perform_jump<R: Rng>(
    psi: &WaveFunction,
    trunc: &ModeTruncation,
    rng: &mut R,
) -> Result<(WaveFunction, Mode), TrajectoryError> {
    perform_jump_ordered(psi, trunc, rng, [Mode::First, Mode::Second])
}

pub fn perform_jump_ordered<R: Rng>(
    psi: &WaveFunction,
    trunc: &ModeTruncation,
    rng: &mut R,
    order: [Mode; 2],
) -> Result<(WaveFunction, Mode), TrajectoryError> {
    if psi.dim() != trunc.dim() {
        return Err(HilbertError::DimensionMismatch { expected: trunc.dim(), found: psi.dim() }.into());
    }
    let p = mode_weights(psi.amplitudes(), trunc);
    if !(p.0 + p.1 > 0.0) {
        return Err(TrajectoryError::NoJump { t: f64::NAN });
    }
    let mode = choose_channel(p, order, rng.random::<f64>());
    let mut out = vec![C64::new(0.0, 0.0); trunc.dim()];
    annihilate_into(psi.amplitudes(), trunc, mode, &mut out);
    let mut out = WaveFunction::from_amplitudes(out);
    out.normalize();
    Ok((out, mode))
}

/// Uniform draw in `(0, 1]`.
fn threshold<R: Rng>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Standard MCWF loop: evolve without jumps until the squared norm reaches a
/// uniform threshold, jump, redraw. Samples are conditional expectations of
/// the normalised state on the `sample_interval` grid, starting at `t = 0`.
pub fn run_trajectory(cfg: &TrajectoryConfig) -> Result<TrajectoryRecord, TrajectoryError> {
    cfg.validate()?;
    let trunc = cfg.trunc;
    let gen = DimerGenerator::new(&cfg.params, &trunc);
    let max_drive = cfg.drive_at(0.0).abs().max(cfg.drive_at(cfg.t_final).abs());
    let limit = 2.5 / gen.spectral_bound(max_drive);
    if cfg.dt > limit {
        return Err(TrajectoryError::InvalidConfig(format!(
            "dt = {} exceeds the RK4 stability bound {limit:.3e} for n_max = ({}, {})",
            cfg.dt,
            trunc.n_max_1(),
            trunc.n_max_2()
        )));
    }
    let pad = gen.padding();
    let d = gen.dim();
    let gamma = cfg.params.loss_rate;
    let mut stepper = Stepper::new(gen);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut psi = padded(&cfg.initial_state, pad);
    let mut next = vec![C64::new(0.0, 0.0); psi.len()];
    let mut r = threshold(&mut rng);

    let n_samples = (cfg.t_final / cfg.sample_interval + 1e-9).floor() as usize + 1;
    let mut record = TrajectoryRecord {
        samples: Vec::with_capacity(n_samples),
        drive: Vec::with_capacity(n_samples),
        jumps: Vec::new(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        max_edge_population: 0.0,
        max_post_jump_norm_error: 0.0,
        steps: 0,
    };

    let take_sample = |x: &[C64], t: f64, record: &mut TrajectoryRecord| -> Result<(), TrajectoryError> {
        let wf = WaveFunction::from_amplitudes(x.to_vec());
        let edge = wf.edge_population(&trunc);
        record.max_edge_population = record.max_edge_population.max(edge);
        if edge > cfg.edge_limit {
            return Err(TrajectoryError::TruncationOverflow {
                t,
                population: edge,
                n_max_1: trunc.n_max_1(),
                n_max_2: trunc.n_max_2(),
            });
        }
        record.samples.push(sample_observables(&wf, &trunc, t, cfg.compute_entropy)?);
        record.drive.push(cfg.drive_at(t));
        Ok(())
    };

    let mut t = 0.0;
    take_sample(&psi[pad..pad + d], t, &mut record)?;
    let mut k_sample = 1usize;
    while k_sample < n_samples {
        let t_sample = k_sample as f64 * cfg.sample_interval;
        let t_target = (t + cfg.dt).min(t_sample);
        let h = t_target - t;
        let drives = [cfg.drive_at(t), cfg.drive_at(t + 0.5 * h), cfg.drive_at(t_target)];
        stepper.step(&psi, h, drives, &mut next);
        record.steps += 1;
        let n1 = norm_sqr(&next[pad..pad + d]);
        if !n1.is_finite() {
            return Err(TrajectoryError::NonFinite { t: t_target });
        }
        if n1 > r {
            std::mem::swap(&mut psi, &mut next);
            t = t_target;
            if t == t_sample {
                take_sample(&psi[pad..pad + d], t, &mut record)?;
                k_sample += 1;
            }
            continue;
        }

        // jump inside (t, t_target]
        let x0 = &psi[pad..pad + d];
        let n0 = norm_sqr(x0);
        let dn0 = -gamma * stepper.gen.occupation_weight(x0);
        let dn1 = -gamma * stepper.gen.occupation_weight(&next[pad..pad + d]);
        let s = hermite_crossing(n0, dn0, n1, dn1, h, r, cfg.jump_time_tol);
        let drives = [cfg.drive_at(t), cfg.drive_at(t + 0.5 * s), cfg.drive_at(t + s)];
        stepper.step(&psi, s, drives, &mut next);
        record.steps += 1;
        t += s;
        check_finite(&next[pad..pad + d], t)?;

        let weights = mode_weights(&next[pad..pad + d], &trunc);
        if !(weights.0 + weights.1 > 0.0) {
            return Err(TrajectoryError::NoJump { t });
        }
        let mode = choose_channel(weights, cfg.channel_order, rng.random::<f64>());
        annihilate_into(&next[pad..pad + d], &trunc, mode, &mut psi[pad..pad + d]);
        let norm = norm_sqr(&psi[pad..pad + d]).sqrt();
        psi[pad..pad + d].iter_mut().for_each(|a| *a /= norm);
        let err = (norm_sqr(&psi[pad..pad + d]) - 1.0).abs();
        record.max_post_jump_norm_error = record.max_post_jump_norm_error.max(err);
        record.jumps.push(JumpEvent { t, channel: mode.index() });
        r = threshold(&mut rng);
    }
    Ok(record)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub records: Vec<TrajectoryRecord>,
    pub times: Vec<f64>,
    pub mean_n1: Vec<f64>,
    pub mean_n2: Vec<f64>,
    /// Standard error of the mean across trajectories.
    pub sem_n1: Vec<f64>,
    pub sem_n2: Vec<f64>,
}

/// Trajectory `k` uses seed `base_seed + k`. Runs on the current rayon pool;
/// results do not depend on the number of workers.
pub fn run_ensemble(cfg: &TrajectoryConfig, n_traj: usize, base_seed: u64) -> Result<EnsembleResult, TrajectoryError> {
    if n_traj == 0 {
        return Err(TrajectoryError::InvalidConfig("n_traj must be at least 1".into()));
    }
    let results: Vec<Result<TrajectoryRecord, TrajectoryError>> = (0..n_traj)
        .into_par_iter()
        .map(|k| {
            let c = TrajectoryConfig { seed: base_seed.wrapping_add(k as u64), ..cfg.clone() };
            run_trajectory(&c)
        })
        .collect();
    let mut records = Vec::with_capacity(n_traj);
    for (index, r) in results.into_iter().enumerate() {
        records.push(r.map_err(|e| TrajectoryError::Ensemble { index, source: Box::new(e) })?);
    }
    let times = records[0].times();
    let n = n_traj as f64;
    let stats = |pick: fn(&SampleObservables) -> f64| -> (Vec<f64>, Vec<f64>) {
        (0..times.len())
            .map(|k| {
                let mean = records.iter().map(|r| pick(&r.samples[k])).sum::<f64>() / n;
                let var = if n_traj > 1 {
                    records.iter().map(|r| (pick(&r.samples[k]) - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                (mean, (var / n).sqrt())
            })
            .unzip()
    };
    let (mean_n1, sem_n1) = stats(|s| s.n1);
    let (mean_n2, sem_n2) = stats(|s| s.n2);
    Ok(EnsembleResult { records, times, mean_n1, mean_n2, sem_n1, sem_n2 })
}

/// Grow a symmetric truncation by 25% until a pilot run keeps the edge
/// population below [`PILOT_EDGE_LIMIT`]. Returns the accepted truncation and
/// the pilot's largest edge population. Pilots run with `dt` lowered to the
/// stability bound, so callers should apply [`TrajectoryConfig::with_stable_dt`].
pub fn adaptive_truncation(
    template: &TrajectoryConfig,
    n_start: usize,
    n_limit: usize,
    pilot_time: f64,
) -> Result<(ModeTruncation, f64), TrajectoryError> {
    let mut n = n_start.max(1);
    loop {
        if n > n_limit {
            return Err(TrajectoryError::TruncationLimit(n_limit));
        }
        let trunc = ModeTruncation::symmetric(n)?;
        let initial = if template.initial_state.dim() == trunc.dim() {
            template.initial_state.clone()
        } else {
            WaveFunction::vacuum(&trunc)
        };
        let pilot = TrajectoryConfig {
            trunc,
            t_final: pilot_time,
            sample_interval: template.sample_interval.min(pilot_time),
            initial_state: initial,
            compute_entropy: false,
            edge_limit: f64::INFINITY,
            ..template.clone()
        }
        .with_stable_dt();
        let rec = run_trajectory(&pilot)?;
        if rec.max_edge_population < PILOT_EDGE_LIMIT {
            return Ok((trunc, rec.max_edge_population));
        }
        n = ((n as f64) * 1.25).ceil() as usize;
    }
}

/// Step bound for RK4 from the Gershgorin radius of `H_eff`: `2.5 / radius`.
pub fn stable_dt(h_eff: &SparseOperator) -> f64 {
    let r = h_eff.gershgorin_radius();
    if r > 0.0 {
        2.5 / r
    } else {
        f64::INFINITY
    }
}

pub type DensityMatrix = DMatrix<C64>;

pub fn pure_density(psi: &WaveFunction) -> DensityMatrix {
    let v = nalgebra::DVector::from_column_slice(psi.amplitudes());
    &v * v.adjoint()
}

fn sparse_times_dense(op: &SparseOperator, m: &DensityMatrix) -> DensityMatrix {
    let mut out = DensityMatrix::zeros(op.dim(), m.ncols());
    for (r, c, v) in op.entries() {
        for k in 0..m.ncols() {
            out[(r, k)] += v * m[(c, k)];
        }
    }
    out
}

struct Lindblad {
    h_eff: SparseOperator,
    jumps: [SparseOperator; 2],
    gamma: f64,
}

impl Lindblad {
    fn rhs(&self, rho: &DensityMatrix) -> DensityMatrix {
        let k = sparse_times_dense(&self.h_eff, rho);
        // -i (H_eff rho - rho H_eff^dag) = -i K + i K^dag
        let mut out = (k.adjoint() - &k) * C64::new(0.0, 1.0);
        for a in &self.jumps {
            let m = sparse_times_dense(a, rho);
            out += sparse_times_dense(a, &m.adjoint()) * C64::new(self.gamma, 0.0);
        }
        out
    }

    fn step(&self, rho: &DensityMatrix, h: f64) -> DensityMatrix {
        let k1 = self.rhs(rho);
        let k2 = self.rhs(&(rho + &k1 * C64::new(0.5 * h, 0.0)));
        let k3 = self.rhs(&(rho + &k2 * C64::new(0.5 * h, 0.0)));
        let k4 = self.rhs(&(rho + &k3 * C64::new(h, 0.0)));
        rho + (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0)
    }
}

/// RK4 integration of the Lindblad master equation, returning `rho` at each
/// of the (ascending) `times`.
pub fn master_equation_series(
    p: &PhysicalParams,
    trunc: &ModeTruncation,
    rho0: &DensityMatrix,
    times: &[f64],
    dt: f64,
) -> Result<Vec<DensityMatrix>, TrajectoryError> {
    p.validate()?;
    if rho0.nrows() != trunc.dim() || rho0.ncols() != trunc.dim() {
        return Err(HilbertError::DimensionMismatch { expected: trunc.dim(), found: rho0.nrows() }.into());
    }
    if !(dt > 0.0) || times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|&t| t < 0.0) {
        return Err(TrajectoryError::InvalidConfig("need dt > 0 and ascending non-negative times".into()));
    }
    let lb = Lindblad {
        h_eff: build_effective_hamiltonian(p, trunc),
        jumps: [mode_annihilator(trunc, Mode::First), mode_annihilator(trunc, Mode::Second)],
        gamma: p.loss_rate,
    };
    let trace0 = rho0.trace().re;
    let mut rho = rho0.clone();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while t < target {
            let h = dt.min(target - t);
            rho = lb.step(&rho, h);
            t = if target - t <= dt { target } else { t + h };
        }
        let drift = (rho.trace().re - trace0).abs();
        if drift > 1e-8 * t.max(1.0) || !drift.is_finite() {
            return Err(TrajectoryError::TraceDrift { t, drift });
        }
        out.push(rho.clone());
    }
    Ok(out)
}

pub fn master_equation_evolve(
    p: &PhysicalParams,
    trunc: &ModeTruncation,
    rho0: &DensityMatrix,
    t_final: f64,
    dt: f64,
) -> Result<DensityMatrix, TrajectoryError> {
    Ok(master_equation_series(p, trunc, rho0, &[t_final], dt)?.pop().expect("one checkpoint"))
}

/// `(<n1>, <n2>)` of a density matrix.
pub fn density_photon_numbers(rho: &DensityMatrix, trunc: &ModeTruncation) -> (f64, f64) {
    let (mut n1, mut n2) = (0.0, 0.0);
    for i in 0..trunc.dim() {
        let (a, b) = trunc.levels(i);
        n1 += rho[(i, i)].re * a as f64;
        n2 += rho[(i, i)].re * b as f64;
    }
    (n1, n2)
}

pub const SAMPLE_HEADER: &str = "t,n1,n2,O,g2m1,g2m2,entropy";

pub fn write_samples_csv<W: Write>(samples: &[SampleObservables], mut w: W) -> io::Result<()> {
    writeln!(w, "{SAMPLE_HEADER}")?;
    for s in samples {
        writeln!(w, "{},{},{},{},{},{},{}", s.t, s.n1, s.n2, s.o, s.g2m1, s.g2m2, s.entropy)?;
    }
    Ok(())
}

pub fn write_jumps_ndjson<W: Write>(jumps: &[JumpEvent], mut w: W) -> io::Result<()> {
    for j in jumps {
        serde_json::to_writer(&mut w, j)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Parse a sample CSV written by [`write_samples_csv`]; the header must match.
pub fn read_samples_csv<R: BufRead>(r: R) -> io::Result<Vec<SampleObservables>> {
    let invalid = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != SAMPLE_HEADER {
        return Err(invalid(format!("expected header `{SAMPLE_HEADER}`, found `{}`", header.trim())));
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| invalid(format!("line {}: {e}", k + 2)))?;
        if v.len() != 7 {
            return Err(invalid(format!("line {}: expected 7 fields, found {}", k + 2, v.len())));
        }
        out.push(SampleObservables { t: v[0], n1: v[1], n2: v[2], o: v[3], g2m1: v[4], g2m2: v[5], entropy: v[6] });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{apply_operator, make_truncation};
    use approx::assert_abs_diff_eq;

    fn free(p_drive: f64) -> PhysicalParams {
        PhysicalParams { hopping: 0.0, detuning: 0.0, onsite: 0.0, loss_rate: 2.0, drive: p_drive, mu: 1.0 }
    }

    fn linear_cavity() -> PhysicalParams {
        PhysicalParams { hopping: 0.0, detuning: 4.5, onsite: 0.0, loss_rate: 2.0, drive: 1.0, mu: 1.0 }
    }

    #[test]
    fn generator_matches_sparse_hamiltonian() {
        let t = make_truncation(5, 3).unwrap();
        let p = PhysicalParams::study_point(1.7);
        let gen = DimerGenerator::new(&p, &t);
        let h = build_effective_hamiltonian(&p, &t);
        let psi = WaveFunction::from_amplitudes(
            (0..t.dim()).map(|k| C64::new((k as f64 * 0.37).sin(), (k as f64 * 0.11).cos())).collect(),
        );
        let mut y = vec![C64::new(0.0, 0.0); t.dim()];
        gen.apply(&padded(&psi, gen.padding()), p.drive, &mut y);
        let hx = apply_operator(&h, &psi).unwrap();
        for (a, b) in y.iter().zip(hx.amplitudes()) {
            assert!((a - b * C64::new(0.0, -1.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn vacuum_is_fixed_without_drive() {
        let t = make_truncation(3, 3).unwrap();
        let h = build_effective_hamiltonian(&free(0.0), &t);
        let out = evolve_segment(&WaveFunction::vacuum(&t), &h, 0.1).unwrap();
        assert_eq!(out, WaveFunction::vacuum(&t));
    }

    #[test]
    fn single_photon_decay() {
        let t = make_truncation(3, 3).unwrap();
        let h = build_effective_hamiltonian(&free(0.0), &t);
        let out = evolve_segment(&WaveFunction::fock(&t, 1, 0).unwrap(), &h, 0.1).unwrap();
        assert_abs_diff_eq!(out.norm_sqr(), (-0.2f64).exp(), epsilon = 1e-6);
        assert!(evolve_segment(&WaveFunction::vacuum(&t), &h, 0.0).is_err());
    }

    #[test]
    fn rk4_fourth_order() {
        let t = make_truncation(4, 4).unwrap();
        let p = PhysicalParams::study_point(1.0);
        let h = build_effective_hamiltonian(&p, &t);
        let psi0 = WaveFunction::coherent(&t, C64::new(0.5, 0.2), C64::new(-0.3, 0.1));
        let run = |dt: f64, steps: usize| {
            let mut psi = psi0.clone();
            for _ in 0..steps {
                psi = evolve_segment(&psi, &h, dt).unwrap();
            }
            psi.norm_sqr()
        };
        let reference = run(0.0005, 1000);
        let e1 = (run(0.01, 50) - reference).abs();
        let e2 = (run(0.005, 100) - reference).abs();
        let ratio = e1 / e2;
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn jump_time_examples() {
        let t = make_truncation(2, 2).unwrap();
        let h = build_effective_hamiltonian(&free(0.0), &t);
        let one = WaveFunction::fock(&t, 1, 0).unwrap();
        // start one step before the crossing
        let t0: f64 = 0.34;
        let psi0 = WaveFunction::from_amplitudes(one.amplitudes().iter().map(|a| a * (-t0).exp()).collect());
        let ts = find_jump_time(&psi0, &h, t0, 0.01, 0.5, 1e-9).unwrap();
        assert_abs_diff_eq!(ts, std::f64::consts::LN_2 / 2.0, epsilon = 1e-7);

        let psi0 = WaveFunction::from_amplitudes(one.amplitudes().iter().map(|a| a * (-0.995f64).exp()).collect());
        let ts = find_jump_time(&psi0, &h, 0.995, 0.01, (-2.0f64).exp(), 1e-9).unwrap();
        assert_abs_diff_eq!(ts, 1.0, epsilon = 1e-7);

        let ts = find_jump_time(&one, &h, 0.0, 0.01, 1.0 - 1e-12, 1e-9).unwrap();
        assert!(ts < 1e-8);
        assert!(find_jump_time(&one, &h, 0.0, 0.01, 0.1, 1e-6).is_err());
    }

    #[test]
    fn hermite_crossing_of_exponential() {
        // norm^2 = exp(-2 s) on [0, 0.002] with threshold halfway in log
        let h: f64 = 0.002;
        let r = (-2.0 * 0.0013f64).exp();
        let s = hermite_crossing(1.0, -2.0, (-2.0 * h).exp(), -2.0 * (-2.0 * h).exp(), h, r, 1e-12);
        assert_abs_diff_eq!(s, 0.0013, epsilon = 1e-10);
    }

    #[test]
    fn jump_channel_probabilities() {
        let t = make_truncation(2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (out, mode) = perform_jump(&WaveFunction::fock(&t, 1, 0).unwrap(), &t, &mut rng).unwrap();
        assert_eq!(mode, Mode::First);
        assert_eq!(out, WaveFunction::vacuum(&t));

        let count_first = |psi: &WaveFunction| {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..20000).filter(|_| perform_jump(psi, &t, &mut rng).unwrap().1 == Mode::First).count() as f64 / 20000.0
        };
        let even = WaveFunction::superposition(&t, &[((1, 0), C64::new(1.0, 0.0)), ((0, 1), C64::new(1.0, 0.0))])
            .unwrap();
        assert!((count_first(&even) - 0.5).abs() < 0.015);
        let biased =
            WaveFunction::superposition(&t, &[((1, 0), C64::new(3f64.sqrt(), 0.0)), ((0, 1), C64::new(1.0, 0.0))])
                .unwrap();
        assert!((count_first(&biased) - 0.75).abs() < 0.015);
        assert!(matches!(perform_jump(&WaveFunction::vacuum(&t), &t, &mut rng), Err(TrajectoryError::NoJump { .. })));

        // exact population ratio at the decision boundary
        assert_eq!(choose_channel((3.0, 1.0), [Mode::First, Mode::Second], 0.7499), Mode::First);
        assert_eq!(choose_channel((3.0, 1.0), [Mode::First, Mode::Second], 0.75), Mode::Second);
    }

    #[test]
    fn dark_vacuum_has_no_jumps() {
        let t = make_truncation(3, 3).unwrap();
        let cfg = TrajectoryConfig::new(PhysicalParams::study_point(0.0), t, 5.0, 0.5, 1);
        let rec = run_trajectory(&cfg).unwrap();
        assert!(rec.jumps.is_empty());
        assert_eq!(rec.samples.len(), 11);
        assert!(rec.samples.iter().all(|s| s.n1 == 0.0 && s.n2 == 0.0));
    }

    #[test]
    fn runs_are_deterministic() {
        let t = make_truncation(9, 9).unwrap();
        let mut cfg = TrajectoryConfig::new(PhysicalParams::study_point(1.0), t, 5.0, 0.1, 42);
        cfg.compute_entropy = true;
        let a = run_trajectory(&cfg).unwrap();
        let b = run_trajectory(&cfg).unwrap();
        assert!(a.bit_identical(&b));
        assert!(!a.jumps.is_empty());
        assert!(a.max_post_jump_norm_error < 1e-12);
        assert!(a.jumps.windows(2).all(|w| w[0].t <= w[1].t));
        assert!(a.samples.iter().all(|s| s.entropy >= 0.0 && s.n1 >= 0.0 && s.n1 <= 9.0));
        let other = run_trajectory(&TrajectoryConfig { seed: 43, ..cfg.clone() }).unwrap();
        assert_ne!(a.jumps, other.jumps);
        assert_ne!(a.config_digest, other.config_digest);
    }

    #[test]
    fn swap_covariance_with_shared_draws() {
        let t = make_truncation(10, 10).unwrap();
        let mut cfg = TrajectoryConfig::new(PhysicalParams::study_point(1.2), t, 4.0, 0.1, 5);
        cfg.initial_state = WaveFunction::coherent(&t, C64::new(0.8, 0.1), C64::new(0.2, -0.3));
        let mut mirrored = cfg.clone();
        mirrored.initial_state = cfg.initial_state.swap_modes(&t).unwrap();
        mirrored.channel_order = [Mode::Second, Mode::First];
        let a = run_trajectory(&cfg).unwrap();
        let b = run_trajectory(&mirrored).unwrap();
        assert_eq!(a.jumps.len(), b.jumps.len());
        for (x, y) in a.jumps.iter().zip(&b.jumps) {
            assert!((x.t - y.t).abs() < 1e-9);
            assert_eq!(x.channel, 3 - y.channel);
        }
        for (x, y) in a.samples.iter().zip(&b.samples) {
            let y = y.swapped();
            assert!((x.n1 - y.n1).abs() < 1e-9 && (x.n2 - y.n2).abs() < 1e-9);
        }
    }

    #[test]
    fn ramp_drive_is_linear() {
        let t = make_truncation(6, 6).unwrap();
        let mut cfg = TrajectoryConfig::new(PhysicalParams::study_point(0.0), t, 3.0, 0.25, 3);
        cfg.ramp = Some(RampSchedule { rate: DEFAULT_RAMP_RATE, f_start: 0.0 });
        let rec = run_trajectory(&cfg).unwrap();
        for (s, f) in rec.samples.iter().zip(&rec.drive) {
            assert_eq!(*f, 0.216 * s.t);
        }
        cfg.ramp = Some(RampSchedule { rate: -1.0, f_start: 0.5 });
        assert!(run_trajectory(&cfg).is_err());
    }

    #[test]
    fn truncation_guard_aborts() {
        let t = make_truncation(2, 2).unwrap();
        let cfg = TrajectoryConfig::new(PhysicalParams::study_point(3.0), t, 5.0, 0.1, 1);
        assert!(matches!(run_trajectory(&cfg), Err(TrajectoryError::TruncationOverflow { .. })));
    }

    #[test]
    fn config_validation() {
        let t = make_truncation(2, 2).unwrap();
        let good = TrajectoryConfig::new(PhysicalParams::study_point(0.0), t, 1.0, 0.1, 1);
        assert!(good.validate().is_ok());
        assert!(TrajectoryConfig { dt: 0.2, ..good.clone() }.validate().is_err());
        assert!(TrajectoryConfig { jump_time_tol: 0.01, ..good.clone() }.validate().is_err());
        let unnormalised = WaveFunction::from_amplitudes(vec![C64::new(2.0, 0.0); 9]);
        assert!(TrajectoryConfig { initial_state: unnormalised, ..good.clone() }.validate().is_err());
        assert!(TrajectoryConfig { channel_order: [Mode::First; 2], ..good }.validate().is_err());
    }

    #[test]
    fn ensemble_is_independent_of_workers() {
        let t = make_truncation(8, 8).unwrap();
        let cfg = TrajectoryConfig::new(PhysicalParams::study_point(1.0), t, 2.0, 0.1, 0);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| run_ensemble(&cfg, 3, 100)).unwrap();
        let b = three.install(|| run_ensemble(&cfg, 3, 100)).unwrap();
        assert!(a.records.iter().zip(&b.records).all(|(x, y)| x.bit_identical(y)));
        assert_eq!(a.mean_n1, b.mean_n1);
        assert_eq!(a.records[2].seed, 102);
        assert_ne!(a.records[0].jumps, a.records[1].jumps);
        assert!(run_ensemble(&cfg, 0, 0).is_err());
    }

    #[test]
    fn master_equation_examples() {
        let t = make_truncation(3, 3).unwrap();
        let vac = pure_density(&WaveFunction::vacuum(&t));
        let out = master_equation_evolve(&free(0.0), &t, &vac, 1.0, 0.01).unwrap();
        assert_eq!(out, vac);

        let one = pure_density(&WaveFunction::fock(&t, 1, 0).unwrap());
        let series = master_equation_series(&free(0.0), &t, &one, &[0.5, 1.0], 0.001).unwrap();
        assert_abs_diff_eq!(density_photon_numbers(&series[0], &t).0, (-1.0f64).exp(), epsilon = 1e-9);
        assert_abs_diff_eq!(density_photon_numbers(&series[1], &t).0, (-2.0f64).exp(), epsilon = 1e-9);

        let lin = make_truncation(6, 6).unwrap();
        let rho = master_equation_evolve(&linear_cavity(), &lin, &pure_density(&WaveFunction::vacuum(&lin)), 15.0, 0.01)
            .unwrap();
        let (n1, n2) = density_photon_numbers(&rho, &lin);
        assert_abs_diff_eq!(n1, 1.0 / 21.25, epsilon = 1e-4);
        assert_abs_diff_eq!(n2, 1.0 / 21.25, epsilon = 1e-4);
        assert!((&rho - rho.adjoint()).iter().all(|z| z.norm() < 1e-10));
    }

    #[test]
    fn linear_cavity_trajectory_is_coherent() {
        let lin = make_truncation(6, 6).unwrap();
        let cfg = TrajectoryConfig::new(linear_cavity(), lin, 20.0, 0.5, 9);
        let rec = run_trajectory(&cfg).unwrap();
        let late: Vec<f64> = rec.samples.iter().filter(|s| s.t > 10.0).map(|s| s.n1).collect();
        let mean = late.iter().sum::<f64>() / late.len() as f64;
        assert_abs_diff_eq!(mean, 1.0 / 21.25, epsilon = 1e-4);
    }

    #[test]
    fn csv_round_trip() {
        let t = make_truncation(7, 7).unwrap();
        let cfg = TrajectoryConfig::new(PhysicalParams::study_point(0.5), t, 1.0, 0.25, 2);
        let rec = run_trajectory(&cfg).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&rec.samples, &mut buf).unwrap();
        let back = read_samples_csv(io::Cursor::new(&buf)).unwrap();
        assert_eq!(back.len(), rec.samples.len());
        for (a, b) in back.iter().zip(&rec.samples) {
            assert_eq!(a.n1, b.n1);
            assert!(a.entropy.is_nan() && b.entropy.is_nan());
        }
        assert!(read_samples_csv(io::Cursor::new(b"t,n1\n0,1\n")).is_err());

        let mut buf = Vec::new();
        write_jumps_ndjson(&[JumpEvent { t: 0.5, channel: 2 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"t\":0.5,\"channel\":2}\n");
    }

    #[test]
    fn stable_dt_bounds_spectral_radius() {
        let t = make_truncation(10, 10).unwrap();
        let h = build_effective_hamiltonian(&PhysicalParams::study_point(2.0), &t);
        let dt = stable_dt(&h);
        assert!(dt > 0.0 && dt < 1.0);
    }
}
