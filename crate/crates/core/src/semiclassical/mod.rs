//! Mean-field limit of the dimer: a four-dimensional real vector field for the
//! rescaled cavity amplitudes `(A, B)`, its equilibria, their stability and the
//! continuation machinery that builds the one-parameter bifurcation diagram in
//! the scaled drive `f`.
//!
//! The vector field is
//!
//! ```text
//! dA/ds = -A + i(delta + xi |A|^2) A + i kappa B + f
//! dB/ds = -B + i(delta + xi |B|^2) B + i kappa A + f
//! ```
//!
//! in the dimensionless time `s = gamma t / 2`, which coincides with physical
//! time when `gamma = 2`.

mod continuation;
mod orbit;

pub use continuation::{
    bifurcation_sweep, branch_switch_pitchfork, continue_branch, detect_bifurcations,
    pitchfork_test, BifurcationKind, BifurcationPoint, BranchKind, BranchPoint, BranchRecord,
    ContinuationSettings, StopReason, SweepResult, SweepSettings, write_bifurcations_csv,
    write_branch_csv, write_limit_cycles_csv, BIFURCATION_HEADER, BRANCH_HEADER, LIMIT_CYCLE_HEADER,
};
pub use orbit::{find_limit_cycle, integrate_orbit, LimitCycle, LimitCycleSettings, Orbit};

use nalgebra::{Matrix4, Vector4, LU};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hilbert::PhysicalParams;
use crate::C64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemiclassicalError {
    #[error("on-site energy U = 0 makes the rescaling degenerate")]
    ZeroNonlinearity,
    #[error("loss rate must be positive (got {0})")]
    NonPositiveLoss(f64),
    #[error("photon-number scale mu must be positive (got {0})")]
    NonPositiveMu(f64),
    #[error("nonlinearity sign must be +1 or -1 (got {0})")]
    InvalidSign(f64),
    #[error("orbit integration produced non-finite state at s = {0}")]
    NonFiniteOrbit(f64),
    #[error("integration step must be positive (got {0})")]
    InvalidStep(f64),
    #[error("continuation: {0}")]
    Continuation(String),
    #[error("branch switching at f = {f}: {reason}")]
    BranchSwitch { f: f64, reason: String },
    #[error("no periodic orbit: {0}")]
    NotPeriodic(String),
}

/// Dimensionless parameters `(delta, kappa, f, xi)` of the mean-field model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaledParams {
    pub delta: f64,
    pub kappa: f64,
    pub f: f64,
    pub xi: f64,
}

impl ScaledParams {
    pub fn new(delta: f64, kappa: f64, f: f64, xi: f64) -> Result<Self, SemiclassicalError> {
        if xi != 1.0 && xi != -1.0 {
            return Err(SemiclassicalError::InvalidSign(xi));
        }
        Ok(Self { delta, kappa, f, xi })
    }

    /// `(delta, kappa) = (-4.5, 3.5)`, `xi = +1`.
    pub fn study_point(f: f64) -> Self {
        Self { delta: -4.5, kappa: 3.5, f, xi: 1.0 }
    }

    pub fn with_drive(self, f: f64) -> Self {
        Self { f, ..self }
    }
}

/// `delta = -2 Delta / gamma`, `kappa = -2 J / gamma`,
/// `f = 4 F sqrt|U| / gamma^(3/2)`, `xi = sign(U)`.
pub fn scaled_params(p: &PhysicalParams) -> Result<ScaledParams, SemiclassicalError> {
    if p.onsite == 0.0 {
        return Err(SemiclassicalError::ZeroNonlinearity);
    }
    if p.loss_rate <= 0.0 {
        return Err(SemiclassicalError::NonPositiveLoss(p.loss_rate));
    }
    let g = p.loss_rate;
    Ok(ScaledParams {
        delta: -2.0 * p.detuning / g,
        kappa: -2.0 * p.hopping / g,
        f: 4.0 * p.drive * p.onsite.abs().sqrt() / (g * g.sqrt()),
        xi: p.onsite.signum(),
    })
}

/// `(U, F) -> (U / mu, sqrt(mu) F)`; leaves the scaled drive unchanged.
pub fn mu_rescale(onsite: f64, drive: f64, mu: f64) -> Result<(f64, f64), SemiclassicalError> {
    if !(mu > 0.0) {
        return Err(SemiclassicalError::NonPositiveMu(mu));
    }
    Ok((onsite / mu, mu.sqrt() * drive))
}

/// Physical time corresponding to dimensionless time `s`.
pub fn scaled_to_physical_time(s: f64, loss_rate: f64) -> f64 {
    2.0 * s / loss_rate
}

/// Physical frequency corresponding to a frequency in dimensionless time.
pub fn scaled_to_physical_frequency(nu: f64, loss_rate: f64) -> f64 {
    0.5 * nu * loss_rate
}

/// Rescaled field amplitudes of the two sites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemiclassicalState {
    pub a: C64,
    pub b: C64,
}

impl SemiclassicalState {
    pub const ORIGIN: Self = Self { a: C64::new(0.0, 0.0), b: C64::new(0.0, 0.0) };

    pub fn new(a: C64, b: C64) -> Self {
        Self { a, b }
    }

    pub fn symmetric(a: C64) -> Self {
        Self { a, b: a }
    }

    /// Real coordinates `(Re A, Im A, Re B, Im B)`.
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.a.re, self.a.im, self.b.re, self.b.im)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self { a: C64::new(v[0], v[1]), b: C64::new(v[2], v[3]) }
    }

    pub fn swap(&self) -> Self {
        Self { a: self.b, b: self.a }
    }

    pub fn intensity_a(&self) -> f64 {
        self.a.norm_sqr()
    }

    pub fn intensity_b(&self) -> f64 {
        self.b.norm_sqr()
    }

    pub fn is_symmetric(&self) -> bool {
        (self.a - self.b).norm() < 1e-9
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    /// Photon numbers `(<n1>, <n2>) = scale * (|A|^2, |B|^2)`.
    pub fn photon_numbers(&self, scale: f64) -> (f64, f64) {
        (scale * self.intensity_a(), scale * self.intensity_b())
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Vector field of the mean-field model.
pub fn rhs(s: &SemiclassicalState, q: &ScaledParams) -> SemiclassicalState {
    let i = C64::new(0.0, 1.0);
    let da = -s.a + i * (q.delta + q.xi * s.a.norm_sqr()) * s.a + i * q.kappa * s.b + q.f;
    let db = -s.b + i * (q.delta + q.xi * s.b.norm_sqr()) * s.b + i * q.kappa * s.a + q.f;
    SemiclassicalState { a: da, b: db }
}

pub(crate) fn rhs_vec(x: &Vector4<f64>, q: &ScaledParams) -> Vector4<f64> {
    rhs(&SemiclassicalState::from_vector(x), q).to_vector()
}

pub fn residual_norm(s: &SemiclassicalState, q: &ScaledParams) -> f64 {
    rhs(s, q).norm()
}

/// Analytic Jacobian in the real coordinates `(Re A, Im A, Re B, Im B)`.
pub fn jacobian(s: &SemiclassicalState, q: &ScaledParams) -> Matrix4<f64> {
    let site = |z: C64| {
        let (x, y) = (z.re, z.im);
        let theta = q.delta + q.xi * (x * x + y * y);
        [
            [-1.0 - 2.0 * q.xi * x * y, -theta - 2.0 * q.xi * y * y],
            [theta + 2.0 * q.xi * x * x, -1.0 + 2.0 * q.xi * x * y],
        ]
    };
    let (ja, jb) = (site(s.a), site(s.b));
    let k = q.kappa;
    Matrix4::new(
        ja[0][0], ja[0][1], 0.0, -k,
        ja[1][0], ja[1][1], k, 0.0,
        0.0, -k, jb[0][0], jb[0][1],
        k, 0.0, jb[1][0], jb[1][1],
    )
}

/// Eigenvalues of a real 4x4 matrix from its real Schur form, sorted by
/// `(real part, imaginary part)`.
pub fn sorted_eigenvalues(m: &Matrix4<f64>) -> [C64; 4] {
    let ev = m.complex_eigenvalues();
    let mut out = [ev[0], ev[1], ev[2], ev[3]];
    out.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    out
}

/// Margin around zero real part inside which a point is reported as marginal.
pub const STABILITY_MARGIN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stability {
    Stable,
    /// One eigenvalue with positive real part.
    #[serde(rename = "saddle-1")]
    Saddle1,
    /// Two or more eigenvalues with positive real part.
    #[serde(rename = "saddle-2+")]
    Saddle2Plus,
    /// Some eigenvalue within [`STABILITY_MARGIN`] of the imaginary axis.
    Marginal,
}

impl Stability {
    pub fn classify(eigenvalues: &[C64]) -> Self {
        if eigenvalues.iter().any(|l| l.re.abs() <= STABILITY_MARGIN) {
            return Stability::Marginal;
        }
        match eigenvalues.iter().filter(|l| l.re > 0.0).count() {
            0 => Stability::Stable,
            1 => Stability::Saddle1,
            _ => Stability::Saddle2Plus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Saddle1 => "saddle-1",
            Stability::Saddle2Plus => "saddle-2+",
            Stability::Marginal => "marginal",
        }
    }
}

/// Real roots of `x^3 + b x^2 + c x + d`, ascending, Newton-polished.
fn monic_cubic_roots(b: f64, c: f64, d: f64) -> Vec<f64> {
    // depressed cubic t^3 + p t + r with x = t - b/3
    let p = c - b * b / 3.0;
    let r = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let shift = -b / 3.0;
    let disc = (r / 2.0).powi(2) + (p / 3.0).powi(3);
    let mut roots = if p == 0.0 && r == 0.0 {
        vec![shift]
    } else if disc > 0.0 {
        let s = disc.sqrt();
        vec![(-r / 2.0 + s).cbrt() + (-r / 2.0 - s).cbrt() + shift]
    } else {
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * r / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + shift)
            .collect()
    };
    for x in roots.iter_mut() {
        for _ in 0..8 {
            let f = ((*x + b) * *x + c) * *x + d;
            let df = (3.0 * *x + 2.0 * b) * *x + c;
            if df == 0.0 {
                break;
            }
            let step = f / df;
            *x -= step;
            if step.abs() <= 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * b.abs().max(1.0));
    roots
}

/// Equilibria with `A = B`. The intensity `x = |A|^2` solves
/// `x (1 + (delta + kappa + xi x)^2) = f^2` and `A = f / (1 - i(delta + kappa + xi x))`.
pub fn symmetric_equilibria(q: &ScaledParams) -> Vec<SemiclassicalState> {
    if q.f == 0.0 {
        return vec![SemiclassicalState::ORIGIN];
    }
    let s = q.delta + q.kappa;
    let roots = monic_cubic_roots(2.0 * s * q.xi, 1.0 + s * s, -q.f * q.f);
    roots
        .into_iter()
        .filter(|&x| x > 0.0)
        .map(|x| {
            let a = C64::new(q.f, 0.0) / C64::new(1.0, -(s + q.xi * x));
            let mut st = SemiclassicalState::symmetric(a);
            polish_symmetric(&mut st, q);
            st
        })
        .filter(|st| residual_norm(st, q) < 1e-10)
        .collect()
}

/// A couple of Newton iterations restricted to the symmetric subspace.
fn polish_symmetric(st: &mut SemiclassicalState, q: &ScaledParams) {
    for _ in 0..3 {
        let g = rhs(st, q).a;
        if g.norm() < 1e-15 {
            break;
        }
        let (x, y) = (st.a.re, st.a.im);
        let theta = q.delta + q.kappa + q.xi * (x * x + y * y);
        let j = nalgebra::Matrix2::new(
            -1.0 - 2.0 * q.xi * x * y,
            -theta - 2.0 * q.xi * y * y,
            theta + 2.0 * q.xi * x * x,
            -1.0 + 2.0 * q.xi * x * y,
        );
        if let Some(step) = j.lu().solve(&nalgebra::Vector2::new(-g.re, -g.im)) {
            st.a += C64::new(step[0], step[1]);
            st.b = st.a;
        } else {
            break;
        }
    }
}

/// Result of [`newton_equilibrium`]; non-convergence is reported, not thrown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOutcome {
    pub state: SemiclassicalState,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

pub const NEWTON_TOLERANCE: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 100;
const NEWTON_MAX_STEP: f64 = 5.0;

/// Damped Newton iteration on `rhs = 0`. Steps are backtracked until the residual
/// decreases; a singular Jacobian falls back to a regularised least-squares step.
pub fn newton_equilibrium(guess: &SemiclassicalState, q: &ScaledParams) -> NewtonOutcome {
    let mut x = guess.to_vector();
    let mut g = rhs_vec(&x, q);
    let mut res = g.norm();
    let mut iterations = 0;
    while res >= NEWTON_TOLERANCE && iterations < NEWTON_MAX_ITER {
        iterations += 1;
        let j = jacobian(&SemiclassicalState::from_vector(&x), q);
        let mut step = match LU::new(j).solve(&(-g)) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                let jt = j.transpose();
                let reg = jt * j + Matrix4::identity() * (1e-6 * (1.0 + res));
                reg.lu().solve(&(-(jt * g))).unwrap_or_else(|| -g)
            }
        };
        let len = step.norm();
        if len > NEWTON_MAX_STEP {
            step *= NEWTON_MAX_STEP / len;
        }
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = x + step * lambda;
            let gt = rhs_vec(&trial, q);
            let rt = gt.norm();
            if rt.is_finite() && rt < res {
                x = trial;
                g = gt;
                res = rt;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    NewtonOutcome {
        state: SemiclassicalState::from_vector(&x),
        converged: res < NEWTON_TOLERANCE,
        iterations,
        residual: res,
    }
}
