//! Time integration of the mean-field equations and periodic orbits.

use nalgebra::{Matrix4, Matrix5, SymmetricEigen, Vector4, Vector5};
use serde::Serialize;

use super::{jacobian, rhs_vec, ScaledParams, SemiclassicalError, SemiclassicalState};

/// Sampled trajectory of the mean-field equations in scaled time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Orbit {
    pub times: Vec<f64>,
    pub states: Vec<SemiclassicalState>,
}

fn rk4_step(x: &Vector4<f64>, q: &ScaledParams, h: f64) -> Vector4<f64> {
    let k1 = rhs_vec(x, q);
    let k2 = rhs_vec(&(x + k1 * (0.5 * h)), q);
    let k3 = rhs_vec(&(x + k2 * (0.5 * h)), q);
    let k4 = rhs_vec(&(x + k3 * h), q);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// RK4 step of the state together with its variational matrix `dx(s)/dx(0)`.
fn rk4_variational(x: &Vector4<f64>, m: &Matrix4<f64>, q: &ScaledParams, h: f64) -> (Vector4<f64>, Matrix4<f64>) {
    let jac = |v: &Vector4<f64>| jacobian(&SemiclassicalState::from_vector(v), q);
    let k1 = rhs_vec(x, q);
    let l1 = jac(x) * m;
    let x2 = x + k1 * (0.5 * h);
    let k2 = rhs_vec(&x2, q);
    let l2 = jac(&x2) * (m + l1 * (0.5 * h));
    let x3 = x + k2 * (0.5 * h);
    let k3 = rhs_vec(&x3, q);
    let l3 = jac(&x3) * (m + l2 * (0.5 * h));
    let x4 = x + k3 * h;
    let k4 = rhs_vec(&x4, q);
    let l4 = jac(&x4) * (m + l3 * h);
    (
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0),
        m + (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0),
    )
}

fn advance(x0: Vector4<f64>, q: &ScaledParams, duration: f64, dt: f64) -> Result<Vector4<f64>, SemiclassicalError> {
    let steps = (duration / dt).ceil().max(1.0) as usize;
    let h = duration / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        x = rk4_step(&x, q, h);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(SemiclassicalError::NonFiniteOrbit((k + 1) as f64 * h));
        }
    }
    Ok(x)
}

/// Classical RK4 with fixed step; the step is shortened uniformly so that the
/// grid ends exactly at `duration`. Every step is stored, including `s = 0`.
pub fn integrate_orbit(
    start: &SemiclassicalState,
    q: &ScaledParams,
    duration: f64,
    dt: f64,
) -> Result<Orbit, SemiclassicalError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SemiclassicalError::InvalidStep(dt));
    }
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(SemiclassicalError::InvalidStep(duration));
    }
    let steps = (duration / dt).ceil() as usize;
    let h = if steps == 0 { 0.0 } else { duration / steps as f64 };
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = start.to_vector();
    times.push(0.0);
    states.push(*start);
    for k in 1..=steps {
        x = rk4_step(&x, q, h);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(SemiclassicalError::NonFiniteOrbit(k as f64 * h));
        }
        times.push(k as f64 * h);
        states.push(SemiclassicalState::from_vector(&x));
    }
    Ok(Orbit { times, states })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitCycleSettings {
    /// Discarded integration time before the section is built.
    pub transient: f64,
    /// Window used to estimate the section and the initial period.
    pub window: f64,
    pub dt: f64,
    /// Required `|x(T) - x(0)|` for convergence of the shooting iteration.
    pub tolerance: f64,
    pub max_newton: usize,
    /// Number of stored states along the converged orbit.
    pub orbit_samples: usize,
}

impl Default for LimitCycleSettings {
    fn default() -> Self {
        Self { transient: 200.0, window: 60.0, dt: 0.005, tolerance: 1e-8, max_newton: 30, orbit_samples: 400 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitCycle {
    pub f: f64,
    /// Period in scaled time.
    pub period: f64,
    pub frequency: f64,
    pub max_intensity_a: f64,
    pub max_intensity_b: f64,
    /// `|x(T) - x(0)|` of the converged shooting problem.
    pub residual: f64,
    /// Floquet multipliers other than the trivial one, by modulus.
    pub floquet_moduli: [f64; 3],
    pub orbit: Vec<SemiclassicalState>,
}

/// Periodic orbit reached from `seed`.
///
/// After a transient, a Poincare section is placed through the orbit mean with
/// normal along the principal direction of the sampled orbit; the first return
/// then seeds Newton shooting on `(x0, T)` with the variational equations.
pub fn find_limit_cycle(
    q: &ScaledParams,
    seed: &SemiclassicalState,
    settings: &LimitCycleSettings,
) -> Result<LimitCycle, SemiclassicalError> {
    let x_settled = advance(seed.to_vector(), q, settings.transient, settings.dt)?;
    let window = integrate_orbit(&SemiclassicalState::from_vector(&x_settled), q, settings.window, settings.dt)?;
    let xs: Vec<Vector4<f64>> = window.states.iter().map(|s| s.to_vector()).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().fold(Vector4::zeros(), |acc, x| acc + x) / n;
    let cov = xs.iter().fold(Matrix4::zeros(), |acc, x| {
        let d = x - mean;
        acc + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let (imax, var) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    if var < 1e-12 {
        return Err(SemiclassicalError::NotPeriodic("trajectory settled on an equilibrium".into()));
    }
    let normal: Vector4<f64> = eig.eigenvectors.column(imax).into();
    let g = |x: &Vector4<f64>| normal.dot(&(x - mean));

    // upward crossings, linearly interpolated
    let mut crossings = Vec::new();
    for k in 0..xs.len() - 1 {
        let (ga, gb) = (g(&xs[k]), g(&xs[k + 1]));
        if ga < 0.0 && gb >= 0.0 {
            let w = ga / (ga - gb);
            crossings.push((window.times[k] + w * (window.times[k + 1] - window.times[k]), xs[k] + (xs[k + 1] - xs[k]) * w));
        }
    }
    if crossings.len() < 2 {
        return Err(SemiclassicalError::NotPeriodic("fewer than two section crossings".into()));
    }
    let mut x0 = crossings[crossings.len() - 2].1;
    let mut period = crossings[crossings.len() - 1].0 - crossings[crossings.len() - 2].0;

    let mut residual = f64::INFINITY;
    let mut monodromy = Matrix4::identity();
    for _ in 0..settings.max_newton {
        let steps = (period / settings.dt).ceil().max(200.0) as usize;
        let h = period / steps as f64;
        let (mut x, mut m) = (x0, Matrix4::identity());
        for _ in 0..steps {
            (x, m) = rk4_variational(&x, &m, q, h);
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(SemiclassicalError::NonFiniteOrbit(period));
        }
        let r = x - x0;
        residual = r.norm();
        monodromy = m;
        let c = g(&x0);
        if residual < settings.tolerance && c.abs() < settings.tolerance {
            break;
        }
        let fx = rhs_vec(&x, q);
        let mut a = Matrix5::zeros();
        for i in 0..4 {
            for j in 0..4 {
                a[(i, j)] = m[(i, j)] - if i == j { 1.0 } else { 0.0 };
            }
            a[(i, 4)] = fx[i];
            a[(4, i)] = normal[i];
        }
        let b = Vector5::new(-r[0], -r[1], -r[2], -r[3], -c);
        let step = a
            .lu()
            .solve(&b)
            .ok_or_else(|| SemiclassicalError::NotPeriodic("singular shooting matrix".into()))?;
        x0 += Vector4::new(step[0], step[1], step[2], step[3]);
        period += step[4];
        if !(period > 0.0) {
            return Err(SemiclassicalError::NotPeriodic("period collapsed".into()));
        }
    }
    if !(residual < settings.tolerance) {
        return Err(SemiclassicalError::NotPeriodic(format!("shooting residual {residual:.3e}")));
    }

    let samples = settings.orbit_samples.max(2);
    let steps = (period / settings.dt).ceil().max(samples as f64) as usize;
    let h = period / steps as f64;
    let stride = (steps / samples).max(1);
    let mut x = x0;
    let mut orbit = vec![SemiclassicalState::from_vector(&x)];
    let (mut max_a, mut max_b) = (0.0f64, 0.0f64);
    for k in 1..=steps {
        x = rk4_step(&x, q, h);
        let s = SemiclassicalState::from_vector(&x);
        max_a = max_a.max(s.intensity_a());
        max_b = max_b.max(s.intensity_b());
        if k % stride == 0 {
            orbit.push(s);
        }
    }

    let mut moduli: Vec<f64> = monodromy.complex_eigenvalues().iter().map(|l| l.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    // drop the multiplier closest to one (flow direction)
    let trivial = moduli
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    moduli.remove(trivial);

    Ok(LimitCycle {
        f: q.f,
        period,
        frequency: 1.0 / period,
        max_intensity_a: max_a,
        max_intensity_b: max_b,
        residual,
        floquet_moduli: [moduli[0], moduli[1], moduli[2]],
        orbit,
    })
}
