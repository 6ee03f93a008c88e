//! Independent closed forms checked against the numerical paths.

use dimer_core::hilbert::{ModeTruncation, PhysicalParams};
use dimer_core::semiclassical::{bifurcation_sweep, BifurcationKind, ScaledParams, SweepSettings};
use dimer_core::trajectory::{
    density_photon_numbers, master_equation_series, pure_density, run_ensemble, run_trajectory, TrajectoryConfig,
};
use dimer_core::hilbert::WaveFunction;

fn linear_cavity(drive: f64) -> PhysicalParams {
    PhysicalParams { hopping: 0.0, onsite: 0.0, ..PhysicalParams::study_point(drive) }
}

/// Coherent amplitude of a driven damped mode started in vacuum:
/// `|alpha(t)|^2 = F^2 |1 - exp((i Delta - gamma/2) t)|^2 / (Delta^2 + gamma^2/4)`.
fn linear_occupation(p: &PhysicalParams, t: f64) -> f64 {
    let decay = (-0.5 * p.loss_rate * t).exp();
    let mag = 1.0 - 2.0 * decay * (p.detuning * t).cos() + decay * decay;
    p.drive * p.drive * mag / (p.detuning.powi(2) + 0.25 * p.loss_rate.powi(2))
}

/// Roots of `1 + (delta - kappa + 2x)^2 - x^2` by bisection, mapped to `f`
/// through the symmetric-branch relation `f^2 = x (1 + (delta + kappa + x)^2)`.
fn pitchfork_oracle(q: &ScaledParams) -> Vec<f64> {
    let g = |x: f64| 1.0 + (q.delta - q.kappa + 2.0 * x).powi(2) - x * x;
    let mut roots = Vec::new();
    let n = 20_000;
    let (lo, hi) = (0.0, 40.0);
    for k in 0..n {
        let (mut a, mut b) = (lo + (hi - lo) * k as f64 / n as f64, lo + (hi - lo) * (k + 1) as f64 / n as f64);
        if g(a) * g(b) > 0.0 {
            continue;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if g(a) * g(m) <= 0.0 {
                b = m;
            } else {
                a = m;
            }
        }
        let x = 0.5 * (a + b);
        roots.push((x * (1.0 + (q.delta + q.kappa + x).powi(2))).sqrt());
    }
    roots
}

#[test]
fn pitchforks_match_the_antisymmetric_determinant() {
    let q = ScaledParams::study_point(0.0);
    let oracle = pitchfork_oracle(&q);
    assert_eq!(oracle.len(), 2);
    assert!((oracle[0] - 3.3014388708).abs() < 1e-8);
    assert!((oracle[1] - 19.7443977399).abs() < 1e-8);

    let sweep = bifurcation_sweep(&q, &SweepSettings { limit_cycle_samples: 0, ..Default::default() }).unwrap();
    let found: Vec<f64> =
        sweep.bifurcations.iter().filter(|b| b.kind == BifurcationKind::Pitchfork).map(|b| b.f).collect();
    assert_eq!(found.len(), 2);
    for (a, b) in found.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn linear_cavity_master_equation_matches_closed_form() {
    let p = linear_cavity(1.0);
    let trunc = ModeTruncation::symmetric(6).unwrap();
    let times: Vec<f64> = (0..=12).map(|k| 0.5 * k as f64).collect();
    let rho0 = pure_density(&WaveFunction::vacuum(&trunc));
    let series = master_equation_series(&p, &trunc, &rho0, &times, 2e-3).unwrap();
    for (t, rho) in times.iter().zip(&series) {
        let (n1, n2) = density_photon_numbers(rho, &trunc);
        let exact = linear_occupation(&p, *t);
        assert!((n1 - exact).abs() < 1e-8 && (n2 - exact).abs() < 1e-8, "t = {t}: {n1} vs {exact}");
    }
    assert!((linear_occupation(&p, 1e3) - 1.0 / 21.25).abs() < 1e-15);
}

#[test]
fn linear_cavity_trajectory_stays_coherent() {
    // Jumps do not change a coherent state, so one trajectory is already exact.
    let p = linear_cavity(1.0);
    let trunc = ModeTruncation::symmetric(6).unwrap();
    let rec = run_trajectory(&TrajectoryConfig::new(p, trunc, 6.0, 0.25, 11)).unwrap();
    for s in &rec.samples {
        let exact = linear_occupation(&p, s.t);
        assert!((s.n1 - exact).abs() < 1e-6, "t = {}: {} vs {exact}", s.t, s.n1);
        assert!((s.n2 - exact).abs() < 1e-6);
    }
}

#[test]
fn small_ensemble_tracks_the_master_equation() {
    let p = PhysicalParams::study_point(1.0);
    let trunc = ModeTruncation::symmetric(6).unwrap();
    // Both sides live in the same truncated space, so the edge guard is moot here.
    let cfg = TrajectoryConfig { edge_limit: f64::INFINITY, ..TrajectoryConfig::new(p, trunc, 3.0, 0.5, 0) };
    let ens = run_ensemble(&cfg, 300, 1000).unwrap();
    let rho0 = pure_density(&WaveFunction::vacuum(&trunc));
    let series = master_equation_series(&p, &trunc, &rho0, &ens.times, 1e-3).unwrap();
    for k in 1..ens.times.len() {
        let (n1, n2) = density_photon_numbers(&series[k], &trunc);
        assert!((ens.mean_n1[k] - n1).abs() < 4.0 * ens.sem_n1[k], "t = {}", ens.times[k]);
        assert!((ens.mean_n2[k] - n2).abs() < 4.0 * ens.sem_n2[k], "t = {}", ens.times[k]);
    }
}
