//! Per-sample observables of a two-mode state: photon numbers, the
//! factorisation ratio, second-order moments, reduced density matrices and
//! the entanglement entropy.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hilbert::{Mode, ModeTruncation, WaveFunction};
use crate::C64;

/// Populations below this make `O` and `g2` undefined for a sample.
pub const POPULATION_THRESHOLD: f64 = 1e-12;
/// Reduced-density eigenvalues at or below this contribute nothing to the entropy.
pub const ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservablesError {
    #[error("state dimension {found} does not match truncation dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("state has zero norm")]
    ZeroNorm,
    #[error("no samples after discarding t <= {discard}")]
    EmptyWindow { discard: f64 },
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// One stored sample. `o` and `entropy` are NaN when undefined or not computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleObservables {
    pub t: f64,
    pub n1: f64,
    pub n2: f64,
    #[serde(rename = "O")]
    pub o: f64,
    pub g2m1: f64,
    pub g2m2: f64,
    pub entropy: f64,
}

impl SampleObservables {
    /// Image under the site exchange.
    pub fn swapped(&self) -> Self {
        Self { n1: self.n2, n2: self.n1, g2m1: self.g2m2, g2m2: self.g2m1, ..*self }
    }

    pub fn sum_diff(&self) -> (f64, f64) {
        sum_diff(self.n1, self.n2)
    }

    pub fn is_finite(&self) -> bool {
        [self.t, self.n1, self.n2, self.g2m1, self.g2m2].iter().all(|v| v.is_finite())
    }
}

/// Normally ordered moments up to second order, normalised by `<psi|psi>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub n1: f64,
    pub n2: f64,
    /// `<a1^dag a2^dag a1 a2> = <n1 n2>`
    pub cross: f64,
    /// `<a1^dag a1^dag a1 a1> = <n1 (n1 - 1)>`
    pub g2m1: f64,
    pub g2m2: f64,
}

fn check_dim(psi: &WaveFunction, trunc: &ModeTruncation) -> Result<(), ObservablesError> {
    if psi.dim() != trunc.dim() {
        return Err(ObservablesError::DimensionMismatch { expected: trunc.dim(), found: psi.dim() });
    }
    Ok(())
}

/// All diagonal moments in one pass. The state need not be normalised.
pub fn moments(psi: &WaveFunction, trunc: &ModeTruncation) -> Result<Moments, ObservablesError> {
    check_dim(psi, trunc)?;
    let cols = trunc.mode_dim(Mode::Second);
    let (mut norm, mut n1, mut n2, mut cross, mut m1, mut m2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (row, chunk) in psi.amplitudes().chunks_exact(cols).enumerate() {
        let k1 = row as f64;
        let mut w_row = 0.0;
        let mut w_n2 = 0.0;
        let mut w_m2 = 0.0;
        for (k2, a) in chunk.iter().enumerate() {
            let w = a.norm_sqr();
            let k2 = k2 as f64;
            w_row += w;
            w_n2 += w * k2;
            w_m2 += w * k2 * (k2 - 1.0);
        }
        norm += w_row;
        n1 += w_row * k1;
        m1 += w_row * k1 * (k1 - 1.0);
        n2 += w_n2;
        m2 += w_m2;
        cross += w_n2 * k1;
    }
    if !(norm > 0.0) {
        return Err(ObservablesError::ZeroNorm);
    }
    Ok(Moments { n1: n1 / norm, n2: n2 / norm, cross: cross / norm, g2m1: m1 / norm, g2m2: m2 / norm })
}

pub fn photon_numbers(psi: &WaveFunction, trunc: &ModeTruncation) -> Result<(f64, f64), ObservablesError> {
    let m = moments(psi, trunc)?;
    Ok((m.n1, m.n2))
}

/// `O = <a1^dag a2^dag a1 a2> / (<n1> <n2>)`; `None` when either population is
/// below [`POPULATION_THRESHOLD`].
pub fn factorisation_ratio(psi: &WaveFunction, trunc: &ModeTruncation) -> Result<Option<f64>, ObservablesError> {
    let m = moments(psi, trunc)?;
    Ok(ratio_from_moments(&m))
}

fn ratio_from_moments(m: &Moments) -> Option<f64> {
    (m.n1 >= POPULATION_THRESHOLD && m.n2 >= POPULATION_THRESHOLD).then(|| m.cross / (m.n1 * m.n2))
}

/// `<a^dag a^dag a a>` of one mode.
pub fn g2_moment(psi: &WaveFunction, trunc: &ModeTruncation, mode: Mode) -> Result<f64, ObservablesError> {
    let m = moments(psi, trunc)?;
    Ok(match mode {
        Mode::First => m.g2m1,
        Mode::Second => m.g2m2,
    })
}

/// Single-mode density matrix, `n_max + 1` square.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedDensity {
    matrix: DMatrix<C64>,
}

impl ReducedDensity {
    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    /// Largest entry of `rho - rho^dag`.
    pub fn hermiticity_error(&self) -> f64 {
        (&self.matrix - self.matrix.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.matrix.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

/// Partial trace over the mode not kept. The input is normalised internally.
pub fn reduced_density(
    psi: &WaveFunction,
    trunc: &ModeTruncation,
    keep: Mode,
) -> Result<ReducedDensity, ObservablesError> {
    check_dim(psi, trunc)?;
    let norm = psi.norm_sqr();
    if !(norm > 0.0) {
        return Err(ObservablesError::ZeroNorm);
    }
    let (r, c) = (trunc.mode_dim(Mode::First), trunc.mode_dim(Mode::Second));
    // coefficient matrix psi[n1, n2]
    let coeff = DMatrix::from_row_slice(r, c, psi.amplitudes());
    let matrix = match keep {
        Mode::First => &coeff * coeff.adjoint(),
        Mode::Second => coeff.transpose() * coeff.conjugate(),
    } / C64::new(norm, 0.0);
    Ok(ReducedDensity { matrix })
}

/// `-sum lambda ln lambda` over eigenvalues above [`ENTROPY_CLAMP`].
pub fn von_neumann_entropy(rho: &ReducedDensity) -> f64 {
    let s: f64 = rho
        .eigenvalues()
        .into_iter()
        .filter(|&l| l > ENTROPY_CLAMP)
        .map(|l| -l * l.ln())
        .sum();
    s.max(0.0)
}

/// Entropy of the first mode's reduced state.
pub fn entanglement_entropy(psi: &WaveFunction, trunc: &ModeTruncation) -> Result<f64, ObservablesError> {
    Ok(von_neumann_entropy(&reduced_density(psi, trunc, Mode::First)?))
}

/// `(S_o, D_o) = (n1 + n2, n1 - n2)`.
pub fn sum_diff(n1: f64, n2: f64) -> (f64, f64) {
    (n1 + n2, n1 - n2)
}

/// Observables of `psi` (normalised internally) at time `t`.
pub fn sample_observables(
    psi: &WaveFunction,
    trunc: &ModeTruncation,
    t: f64,
    with_entropy: bool,
) -> Result<SampleObservables, ObservablesError> {
    let m = moments(psi, trunc)?;
    let entropy = if with_entropy { entanglement_entropy(psi, trunc)? } else { f64::NAN };
    Ok(SampleObservables {
        t,
        n1: m.n1,
        n2: m.n2,
        o: ratio_from_moments(&m).unwrap_or(f64::NAN),
        g2m1: m.g2m1,
        g2m2: m.g2m2,
        entropy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeAverage {
    pub mean: f64,
    /// Samples that entered the mean.
    pub count: usize,
    /// Samples inside the window skipped as undefined (NaN).
    pub excluded: usize,
}

/// Mean of `values` over samples with `t > discard`; NaN entries are skipped
/// and counted.
pub fn time_average(times: &[f64], values: &[f64], discard: f64) -> Result<TimeAverage, ObservablesError> {
    if times.len() != values.len() {
        return Err(ObservablesError::LengthMismatch(times.len(), values.len()));
    }
    let (mut sum, mut count, mut excluded) = (0.0, 0usize, 0usize);
    for (&t, &v) in times.iter().zip(values) {
        if t <= discard {
            continue;
        }
        if v.is_nan() {
            excluded += 1;
        } else {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(ObservablesError::EmptyWindow { discard });
    }
    Ok(TimeAverage { mean: sum / count as f64, count, excluded })
}

/// Time-averaged `g2_ii(0)` as `avg(<a^dag a^dag a a>) / avg(<n>)^2` over samples
/// with `t > discard`.
pub fn time_averaged_g2(samples: &[SampleObservables], mode: Mode, discard: f64) -> Result<f64, ObservablesError> {
    let times: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let (num, den): (Vec<f64>, Vec<f64>) = samples
        .iter()
        .map(|s| match mode {
            Mode::First => (s.g2m1, s.n1),
            Mode::Second => (s.g2m2, s.n2),
        })
        .unzip();
    let num = time_average(&times, &num, discard)?;
    let den = time_average(&times, &den, discard)?;
    if den.mean < POPULATION_THRESHOLD {
        return Ok(f64::NAN);
    }
    Ok(num.mean / (den.mean * den.mean))
}

/// Time average of the instantaneous ratio `<a^dag a^dag a a> / <n>^2`, for comparison
/// with [`time_averaged_g2`].
pub fn time_averaged_g2_of_ratios(
    samples: &[SampleObservables],
    mode: Mode,
    discard: f64,
) -> Result<TimeAverage, ObservablesError> {
    let times: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let ratios: Vec<f64> = samples
        .iter()
        .map(|s| {
            let (m, n) = match mode {
                Mode::First => (s.g2m1, s.n1),
                Mode::Second => (s.g2m2, s.n2),
            };
            if n < POPULATION_THRESHOLD {
                f64::NAN
            } else {
                m / (n * n)
            }
        })
        .collect();
    time_average(&times, &ratios, discard)
}
