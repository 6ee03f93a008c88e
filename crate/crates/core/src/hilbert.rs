//! Truncated two-mode Fock space and the sparse operators acting on it.
//!
//! Basis states `|n1, n2>` are stored row-major: `index = n1 * (n_max_2 + 1) + n2`.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::C64;

/// Ordering string recorded in every output file that depends on basis layout.
pub const BASIS_ORDERING: &str = "row-major:index=n1*(n_max_2+1)+n2";

/// Largest dimension for which dense matrices are used on oracle paths.
pub const DENSE_DIM_LIMIT: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HilbertError {
    #[error("truncation level for mode {mode} must be at least 1 (got {n_max})")]
    TruncationTooSmall { mode: u8, n_max: usize },
    #[error("truncation ({0}, {1}) overflows the basis dimension")]
    DimensionOverflow(usize, usize),
    #[error("mode index must be 1 or 2 (got {0})")]
    InvalidMode(usize),
    #[error("dimension mismatch: operator acts on {expected}, state has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("sparse entry ({row}, {col}) outside dimension {dim}")]
    IndexOutOfRange { row: usize, col: usize, dim: usize },
    #[error("mode swap needs equal truncation on both modes (got {0} and {1})")]
    AsymmetricTruncation(usize, usize),
    #[error("invalid physical parameters: {0}")]
    InvalidParams(String),
}

/// One of the two cavities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    First,
    Second,
}

impl Mode {
    pub fn from_index(i: usize) -> Result<Self, HilbertError> {
        match i {
            1 => Ok(Mode::First),
            2 => Ok(Mode::Second),
            other => Err(HilbertError::InvalidMode(other)),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Mode::First => 1,
            Mode::Second => 2,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Mode::First => Mode::Second,
            Mode::Second => Mode::First,
        }
    }
}

/// Cutoffs of the two Fock ladders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTruncation", into = "RawTruncation")]
pub struct ModeTruncation {
    n_max_1: usize,
    n_max_2: usize,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTruncation {
    n_max_1: usize,
    n_max_2: usize,
}

impl TryFrom<RawTruncation> for ModeTruncation {
    type Error = HilbertError;

    fn try_from(raw: RawTruncation) -> Result<Self, Self::Error> {
        make_truncation(raw.n_max_1, raw.n_max_2)
    }
}

impl From<ModeTruncation> for RawTruncation {
    fn from(t: ModeTruncation) -> Self {
        RawTruncation { n_max_1: t.n_max_1, n_max_2: t.n_max_2 }
    }
}

/// Build a truncation with levels `0..=n_max_i` on each mode.
pub fn make_truncation(n_max_1: usize, n_max_2: usize) -> Result<ModeTruncation, HilbertError> {
    if n_max_1 < 1 {
        return Err(HilbertError::TruncationTooSmall { mode: 1, n_max: n_max_1 });
    }
    if n_max_2 < 1 {
        return Err(HilbertError::TruncationTooSmall { mode: 2, n_max: n_max_2 });
    }
    let dim = n_max_1
        .checked_add(1)
        .zip(n_max_2.checked_add(1))
        .and_then(|(a, b)| a.checked_mul(b))
        .ok_or(HilbertError::DimensionOverflow(n_max_1, n_max_2))?;
    Ok(ModeTruncation { n_max_1, n_max_2, dim })
}

impl ModeTruncation {
    pub fn symmetric(n_max: usize) -> Result<Self, HilbertError> {
        make_truncation(n_max, n_max)
    }

    pub fn n_max(&self, mode: Mode) -> usize {
        match mode {
            Mode::First => self.n_max_1,
            Mode::Second => self.n_max_2,
        }
    }

    pub fn n_max_1(&self) -> usize {
        self.n_max_1
    }

    pub fn n_max_2(&self) -> usize {
        self.n_max_2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of levels kept for one mode.
    pub fn mode_dim(&self, mode: Mode) -> usize {
        self.n_max(mode) + 1
    }

    pub fn index(&self, n1: usize, n2: usize) -> usize {
        debug_assert!(n1 <= self.n_max_1 && n2 <= self.n_max_2);
        n1 * (self.n_max_2 + 1) + n2
    }

    pub fn checked_index(&self, n1: usize, n2: usize) -> Option<usize> {
        (n1 <= self.n_max_1 && n2 <= self.n_max_2).then(|| self.index(n1, n2))
    }

    /// Inverse of [`Self::index`].
    pub fn levels(&self, index: usize) -> (usize, usize) {
        (index / (self.n_max_2 + 1), index % (self.n_max_2 + 1))
    }

    pub fn is_symmetric(&self) -> bool {
        self.n_max_1 == self.n_max_2
    }

    /// Whether a basis state touches the highest kept level of either mode.
    pub fn is_edge(&self, index: usize) -> bool {
        let (n1, n2) = self.levels(index);
        n1 == self.n_max_1 || n2 == self.n_max_2
    }
}

impl fmt::Display for ModeTruncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}) dim {}", self.n_max_1, self.n_max_2, self.dim)
    }
}

/// Complex sparse matrix in compressed-row layout. Entries are unique per
/// `(row, col)` and columns are sorted within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseOperator {
    /// Assemble from triplets; repeated `(row, col)` pairs are summed and exact
    /// zeros are dropped.
    pub fn from_triplets<I>(dim: usize, triplets: I) -> Result<Self, HilbertError>
    where
        I: IntoIterator<Item = (usize, usize, C64)>,
    {
        let mut t: Vec<(usize, usize, C64)> = triplets.into_iter().collect();
        for &(row, col, _) in &t {
            if row >= dim || col >= dim {
                return Err(HilbertError::IndexOutOfRange { row, col, dim });
            }
        }
        t.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut merged: Vec<(usize, usize, C64)> = Vec::with_capacity(t.len());
        for (r, c, v) in t {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        merged.retain(|e| e.2 != C64::new(0.0, 0.0));

        let mut row_ptr = vec![0usize; dim + 1];
        for &(r, _, _) in &merged {
            row_ptr[r + 1] += 1;
        }
        for i in 0..dim {
            row_ptr[i + 1] += row_ptr[i];
        }
        let cols = merged.iter().map(|e| e.1).collect();
        let vals = merged.iter().map(|e| e.2).collect();
        Ok(Self { dim, row_ptr, cols, vals })
    }

    pub fn zero(dim: usize) -> Self {
        Self { dim, row_ptr: vec![0; dim + 1], cols: Vec::new(), vals: Vec::new() }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![C64::new(1.0, 0.0); dim])
    }

    pub fn diagonal(values: &[C64]) -> Self {
        let dim = values.len();
        Self::from_triplets(dim, values.iter().enumerate().map(|(i, &v)| (i, i, v)))
            .expect("diagonal indices are in range")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Iterate over stored entries as `(row, col, value)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.vals[k]))
        })
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        if row >= self.dim {
            return C64::new(0.0, 0.0);
        }
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.cols[span.clone()].binary_search(&col) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    pub fn adjoint(&self) -> Self {
        Self::from_triplets(self.dim, self.entries().map(|(r, c, v)| (c, r, v.conj())))
            .expect("adjoint keeps indices in range")
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self::from_triplets(self.dim, self.entries().map(|(r, c, v)| (r, c, v * factor)))
            .expect("scaling keeps indices in range")
    }

    pub fn add(&self, other: &Self) -> Result<Self, HilbertError> {
        self.check_dim(other.dim)?;
        Self::from_triplets(self.dim, self.entries().chain(other.entries()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self, HilbertError> {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    /// Matrix product `self * other`.
    pub fn compose(&self, other: &Self) -> Result<Self, HilbertError> {
        self.check_dim(other.dim)?;
        let mut triplets = Vec::new();
        for (r, k, a) in self.entries() {
            for idx in other.row_ptr[k]..other.row_ptr[k + 1] {
                triplets.push((r, other.cols[idx], a * other.vals[idx]));
            }
        }
        Self::from_triplets(self.dim, triplets)
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, HilbertError> {
        let diff = self.sub(other)?;
        Ok(diff.vals.iter().map(|v| v.norm()).fold(0.0, f64::max))
    }

    /// `y = self * x` without allocation. Slices must have length `dim`.
    #[inline]
    pub fn mul_vec_into(&self, x: &[C64], y: &mut [C64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(y.len(), self.dim);
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *out = acc;
        }
    }

    /// `y += factor * self * x`.
    #[inline]
    pub fn mul_vec_add(&self, factor: C64, x: &[C64], y: &mut [C64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *out += factor * acc;
        }
    }

    /// Row-sum bound on the spectral radius.
    pub fn gershgorin_radius(&self) -> f64 {
        (0..self.dim)
            .map(|r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(|k| self.vals[k].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (r, c, v) in self.entries() {
            m[(r, c)] = v;
        }
        m
    }

    pub fn check_dim(&self, found: usize) -> Result<(), HilbertError> {
        if found != self.dim {
            return Err(HilbertError::DimensionMismatch { expected: self.dim, found });
        }
        Ok(())
    }
}

/// State vector in the truncated basis; not necessarily normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction {
    amplitudes: Vec<C64>,
}

impl WaveFunction {
    pub fn from_amplitudes(amplitudes: Vec<C64>) -> Self {
        Self { amplitudes }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { amplitudes: vec![C64::new(0.0, 0.0); dim] }
    }

    /// Number state `|n1, n2>`.
    pub fn fock(trunc: &ModeTruncation, n1: usize, n2: usize) -> Result<Self, HilbertError> {
        let idx = trunc.checked_index(n1, n2).ok_or(HilbertError::IndexOutOfRange {
            row: n1,
            col: n2,
            dim: trunc.dim(),
        })?;
        let mut psi = Self::zeros(trunc.dim());
        psi.amplitudes[idx] = C64::new(1.0, 0.0);
        Ok(psi)
    }

    pub fn vacuum(trunc: &ModeTruncation) -> Self {
        Self::fock(trunc, 0, 0).expect("vacuum is always in the basis")
    }

    /// Normalised superposition of basis states.
    pub fn superposition(
        trunc: &ModeTruncation,
        terms: &[((usize, usize), C64)],
    ) -> Result<Self, HilbertError> {
        let mut psi = Self::zeros(trunc.dim());
        for &((n1, n2), c) in terms {
            let idx = trunc.checked_index(n1, n2).ok_or(HilbertError::IndexOutOfRange {
                row: n1,
                col: n2,
                dim: trunc.dim(),
            })?;
            psi.amplitudes[idx] += c;
        }
        psi.normalize();
        Ok(psi)
    }

    /// Product of two truncated coherent states, renormalised after truncation.
    pub fn coherent(trunc: &ModeTruncation, alpha1: C64, alpha2: C64) -> Self {
        let ladder = |alpha: C64, n_max: usize| {
            let mut c = Vec::with_capacity(n_max + 1);
            let mut term = C64::new((-0.5 * alpha.norm_sqr()).exp(), 0.0);
            c.push(term);
            for n in 1..=n_max {
                term = term * alpha / (n as f64).sqrt();
                c.push(term);
            }
            c
        };
        Self::product(trunc, &ladder(alpha1, trunc.n_max_1()), &ladder(alpha2, trunc.n_max_2()))
    }

    /// Tensor product of single-mode amplitude vectors, renormalised.
    pub fn product(trunc: &ModeTruncation, first: &[C64], second: &[C64]) -> Self {
        assert_eq!(first.len(), trunc.mode_dim(Mode::First));
        assert_eq!(second.len(), trunc.mode_dim(Mode::Second));
        let amplitudes = first.iter().flat_map(|&a| second.iter().map(move |&b| a * b)).collect();
        let mut psi = Self { amplitudes };
        psi.normalize();
        psi
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amplitudes
    }

    pub fn amplitudes_mut(&mut self) -> &mut [C64] {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Rescale to unit norm. A zero vector is left unchanged.
    pub fn normalize(&mut self) {
        let n = self.norm_sqr().sqrt();
        if n > 0.0 {
            let inv = 1.0 / n;
            self.amplitudes.iter_mut().for_each(|a| *a *= inv);
        }
    }

    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        out.normalize();
        out
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &Self) -> C64 {
        self.amplitudes.iter().zip(&other.amplitudes).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.amplitudes.iter().all(|a| a.re.is_finite() && a.im.is_finite())
    }

    /// Image under the site exchange `|n1, n2> -> |n2, n1>`.
    pub fn swap_modes(&self, trunc: &ModeTruncation) -> Result<Self, HilbertError> {
        if !trunc.is_symmetric() {
            return Err(HilbertError::AsymmetricTruncation(trunc.n_max_1(), trunc.n_max_2()));
        }
        let mut out = Self::zeros(trunc.dim());
        for (idx, &a) in self.amplitudes.iter().enumerate() {
            let (n1, n2) = trunc.levels(idx);
            out.amplitudes[trunc.index(n2, n1)] = a;
        }
        Ok(out)
    }

    /// Squared weight on basis states at the truncation edge, relative to the norm.
    pub fn edge_population(&self, trunc: &ModeTruncation) -> f64 {
        let total = self.norm_sqr();
        if total == 0.0 {
            return 0.0;
        }
        let edge: f64 = self
            .amplitudes
            .iter()
            .enumerate()
            .filter(|(i, _)| trunc.is_edge(*i))
            .map(|(_, a)| a.norm_sqr())
            .sum();
        edge / total
    }
}

/// Hamiltonian parameters in physical units. `onsite` and `drive` are the values
/// that enter the Hamiltonian directly (already rescaled when a photon-number
/// scale `mu` is in use); `mu` labels that scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalParams {
    #[serde(rename = "J")]
    pub hopping: f64,
    #[serde(rename = "Delta")]
    pub detuning: f64,
    #[serde(rename = "U")]
    pub onsite: f64,
    #[serde(rename = "gamma")]
    pub loss_rate: f64,
    #[serde(rename = "F")]
    pub drive: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
}

fn default_mu() -> f64 {
    1.0
}

impl PhysicalParams {
    /// `(J, Delta, U, gamma) = (-3.5, 4.5, 0.5, 2.0)` with the given drive.
    pub fn study_point(drive: f64) -> Self {
        Self { hopping: -3.5, detuning: 4.5, onsite: 0.5, loss_rate: 2.0, drive, mu: 1.0 }
    }

    /// Study-point parameters for scaled drive `f` at photon-number scale `mu`:
    /// `U -> U / mu`, `F -> sqrt(mu) F` with `F` chosen so that the scaled drive is `f`.
    pub fn study_point_scaled(f: f64, mu: f64) -> Result<Self, HilbertError> {
        let base = Self::study_point(0.0);
        let drive = f * base.loss_rate.powf(1.5) / (4.0 * base.onsite.abs().sqrt());
        let (onsite, drive) = crate::semiclassical::mu_rescale(base.onsite, drive, mu)
            .map_err(|e| HilbertError::InvalidParams(e.to_string()))?;
        Ok(Self { onsite, drive, mu, ..base })
    }

    pub fn with_drive(self, drive: f64) -> Self {
        Self { drive, ..self }
    }

    pub fn validate(&self) -> Result<(), HilbertError> {
        let all = [self.hopping, self.detuning, self.onsite, self.loss_rate, self.drive, self.mu];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(HilbertError::InvalidParams("non-finite parameter".into()));
        }
        if self.loss_rate <= 0.0 {
            return Err(HilbertError::InvalidParams(format!("gamma must be > 0 (got {})", self.loss_rate)));
        }
        if self.mu <= 0.0 {
            return Err(HilbertError::InvalidParams(format!("mu must be > 0 (got {})", self.mu)));
        }
        Ok(())
    }

    /// Photons per unit semiclassical intensity: `<n_i> = (gamma / 4|U|) |A|^2`.
    /// Equals `mu` for the study-point family.
    pub fn photon_scale(&self) -> f64 {
        self.loss_rate / (4.0 * self.onsite.abs())
    }
}

/// `a_j` on the selected mode, identity on the other.
pub fn mode_annihilator(trunc: &ModeTruncation, mode: Mode) -> SparseOperator {
    let triplets = (0..trunc.dim()).filter_map(|col| {
        let (n1, n2) = trunc.levels(col);
        let (n, row) = match mode {
            Mode::First if n1 > 0 => (n1, trunc.index(n1 - 1, n2)),
            Mode::Second if n2 > 0 => (n2, trunc.index(n1, n2 - 1)),
            _ => return None,
        };
        Some((row, col, C64::new((n as f64).sqrt(), 0.0)))
    });
    SparseOperator::from_triplets(trunc.dim(), triplets).expect("ladder indices are in range")
}

/// `a_j` selected by numeric index 1 or 2.
pub fn mode_annihilator_by_index(
    trunc: &ModeTruncation,
    mode: usize,
) -> Result<SparseOperator, HilbertError> {
    Ok(mode_annihilator(trunc, Mode::from_index(mode)?))
}

pub fn number_operator(trunc: &ModeTruncation, mode: Mode) -> SparseOperator {
    let diag: Vec<C64> = (0..trunc.dim())
        .map(|i| {
            let (n1, n2) = trunc.levels(i);
            let n = if mode == Mode::First { n1 } else { n2 };
            C64::new(n as f64, 0.0)
        })
        .collect();
    SparseOperator::diagonal(&diag)
}

/// `sum_j (a_j + a_j^dagger)`: the operator multiplying a real drive amplitude.
pub fn drive_operator(trunc: &ModeTruncation) -> SparseOperator {
    let mut triplets = Vec::new();
    for col in 0..trunc.dim() {
        let (n1, n2) = trunc.levels(col);
        if n1 > 0 {
            triplets.push((trunc.index(n1 - 1, n2), col, C64::new((n1 as f64).sqrt(), 0.0)));
        }
        if n1 < trunc.n_max_1() {
            triplets.push((trunc.index(n1 + 1, n2), col, C64::new(((n1 + 1) as f64).sqrt(), 0.0)));
        }
        if n2 > 0 {
            triplets.push((trunc.index(n1, n2 - 1), col, C64::new((n2 as f64).sqrt(), 0.0)));
        }
        if n2 < trunc.n_max_2() {
            triplets.push((trunc.index(n1, n2 + 1), col, C64::new(((n2 + 1) as f64).sqrt(), 0.0)));
        }
    }
    SparseOperator::from_triplets(trunc.dim(), triplets).expect("ladder indices are in range")
}

fn hamiltonian_triplets(p: &PhysicalParams, trunc: &ModeTruncation, with_loss: bool) -> Vec<(usize, usize, C64)> {
    let mut triplets = Vec::with_capacity(7 * trunc.dim());
    let loss = if with_loss { 0.5 * p.loss_rate } else { 0.0 };
    for col in 0..trunc.dim() {
        let (n1, n2) = trunc.levels(col);
        let (f1, f2) = (n1 as f64, n2 as f64);
        let diag = -p.detuning * (f1 + f2) + p.onsite * (f1 * (f1 - 1.0) + f2 * (f2 - 1.0));
        triplets.push((col, col, C64::new(diag, -loss * (f1 + f2))));

        // -J a1^dagger a2 and -J a2^dagger a1
        if n1 < trunc.n_max_1() && n2 > 0 {
            let v = -p.hopping * ((f1 + 1.0) * f2).sqrt();
            triplets.push((trunc.index(n1 + 1, n2 - 1), col, C64::new(v, 0.0)));
        }
        if n1 > 0 && n2 < trunc.n_max_2() {
            let v = -p.hopping * (f1 * (f2 + 1.0)).sqrt();
            triplets.push((trunc.index(n1 - 1, n2 + 1), col, C64::new(v, 0.0)));
        }
    }
    if p.drive != 0.0 {
        let drive = drive_operator(trunc);
        triplets.extend(drive.entries().map(|(r, c, v)| (r, c, v * p.drive)));
    }
    triplets
}

/// Non-Hermitian generator of the no-jump evolution, including the
/// `-(i gamma / 2)(n1 + n2)` loss term.
pub fn build_effective_hamiltonian(p: &PhysicalParams, trunc: &ModeTruncation) -> SparseOperator {
    SparseOperator::from_triplets(trunc.dim(), hamiltonian_triplets(p, trunc, true))
        .expect("Hamiltonian indices are in range")
}

/// Hermitian rotating-frame Hamiltonian.
pub fn build_hermitian_hamiltonian(p: &PhysicalParams, trunc: &ModeTruncation) -> SparseOperator {
    SparseOperator::from_triplets(trunc.dim(), hamiltonian_triplets(p, trunc, false))
        .expect("Hamiltonian indices are in range")
}

/// Exact sparse matrix-vector product; the result is not renormalised.
pub fn apply_operator(op: &SparseOperator, psi: &WaveFunction) -> Result<WaveFunction, HilbertError> {
    op.check_dim(psi.dim())?;
    let mut out = vec![C64::new(0.0, 0.0); op.dim()];
    op.mul_vec_into(psi.amplitudes(), &mut out);
    Ok(WaveFunction::from_amplitudes(out))
}

/// `<psi|op|psi>`. The caller is responsible for `psi` being normalised.
pub fn expectation(op: &SparseOperator, psi: &WaveFunction) -> Result<C64, HilbertError> {
    let applied = apply_operator(op, psi)?;
    Ok(psi.inner(&applied))
}

/// Permutation matrix of the site exchange.
pub fn swap_operator(trunc: &ModeTruncation) -> Result<SparseOperator, HilbertError> {
    if !trunc.is_symmetric() {
        return Err(HilbertError::AsymmetricTruncation(trunc.n_max_1(), trunc.n_max_2()));
    }
    SparseOperator::from_triplets(
        trunc.dim(),
        (0..trunc.dim()).map(|i| {
            let (n1, n2) = trunc.levels(i);
            (trunc.index(n2, n1), i, C64::new(1.0, 0.0))
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn fig1_params() -> PhysicalParams {
        PhysicalParams::study_point(2.0)
    }

    #[test]
    fn truncation_dimensions_and_index_map() {
        assert_eq!(make_truncation(2, 2).unwrap().dim(), 9);
        assert_eq!(make_truncation(6, 3).unwrap().dim(), 28);
        let t = make_truncation(1, 1).unwrap();
        assert_eq!(t.index(1, 0), 2);
        let t = make_truncation(6, 3).unwrap();
        for i in 0..t.dim() {
            let (a, b) = t.levels(i);
            assert_eq!(t.index(a, b), i);
        }
    }

    #[test]
    fn truncation_rejects_bad_levels() {
        assert!(matches!(make_truncation(0, 3), Err(HilbertError::TruncationTooSmall { mode: 1, .. })));
        assert!(matches!(make_truncation(3, 0), Err(HilbertError::TruncationTooSmall { mode: 2, .. })));
        assert!(matches!(make_truncation(usize::MAX, 2), Err(HilbertError::DimensionOverflow(..))));
        assert!(matches!(Mode::from_index(3), Err(HilbertError::InvalidMode(3))));
    }

    #[test]
    fn truncation_deserialize_validates() {
        let t: ModeTruncation = serde_json::from_str(r#"{"n_max_1":4,"n_max_2":2}"#).unwrap();
        assert_eq!(t.dim(), 15);
        assert!(serde_json::from_str::<ModeTruncation>(r#"{"n_max_1":0,"n_max_2":2}"#).is_err());
    }

    #[test]
    fn annihilator_examples() {
        let t = make_truncation(3, 3).unwrap();
        let a1 = mode_annihilator(&t, Mode::First);
        let a2 = mode_annihilator(&t, Mode::Second);

        let out = apply_operator(&a1, &WaveFunction::fock(&t, 2, 0).unwrap()).unwrap();
        let expect = WaveFunction::fock(&t, 1, 0).unwrap();
        for (x, y) in out.amplitudes().iter().zip(expect.amplitudes()) {
            assert_abs_diff_eq!(x.re, y.re * 2f64.sqrt(), epsilon = 1e-15);
        }

        let out = apply_operator(&a2, &WaveFunction::fock(&t, 1, 0).unwrap()).unwrap();
        assert_eq!(out.norm_sqr(), 0.0);

        let n1 = a1.adjoint().compose(&a1).unwrap();
        let out = apply_operator(&n1, &WaveFunction::fock(&t, 3, 1).unwrap()).unwrap();
        assert_wf_close(&out, &WaveFunction::fock(&t, 3, 1).unwrap().scaled(3.0));

        // the top level maps down without loss
        let top = WaveFunction::fock(&t, 3, 2).unwrap();
        assert_abs_diff_eq!(apply_operator(&a1, &top).unwrap().norm_sqr(), 3.0, epsilon = 1e-14);
    }

    fn assert_wf_close(a: &WaveFunction, b: &WaveFunction) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.amplitudes().iter().zip(b.amplitudes()) {
            assert!((x - y).norm() < 1e-13, "{x} vs {y}");
        }
    }

    #[test]
    fn commutator_is_identity_below_edge() {
        let t = make_truncation(5, 4).unwrap();
        for mode in [Mode::First, Mode::Second] {
            let a = mode_annihilator(&t, mode);
            let ad = a.adjoint();
            let comm = a.compose(&ad).unwrap().sub(&ad.compose(&a).unwrap()).unwrap();
            for i in 0..t.dim() {
                let (n1, n2) = t.levels(i);
                let n = if mode == Mode::First { n1 } else { n2 };
                if n < t.n_max(mode) {
                    let psi = WaveFunction::fock(&t, n1, n2).unwrap();
                    assert_wf_close(&apply_operator(&comm, &psi).unwrap(), &psi);
                }
            }
        }
    }

    #[test]
    fn effective_hamiltonian_elements() {
        let t = make_truncation(3, 3).unwrap();
        let h = build_effective_hamiltonian(&fig1_params(), &t);
        assert_eq!(h.get(t.index(0, 0), t.index(0, 0)), c(0.0));
        assert_eq!(h.get(t.index(1, 0), t.index(1, 0)), C64::new(-4.5, -1.0));
        assert_eq!(h.get(t.index(1, 0), t.index(0, 1)), c(3.5));
    }

    #[test]
    fn hermitian_hamiltonian_elements() {
        let t = make_truncation(3, 3).unwrap();
        let h = build_hermitian_hamiltonian(&fig1_params(), &t);
        assert!(h.max_abs_diff(&h.adjoint()).unwrap() < 1e-12);
        assert_eq!(h.get(t.index(1, 0), t.index(1, 0)), c(-4.5));
        assert_eq!(h.get(t.index(2, 0), t.index(2, 0)), c(-8.0));
    }

    /// The direct construction agrees with the operator-algebra expression.
    #[test]
    fn hamiltonian_matches_operator_algebra() {
        let t = make_truncation(4, 3).unwrap();
        let p = PhysicalParams { hopping: -1.3, detuning: 0.7, onsite: 0.9, loss_rate: 1.7, drive: 0.6, mu: 1.0 };
        let a1 = mode_annihilator(&t, Mode::First);
        let a2 = mode_annihilator(&t, Mode::Second);
        let (a1d, a2d) = (a1.adjoint(), a2.adjoint());
        let n1 = a1d.compose(&a1).unwrap();
        let n2 = a2d.compose(&a2).unwrap();
        let hop = a1d.compose(&a2).unwrap().add(&a2d.compose(&a1).unwrap()).unwrap();
        let kerr = |ad: &SparseOperator, a: &SparseOperator| {
            ad.compose(ad).unwrap().compose(a).unwrap().compose(a).unwrap()
        };
        let nsum = n1.add(&n2).unwrap();
        let h = hop
            .scale(c(-p.hopping))
            .add(&nsum.scale(c(-p.detuning)))
            .unwrap()
            .add(&kerr(&a1d, &a1).add(&kerr(&a2d, &a2)).unwrap().scale(c(p.onsite)))
            .unwrap()
            .add(&a1.add(&a2).unwrap().add(&a1d).unwrap().add(&a2d).unwrap().scale(c(p.drive)))
            .unwrap();
        let heff = h.add(&nsum.scale(C64::new(0.0, -0.5 * p.loss_rate))).unwrap();
        assert!(build_hermitian_hamiltonian(&p, &t).max_abs_diff(&h).unwrap() < 1e-13);
        assert!(build_effective_hamiltonian(&p, &t).max_abs_diff(&heff).unwrap() < 1e-13);
    }

    #[test]
    fn loss_term_is_exact_difference() {
        let t = make_truncation(5, 5).unwrap();
        let p = fig1_params();
        let diff = build_effective_hamiltonian(&p, &t).sub(&build_hermitian_hamiltonian(&p, &t)).unwrap();
        for (r, col, v) in diff.entries() {
            assert_eq!(r, col);
            let (n1, n2) = t.levels(r);
            assert_eq!(v, C64::new(0.0, -0.5 * p.loss_rate * (n1 + n2) as f64));
        }
        assert_eq!(diff.nnz(), t.dim() - 1);
    }

    #[test]
    fn hamiltonian_is_swap_invariant() {
        let t = make_truncation(5, 5).unwrap();
        let h = build_effective_hamiltonian(&fig1_params(), &t);
        let s = swap_operator(&t).unwrap();
        let conj = s.compose(&h).unwrap().compose(&s).unwrap();
        assert_eq!(conj.max_abs_diff(&h).unwrap(), 0.0);
    }

    #[test]
    fn apply_examples() {
        let t = make_truncation(2, 2).unwrap();
        let psi = WaveFunction::superposition(&t, &[((0, 1), c(0.3)), ((2, 2), C64::new(0.1, 0.4))]).unwrap();
        assert_eq!(apply_operator(&SparseOperator::identity(t.dim()), &psi).unwrap(), psi);
        assert_eq!(apply_operator(&SparseOperator::zero(t.dim()), &psi).unwrap().norm_sqr(), 0.0);
        let a1 = mode_annihilator(&t, Mode::First);
        assert_eq!(
            apply_operator(&a1, &WaveFunction::fock(&t, 1, 1).unwrap()).unwrap(),
            WaveFunction::fock(&t, 0, 1).unwrap()
        );
        let other = make_truncation(3, 2).unwrap();
        assert!(matches!(
            apply_operator(&a1, &WaveFunction::vacuum(&other)),
            Err(HilbertError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn expectation_examples() {
        let t = make_truncation(2, 2).unwrap();
        let n1 = number_operator(&t, Mode::First);
        assert_abs_diff_eq!(expectation(&n1, &WaveFunction::fock(&t, 1, 0).unwrap()).unwrap().re, 1.0);
        let half = WaveFunction::superposition(&t, &[((0, 0), c(1.0)), ((1, 0), c(1.0))]).unwrap();
        assert_abs_diff_eq!(expectation(&n1, &half).unwrap().re, 0.5, epsilon = 1e-15);
        let a1 = mode_annihilator(&t, Mode::First);
        let a2 = mode_annihilator(&t, Mode::Second);
        let pair = a1.adjoint().compose(&a2.adjoint()).unwrap().compose(&a1).unwrap().compose(&a2).unwrap();
        assert_eq!(expectation(&pair, &WaveFunction::fock(&t, 1, 1).unwrap()).unwrap(), c(1.0));
    }

    fn arb_operator(dim: usize) -> impl Strategy<Value = SparseOperator> {
        proptest::collection::vec((0..dim, 0..dim, -1.0..1.0f64, -1.0..1.0f64), 0..30).prop_map(move |v| {
            SparseOperator::from_triplets(dim, v.into_iter().map(|(r, c, a, b)| (r, c, C64::new(a, b)))).unwrap()
        })
    }

    proptest! {
        #[test]
        fn adjoint_is_involution(x in arb_operator(9)) {
            prop_assert_eq!(x.adjoint().adjoint(), x);
        }

        #[test]
        fn adjoint_reverses_products(x in arb_operator(9), y in arb_operator(9)) {
            let lhs = x.compose(&y).unwrap().adjoint();
            let rhs = y.adjoint().compose(&x.adjoint()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-14);
        }

        #[test]
        fn expectation_of_hermitian_is_real(re in proptest::collection::vec(-1.0..1.0f64, 16),
                                            im in proptest::collection::vec(-1.0..1.0f64, 16)) {
            let t = make_truncation(3, 3).unwrap();
            let mut psi = WaveFunction::from_amplitudes(re.iter().zip(&im).map(|(&a, &b)| C64::new(a, b)).collect());
            psi.normalize();
            let h = build_hermitian_hamiltonian(&fig1_params(), &t);
            prop_assert!(expectation(&h, &psi).unwrap().im.abs() < 1e-12);
        }
    }

    impl WaveFunction {
        fn scaled(mut self, k: f64) -> Self {
            self.amplitudes.iter_mut().for_each(|a| *a *= k);
            self
        }
    }
}
