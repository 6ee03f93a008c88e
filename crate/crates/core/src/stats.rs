//! Histograms, power spectra and switching counts of observable time series.

use std::io::{self, Write};

use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("degenerate range [{0}, {1}]")]
    DegenerateRange(f64, f64),
    #[error("number of bins must be at least 1")]
    NoBins,
    #[error("series too short for a spectrum ({0} < 16 samples)")]
    TooShort(usize),
    #[error("sampling is not uniform (step {found} deviates from {expected})")]
    NonUniform { expected: f64, found: f64 },
    #[error("sample spacing must be positive, got {0}")]
    InvalidSpacing(f64),
    #[error("no spectral bins in band [{0}, {1}]")]
    EmptyBand(f64, f64),
    #[error("hysteresis must be positive, got {0}")]
    InvalidHysteresis(f64),
}

/// Closed interval `[lo, hi]` split into equal bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinRange {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl BinRange {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self, StatsError> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(StatsError::DegenerateRange(lo, hi));
        }
        if bins == 0 {
            return Err(StatsError::NoBins);
        }
        Ok(Self { lo, hi, bins })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins as f64
    }

    /// Bins are `[lo + k w, lo + (k+1) w)`; the last bin also takes `hi`.
    pub fn locate(&self, x: f64) -> Option<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let k = ((x - self.lo) / (self.hi - self.lo) * self.bins as f64).floor() as usize;
        Some(k.min(self.bins - 1))
    }

    pub fn center(&self, k: usize) -> f64 {
        self.lo + (k as f64 + 0.5) * self.width()
    }
}

/// Points followed by their mirror images `(y, x)`.
pub fn symmetrize_points(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points.iter().copied().chain(points.iter().map(|&(x, y)| (y, x))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram2D {
    pub x: BinRange,
    pub y: BinRange,
    /// Row-major in the x bin: `counts[ix * y.bins + iy]`.
    pub counts: Vec<u64>,
    pub total: u64,
    pub overflow: u64,
}

impl Histogram2D {
    pub fn new(x: BinRange, y: BinRange) -> Self {
        Self { x, y, counts: vec![0; x.bins * y.bins], total: 0, overflow: 0 }
    }

    pub fn add(&mut self, px: f64, py: f64) {
        match (self.x.locate(px), self.y.locate(py)) {
            (Some(ix), Some(iy)) => {
                self.counts[ix * self.y.bins + iy] += 1;
                self.total += 1;
            }
            _ => self.overflow += 1,
        }
    }

    pub fn count(&self, ix: usize, iy: usize) -> u64 {
        self.counts[ix * self.y.bins + iy]
    }

    /// Combine two histograms over identical bins.
    pub fn merge(&mut self, other: &Self) {
        assert_eq!((self.x, self.y), (other.x, other.y), "histogram bins differ");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.total += other.total;
        self.overflow += other.overflow;
    }

    pub fn is_transpose_symmetric(&self) -> bool {
        self.x == self.y
            && (0..self.x.bins).all(|i| (0..self.y.bins).all(|j| self.count(i, j) == self.count(j, i)))
    }

    /// Counts averaged over each 3x3 neighbourhood (zero padding outside).
    pub fn smoothed(&self) -> Vec<f64> {
        let (nx, ny) = (self.x.bins, self.y.bins);
        let mut out = vec![0.0; nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                let mut s = 0u64;
                for a in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
                    for b in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
                        s += self.count(a, b);
                    }
                }
                out[i * ny + j] = s as f64 / 9.0;
            }
        }
        out
    }

    /// Local maxima of the 3x3-smoothed counts whose height is at least
    /// `min_fraction` of the global maximum, as `(x, y, height)` bin centres,
    /// highest first. Plateaus are reported once.
    pub fn local_maxima(&self, min_fraction: f64) -> Vec<(f64, f64, f64)> {
        let s = self.smoothed();
        let (nx, ny) = (self.x.bins, self.y.bins);
        let peak = s.iter().copied().fold(0.0, f64::max);
        if peak == 0.0 {
            return Vec::new();
        }
        let mut out = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                let v = s[i * ny + j];
                if v < min_fraction * peak || v == 0.0 {
                    continue;
                }
                let mut is_max = true;
                for a in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
                    for b in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
                        if (a, b) == (i, j) {
                            continue;
                        }
                        let w = s[a * ny + b];
                        // ties resolved toward the earlier bin
                        if w > v || (w == v && (a, b) < (i, j)) {
                            is_max = false;
                        }
                    }
                }
                if is_max {
                    out.push((self.x.center(i), self.y.center(j), v));
                }
            }
        }
        out.sort_by(|a, b| b.2.total_cmp(&a.2));
        out
    }

    /// Header line with ranges and totals, a second line with their values, then
    /// one row of counts per x bin.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x_lo,x_hi,x_bins,y_lo,y_hi,y_bins,total,overflow")?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            self.x.lo, self.x.hi, self.x.bins, self.y.lo, self.y.hi, self.y.bins, self.total, self.overflow
        )?;
        for row in self.counts.chunks(self.y.bins) {
            let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

pub fn histogram2d(points: &[(f64, f64)], x: BinRange, y: BinRange) -> Histogram2D {
    let mut h = Histogram2D::new(x, y);
    for &(px, py) in points {
        h.add(px, py);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram1D {
    pub range: BinRange,
    pub counts: Vec<u64>,
    pub total: u64,
    pub overflow: u64,
    /// Counts after the optional peak rescale; equal to `counts` otherwise.
    pub values: Vec<f64>,
    pub scale: f64,
    /// True when a rescale was requested but all counts are zero.
    pub unscaled: bool,
}

impl Histogram1D {
    /// Local maxima of the 3-bin moving average at or above `min_fraction` of
    /// its maximum, as bin centres.
    pub fn local_maxima(&self, min_fraction: f64) -> Vec<f64> {
        let n = self.counts.len();
        let s: Vec<f64> = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(1);
                let hi = (i + 1).min(n - 1);
                self.counts[lo..=hi].iter().sum::<u64>() as f64 / 3.0
            })
            .collect();
        let peak = s.iter().copied().fold(0.0, f64::max);
        if peak == 0.0 {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            // treat runs of equal values as one plateau
            let mut j = i;
            while j + 1 < n && s[j + 1] == s[i] {
                j += 1;
            }
            let left = if i == 0 { f64::NEG_INFINITY } else { s[i - 1] };
            let right = if j + 1 == n { f64::NEG_INFINITY } else { s[j + 1] };
            if s[i] > left && s[i] > right && s[i] >= min_fraction * peak && s[i] > 0.0 {
                out.push(0.5 * (self.range.center(i) + self.range.center(j)));
            }
            i = j + 1;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "center,count,value")?;
        for (k, (c, v)) in self.counts.iter().zip(&self.values).enumerate() {
            writeln!(w, "{},{},{}", self.range.center(k), c, v)?;
        }
        Ok(())
    }
}

pub fn histogram1d(values: &[f64], range: BinRange) -> Histogram1D {
    let mut counts = vec![0u64; range.bins];
    let (mut total, mut overflow) = (0, 0);
    for &v in values {
        match range.locate(v) {
            Some(k) => {
                counts[k] += 1;
                total += 1;
            }
            None => overflow += 1,
        }
    }
    let values = counts.iter().map(|&c| c as f64).collect();
    Histogram1D { range, counts, total, overflow, values, scale: 1.0, unscaled: false }
}

/// Histogram rescaled so that its largest bin equals `target_max`.
pub fn histogram1d_scaled(values: &[f64], range: BinRange, target_max: f64) -> Histogram1D {
    let mut h = histogram1d(values, range);
    let peak = h.counts.iter().copied().max().unwrap_or(0);
    if peak == 0 {
        h.unscaled = true;
        return h;
    }
    h.scale = target_max / peak as f64;
    h.values = h
        .counts
        .iter()
        .map(|&c| if c == peak { target_max } else { c as f64 * h.scale })
        .collect();
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    None,
    Hann,
}

/// One-sided magnitude spectrum of a mean-removed series. The transform is
/// unitary (`1/sqrt(N)`), so squared magnitudes over all `N` bins sum to
/// `N` times the variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerSpectrum {
    /// `k / (N dt)` for `k = 0..=N/2`.
    pub frequencies: Vec<f64>,
    pub magnitudes: Vec<f64>,
    pub dt: f64,
    pub n: usize,
    pub window: Window,
}

impl PowerSpectrum {
    pub fn resolution(&self) -> f64 {
        1.0 / (self.n as f64 * self.dt)
    }

    /// `sum_k |X_k|^2` over the full two-sided spectrum.
    pub fn two_sided_power(&self) -> f64 {
        let m = &self.magnitudes;
        let nyquist_bin = self.n % 2 == 0;
        m.iter()
            .enumerate()
            .map(|(k, v)| {
                let w = if k == 0 || (nyquist_bin && k == m.len() - 1) { 1.0 } else { 2.0 };
                w * v * v
            })
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "freq,magnitude")?;
        for (f, m) in self.frequencies.iter().zip(&self.magnitudes) {
            writeln!(w, "{f},{m}")?;
        }
        Ok(())
    }
}

pub fn power_spectrum(series: &[f64], dt: f64) -> Result<PowerSpectrum, StatsError> {
    power_spectrum_windowed(series, dt, Window::None)
}

pub fn power_spectrum_windowed(series: &[f64], dt: f64, window: Window) -> Result<PowerSpectrum, StatsError> {
    let n = series.len();
    if n < 16 {
        return Err(StatsError::TooShort(n));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(StatsError::InvalidSpacing(dt));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let w = match window {
                Window::None => 1.0,
                Window::Hann => 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos(),
            };
            Complex::new((x - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let norm = 1.0 / (n as f64).sqrt();
    let half = n / 2;
    Ok(PowerSpectrum {
        frequencies: (0..=half).map(|k| k as f64 / (n as f64 * dt)).collect(),
        magnitudes: buf[..=half].iter().map(|z| z.norm() * norm).collect(),
        dt,
        n,
        window,
    })
}

/// Spectrum of `values` sampled at `times`; rejects non-uniform spacing
/// (relative deviation above 1e-6).
pub fn power_spectrum_sampled(times: &[f64], values: &[f64], window: Window) -> Result<PowerSpectrum, StatsError> {
    if times.len() < 16 || values.len() != times.len() {
        return Err(StatsError::TooShort(times.len().min(values.len())));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    for w in times.windows(2) {
        let step = w[1] - w[0];
        if (step - dt).abs() > 1e-6 * dt.abs() {
            return Err(StatsError::NonUniform { expected: dt, found: step });
        }
    }
    power_spectrum_windowed(values, dt, window)
}

/// Frequency of the largest magnitude with `lo <= freq <= hi`, excluding the
/// zero bin; ties go to the lower frequency.
pub fn dominant_frequency(spec: &PowerSpectrum, band: (f64, f64)) -> Result<f64, StatsError> {
    let mut best: Option<(f64, f64)> = None;
    for (&f, &m) in spec.frequencies.iter().zip(&spec.magnitudes).skip(1) {
        if f < band.0 || f > band.1 {
            continue;
        }
        if best.is_none_or(|(_, bm)| m > bm) {
            best = Some((f, m));
        }
    }
    best.map(|(f, _)| f).ok_or(StatsError::EmptyBand(band.0, band.1))
}

/// Peak magnitude in the band divided by the band's mean magnitude.
pub fn peak_prominence(spec: &PowerSpectrum, band: (f64, f64)) -> Result<f64, StatsError> {
    let in_band: Vec<f64> = spec
        .frequencies
        .iter()
        .zip(&spec.magnitudes)
        .skip(1)
        .filter(|(f, _)| **f >= band.0 && **f <= band.1)
        .map(|(_, m)| *m)
        .collect();
    if in_band.is_empty() {
        return Err(StatsError::EmptyBand(band.0, band.1));
    }
    let mean = in_band.iter().sum::<f64>() / in_band.len() as f64;
    let peak = in_band.iter().copied().fold(0.0, f64::max);
    Ok(if mean > 0.0 { peak / mean } else { 0.0 })
}

/// Sign changes of `series` that cross the whole band `(-h, h)`.
pub fn count_switches(series: &[f64], h: f64) -> Result<usize, StatsError> {
    if !(h > 0.0) {
        return Err(StatsError::InvalidHysteresis(h));
    }
    let mut state: Option<bool> = None;
    let mut switches = 0;
    for &v in series {
        let side = if v >= h {
            Some(true)
        } else if v <= -h {
            Some(false)
        } else {
            None
        };
        if let Some(s) = side {
            if state.is_some_and(|p| p != s) {
                switches += 1;
            }
            state = Some(s);
        }
    }
    Ok(switches)
}
