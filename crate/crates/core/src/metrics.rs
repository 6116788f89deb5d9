//! Measures of effectiveness computed from a simulation trace.
//!
//! Spectra are one-sided magnitude spectra of the mean-removed series,
//! zero-padded to the next power of two. Bin `k` reports `|X_k|` with
//! `X_k = Σ_n x_n exp(-2πi k n / L)`, so a sinusoid of amplitude `A` that
//! falls exactly on a bin peaks at `A·N/2` (`N` samples, `L` padded length).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Role, SimulationTrace};

pub fn accel_range(series: &[f64]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::InvalidInput("empty acceleration series".into()));
    }
    let (lo, hi) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    Ok(hi - lo)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Bin frequencies, 0 through Nyquist (Hz).
    pub freqs: Vec<f64>,
    pub mags: Vec<f64>,
    /// Transform length after zero padding.
    pub padded_len: usize,
}

impl Spectrum {
    /// Energy recovered from the one-sided spectrum; equals `Σ (x_n - mean)²`.
    pub fn energy(&self) -> f64 {
        let last = self.mags.len() - 1;
        let sum: f64 = self
            .mags
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let w = if k == 0 || k == last { 1.0 } else { 2.0 };
                w * m * m
            })
            .sum();
        sum / self.padded_len as f64
    }
}

pub fn spectrum(series: &[f64], dt: f64) -> Result<Spectrum> {
    if series.len() < 2 {
        return Err(Error::InvalidInput("spectrum needs at least two samples".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::param("dt", "must be positive"));
    }
    let len = series.len().next_power_of_two();
    let constant = series.iter().all(|&x| x == series[0]);
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|i| match series.get(i) {
            Some(&x) if !constant => Complex::new(x - mean, 0.0),
            _ => Complex::new(0.0, 0.0),
        })
        .collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    let bins = len / 2 + 1;
    let df = 1.0 / (len as f64 * dt);
    Ok(Spectrum {
        freqs: (0..bins).map(|k| k as f64 * df).collect(),
        mags: buf[..bins].iter().map(|c| c.norm()).collect(),
        padded_len: len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub avg_magnitude: f64,
    pub avg_frequency: f64,
}

/// Mean magnitude of the nonzero bins and the magnitude-weighted mean
/// frequency (spectral centroid).
pub fn spectral_summary(spec: &Spectrum) -> SpectralSummary {
    let total: f64 = spec.mags.iter().sum();
    if !(total > 0.0) {
        return SpectralSummary::default();
    }
    let nonzero: Vec<f64> = spec.mags.iter().copied().filter(|&m| m > 0.0).collect();
    let centroid = spec.freqs.iter().zip(&spec.mags).map(|(f, m)| f * m).sum::<f64>() / total;
    SpectralSummary {
        avg_magnitude: nonzero.iter().sum::<f64>() / nonzero.len() as f64,
        avg_frequency: centroid,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyForm {
    /// `c / (1 + exp(-(b + w·TTC)))`, increasing in TTC.
    #[default]
    Increasing,
    /// `c / (1 + exp(-b + w·TTC))` as printed, decreasing in TTC.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyParams {
    pub c: f64,
    pub b: f64,
    pub w: f64,
    pub form: SafetyForm,
}

impl Default for SafetyParams {
    fn default() -> Self {
        SafetyParams {
            c: 1.0,
            b: -2.2,
            w: 1.0,
            form: SafetyForm::Increasing,
        }
    }
}

/// Time to collision; infinite unless the follower is closing in.
pub fn time_to_collision(gap: f64, closing_speed: f64) -> f64 {
    if closing_speed > 0.0 {
        gap / closing_speed
    } else {
        f64::INFINITY
    }
}

/// Perceived safety indicator. `closing_speed` is follower minus
/// predecessor speed; a nonpositive gap counts as a collision.
pub fn perceived_safety(gap: f64, closing_speed: f64, p: &SafetyParams) -> f64 {
    if !(gap > 0.0) {
        return 0.0;
    }
    let ttc = time_to_collision(gap, closing_speed);
    let exponent = match p.form {
        SafetyForm::Increasing => -(p.b + p.w * ttc),
        SafetyForm::Literal => -p.b + p.w * ttc,
    };
    p.c / (1.0 + exponent.exp())
}

/// Ratio of the second follower's acceleration range to the first's.
/// Returns the ratio and whether it is infinite (quiet first follower,
/// active second follower).
pub fn oscillation_transfer(range_first: f64, range_second: f64) -> (f64, bool) {
    if range_first > 0.0 {
        (range_second / range_first, false)
    } else if range_second > 0.0 {
        (f64::INFINITY, true)
    } else {
        (0.0, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
}

impl TimingStats {
    pub fn from_ms(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return TimingStats::default();
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        TimingStats {
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            median_ms: quantile_sorted(&v, 0.5),
            p99_ms: quantile_sorted(&v, 0.99),
        }
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavMetrics {
    pub vehicle: usize,
    pub accel_range: f64,
    pub avg_magnitude: f64,
    pub avg_frequency: f64,
    pub min_ps: f64,
    pub min_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cavs: Vec<CavMetrics>,
    pub oscillation_transfer: f64,
    pub oscillation_transfer_infinite: bool,
    pub solve_time: TimingStats,
    pub collision: bool,
}

pub fn min_following_distance(trace: &SimulationTrace, vehicle: usize) -> Result<f64> {
    let gaps: Vec<f64> = trace.vehicle_rows(vehicle).filter_map(|r| r.gap).collect();
    if gaps.is_empty() {
        return Err(Error::InvalidInput(format!("vehicle {vehicle} has no gap samples")));
    }
    Ok(gaps.into_iter().fold(f64::INFINITY, f64::min))
}

pub fn evaluate(trace: &SimulationTrace, safety: &SafetyParams) -> Result<MetricReport> {
    let cav_ids: Vec<usize> = (0..trace.n_vehicles)
        .filter(|&v| trace.role_of(v) == Some(Role::Cav))
        .collect();
    let mut cavs = Vec::with_capacity(cav_ids.len());
    let mut solve_ms = Vec::new();
    for &id in &cav_ids {
        let accel: Vec<f64> = trace.vehicle_rows(id).map(|r| r.a).collect();
        let summary = spectral_summary(&spectrum(&accel, trace.dt)?);
        let speeds_ahead: Vec<f64> = trace.vehicle_rows(id - 1).map(|r| r.v).collect();
        let min_ps = trace
            .vehicle_rows(id)
            .zip(&speeds_ahead)
            .map(|(r, v_ahead)| perceived_safety(r.gap.unwrap_or(f64::INFINITY), r.v - v_ahead, safety))
            .fold(f64::INFINITY, f64::min);
        solve_ms.extend(trace.vehicle_rows(id).filter_map(|r| r.solve_ms));
        cavs.push(CavMetrics {
            vehicle: id,
            accel_range: accel_range(&accel)?,
            avg_magnitude: summary.avg_magnitude,
            avg_frequency: summary.avg_frequency,
            min_ps,
            min_gap: min_following_distance(trace, id)?,
        });
    }
    let (ot, ot_inf) = match cavs.as_slice() {
        [first, second, ..] => oscillation_transfer(first.accel_range, second.accel_range),
        _ => (0.0, false),
    };
    Ok(MetricReport {
        cavs,
        oscillation_transfer: ot,
        oscillation_transfer_infinite: ot_inf,
        solve_time: TimingStats::from_ms(&solve_ms),
        collision: trace.collision.is_some(),
    })
}
