//! Post-processing of spike logs: binned rates, Welch spectra, log-MUA,
//! Down-to-Up transition fields and wavefront speed.

use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::engine::SpikeLog;
use crate::error::{Error, Result};
use crate::model::{ColumnSizes, PopulationKind};
use crate::rng::{Domain, KeyedRng};
use crate::topology::{Column, GridSpec};

pub const DEFAULT_BIN_MS: f64 = 5.0;

/// Spike counts per (column, population) and time bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSeries {
    pub bin_ms: f64,
    pub start_ms: f64,
    pub bins: usize,
    pub width: u32,
    pub height: u32,
    pub sizes: ColumnSizes,
    /// `counts[column][population][bin]`.
    pub counts: Vec<[Vec<u32>; 3]>,
}

/// Bins spikes with `start_ms <= t < end_ms`.
pub fn rates(log: &SpikeLog, grid: &GridSpec, bin_ms: f64, start_ms: f64, end_ms: f64) -> Result<RateSeries> {
    if !(bin_ms > 0.0) || !(end_ms >= start_ms) {
        return Err(Error::Analysis(format!("invalid binning: bin {bin_ms} ms over [{start_ms}, {end_ms})")));
    }
    let bins = ((end_ms - start_ms) / bin_ms).floor() as usize;
    let end = start_ms + bins as f64 * bin_ms;
    let mut counts = vec![[vec![0u32; bins], vec![0u32; bins], vec![0u32; bins]]; grid.columns() as usize];
    for &(id, t) in &log.entries {
        if t < start_ms || t >= end {
            continue;
        }
        let (column, kind, _) = grid.locate_global(id)?;
        let b = (((t - start_ms) / bin_ms) as usize).min(bins - 1);
        counts[grid.column_index(column) as usize][kind.index()][b] += 1;
    }
    Ok(RateSeries { bin_ms, start_ms, bins, width: grid.width, height: grid.height, sizes: grid.sizes, counts })
}

impl RateSeries {
    fn hz(&self, count: u64, neurons: u64) -> f64 {
        count as f64 * 1000.0 / (neurons as f64 * self.bin_ms)
    }

    pub fn sample_rate_hz(&self) -> f64 {
        1000.0 / self.bin_ms
    }

    pub fn total_spikes(&self) -> u64 {
        self.counts.iter().flatten().flatten().map(|&c| u64::from(c)).sum()
    }

    /// Rate of one population of one column, Hz per neuron.
    pub fn population_in_column(&self, column: usize, kind: PopulationKind) -> Vec<f64> {
        let n = u64::from(self.sizes.of(kind));
        self.counts[column][kind.index()].iter().map(|&c| self.hz(u64::from(c), n)).collect()
    }

    /// Mean rate of all neurons of one column (the MUA proxy).
    pub fn column_rate(&self, column: usize) -> Vec<f64> {
        let n = u64::from(self.sizes.total());
        let c = &self.counts[column];
        (0..self.bins).map(|b| self.hz(u64::from(c[0][b] + c[1][b] + c[2][b]), n)).collect()
    }

    /// Rate of one population over the whole grid.
    pub fn population_rate(&self, kind: PopulationKind) -> Vec<f64> {
        let n = u64::from(self.sizes.of(kind)) * self.counts.len() as u64;
        (0..self.bins)
            .map(|b| self.hz(self.counts.iter().map(|c| u64::from(c[kind.index()][b])).sum(), n))
            .collect()
    }

    /// Time-averaged rate of one population over the whole grid.
    pub fn mean_rate(&self, kind: PopulationKind) -> f64 {
        let series = self.population_rate(kind);
        if series.is_empty() {
            return 0.0;
        }
        series.iter().sum::<f64>() / series.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_ms,column,population,rate_hz\n");
        for (ci, _) in self.counts.iter().enumerate() {
            for kind in PopulationKind::ALL {
                for (b, r) in self.population_in_column(ci, kind).iter().enumerate() {
                    let t = self.start_ms + b as f64 * self.bin_ms;
                    let _ = writeln!(s, "{t},{ci},{},{r}", kind.label());
                }
            }
        }
        s
    }
}

/// One-sided power spectral density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psd {
    pub freqs_hz: Vec<f64>,
    /// Power per Hz, in squared input units.
    pub power: Vec<f64>,
    pub segments: usize,
}

/// Welch estimate with Hann windows; each segment has its mean removed.
pub fn psd_welch(series: &[f64], fs_hz: f64, segment: usize, overlap: usize) -> Result<Psd> {
    if segment < 2 || overlap >= segment || !(fs_hz > 0.0) {
        return Err(Error::Analysis(format!("invalid Welch setup: segment {segment}, overlap {overlap}, fs {fs_hz}")));
    }
    if series.len() < segment {
        return Err(Error::Analysis(format!("series of {} samples is shorter than one segment ({segment})", series.len())));
    }
    let step = segment - overlap;
    let window: Vec<f64> =
        (0..segment).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / segment as f64).cos()).collect();
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::new().plan_fft_forward(segment);
    let half = segment / 2 + 1;
    let mut acc = vec![0.0; half];
    let mut segments = 0;
    let mut buf = vec![Complex::new(0.0, 0.0); segment];
    let mut start = 0;
    while start + segment <= series.len() {
        let chunk = &series[start..start + segment];
        let mean = chunk.iter().sum::<f64>() / segment as f64;
        for ((b, &x), &w) in buf.iter_mut().zip(chunk).zip(&window) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let scale = 1.0 / (fs_hz * wss * segments as f64);
    let power = acc
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let edge = k == 0 || (segment % 2 == 0 && k == half - 1);
            p * scale * if edge { 1.0 } else { 2.0 }
        })
        .collect();
    let freqs_hz = (0..half).map(|k| k as f64 * fs_hz / segment as f64).collect();
    Ok(Psd { freqs_hz, power, segments })
}

impl Psd {
    pub fn resolution_hz(&self) -> f64 {
        self.freqs_hz.get(1).copied().unwrap_or(0.0)
    }

    /// Frequency of the largest non-DC bin.
    pub fn dominant_frequency(&self) -> Option<f64> {
        self.power
            .iter()
            .enumerate()
            .skip(1)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| self.freqs_hz[k])
    }

    /// Share of non-DC power at frequencies up to `f_max_hz`.
    pub fn low_frequency_fraction(&self, f_max_hz: f64) -> f64 {
        let total: f64 = self.power.iter().skip(1).sum();
        if total == 0.0 {
            return 0.0;
        }
        let low: f64 = self.power.iter().zip(&self.freqs_hz).skip(1).filter(|(_, &f)| f <= f_max_hz).map(|(p, _)| p).sum();
        low / total
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("freq_hz,power\n");
        for (f, p) in self.freqs_hz.iter().zip(&self.power) {
            let _ = writeln!(s, "{f},{p}");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogMuaParams {
    pub noise_variance: f64,
    /// Floor applied to zero-rate bins before the log (Hz).
    pub epsilon_hz: f64,
    pub seed: u64,
}

impl Default for LogMuaParams {
    fn default() -> Self {
        LogMuaParams { noise_variance: 0.5, epsilon_hz: 0.1, seed: 0 }
    }
}

/// Mean over the lowest decile of bins.
pub fn mua_down(mua: &[f64]) -> f64 {
    let mut sorted = mua.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len().div_ceil(10).max(1).min(sorted.len());
    sorted[..n].iter().sum::<f64>() / n as f64
}

/// `ln(MUA / MUA_down)` plus Gaussian noise; `stream` keys the noise.
pub fn log_mua(mua: &[f64], params: &LogMuaParams, stream: u64) -> Result<Vec<f64>> {
    if mua.iter().all(|&x| x == 0.0) {
        return Err(Error::Analysis("all-zero MUA: no Down state can be estimated".into()));
    }
    let down = mua_down(mua).max(params.epsilon_hz);
    let noise = if params.noise_variance > 0.0 {
        Some(Normal::new(0.0, params.noise_variance.sqrt()).map_err(|e| Error::Analysis(e.to_string()))?)
    } else {
        None
    };
    let mut rng = KeyedRng::new(params.seed, Domain::Analysis, &[stream]);
    Ok(mua
        .iter()
        .map(|&x| {
            let v = (x.max(params.epsilon_hz) / down).ln();
            v + noise.as_ref().map_or(0.0, |n| n.sample(&mut rng))
        })
        .collect())
}

/// log-MUA of every column of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogMuaField {
    pub width: u32,
    pub height: u32,
    pub bin_ms: f64,
    pub start_ms: f64,
    pub columns: Vec<Vec<f64>>,
}

impl LogMuaField {
    pub fn from_rates(rates: &RateSeries, params: &LogMuaParams) -> Result<Self> {
        let columns = (0..rates.counts.len())
            .map(|c| log_mua(&rates.column_rate(c), params, c as u64))
            .collect::<Result<_>>()?;
        Ok(LogMuaField { width: rates.width, height: rates.height, bin_ms: rates.bin_ms, start_ms: rates.start_ms, columns })
    }

    pub fn pooled(&self) -> Vec<f64> {
        self.columns.iter().flatten().copied().collect()
    }
}

/// The two main modes of a sample and the dip between them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Modes {
    pub low: f64,
    pub high: f64,
    /// Density at the deepest point between the modes over the smaller peak.
    pub dip_ratio: f64,
}

impl Modes {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low + self.high)
    }
}

/// Largest dip ratio still counted as two separate modes.
pub const BIMODAL_DIP: f64 = 0.8;

/// Smallest peak height, relative to the tallest, that counts as a mode.
pub const MIN_PEAK: f64 = 0.05;

/// Finds the two highest peaks of a 64-bin histogram smoothed with a
/// 5-bin triangular kernel. `None` for a single peak or a too-shallow dip.
/// Among candidate pairs the one with the largest absolute dip wins.
pub fn histogram_modes(values: &[f64]) -> Option<Modes> {
    const BINS: usize = 64;
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return None;
    }
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0.0f64; BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1.0;
    }
    let kernel = [1.0, 2.0, 3.0, 2.0, 1.0];
    let smooth: Vec<f64> = (0..BINS)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .filter_map(|(k, w)| (i + k).checked_sub(2).filter(|&j| j < BINS).map(|j| w * hist[j]))
                .sum::<f64>()
        })
        .collect();
    let top = smooth.iter().copied().fold(0.0, f64::max);
    let peaks: Vec<usize> = (0..BINS)
        .filter(|&i| {
            let left = if i == 0 { f64::NEG_INFINITY } else { smooth[i - 1] };
            let right = if i == BINS - 1 { f64::NEG_INFINITY } else { smooth[i + 1] };
            smooth[i] >= MIN_PEAK * top && smooth[i] > left && smooth[i] >= right
        })
        .collect();
    let mut best: Option<(usize, usize, f64)> = None;
    for (a, &i) in peaks.iter().enumerate() {
        for &j in &peaks[a + 1..] {
            let valley = smooth[i..=j].iter().copied().fold(f64::INFINITY, f64::min);
            let ratio = valley / smooth[i].min(smooth[j]);
            let score = smooth[i].min(smooth[j]) * (1.0 - ratio);
            if best.is_none_or(|b| score > smooth[b.0].min(smooth[b.1]) * (1.0 - b.2)) {
                best = Some((i, j, ratio));
            }
        }
    }
    let (i, j, ratio) = best?;
    if ratio > BIMODAL_DIP {
        return None;
    }
    let centre = |k: usize| lo + (k as f64 + 0.5) * width;
    Some(Modes { low: centre(i), high: centre(j), dip_ratio: ratio })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionParams {
    /// Crossing level; the histogram-mode midpoint when absent.
    pub threshold: Option<f64>,
    pub window_ms: f64,
    /// Share of columns that must cross inside one window.
    pub coverage: f64,
    /// A crossing counts only if the mean of this span after it stays above threshold.
    pub min_up_ms: f64,
}

impl Default for TransitionParams {
    fn default() -> Self {
        TransitionParams { threshold: None, window_ms: 500.0, coverage: 0.8, min_up_ms: 20.0 }
    }
}

/// Down-to-Up transition time (ms) of each column during one wave.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionField {
    pub width: u32,
    pub height: u32,
    pub times: Vec<Option<f64>>,
}

impl TransitionField {
    pub fn get(&self, x: i64, y: i64) -> Option<f64> {
        if x < 0 || y < 0 || x >= i64::from(self.width) || y >= i64::from(self.height) {
            return None;
        }
        self.times[(y * i64::from(self.width) + x) as usize]
    }

    pub fn defined(&self) -> usize {
        self.times.iter().flatten().count()
    }
}

/// Upward crossings of `series` (times in ms, linearly interpolated).
pub fn upward_crossings(series: &[f64], threshold: f64, bin_ms: f64, start_ms: f64, min_up_bins: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut i = 1;
    while i < series.len() {
        if series[i - 1] < threshold && series[i] >= threshold {
            let span = &series[i..(i + min_up_bins.max(1)).min(series.len())];
            if span.iter().sum::<f64>() / span.len() as f64 >= threshold {
                let frac = (threshold - series[i - 1]) / (series[i] - series[i - 1]);
                out.push(start_ms + (i as f64 - 1.0 + frac) * bin_ms);
                // Skip to the end of this Up period.
                while i < series.len() && series[i] >= threshold {
                    i += 1;
                }
            }
        }
        i += 1;
    }
    out
}

/// Segments the field into waves: a wave opens at the earliest unused
/// crossing and gathers each column's first crossing inside the window.
pub fn transitions(field: &LogMuaField, params: &TransitionParams) -> Result<(f64, Vec<TransitionField>)> {
    let threshold = match params.threshold {
        Some(t) => t,
        None => histogram_modes(&field.pooled())
            .ok_or_else(|| Error::Analysis("no SW structure detected: log-MUA is unimodal".into()))?
            .midpoint(),
    };
    let min_up = (params.min_up_ms / field.bin_ms).round() as usize;
    let mut crossings: Vec<(f64, usize)> = field
        .columns
        .iter()
        .enumerate()
        .flat_map(|(c, s)| upward_crossings(s, threshold, field.bin_ms, field.start_ms, min_up).into_iter().map(move |t| (t, c)))
        .collect();
    crossings.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = field.columns.len();
    let needed = (params.coverage * n as f64).ceil() as usize;
    let mut waves = Vec::new();
    let mut i = 0;
    while i < crossings.len() {
        let t0 = crossings[i].0;
        let mut times = vec![None; n];
        let mut j = i;
        while j < crossings.len() && crossings[j].0 < t0 + params.window_ms {
            let (t, c) = crossings[j];
            times[c].get_or_insert(t);
            j += 1;
        }
        let count = times.iter().flatten().count();
        if count >= needed.max(1) {
            waves.push(TransitionField { width: field.width, height: field.height, times });
            i = j;
        } else {
            i += 1;
        }
    }
    Ok((threshold, waves))
}

/// Default lower bound on |grad T| (ms/imd) below which speed is undefined.
pub const EPS_GRAD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveSpeed {
    /// Local speed in imd/ms per column.
    pub local: Vec<Option<f64>>,
    pub valid: usize,
    pub mean_imd_per_s: f64,
    pub mean_mm_per_s: Option<f64>,
}

fn derivative(prev: Option<f64>, here: f64, next: Option<f64>) -> Option<f64> {
    match (prev, next) {
        (Some(a), Some(b)) => Some((b - a) / 2.0),
        (None, Some(b)) => Some(b - here),
        (Some(a), None) => Some(here - a),
        (None, None) => None,
    }
}

/// Local speed `1/|grad T|` on the transition field and its average.
pub fn wave_speed(field: &TransitionField, imd_mm: Option<f64>, eps_grad: f64) -> Result<WaveSpeed> {
    let mut local = vec![None; field.times.len()];
    for y in 0..i64::from(field.height) {
        for x in 0..i64::from(field.width) {
            let Some(t) = field.get(x, y) else { continue };
            let dx = derivative(field.get(x - 1, y), t, field.get(x + 1, y));
            let dy = derivative(field.get(x, y - 1), t, field.get(x, y + 1));
            let (dx, dy) = match (dx, dy) {
                (Some(a), Some(b)) => (a, b),
                (Some(a), None) if field.height == 1 => (a, 0.0),
                (None, Some(b)) if field.width == 1 => (0.0, b),
                _ => continue,
            };
            let g = dx.hypot(dy);
            if g >= eps_grad {
                local[(y * i64::from(field.width) + x) as usize] = Some(1.0 / g);
            }
        }
    }
    let valid: Vec<f64> = local.iter().flatten().copied().collect();
    if valid.len() < 4 {
        return Err(Error::Analysis(format!("only {} valid gradient points; at least 4 are needed", valid.len())));
    }
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(WaveSpeed {
        valid: valid.len(),
        mean_imd_per_s: mean * 1000.0,
        mean_mm_per_s: imd_mm.map(|mm| mean * 1000.0 * mm),
        local,
    })
}

/// Speed averaged over every valid position of every wave (imd/s).
pub fn average_wave_speed(waves: &[TransitionField], eps_grad: f64) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    for w in waves {
        if let Ok(s) = wave_speed(w, None, eps_grad) {
            sum += s.mean_imd_per_s * s.valid as f64;
            n += s.valid;
        }
    }
    if n == 0 {
        return Err(Error::Analysis("no wave with a measurable speed".into()));
    }
    Ok((sum / n as f64, n))
}

pub fn transition_csv(waves: &[TransitionField]) -> String {
    let mut s = String::from("wave,x,y,t_ms\n");
    for (k, w) in waves.iter().enumerate() {
        for (i, t) in w.times.iter().enumerate() {
            if let Some(t) = t {
                let c = Column::new(i as u32 % w.width, i as u32 / w.width);
                let _ = writeln!(s, "{k},{},{},{t}", c.x, c.y);
            }
        }
    }
    s
}

pub fn speed_csv(speeds: &[WaveSpeed], width: u32) -> String {
    let mut s = String::from("wave,x,y,speed_imd_per_s\n");
    for (k, w) in speeds.iter().enumerate() {
        for (i, v) in w.local.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(s, "{k},{},{},{}", i as u32 % width, i as u32 / width, v * 1000.0);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: u32, h: u32) -> GridSpec {
        GridSpec::new(w, h, ColumnSizes { f: 10, b: 30, i: 10 }).unwrap()
    }

    #[test]
    fn empty_log_gives_zero_rates() {
        let g = grid(2, 2);
        let r = rates(&SpikeLog::default(), &g, 5.0, 0.0, 100.0).unwrap();
        assert_eq!(r.bins, 20);
        assert!(r.population_rate(PopulationKind::F).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ten_spikes_in_hundred_neurons() {
        let g = GridSpec::new(1, 1, ColumnSizes { f: 100, b: 30, i: 10 }).unwrap();
        let log = SpikeLog::from_unsorted((0..10).map(|i| (i, 1.0 + 0.1 * f64::from(i))).collect());
        let r = rates(&log, &g, 5.0, 0.0, 10.0).unwrap();
        assert_eq!(r.population_in_column(0, PopulationKind::F), vec![20.0, 0.0]);
    }

    #[test]
    fn rates_conserve_spikes() {
        let g = grid(3, 2);
        let mut rng = KeyedRng::new(1, Domain::Test, &[]);
        let n = g.total_neurons() as u32;
        let log = SpikeLog::from_unsorted((0..5000).map(|_| (rng.below(n), rng.uniform() * 1000.0)).collect());
        let r = rates(&log, &g, 5.0, 0.0, 1000.0).unwrap();
        assert_eq!(r.total_spikes(), 5000);
        let mut total = 0.0;
        for kind in PopulationKind::ALL {
            let size = f64::from(g.sizes.of(kind)) * 6.0;
            total += r.population_rate(kind).iter().map(|x| x * size * 0.005).sum::<f64>();
        }
        assert!((total - 5000.0).abs() < 1e-6);
    }

    #[test]
    fn single_tone_peak_and_parseval() {
        let fs = 200.0;
        let x: Vec<f64> = (0..4000).map(|i| 3.0 * (2.0 * std::f64::consts::PI * 10.0 * f64::from(i) / fs).sin()).collect();
        let p = psd_welch(&x, fs, 400, 200).unwrap();
        assert_eq!(p.dominant_frequency(), Some(10.0));
        assert!((p.resolution_hz() - 0.5).abs() < 1e-12);
        let total: f64 = p.power.iter().sum::<f64>() * p.resolution_hz();
        assert!((total - 4.5).abs() < 0.01 * 4.5, "{total}");
        assert!(psd_welch(&x[..100], fs, 400, 200).is_err());
    }

    #[test]
    fn white_noise_is_flat() {
        let mut rng = KeyedRng::new(3, Domain::Test, &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let fs = 100.0;
        let x: Vec<f64> = (0..200_000).map(|_| normal.sample(&mut rng)).collect();
        let p = psd_welch(&x, fs, 256, 128).unwrap();
        // Two-sided level sigma^2 / fs doubles in the one-sided estimate.
        let expected = 2.0 / fs;
        let inner = &p.power[1..p.power.len() - 1];
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        assert!((mean - expected).abs() < 0.02 * expected, "{mean}");
        // About 1560 segments; overlap inflates the variance, so 6 relative sd is generous.
        let sd = expected / (p.segments as f64 / 1.2).sqrt();
        assert!(inner.iter().all(|v| (v - expected).abs() < 6.0 * sd));
    }

    #[test]
    fn log_mua_examples() {
        let quiet = LogMuaParams { noise_variance: 0.0, ..LogMuaParams::default() };
        assert!(log_mua(&[4.0; 50], &quiet, 0).unwrap().iter().all(|&v| v == 0.0));
        let mut mua = vec![2.0; 10];
        mua.extend(vec![2.0 * std::f64::consts::E; 90]);
        let out = log_mua(&mua, &quiet, 0).unwrap();
        assert!((out[50] - 1.0).abs() < 1e-12);
        assert!(log_mua(&[0.0; 10], &quiet, 0).is_err());
        let noisy = log_mua(&vec![3.0; 20_000], &LogMuaParams::default(), 4).unwrap();
        let var = noisy.iter().map(|v| v * v).sum::<f64>() / noisy.len() as f64;
        assert!((var - 0.5).abs() < 0.03);
    }

    #[test]
    fn modes_split_bimodal_samples_only() {
        let mut rng = KeyedRng::new(5, Domain::Test, &[]);
        let normal = Normal::new(0.0, 0.7).unwrap();
        let two: Vec<f64> = (0..20_000).map(|i| normal.sample(&mut rng) + if i % 3 == 0 { 4.0 } else { 0.0 }).collect();
        let m = histogram_modes(&two).unwrap();
        assert!((m.low).abs() < 0.3 && (m.high - 4.0).abs() < 0.3, "{m:?}");
        let one: Vec<f64> = (0..20_000).map(|_| normal.sample(&mut rng)).collect();
        assert!(histogram_modes(&one).is_none());
    }

    fn planar(width: u32, height: u32, f: impl Fn(f64, f64) -> f64, duration: f64) -> LogMuaField {
        let bins = (duration / 5.0) as usize;
        let columns = (0..width * height)
            .map(|i| {
                let t = f(f64::from(i % width), f64::from(i / width));
                (0..bins).map(|b| if (b as f64) * 5.0 >= t { 4.0 } else { 0.0 }).collect()
            })
            .collect();
        LogMuaField { width, height, bin_ms: 5.0, start_ms: 0.0, columns }
    }

    #[test]
    fn synthetic_planar_wave_is_recovered() {
        let f = |x: f64, _y: f64| 100.0 + 20.0 * x;
        let field = planar(8, 5, f, 400.0);
        let (th, waves) = transitions(&field, &TransitionParams::default()).unwrap();
        assert!((th - 2.0).abs() < 0.2);
        assert_eq!(waves.len(), 1);
        for y in 0..5 {
            for x in 0..8 {
                let t = waves[0].get(x, y).unwrap();
                assert!((t - f(x as f64, y as f64)).abs() <= 5.0);
            }
        }
    }

    #[test]
    fn simultaneous_jump_gives_equal_times() {
        let field = planar(4, 4, |_, _| 50.0, 200.0);
        let (_, waves) = transitions(&field, &TransitionParams { threshold: Some(2.0), ..Default::default() }).unwrap();
        let t0 = waves[0].times[0].unwrap();
        assert!(waves[0].times.iter().all(|t| *t == Some(t0)));
    }

    #[test]
    fn silent_column_is_missing() {
        let mut field = planar(4, 4, |x, _| 50.0 + 10.0 * x, 300.0);
        field.columns[5] = vec![0.0; field.columns[5].len()];
        let (_, waves) = transitions(&field, &TransitionParams { threshold: Some(2.0), ..Default::default() }).unwrap();
        assert_eq!(waves[0].times[5], None);
        assert_eq!(waves[0].defined(), 15);
        assert!(transitions(&planar(3, 3, |_, _| 1e9, 100.0), &TransitionParams::default()).is_err());
    }

    fn field_from(width: u32, height: u32, f: impl Fn(f64, f64) -> f64) -> TransitionField {
        TransitionField {
            width,
            height,
            times: (0..width * height).map(|i| Some(f(f64::from(i % width), f64::from(i / width)))).collect(),
        }
    }

    #[test]
    fn speed_of_linear_fields() {
        let v = 0.35;
        let s = wave_speed(&field_from(6, 6, |x, _| x / v), Some(0.4), EPS_GRAD).unwrap();
        assert!(s.local.iter().flatten().all(|&u| ((u - v) / v).abs() < 1e-6));
        assert!((s.mean_mm_per_s.unwrap() - v * 1000.0 * 0.4).abs() < 1e-6);
        let d = wave_speed(&field_from(5, 5, |x, y| x + y), None, EPS_GRAD).unwrap();
        assert!(d.local.iter().flatten().all(|&u| (u - 1.0 / 2f64.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn flat_or_sparse_fields_are_rejected() {
        assert!(wave_speed(&field_from(4, 4, |_, _| 7.0), None, EPS_GRAD).is_err());
        let mut sparse = field_from(3, 3, |x, _| x);
        for t in sparse.times.iter_mut().skip(3) {
            *t = None;
        }
        assert!(wave_speed(&sparse, None, EPS_GRAD).is_err());
    }
}
