//! Cross-correlation of two tag streams into a t₁ − t₂ histogram, peak
//! detection and peak-center estimation.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spdc::{farfield_g2, BroadeningModel, Grid, ModelError, SpectralModel};
use crate::stats::{median_u64, nelder_mead, Estimate};
use crate::timetag::{TagStream, FS_PER_PS};

pub const DEFAULT_BIN_PS: f64 = 3.0;
pub const DEFAULT_HALF_WINDOW_PS: f64 = 50_000.0;
pub const DEFAULT_MIN_PROMINENCE: f64 = 0.05;
pub const FIT_MAX_ITERATIONS: usize = 500;

#[derive(Debug, Error)]
pub enum CorrelatorError {
    #[error("stream {stream} not sorted at index {index}")]
    Unsorted { stream: u8, index: usize },
    #[error("invalid binning: {0}")]
    Binning(String),
    #[error("histograms have different binning")]
    BinningMismatch,
    #[error("coincidence count overflow")]
    Overflow,
    #[error("no peak above background")]
    NoPeak,
    #[error("fit did not converge after {iterations} iterations (last χ² = {last_residual:.4e})")]
    Fit { iterations: usize, last_residual: f64 },
    #[error("fit model: {0}")]
    Model(#[from] ModelError),
    #[error("streams cover {covered_s:.3} s, shorter than one {window_s:.3} s window")]
    Coverage { covered_s: f64, window_s: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Half-open bins `[lo + k·w, lo + (k+1)·w)` in femtoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Binning {
    pub lo_fs: i64,
    pub bin_width_fs: i64,
    pub nbins: usize,
}

impl Binning {
    /// Bins covering `[tau_min, tau_max)`; the last bin may extend past `tau_max`.
    pub fn new(bin_width_ps: f64, tau_min_ps: f64, tau_max_ps: f64) -> Result<Self, CorrelatorError> {
        let w = (bin_width_ps * FS_PER_PS as f64).round() as i64;
        if w <= 0 {
            return Err(CorrelatorError::Binning("bin width must be positive".into()));
        }
        if !(tau_max_ps - tau_min_ps >= bin_width_ps) {
            return Err(CorrelatorError::Binning("window must be at least one bin wide".into()));
        }
        let lo = (tau_min_ps * FS_PER_PS as f64).round() as i64;
        let hi = (tau_max_ps * FS_PER_PS as f64).round() as i64;
        let nbins = ((hi - lo) as u64).div_ceil(w as u64) as usize;
        Ok(Binning { lo_fs: lo, bin_width_fs: w, nbins })
    }

    /// Odd number of bins with centers on multiples of the bin width and
    /// one bin centered on τ = 0, covering at least ±`half_window_ps`.
    pub fn centered(bin_width_ps: f64, half_window_ps: f64) -> Result<Self, CorrelatorError> {
        Self::around(bin_width_ps, 0.0, half_window_ps)
    }

    /// As [`Binning::centered`], but the middle bin is the multiple of the
    /// bin width nearest to `center_ps`.
    pub fn around(bin_width_ps: f64, center_ps: f64, half_window_ps: f64) -> Result<Self, CorrelatorError> {
        let w = (bin_width_ps * FS_PER_PS as f64).round() as i64;
        if w <= 0 {
            return Err(CorrelatorError::Binning("bin width must be positive".into()));
        }
        if !(2.0 * half_window_ps >= bin_width_ps) {
            return Err(CorrelatorError::Binning("window must be at least one bin wide".into()));
        }
        let span_fs = 2.0 * (half_window_ps + center_ps.abs()) * FS_PER_PS as f64;
        if !span_fs.is_finite() || span_fs > i64::MAX as f64 / 2.0 {
            return Err(CorrelatorError::Binning("window out of range".into()));
        }
        let n = ((half_window_ps * FS_PER_PS as f64) / w as f64).ceil() as i64;
        let k = (center_ps * FS_PER_PS as f64 / w as f64).round() as i64;
        Ok(Binning { lo_fs: (k - n) * w - w / 2, bin_width_fs: w, nbins: (2 * n + 1) as usize })
    }

    pub fn hi_fs(&self) -> i64 {
        self.lo_fs + self.bin_width_fs * self.nbins as i64
    }

    pub fn bin_width_ps(&self) -> f64 {
        self.bin_width_fs as f64 / FS_PER_PS as f64
    }

    pub fn center_ps(&self, bin: usize) -> f64 {
        (self.lo_fs as f64 + (bin as f64 + 0.5) * self.bin_width_fs as f64) / FS_PER_PS as f64
    }

    pub fn bin_of(&self, diff_fs: i64) -> Option<usize> {
        let offset = diff_fs as i128 - self.lo_fs as i128;
        if offset < 0 {
            return None;
        }
        let b = (offset / self.bin_width_fs as i128) as usize;
        (b < self.nbins).then_some(b)
    }
}

impl Default for Binning {
    fn default() -> Self {
        Binning::centered(DEFAULT_BIN_PS, DEFAULT_HALF_WINDOW_PS).expect("defaults are valid")
    }
}

/// Counts of t₁ − t₂ per bin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrelationHistogram {
    pub binning: Binning,
    pub counts: Vec<u64>,
    pub n1: u64,
    pub n2: u64,
    pub coincidences: u64,
}

impl CorrelationHistogram {
    pub fn empty(binning: Binning) -> Self {
        CorrelationHistogram { binning, counts: vec![0; binning.nbins], n1: 0, n2: 0, coincidences: 0 }
    }

    /// Bin-wise sum. Singles totals are summed too, so merge shards of the
    /// same pair of streams by correlating disjoint slices of `s1`.
    pub fn merge(&mut self, other: &CorrelationHistogram) -> Result<(), CorrelatorError> {
        if self.binning != other.binning {
            return Err(CorrelatorError::BinningMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a = a.checked_add(*b).ok_or(CorrelatorError::Overflow)?;
        }
        self.n1 += other.n1;
        self.n2 += other.n2;
        self.coincidences = self.coincidences.checked_add(other.coincidences).ok_or(CorrelatorError::Overflow)?;
        Ok(())
    }

    pub fn center_ps(&self, bin: usize) -> f64 {
        self.binning.center_ps(bin)
    }

    pub fn bin_width_ps(&self) -> f64 {
        self.binning.bin_width_ps()
    }

    /// Writes `bin_center_ps,counts` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CorrelatorError> {
        let mut w = csv::Writer::from_writer(writer);
        for (i, &counts) in self.counts.iter().enumerate() {
            w.serialize(HistogramRow { bin_center_ps: self.center_ps(i), counts })?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_center_ps: f64,
    pub counts: u64,
}

pub fn read_histogram_csv<R: Read>(reader: R) -> Result<Vec<HistogramRow>, CorrelatorError> {
    let mut r = csv::Reader::from_reader(reader);
    let rows = r.deserialize().collect::<Result<Vec<HistogramRow>, _>>()?;
    Ok(rows)
}

fn check_sorted(ts: &[i64], stream: u8) -> Result<(), CorrelatorError> {
    match ts.windows(2).position(|w| w[1] < w[0]) {
        Some(i) => Err(CorrelatorError::Unsorted { stream, index: i + 1 }),
        None => Ok(()),
    }
}

pub fn cross_correlate(s1: &TagStream, s2: &TagStream, binning: &Binning) -> Result<CorrelationHistogram, CorrelatorError> {
    correlate_timestamps(&s1.timestamps(), &s2.timestamps(), binning)
}

/// Histogram of all pairwise differences `t1[i] − t2[j]` that fall in the
/// binning window. Both inputs must be sorted; runs in O(n₁ + n₂ + matches).
pub fn correlate_timestamps(t1: &[i64], t2: &[i64], binning: &Binning) -> Result<CorrelationHistogram, CorrelatorError> {
    check_sorted(t1, 1)?;
    check_sorted(t2, 2)?;
    let mut h = sweep(t1, t2, binning, 0)?;
    h.n1 = t1.len() as u64;
    h.n2 = t2.len() as u64;
    Ok(h)
}

/// As [`correlate_timestamps`], split into `shards` slices of `t1` that are
/// correlated in parallel and merged.
pub fn correlate_timestamps_sharded(
    t1: &[i64],
    t2: &[i64],
    binning: &Binning,
    shards: usize,
) -> Result<CorrelationHistogram, CorrelatorError> {
    check_sorted(t1, 1)?;
    check_sorted(t2, 2)?;
    let shards = shards.max(1);
    let chunk = t1.len().div_ceil(shards).max(1);
    let parts = t1
        .par_chunks(chunk)
        .map(|c| {
            // lower bound of the first match for this slice
            let first = c.first().map_or(0, |&t| t2.partition_point(|&x| (x as i128) <= t as i128 - binning.hi_fs() as i128));
            sweep(c, &t2[first..], binning, 0)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut h = CorrelationHistogram::empty(*binning);
    for p in &parts {
        h.merge(p)?;
    }
    h.n1 = t1.len() as u64;
    h.n2 = t2.len() as u64;
    Ok(h)
}

fn sweep(t1: &[i64], t2: &[i64], binning: &Binning, mut start: usize) -> Result<CorrelationHistogram, CorrelatorError> {
    let mut h = CorrelationHistogram::empty(*binning);
    let (lo, hi) = (binning.lo_fs as i128, binning.hi_fs() as i128);
    let mut end = start;
    let mut total: u64 = 0;
    for &a in t1 {
        let a = a as i128;
        // matches satisfy a − hi < t2 ≤ a − lo
        while start < t2.len() && (t2[start] as i128) <= a - hi {
            start += 1;
        }
        if end < start {
            end = start;
        }
        while end < t2.len() && (t2[end] as i128) <= a - lo {
            end += 1;
        }
        for &b in &t2[start..end] {
            let bin = ((a - b as i128 - lo) / binning.bin_width_fs as i128) as usize;
            h.counts[bin] += 1;
        }
        total = total.checked_add((end - start) as u64).ok_or(CorrelatorError::Overflow)?;
    }
    h.coincidences = total;
    Ok(h)
}

/// A histogram peak. `center_ps` is the smoothed maximum (plateau midpoint).
#[derive(Debug, Clone, PartialEq)]
pub struct Peak {
    pub center_ps: f64,
    pub bin: usize,
    /// Smoothed height (counts per bin).
    pub height: f64,
    pub prominence: f64,
    pub fwhm_ps: f64,
    /// Background-subtracted counts in the peak extent over all coincidences.
    pub area_fraction: f64,
    /// Inclusive bin range attributed to this peak.
    pub extent: (usize, usize),
}

fn smooth3(counts: &[u64]) -> Vec<f64> {
    let n = counts.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            counts[lo..=hi].iter().sum::<u64>() as f64 / (hi - lo + 1) as f64
        })
        .collect()
}

/// Counts under the tallest boxcar that [`smooth_adaptive`] aims for.
const SMOOTH_TARGET_COUNTS: u64 = 100;

/// Counts under the boxcar that [`refined_width`] aims for at the peak.
const REFINE_TARGET_COUNTS: u64 = 400;

/// Boxcar mean of `counts`, at least 3 bins wide and widened (3, 5, 9, 17, ...)
/// until its tallest window holds [`SMOOTH_TARGET_COUNTS`], up to 1/8 of the
/// histogram.
fn smooth_adaptive(counts: &[u64]) -> Vec<f64> {
    let n = counts.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0u64);
    for &c in counts {
        prefix.push(prefix.last().unwrap() + c);
    }
    let window = |i: usize, r: usize| {
        let lo = i.saturating_sub(r);
        let hi = (i + r + 1).min(n);
        (prefix[hi] - prefix[lo], hi - lo)
    };
    let max_r = (n / 16).max(1);
    let mut r = 1;
    while r < max_r && (0..n).map(|i| window(i, r).0).max().unwrap_or(0) < SMOOTH_TARGET_COUNTS {
        r = (2 * r).min(max_r);
    }
    (0..n)
        .map(|i| {
            let (sum, len) = window(i, r);
            sum as f64 / len as f64
        })
        .collect()
}

/// Local maxima of the smoothed histogram (see [`smooth_adaptive`]) whose prominence is at
/// least `min_prominence` × the global smoothed maximum and which lie
/// outside the half-maximum span of every taller peak. Sorted by height
/// (descending), ties by center (ascending).
pub fn find_peaks(h: &CorrelationHistogram, min_prominence: f64) -> Result<Vec<Peak>, CorrelatorError> {
    let n = h.counts.len();
    if n < 3 || h.coincidences == 0 {
        return Err(CorrelatorError::NoPeak);
    }
    let s = smooth_adaptive(&h.counts);
    let gmax = s.iter().cloned().fold(0.0, f64::max);
    let background = median_u64(&h.counts);
    let floor = background + 3.0 * background.sqrt();
    let threshold = (min_prominence * gmax).max(f64::MIN_POSITIVE);

    // interior plateaus strictly above both neighbors
    let mut candidates = Vec::new();
    let mut i = 1;
    while i < n - 1 {
        if s[i] > s[i - 1] {
            let mut j = i;
            while j + 1 < n && s[j + 1] == s[i] {
                j += 1;
            }
            if j + 1 < n && s[j + 1] < s[i] && s[i] > floor && s[i] >= threshold {
                candidates.push((i, j));
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }

    let mut peaks = Vec::new();
    for (a, b) in candidates {
        let top = s[a];
        let mut left_min = top;
        for k in (0..a).rev() {
            if s[k] > top {
                break;
            }
            left_min = left_min.min(s[k]);
        }
        let mut right_min = top;
        for &v in &s[b + 1..] {
            if v > top {
                break;
            }
            right_min = right_min.min(v);
        }
        let prominence = top - left_min.max(right_min);
        if prominence < threshold {
            continue;
        }
        let mid = (a + b) / 2;
        let center = if (a + b) % 2 == 0 {
            h.center_ps(mid)
        } else {
            0.5 * (h.center_ps(a) + h.center_ps(b))
        };
        let fwhm = half_max_width(&s, a, b, top, h.bin_width_ps());
        peaks.push(Peak {
            center_ps: center,
            bin: mid,
            height: top,
            prominence,
            fwhm_ps: fwhm,
            area_fraction: 0.0,
            extent: (a, b),
        });
    }
    // a maximum inside the half-max span of a taller peak is noise on its flank
    peaks.sort_by(|x, y| y.height.total_cmp(&x.height).then(x.center_ps.total_cmp(&y.center_ps)));
    let mut kept: Vec<Peak> = Vec::with_capacity(peaks.len());
    for p in peaks {
        if kept.iter().all(|k| (p.center_ps - k.center_ps).abs() > 0.5 * k.fwhm_ps) {
            kept.push(p);
        }
    }
    let mut peaks = kept;
    if peaks.is_empty() {
        return Err(CorrelatorError::NoPeak);
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0u64);
    for &c in &h.counts {
        prefix.push(prefix.last().unwrap() + c);
    }
    for p in peaks.iter_mut() {
        p.fwhm_ps = refined_width(&prefix, p.bin, p.fwhm_ps, background, h.bin_width_ps());
    }

    // extents: ±2 FWHM, cut at the midpoint toward neighboring peaks
    let mut by_pos: Vec<usize> = (0..peaks.len()).collect();
    by_pos.sort_by(|&x, &y| peaks[x].center_ps.total_cmp(&peaks[y].center_ps));
    let w = h.bin_width_ps();
    for (k, &p) in by_pos.iter().enumerate() {
        let c = peaks[p].center_ps;
        let reach = 2.0 * peaks[p].fwhm_ps;
        let mut lo = c - reach;
        let mut hi = c + reach;
        if k > 0 {
            lo = lo.max(0.5 * (c + peaks[by_pos[k - 1]].center_ps));
        }
        if k + 1 < by_pos.len() {
            hi = hi.min(0.5 * (c + peaks[by_pos[k + 1]].center_ps));
        }
        let first = ((lo - h.center_ps(0)) / w).ceil().max(0.0) as usize;
        let last = (((hi - h.center_ps(0)) / w).floor() as isize).clamp(0, n as isize - 1) as usize;
        let (first, last) = (first.min(last), last);
        let raw: f64 = h.counts[first..=last].iter().sum::<u64>() as f64;
        let area = (raw - background * (last - first + 1) as f64).max(0.0);
        peaks[p].extent = (first, last);
        peaks[p].area_fraction = area / h.coincidences as f64;
    }

    peaks.sort_by(|x, y| y.height.total_cmp(&x.height).then(x.center_ps.total_cmp(&y.center_ps)));
    Ok(peaks)
}

/// FWHM above `background` after a boxcar about 1/15 of the rough width,
/// which keeps the broadening negligible while averaging down the noise
/// on the maximum. Sparse peaks widen the boxcar, up to 1/4 of the rough
/// width, until it holds [`REFINE_TARGET_COUNTS`] at the peak.
fn refined_width(prefix: &[u64], bin: usize, rough_ps: f64, background: f64, w: f64) -> f64 {
    let n = prefix.len() - 1;
    let k = ((rough_ps / w / 15.0).round() as usize / 2) * 2 + 1;
    if k < 5 || !rough_ps.is_finite() {
        return rough_ps;
    }
    let mut r = k / 2;
    let r_cap = ((rough_ps / w / 8.0) as usize).max(r);
    let held = |r: usize| prefix[(bin + r + 1).min(n)] - prefix[bin.saturating_sub(r)];
    while r < r_cap && held(r) < REFINE_TARGET_COUNTS {
        r = (2 * r).min(r_cap);
    }
    let smooth = |i: usize| -> f64 {
        let lo = i.saturating_sub(r);
        let hi = (i + r + 1).min(n);
        (prefix[hi] - prefix[lo]) as f64 / (hi - lo) as f64
    };
    let reach = ((rough_ps / w / 4.0) as usize).max(1);
    let (mut top_bin, mut top) = (bin, smooth(bin));
    for i in bin.saturating_sub(reach)..=(bin + reach).min(n - 1) {
        let v = smooth(i);
        if v > top {
            (top_bin, top) = (i, v);
        }
    }
    let half = background + 0.5 * (top - background);
    if top <= background {
        return rough_ps;
    }
    let mut left = 0.0;
    let mut i = top_bin;
    while i > 0 {
        let (a, b) = (smooth(i - 1), smooth(i));
        if a < half {
            left = (i - 1) as f64 + (half - a) / (b - a);
            break;
        }
        i -= 1;
    }
    let mut right = (n - 1) as f64;
    let mut i = top_bin;
    while i + 1 < n {
        let (a, b) = (smooth(i), smooth(i + 1));
        if b < half {
            right = i as f64 + (a - half) / (a - b);
            break;
        }
        i += 1;
    }
    (right - left) * w
}

fn half_max_width(s: &[f64], a: usize, b: usize, top: f64, w: f64) -> f64 {
    let half = top / 2.0;
    let left = match (0..a).rev().find(|&k| s[k] < half) {
        Some(k) => k as f64 + (half - s[k]) / (s[k + 1] - s[k]),
        None => 0.0,
    };
    let right = match (b + 1..s.len()).find(|&k| s[k] < half) {
        Some(k) => (k - 1) as f64 + (s[k - 1] - half) / (s[k - 1] - s[k]),
        None => (s.len() - 1) as f64,
    };
    (right - left) * w
}

/// Parameters of the far-field peak shape used by [`PeakMethod::ModelFit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitModel {
    pub spectral: SpectralModel,
    /// Fiber length traversed by the signal and idler photons (km).
    pub signal_path_km: f64,
    pub idler_path_km: f64,
    /// Combined two-detector jitter FWHM (ps), held fixed.
    pub jitter_fwhm_ps: f64,
    /// Starting values for k″ (s²/cm).
    pub k2_signal_guess: f64,
    pub k2_idler_guess: f64,
}

impl FitModel {
    fn b_s2(&self, k2_s: f64, k2_i: f64) -> f64 {
        (k2_s * self.signal_path_km + k2_i * self.idler_path_km) * 1e5
    }

    fn shape(&self, k2_s: f64, k2_i: f64) -> Result<crate::spdc::SampledDensity, ModelError> {
        let b = BroadeningModel::new(self.b_s2(k2_s, k2_i), self.jitter_fwhm_ps)?;
        farfield_g2(&self.spectral, &b, &Grid::default())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PeakMethod<'a> {
    Centroid,
    ModelFit(&'a FitModel),
}

/// Result of a single-peak shape fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakFit {
    pub center: Estimate,
    pub amplitude: f64,
    pub background: f64,
    pub k2_signal_s2_per_cm: f64,
    pub k2_idler_s2_per_cm: f64,
    pub chi2: f64,
    pub dof: usize,
    pub iterations: usize,
}

pub fn peak_center(h: &CorrelationHistogram, peak: &Peak, method: PeakMethod<'_>) -> Result<Estimate, CorrelatorError> {
    match method {
        PeakMethod::Centroid => Ok(centroid(h, peak)),
        PeakMethod::ModelFit(model) => fit_peak(h, peak, model).map(|f| f.center),
    }
}

/// Count-weighted mean over a window two FWHM wide, re-centered on the
/// running estimate until it settles. Edge bins contribute the fraction of
/// their width inside the window; the median background is subtracted.
///
/// The uncertainty is the Poisson spread of the weighted first moment,
/// divided by 1 − g, where g = h·(ρ(c−h) + ρ(c+h))/N is how far the window
/// mean follows a shift of the window (ρ is the signal density at the edges).
pub fn centroid(h: &CorrelationHistogram, peak: &Peak) -> Estimate {
    let w = h.bin_width_ps();
    let half = peak.fwhm_ps.max(0.5 * w);
    let background = median_u64(&h.counts);
    let span = |lo: f64, hi: f64| {
        let first = ((lo - h.center_ps(0)) / w).round().max(0.0) as usize;
        let last = (((hi - h.center_ps(0)) / w).round().max(0.0) as usize).min(h.counts.len() - 1);
        (first, last)
    };
    let overlap = |x: f64, lo: f64, hi: f64| ((x + 0.5 * w).min(hi) - (x - 0.5 * w).max(lo)).max(0.0) / w;
    let mut c = peak.center_ps;
    let mut converged = false;
    for _ in 0..100 {
        let (first, last) = span(c - half, c + half);
        let (mut sw, mut swx) = (0.0, 0.0);
        for b in first..=last {
            let x = h.center_ps(b);
            let n = (h.counts[b] as f64 - background).max(0.0) * overlap(x, c - half, c + half);
            sw += n;
            swx += n * x;
        }
        if sw <= 0.0 {
            break;
        }
        converged = true;
        let next = swx / sw;
        let moved = (next - c).abs();
        c = next;
        if moved < 1e-9 * w {
            break;
        }
    }
    if !converged {
        return Estimate::new(c, f64::INFINITY);
    }

    let (first, last) = span(c - half, c + half);
    let (mut total, mut spread) = (0.0, 0.0);
    for b in first..=last {
        let x = h.center_ps(b);
        let f = overlap(x, c - half, c + half);
        total += (h.counts[b] as f64 - background).max(0.0) * f;
        spread += h.counts[b] as f64 * (f * (x - c)).powi(2);
    }
    // signal density (counts/ps) in a band about a tenth of the window at each edge
    let band = (0.1 * half).max(2.0 * w);
    let density = |edge: f64| {
        let (a, b) = span(edge - band, edge + band);
        let net: f64 = h.counts[a..=b].iter().map(|&n| n as f64 - background).sum();
        (net / ((b - a + 1) as f64 * w)).max(0.0)
    };
    let g = (half * (density(c - half) + density(c + half)) / total).min(0.9);
    let sigma = if total > 0.0 { spread.sqrt() / total / (1.0 - g) } else { f64::INFINITY };
    Estimate::new(c, sigma)
}

struct FitData {
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl FitData {
    fn around(h: &CorrelationHistogram, center: f64, reach: f64) -> Self {
        let (mut x, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for (b, &c) in h.counts.iter().enumerate() {
            let t = h.center_ps(b);
            if (t - center).abs() <= reach {
                x.push(t);
                y.push(c as f64);
                w.push(1.0 / (c as f64).max(1.0));
            }
        }
        FitData { x, y, w }
    }

    /// Profiles out amplitude and background by weighted linear least
    /// squares for a given unit-area shape; returns (χ², amplitude, background).
    fn profile(&self, shape: &crate::spdc::SampledDensity, center: f64) -> (f64, f64, f64) {
        let g: Vec<f64> = self.x.iter().map(|&t| shape.value_at(t - center)).collect();
        let (mut s1, mut sg, mut sgg, mut sy, mut sgy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ((&gi, &w), &y) in g.iter().zip(&self.w).zip(&self.y) {
            s1 += w;
            sg += w * gi;
            sgg += w * gi * gi;
            sy += w * y;
            sgy += w * gi * y;
        }
        let det = s1 * sgg - sg * sg;
        let (mut amp, mut bg) = if det.abs() > 0.0 {
            ((s1 * sgy - sg * sy) / det, (sgg * sy - sg * sgy) / det)
        } else {
            (0.0, sy / s1)
        };
        if bg < 0.0 {
            bg = 0.0;
            amp = if sgg > 0.0 { sgy / sgg } else { 0.0 };
        }
        if amp < 0.0 {
            amp = 0.0;
            bg = (sy / s1).max(0.0);
        }
        let chi2 = (0..g.len()).map(|i| self.w[i] * (self.y[i] - amp * g[i] - bg).powi(2)).sum();
        (chi2, amp, bg)
    }
}

/// Least-squares fit of the far-field G² shape (with the model's fixed
/// jitter) to one peak. Free parameters: center, amplitude, background and
/// k″. Amplitude and background are profiled out linearly; center and the
/// k″ scale go through the simplex. A single peak only constrains
/// B = k″_s·r_s + k″_i·r_i, so the two k″ values keep the ratio of the
/// initial guess; use [`fit_dispersion_pair`] to separate them.
pub fn fit_peak(h: &CorrelationHistogram, peak: &Peak, model: &FitModel) -> Result<PeakFit, CorrelatorError> {
    let reach = 2.0 * peak.fwhm_ps.max(model.jitter_fwhm_ps);
    let data = FitData::around(h, peak.center_ps, reach);
    if data.x.len() < 4 {
        return Err(CorrelatorError::NoPeak);
    }
    let (ks0, ki0) = (model.k2_signal_guess, model.k2_idler_guess);
    if !(ks0 > 0.0 && ki0 > 0.0) {
        return Err(ModelError::Invalid("k2 guesses must be positive".into()).into());
    }
    let objective = |p: &[f64]| -> f64 {
        let scale = p[1].exp();
        match model.shape(ks0 * scale, ki0 * scale) {
            Ok(shape) => data.profile(&shape, p[0]).0,
            Err(_) => f64::INFINITY,
        }
    };
    let w = h.bin_width_ps();
    let res = nelder_mead(objective, &[peak.center_ps, 0.0], &[4.0 * w, 0.1], FIT_MAX_ITERATIONS, 1e-10);
    if !res.converged {
        return Err(CorrelatorError::Fit { iterations: res.iterations, last_residual: res.fx });
    }
    let scale = res.x[1].exp();
    let (ks, ki) = (ks0 * scale, ki0 * scale);
    let shape = model.shape(ks, ki)?;
    let c = res.x[0];
    let (chi2, amplitude, background) = data.profile(&shape, c);
    let sigma = curvature_sigma(|x| data.profile(&shape, x).0, c, w);
    Ok(PeakFit {
        center: Estimate::new(c, sigma),
        amplitude,
        background,
        k2_signal_s2_per_cm: ks,
        k2_idler_s2_per_cm: ki,
        chi2,
        dof: data.x.len().saturating_sub(4),
        iterations: res.iterations,
    })
}

/// σ from the second derivative of χ² along one coordinate: σ² = 2 / χ²″.
fn curvature_sigma(chi2: impl Fn(f64) -> f64, at: f64, step: f64) -> f64 {
    let (m, z, p) = (chi2(at - step), chi2(at), chi2(at + step));
    let second = (m - 2.0 * z + p) / (step * step);
    if second > 0.0 {
        (2.0 / second).sqrt()
    } else {
        f64::INFINITY
    }
}

/// Joint fit of k″_s and k″_i from the central peaks of both plate settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionFit {
    pub center_plate0: Estimate,
    pub center_plate45: Estimate,
    pub k2_signal_s2_per_cm: f64,
    pub k2_idler_s2_per_cm: f64,
    pub chi2: f64,
    pub iterations: usize,
}

/// Fits both swap-state peaks with shared k″_s, k″_i. At 0° the signal
/// travels `r1_km` and the idler `r2_km`; at 45° the paths exchange. The two
/// k″ values are separable only when r₁ ≠ r₂.
#[allow(clippy::too_many_arguments)]
pub fn fit_dispersion_pair(
    h0: &CorrelationHistogram,
    peak0: &Peak,
    h45: &CorrelationHistogram,
    peak45: &Peak,
    spectral: &SpectralModel,
    r1_km: f64,
    r2_km: f64,
    jitter_fwhm_ps: f64,
    k2_guess: (f64, f64),
) -> Result<DispersionFit, CorrelatorError> {
    if (r1_km - r2_km).abs() <= 1e-9 * (r1_km + r2_km) {
        return Err(ModelError::Invalid("k2_s and k2_i are not separable when r1 = r2".into()).into());
    }
    let m0 = FitModel {
        spectral: spectral.clone(),
        signal_path_km: r1_km,
        idler_path_km: r2_km,
        jitter_fwhm_ps,
        k2_signal_guess: k2_guess.0,
        k2_idler_guess: k2_guess.1,
    };
    let m45 = FitModel { signal_path_km: r2_km, idler_path_km: r1_km, ..m0.clone() };
    let reach = |p: &Peak| 2.0 * p.fwhm_ps.max(jitter_fwhm_ps);
    let d0 = FitData::around(h0, peak0.center_ps, reach(peak0));
    let d45 = FitData::around(h45, peak45.center_ps, reach(peak45));
    let (ks0, ki0) = k2_guess;
    let objective = |p: &[f64]| -> f64 {
        let (ks, ki) = (ks0 * p[2].exp(), ki0 * p[3].exp());
        match (m0.shape(ks, ki), m45.shape(ks, ki)) {
            (Ok(a), Ok(b)) => d0.profile(&a, p[0]).0 + d45.profile(&b, p[1]).0,
            _ => f64::INFINITY,
        }
    };
    let w = h0.bin_width_ps();
    let res = nelder_mead(
        objective,
        &[peak0.center_ps, peak45.center_ps, 0.0, 0.0],
        &[4.0 * w, 4.0 * w, 0.1, 0.1],
        4 * FIT_MAX_ITERATIONS,
        1e-10,
    );
    if !res.converged {
        return Err(CorrelatorError::Fit { iterations: res.iterations, last_residual: res.fx });
    }
    let (ks, ki) = (ks0 * res.x[2].exp(), ki0 * res.x[3].exp());
    let (a, b) = (m0.shape(ks, ki)?, m45.shape(ks, ki)?);
    let s0 = curvature_sigma(|x| d0.profile(&a, x).0, res.x[0], w);
    let s45 = curvature_sigma(|x| d45.profile(&b, x).0, res.x[1], w);
    Ok(DispersionFit {
        center_plate0: Estimate::new(res.x[0], s0),
        center_plate45: Estimate::new(res.x[1], s45),
        k2_signal_s2_per_cm: ks,
        k2_idler_s2_per_cm: ki,
        chi2: res.fx,
        iterations: res.iterations,
    })
}

/// One window of an offset time series. `center` is `None` for gaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetSample {
    pub window_start_s: f64,
    pub center: Option<Estimate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSettings {
    pub window_s: f64,
    pub stride_s: f64,
    pub binning: Binning,
    pub min_prominence: f64,
}

impl TrackSettings {
    pub fn new(window_s: f64, stride_s: f64) -> Self {
        TrackSettings { window_s, stride_s, binning: Binning::default(), min_prominence: DEFAULT_MIN_PROMINENCE }
    }
}

/// Central-peak center of t₁ − t₂ in successive windows of `s1` time.
pub fn track_offset(s1: &TagStream, s2: &TagStream, settings: &TrackSettings) -> Result<Vec<OffsetSample>, CorrelatorError> {
    track_offset_timestamps(&s1.timestamps(), &s2.timestamps(), settings)
}

pub fn track_offset_timestamps(
    t1: &[i64],
    t2: &[i64],
    settings: &TrackSettings,
) -> Result<Vec<OffsetSample>, CorrelatorError> {
    check_sorted(t1, 1)?;
    check_sorted(t2, 2)?;
    if !(settings.window_s > 0.0 && settings.stride_s > 0.0) {
        return Err(CorrelatorError::Binning("window and stride must be positive".into()));
    }
    const FS_PER_S: f64 = 1e15;
    let firsts = [t1.first(), t2.first()].into_iter().flatten().copied();
    let lasts = [t1.last(), t2.last()].into_iter().flatten().copied();
    let (start, end) = match (firsts.min(), lasts.max()) {
        (Some(a), Some(b)) => (a.min(0), b),
        _ => return Err(CorrelatorError::Coverage { covered_s: 0.0, window_s: settings.window_s }),
    };
    let covered_s = (end - start) as f64 / FS_PER_S;
    if covered_s < settings.window_s {
        return Err(CorrelatorError::Coverage { covered_s, window_s: settings.window_s });
    }
    let window_fs = (settings.window_s * FS_PER_S).round() as i64;
    let stride_fs = (settings.stride_s * FS_PER_S).round() as i64;
    let b = settings.binning;

    let mut starts = Vec::new();
    let mut s = start;
    while s + window_fs <= end {
        starts.push(s);
        s += stride_fs;
    }
    starts
        .par_iter()
        .map(|&ws| {
            let we = ws + window_fs;
            let a = &t1[t1.partition_point(|&x| x < ws)..t1.partition_point(|&x| x < we)];
            let lo2 = t2.partition_point(|&x| (x as i128) <= ws as i128 - b.hi_fs() as i128);
            let hi2 = t2.partition_point(|&x| (x as i128) <= we as i128 - b.lo_fs as i128);
            let h = sweep(a, &t2[lo2..hi2], &b, 0)?;
            let center = match find_peaks(&h, settings.min_prominence) {
                Ok(peaks) => Some(centroid(&h, &peaks[0])),
                Err(CorrelatorError::NoPeak) => None,
                Err(e) => return Err(e),
            };
            Ok(OffsetSample { window_start_s: ws as f64 / FS_PER_S, center })
        })
        .collect()
}

/// CSV row of an offset series; the center cells are empty for gaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetRow {
    pub window_start_s: f64,
    pub center_ps: Option<f64>,
    pub sigma_ps: Option<f64>,
}

impl From<&OffsetSample> for OffsetRow {
    fn from(s: &OffsetSample) -> Self {
        OffsetRow {
            window_start_s: s.window_start_s,
            center_ps: s.center.map(|c| c.value),
            sigma_ps: s.center.map(|c| c.sigma),
        }
    }
}

pub fn write_offset_csv<W: Write>(writer: W, samples: &[OffsetSample]) -> Result<(), CorrelatorError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(OffsetRow::from(s))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_offset_csv<R: Read>(reader: R) -> Result<Vec<OffsetRow>, CorrelatorError> {
    Ok(csv::Reader::from_reader(reader).deserialize().collect::<Result<_, _>>()?)
}

/// Coarse search for the strongest correlation within ±`search_half_ps`:
/// histograms at `coarse_bin_ps` and returns the center of the tallest
/// smoothed bin.
pub fn locate_peak(t1: &[i64], t2: &[i64], search_half_ps: f64, coarse_bin_ps: f64) -> Result<f64, CorrelatorError> {
    let binning = Binning::centered(coarse_bin_ps, search_half_ps)?;
    let h = correlate_timestamps(t1, t2, &binning)?;
    if h.coincidences == 0 {
        return Err(CorrelatorError::NoPeak);
    }
    let s = smooth3(&h.counts);
    let best = (0..s.len())
        .max_by(|&a, &b| s[a].total_cmp(&s[b]).then(h.counts[a].cmp(&h.counts[b])).then(b.cmp(&a)))
        .ok_or(CorrelatorError::NoPeak)?;
    Ok(h.center_ps(best))
}

/// Histogram, peak list and central-peak center for one stream pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakMeasurement {
    pub histogram: CorrelationHistogram,
    /// Sorted by height; the first entry is the central peak.
    pub peaks: Vec<Peak>,
    pub center: Estimate,
}

/// Correlates `s1` against `s2` (sharded across the rayon pool) and
/// estimates the center of the tallest peak with `method`.
pub fn measure_peak(
    s1: &TagStream,
    s2: &TagStream,
    binning: &Binning,
    method: PeakMethod<'_>,
) -> Result<PeakMeasurement, CorrelatorError> {
    let shards = rayon::current_num_threads().max(1) * 4;
    let histogram = correlate_timestamps_sharded(&s1.timestamps(), &s2.timestamps(), binning, shards)?;
    let peaks = find_peaks(&histogram, DEFAULT_MIN_PROMINENCE)?;
    let center = peak_center(&histogram, &peaks[0], method)?;
    Ok(PeakMeasurement { histogram, peaks, center })
}
