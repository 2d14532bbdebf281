//! Biphoton spectral amplitudes and the two-photon correlation density G²(τ).
//!
//! All densities are returned on a uniform τ grid in picoseconds and are
//! normalized to unit (trapezoidal) integral. τ is the detection-time
//! difference τ₁ − τ₂ with the path delays already removed, so every shape
//! here is centered on zero.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// FWHM / σ for a Gaussian.
pub const GAUSSIAN_FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

/// Half-maximum abscissa of sin²x/x², i.e. the positive root of sinc²(x) = 1/2.
pub const SINC2_HALF_MAX_X: f64 = 1.391_557_378_251_51;

/// Minimum number of grid points across a FWHM before a sampled density is
/// considered resolved.
pub const MIN_POINTS_PER_FWHM: f64 = 16.0;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("grid too coarse: {points:.1} points across FWHM, need at least {required}")]
    Resolution { points: f64, required: f64 },
    #[error("curve has no interior peak")]
    NoPeak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMatching {
    /// f(Ω) = sinc(D·L·Ω/2)
    #[serde(rename = "type_ii")]
    TypeII,
    /// f(Ω) = sinc(D″·L·Ω²/2)
    TypeIDegenerate,
}

/// Crystal and phase-matching parameters that define f(Ω).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralModel {
    pub kind: PhaseMatching,
    pub crystal_length_mm: f64,
    /// Inverse group velocity difference inside the crystal (type-II).
    pub crystal_d_fs_per_mm: f64,
    /// Second derivative of the crystal dispersion function (type-I degenerate).
    pub crystal_dpp_fs2_per_mm: f64,
    /// Central angular frequencies (rad/s).
    pub omega_s0: f64,
    pub omega_i0: f64,
}

/// Length of the LBO crystal in the reference experiment.
pub const LBO_LENGTH_MM: f64 = 8.0;
/// Crystal D giving an 800 fs natural width over 8 mm.
pub const LBO_TYPE_II_D_FS_PER_MM: f64 = 100.0;
/// Crystal D″ giving a 30 fs natural FWHM over 8 mm with the default
/// numerical transform (back-solved with [`SpectralModel::solve_type_i_dpp`]).
pub const LBO_TYPE_I_DPP_FS2_PER_MM: f64 = 44.969_015;
pub const SIGNAL_WAVELENGTH_NM: f64 = 901.0;
pub const IDLER_WAVELENGTH_NM: f64 = 931.0;

/// Angular frequency (rad/s) of light with vacuum wavelength `nm`.
pub fn angular_frequency(wavelength_nm: f64) -> f64 {
    2.0 * PI * SPEED_OF_LIGHT / (wavelength_nm * 1e-9)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

impl SpectralModel {
    pub fn type_ii(crystal_length_mm: f64, crystal_d_fs_per_mm: f64) -> Result<Self, ModelError> {
        let m = SpectralModel {
            kind: PhaseMatching::TypeII,
            crystal_length_mm,
            crystal_d_fs_per_mm,
            crystal_dpp_fs2_per_mm: 0.0,
            omega_s0: angular_frequency(SIGNAL_WAVELENGTH_NM),
            omega_i0: angular_frequency(IDLER_WAVELENGTH_NM),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn type_i_degenerate(crystal_length_mm: f64, crystal_dpp_fs2_per_mm: f64) -> Result<Self, ModelError> {
        let omega = angular_frequency(2.0 * SIGNAL_WAVELENGTH_NM * IDLER_WAVELENGTH_NM
            / (SIGNAL_WAVELENGTH_NM + IDLER_WAVELENGTH_NM));
        let m = SpectralModel {
            kind: PhaseMatching::TypeIDegenerate,
            crystal_length_mm,
            crystal_d_fs_per_mm: 0.0,
            crystal_dpp_fs2_per_mm,
            omega_s0: omega,
            omega_i0: omega,
        };
        m.validate()?;
        Ok(m)
    }

    /// 8 mm type-II LBO, 901/931 nm.
    pub fn lbo_type_ii() -> Self {
        Self::type_ii(LBO_LENGTH_MM, LBO_TYPE_II_D_FS_PER_MM).expect("constants are valid")
    }

    /// 8 mm type-I degenerate LBO with the back-solved D″.
    pub fn lbo_type_i() -> Self {
        Self::type_i_degenerate(LBO_LENGTH_MM, LBO_TYPE_I_DPP_FS2_PER_MM).expect("constants are valid")
    }

    pub fn with_wavelengths(mut self, signal_nm: f64, idler_nm: f64) -> Self {
        self.omega_s0 = angular_frequency(signal_nm);
        self.omega_i0 = angular_frequency(idler_nm);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.crystal_length_mm > 0.0 && self.crystal_length_mm.is_finite()) {
            return Err(ModelError::Invalid("crystal length must be positive".into()));
        }
        let active = match self.kind {
            PhaseMatching::TypeII => self.crystal_d_fs_per_mm,
            PhaseMatching::TypeIDegenerate => self.crystal_dpp_fs2_per_mm,
        };
        if active == 0.0 || !active.is_finite() {
            return Err(ModelError::Invalid("active crystal dispersion parameter must be nonzero".into()));
        }
        Ok(())
    }

    /// D·L in seconds (type-II) or D″·L in s² (type-I).
    fn dispersion_length(&self) -> f64 {
        match self.kind {
            PhaseMatching::TypeII => self.crystal_d_fs_per_mm * self.crystal_length_mm * 1e-15,
            PhaseMatching::TypeIDegenerate => self.crystal_dpp_fs2_per_mm * self.crystal_length_mm * 1e-30,
        }
    }

    /// Spectral amplitude f(Ω) at detuning Ω (rad/s). f(0) = 1.
    pub fn amplitude(&self, omega: f64) -> f64 {
        let dl = self.dispersion_length();
        match self.kind {
            PhaseMatching::TypeII => sinc(dl * omega / 2.0),
            PhaseMatching::TypeIDegenerate => sinc(dl * omega * omega / 2.0),
        }
    }

    /// Detuning Ω (rad/s, positive) of the n-th zero of f.
    pub fn nth_zero(&self, n: f64) -> f64 {
        let dl = self.dispersion_length().abs();
        match self.kind {
            PhaseMatching::TypeII => 2.0 * n * PI / dl,
            PhaseMatching::TypeIDegenerate => (2.0 * n * PI / dl).sqrt(),
        }
    }

    /// Detuning Ω (rad/s, positive) where |f(Ω)|² = 1/2.
    pub fn spectral_half_width(&self) -> f64 {
        let dl = self.dispersion_length().abs();
        match self.kind {
            PhaseMatching::TypeII => 2.0 * SINC2_HALF_MAX_X / dl,
            PhaseMatching::TypeIDegenerate => (2.0 * SINC2_HALF_MAX_X / dl).sqrt(),
        }
    }

    /// Rough natural FWHM (ps), used only to size default grids.
    pub fn natural_width_estimate_ps(&self) -> f64 {
        match self.kind {
            PhaseMatching::TypeII => self.dispersion_length().abs() * 1e12,
            // FWHM ≈ 2.23·sqrt(D″L/2) for the sinc(aΩ²) transform
            PhaseMatching::TypeIDegenerate => 2.23 * (self.dispersion_length().abs() / 2.0).sqrt() * 1e12,
        }
    }

    /// Bisection for the type-I D″ whose numerically transformed G² has the
    /// requested FWHM.
    pub fn solve_type_i_dpp(crystal_length_mm: f64, target_fwhm_fs: f64) -> Result<f64, ModelError> {
        let width_for = |dpp: f64| -> Result<f64, ModelError> {
            let m = SpectralModel::type_i_degenerate(crystal_length_mm, dpp)?;
            fwhm(&natural_g2(&m, &Grid::default())?)
        };
        let target_ps = target_fwhm_fs * 1e-3;
        let (mut lo, mut hi) = (1e-3, 1.0);
        while width_for(hi)? < target_ps {
            hi *= 4.0;
            if hi > 1e12 {
                return Err(ModelError::Invalid("target width out of range".into()));
            }
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if width_for(mid)? < target_ps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Far-field broadening: τ = B·Ω mapping plus Gaussian detector jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BroadeningModel {
    /// k″_s·r_signal + k″_i·r_idler (s²).
    pub b_s2: f64,
    /// Combined two-detector jitter FWHM (ps).
    pub jitter_fwhm_ps: f64,
}

impl BroadeningModel {
    pub fn new(b_s2: f64, jitter_fwhm_ps: f64) -> Result<Self, ModelError> {
        if !(b_s2 >= 0.0 && b_s2.is_finite()) {
            return Err(ModelError::Invalid("B must be nonnegative".into()));
        }
        if !(jitter_fwhm_ps >= 0.0 && jitter_fwhm_ps.is_finite()) {
            return Err(ModelError::Invalid("jitter FWHM must be nonnegative".into()));
        }
        Ok(Self { b_s2, jitter_fwhm_ps })
    }

    /// Composes B from per-wavelength GVD (s²/cm) and the length each photon travels (km).
    pub fn from_fibers(
        k2_signal_s2_per_cm: f64,
        signal_path_km: f64,
        k2_idler_s2_per_cm: f64,
        idler_path_km: f64,
        jitter_fwhm_ps: f64,
    ) -> Result<Self, ModelError> {
        const CM_PER_KM: f64 = 1e5;
        let b = (k2_signal_s2_per_cm * signal_path_km + k2_idler_s2_per_cm * idler_path_km) * CM_PER_KM;
        Self::new(b, jitter_fwhm_ps)
    }
}

/// Grid request for a sampled density. `None` picks a default from the
/// expected width: step width/400 for natural shapes and width/64 in the far
/// field, span 8 widths.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Grid {
    pub step_ps: Option<f64>,
    pub span_ps: Option<f64>,
}

impl Grid {
    pub fn new(step_ps: f64, span_ps: f64) -> Self {
        Self { step_ps: Some(step_ps), span_ps: Some(span_ps) }
    }
}

/// Numerical Fourier transform settings: Ω grid covers ±`zeros` zeros of f.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierSettings {
    pub zeros: f64,
}

impl Default for FourierSettings {
    fn default() -> Self {
        Self { zeros: 6.0 }
    }
}

/// A curve sampled on a uniform grid: value i sits at `origin_ps + i·step_ps`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledDensity {
    pub origin_ps: f64,
    pub step_ps: f64,
    pub values: Vec<f64>,
}

impl SampledDensity {
    /// Symmetric grid of `2n+1` points centered on zero.
    fn centered(step_ps: f64, span_ps: f64) -> Self {
        let half = (span_ps / (2.0 * step_ps)).ceil() as usize;
        SampledDensity {
            origin_ps: -(half as f64) * step_ps,
            step_ps,
            values: vec![0.0; 2 * half + 1],
        }
    }

    pub fn tau(&self, i: usize) -> f64 {
        self.origin_ps + i as f64 * self.step_ps
    }

    pub fn taus(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |i| self.tau(i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.values, self.step_ps)
    }

    pub fn normalize(&mut self) {
        let area = self.integral();
        if area > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= area);
        }
    }

    /// Linear interpolation; zero outside the grid.
    pub fn value_at(&self, tau_ps: f64) -> f64 {
        let x = (tau_ps - self.origin_ps) / self.step_ps;
        if x < 0.0 || x > (self.values.len() - 1) as f64 {
            return 0.0;
        }
        let i = x.floor() as usize;
        if i + 1 >= self.values.len() {
            return self.values[self.values.len() - 1];
        }
        let frac = x - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    /// First moment (ps).
    pub fn mean(&self) -> f64 {
        let w: Vec<f64> = self.taus().zip(&self.values).map(|(t, v)| t * v).collect();
        trapezoid(&w, self.step_ps) / self.integral()
    }

    /// Convolves in place with a unit-area Gaussian of the given FWHM.
    pub fn convolve_gaussian(&mut self, fwhm_ps: f64) {
        if fwhm_ps <= 0.0 {
            return;
        }
        let sigma = fwhm_ps / GAUSSIAN_FWHM_PER_SIGMA;
        let reach = (6.0 * sigma / self.step_ps).ceil() as usize;
        let mut kernel: Vec<f64> = (0..=2 * reach)
            .map(|k| {
                let x = (k as f64 - reach as f64) * self.step_ps / sigma;
                (-0.5 * x * x).exp()
            })
            .collect();
        let ksum: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= ksum);

        let n = self.values.len();
        let src = &self.values;
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(reach);
                let hi = (i + reach).min(n - 1);
                (lo..=hi).map(|j| src[j] * kernel[j + reach - i]).sum()
            })
            .collect();
        self.values = out;
    }

    /// Re-bins onto another uniform grid, conserving probability mass per cell.
    pub fn resample_mass(&self, origin_ps: f64, step_ps: f64, len: usize) -> SampledDensity {
        let cdf = self.cdf();
        let mass_below = |tau: f64| -> f64 {
            let x = (tau - self.origin_ps) / self.step_ps;
            if x <= 0.0 {
                return 0.0;
            }
            let last = (self.values.len() - 1) as f64;
            if x >= last {
                return cdf[cdf.len() - 1];
            }
            // integrate the linear interpolant exactly inside the cell
            let i = x.floor() as usize;
            let f = x - i as f64;
            let (a, b) = (self.values[i], self.values[i + 1]);
            cdf[i] + self.step_ps * (a * f + 0.5 * (b - a) * f * f)
        };
        let values = (0..len)
            .map(|k| {
                let c = origin_ps + k as f64 * step_ps;
                (mass_below(c + 0.5 * step_ps) - mass_below(c - 0.5 * step_ps)) / step_ps
            })
            .collect();
        SampledDensity { origin_ps, step_ps, values }
    }

    /// Cumulative trapezoidal integral, `cdf[i]` = mass in [τ₀, τᵢ].
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.values.len());
        out.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * (w[0] + w[1]) * self.step_ps;
            out.push(acc);
        }
        out
    }
}

pub(crate) fn trapezoid(values: &[f64], step: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => step * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1])),
    }
}

/// Full width at half maximum, linearly interpolated between grid points.
///
/// A sampled plateau reports its plateau width when the edge samples carry
/// the cell-averaged height (as the rectangle constructors here do).
pub fn fwhm(curve: &SampledDensity) -> Result<f64, ModelError> {
    let v = &curve.values;
    let (imax, &vmax) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(ModelError::NoPeak)?;
    if !(vmax > 0.0) {
        return Err(ModelError::NoPeak);
    }
    let half = vmax / 2.0;
    let left = (0..imax).rev().find(|&i| v[i] < half).ok_or(ModelError::NoPeak)?;
    let right = (imax + 1..v.len()).find(|&i| v[i] < half).ok_or(ModelError::NoPeak)?;
    let cross = |a: usize, b: usize| -> f64 {
        let (ya, yb) = (v[a], v[b]);
        let t = (half - ya) / (yb - ya);
        curve.tau(a) + t * (curve.tau(b) - curve.tau(a))
    };
    Ok(cross(right - 1, right) - cross(left + 1, left))
}

fn check_resolution(expected_fwhm_ps: f64, step_ps: f64) -> Result<(), ModelError> {
    let points = expected_fwhm_ps / step_ps;
    if points < MIN_POINTS_PER_FWHM {
        return Err(ModelError::Resolution { points, required: MIN_POINTS_PER_FWHM });
    }
    Ok(())
}

/// Natural (no fiber) G²(τ) of the crystal. Type-II is the analytic
/// rectangle of full width D·L; type-I goes through the numerical transform.
pub fn natural_g2(model: &SpectralModel, grid: &Grid) -> Result<SampledDensity, ModelError> {
    model.validate()?;
    let width = model.natural_width_estimate_ps();
    let step = grid.step_ps.unwrap_or(width / 400.0);
    let span = grid.span_ps.unwrap_or(8.0 * width);
    check_resolution(width, step)?;
    match model.kind {
        PhaseMatching::TypeII => {
            let mut d = SampledDensity::centered(step, span);
            let half = width / 2.0;
            for i in 0..d.len() {
                let c = d.tau(i);
                let overlap = ((c + step / 2.0).min(half) - (c - step / 2.0).max(-half)).max(0.0);
                d.values[i] = overlap / step;
            }
            d.normalize();
            Ok(d)
        }
        PhaseMatching::TypeIDegenerate => numerical_g2(model, &Grid::new(step, span), FourierSettings::default()),
    }
}

/// |F{f}|²(τ) by direct quadrature of f(Ω)·cos(Ωτ) over ±`zeros` zeros of f.
pub fn numerical_g2(
    model: &SpectralModel,
    grid: &Grid,
    ft: FourierSettings,
) -> Result<SampledDensity, ModelError> {
    model.validate()?;
    let width = model.natural_width_estimate_ps();
    let step = grid.step_ps.unwrap_or(1e-3);
    let span = grid.span_ps.unwrap_or(8.0 * width);
    check_resolution(width, step)?;
    if !(ft.zeros > 0.0) {
        return Err(ModelError::Invalid("Fourier span must cover at least one zero".into()));
    }

    // Work in fs and rad/fs.
    let omega_max = model.nth_zero(ft.zeros) * 1e-15;
    let span_fs = span * 1e3;
    let dl = model.dispersion_length().abs()
        * match model.kind {
            PhaseMatching::TypeII => 1e15,
            PhaseMatching::TypeIDegenerate => 1e30,
        };
    // Ω step: alias period ≥ 4× span, and ≥ 8 samples per local oscillation of f.
    let local_rate = match model.kind {
        PhaseMatching::TypeII => dl / 2.0,
        PhaseMatching::TypeIDegenerate => dl * omega_max,
    };
    let d_omega = (2.0 * PI / (4.0 * span_fs)).min(PI / (8.0 * local_rate));
    let n_omega = (omega_max / d_omega).ceil() as usize;
    let d_omega = omega_max / n_omega as f64;
    let weighted: Vec<(f64, f64)> = (0..=n_omega)
        .map(|k| {
            let w = k as f64 * d_omega;
            let trap = if k == 0 || k == n_omega { 0.5 } else { 1.0 };
            (w, trap * d_omega * model.amplitude(w * 1e15))
        })
        .collect();

    let mut d = SampledDensity::centered(step, span);
    for i in 0..d.len() {
        let tau_fs = d.tau(i) * 1e3;
        // f is even, so the transform is a cosine transform
        let amp: f64 = weighted.iter().map(|&(w, fw)| fw * (w * tau_fs).cos()).sum::<f64>() * 2.0;
        d.values[i] = amp * amp;
    }
    d.normalize();
    Ok(d)
}

/// Far-field G²(τ): |f(τ/B)|², then convolved with the combined jitter.
/// With B = 0 this is the natural shape convolved with the jitter.
pub fn farfield_g2(
    model: &SpectralModel,
    broadening: &BroadeningModel,
    grid: &Grid,
) -> Result<SampledDensity, ModelError> {
    model.validate()?;
    let jitter = broadening.jitter_fwhm_ps;
    if broadening.b_s2 == 0.0 {
        let natural = natural_g2(model, &Grid::default())?;
        if jitter == 0.0 {
            return Ok(natural);
        }
        let natural_width = model.natural_width_estimate_ps();
        let combined = natural_width.hypot(jitter);
        let step = grid.step_ps.unwrap_or(combined / 64.0);
        let span = grid.span_ps.unwrap_or(8.0 * combined);
        check_resolution(combined, step)?;
        let half = (span / (2.0 * step)).ceil() as usize;
        let mut d = natural.resample_mass(-(half as f64) * step, step, 2 * half + 1);
        d.convolve_gaussian(jitter);
        d.normalize();
        return Ok(d);
    }

    let width = farfield_width_ps(model, broadening.b_s2);
    let combined = width.hypot(jitter);
    let step = grid.step_ps.unwrap_or(width.min(combined) / 64.0);
    let span = grid.span_ps.unwrap_or(8.0 * combined);
    check_resolution(width.min(combined), step)?;
    let mut d = SampledDensity::centered(step, span);
    for i in 0..d.len() {
        let omega = d.tau(i) * 1e-12 / broadening.b_s2;
        let f = model.amplitude(omega);
        d.values[i] = f * f;
    }
    d.convolve_gaussian(jitter);
    d.normalize();
    Ok(d)
}

/// FWHM (ps) of the jitter-free far-field shape: 2·B·Ω½.
pub fn farfield_width_ps(model: &SpectralModel, b_s2: f64) -> f64 {
    2.0 * b_s2 * model.spectral_half_width() * 1e12
}

/// Combined Gaussian jitter FWHM that broadens the far-field shape to
/// `target_fwhm_ps` (bisection on the numerically convolved width).
pub fn solve_jitter_for_width(
    model: &SpectralModel,
    b_s2: f64,
    target_fwhm_ps: f64,
) -> Result<f64, ModelError> {
    let base = farfield_width_ps(model, b_s2);
    if target_fwhm_ps <= base {
        return Err(ModelError::Invalid("target width is below the jitter-free width".into()));
    }
    let width_for = |j: f64| -> Result<f64, ModelError> {
        fwhm(&farfield_g2(model, &BroadeningModel::new(b_s2, j)?, &Grid::default())?)
    };
    let (mut lo, mut hi) = (0.0, 2.0 * target_fwhm_ps);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if width_for(mid)? < target_fwhm_ps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
