//! One-way synchronization algebra.
//!
//! With clock 1 offset by t₀, the two plate settings give
//!
//! ```text
//! 0°:  t₁ − t₂   = r₁/u_s + t₀ − r₂/u_i
//! 45°: t′₁ − t′₂ = r₁/u_i + t₀ − r₂/u_s
//! Δt₋ = (t₁ − t₂) − (t′₁ − t′₂) = D·(r₁ + r₂),   D = 1/u_s − 1/u_i
//! ```
//!
//! Uncertainties are 1σ and propagate to first order.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::SwapState;
use crate::stats::{fit_line, Estimate};

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("total fiber length r1 + r2 must be positive")]
    ZeroLength,
    #[error("fiber dispersion D is zero or indistinguishable from zero")]
    DegenerateDispersion,
    #[error("need at least two distinct r2 values")]
    RankDeficient,
}

/// One swap-state measurement of the t₁ − t₂ peak center.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementResult {
    pub swap_state: SwapState,
    pub delta_t: Estimate,
    pub r2_km: f64,
    pub scenario_hash: Option<String>,
}

impl MeasurementResult {
    pub fn new(swap_state: SwapState, delta_t: Estimate, r2_km: f64) -> Self {
        MeasurementResult { swap_state, delta_t, r2_km, scenario_hash: None }
    }
}

/// Δt₋ from a 0° and a 45° measurement at the same r₂.
pub fn delta_minus(m0: &MeasurementResult, m45: &MeasurementResult) -> Result<Estimate, ProtocolError> {
    if m0.swap_state != SwapState::Plate0 || m45.swap_state != SwapState::Plate45 {
        return Err(ProtocolError::Usage("delta_minus needs a plate0 and a plate45 measurement".into()));
    }
    if m0.r2_km != m45.r2_km {
        return Err(ProtocolError::Usage("both measurements must use the same r2".into()));
    }
    Ok(Estimate::new(
        m0.delta_t.value - m45.delta_t.value,
        m0.delta_t.sigma.hypot(m45.delta_t.sigma),
    ))
}

/// D = Δt₋ / (r₁ + r₂) in ps/km.
pub fn solve_d(delta_minus: Estimate, r1_km: f64, r2_km: f64) -> Result<Estimate, ProtocolError> {
    let total = r1_km + r2_km;
    if !(total > 0.0) {
        return Err(ProtocolError::ZeroLength);
    }
    Ok(Estimate::new(delta_minus.value / total, delta_minus.sigma / total))
}

/// r₁ solved from Δt₋ with known D and r₂.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeSolution {
    pub r1_km: Estimate,
    /// Set when the solved distance is negative.
    pub unphysical: bool,
}

/// r₁ = Δt₋ / D − r₂.
pub fn solve_r1(delta_minus: Estimate, d: Estimate, r2_km: f64) -> Result<RangeSolution, ProtocolError> {
    if d.value == 0.0 || !d.value.is_finite() {
        return Err(ProtocolError::DegenerateDispersion);
    }
    let r1 = delta_minus.value / d.value - r2_km;
    let sigma = (delta_minus.sigma / d.value).hypot(delta_minus.value * d.sigma / (d.value * d.value)).abs();
    Ok(RangeSolution { r1_km: Estimate::new(r1, sigma), unphysical: r1 < 0.0 })
}

/// Inverse group velocities and lengths needed to solve for t₀.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathModel {
    pub inv_u_s_ps_per_km: f64,
    pub inv_u_i_ps_per_km: f64,
    pub r1_km: Estimate,
    pub r2_km: f64,
}

/// t₀ from a single measurement:
/// 0°: t₀ = Δt − r₁/u_s + r₂/u_i; 45°: t₀ = Δt − r₁/u_i + r₂/u_s.
pub fn solve_t0(m: &MeasurementResult, paths: &PathModel) -> Result<Estimate, ProtocolError> {
    if m.r2_km != paths.r2_km {
        return Err(ProtocolError::Usage("measurement r2 differs from the path model".into()));
    }
    let (inv_1, inv_2) = match m.swap_state {
        SwapState::Plate0 => (paths.inv_u_s_ps_per_km, paths.inv_u_i_ps_per_km),
        SwapState::Plate45 => (paths.inv_u_i_ps_per_km, paths.inv_u_s_ps_per_km),
    };
    let t0 = m.delta_t.value - paths.r1_km.value * inv_1 + paths.r2_km * inv_2;
    let sigma = m.delta_t.sigma.hypot(paths.r1_km.sigma * inv_1);
    Ok(Estimate::new(t0, sigma))
}

/// t₀ = [(t₁ − t₂) + (t′₁ − t′₂)] / 2, valid only for r₁ = r₂; needs no
/// group velocities.
pub fn solve_t0_symmetric(
    m0: &MeasurementResult,
    m45: &MeasurementResult,
    r1_km: f64,
    r2_km: f64,
) -> Result<Estimate, ProtocolError> {
    if (r1_km - r2_km).abs() > 1e-12 * r1_km.abs().max(r2_km.abs()) {
        return Err(ProtocolError::Usage("symmetric t0 requires r1 = r2".into()));
    }
    if m0.swap_state != SwapState::Plate0 || m45.swap_state != SwapState::Plate45 {
        return Err(ProtocolError::Usage("symmetric t0 needs a plate0 and a plate45 measurement".into()));
    }
    Ok(Estimate::new(
        0.5 * (m0.delta_t.value + m45.delta_t.value),
        0.5 * m0.delta_t.sigma.hypot(m45.delta_t.sigma),
    ))
}

/// (r₂, Δt₋) point for the joint solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiPoint {
    pub r2_km: f64,
    pub delta_minus: Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiSolution {
    pub d: Estimate,
    pub r1_km: Estimate,
    pub chi2: f64,
}

/// Weighted line fit of Δt₋ = D·r₁ + D·r₂ over r₂: slope D, intercept D·r₁.
pub fn solve_multi_r2(points: &[MultiPoint]) -> Result<MultiSolution, ProtocolError> {
    let data: Vec<(f64, f64, f64)> = points.iter().map(|p| (p.r2_km, p.delta_minus.value, p.delta_minus.sigma)).collect();
    if data.iter().any(|p| p.2 < 0.0 || !p.2.is_finite()) {
        return Err(ProtocolError::Usage("uncertainties must be finite and nonnegative".into()));
    }
    let mixed = data.iter().any(|p| p.2 == 0.0) && data.iter().any(|p| p.2 > 0.0);
    if mixed {
        return Err(ProtocolError::Usage("either all or none of the points may be exact".into()));
    }
    let fit = fit_line(&data).ok_or(ProtocolError::RankDeficient)?;
    let (a, b) = (fit.intercept, fit.slope);
    let y_scale = data.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let (xmin, xmax) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    if b == 0.0 || b.abs() * (xmax - xmin) <= 1e-12 * y_scale {
        return Err(ProtocolError::DegenerateDispersion);
    }
    let r1 = a / b;
    let var_r1 = fit.var_intercept / (b * b) + a * a * fit.var_slope / b.powi(4) - 2.0 * a * fit.cov / b.powi(3);
    Ok(MultiSolution {
        d: Estimate::new(b, fit.var_slope.sqrt()),
        r1_km: Estimate::new(r1, var_r1.max(0.0).sqrt()),
        chi2: fit.chi2,
    })
}

/// Solved synchronization parameters; fields that were inputs are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyncSolution {
    pub delta_minus: Option<Estimate>,
    pub d_fiber: Option<Estimate>,
    pub r1_km: Option<Estimate>,
    pub t0: Option<Estimate>,
    pub t0_symmetric: Option<Estimate>,
    pub unphysical_range: bool,
}

/// One CSV row of a solution; empty cells for absent values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRow {
    pub label: String,
    pub delta_minus_ps: Option<f64>,
    pub delta_minus_sigma_ps: Option<f64>,
    pub d_ps_per_km: Option<f64>,
    pub d_sigma_ps_per_km: Option<f64>,
    pub r1_km: Option<f64>,
    pub r1_sigma_km: Option<f64>,
    pub t0_ps: Option<f64>,
    pub t0_sigma_ps: Option<f64>,
    pub t0_symmetric_ps: Option<f64>,
    pub t0_symmetric_sigma_ps: Option<f64>,
}

impl SyncSolution {
    /// `key: value` lines.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, e: Option<Estimate>, unit: &str| {
            if let Some(e) = e {
                let _ = writeln!(out, "{k}: {:.6} ± {:.6} {unit}", e.value, e.sigma);
            }
        };
        line("delta_minus", self.delta_minus, "ps");
        line("D", self.d_fiber, "ps/km");
        line("r1", self.r1_km, "km");
        line("t0", self.t0, "ps");
        line("t0_symmetric", self.t0_symmetric, "ps");
        if self.unphysical_range {
            out.push_str("warning: solved r1 is negative\n");
        }
        out
    }

    pub fn to_row(&self, label: &str) -> SolutionRow {
        let v = |e: Option<Estimate>| e.map(|e| e.value);
        let s = |e: Option<Estimate>| e.map(|e| e.sigma);
        SolutionRow {
            label: label.to_string(),
            delta_minus_ps: v(self.delta_minus),
            delta_minus_sigma_ps: s(self.delta_minus),
            d_ps_per_km: v(self.d_fiber),
            d_sigma_ps_per_km: s(self.d_fiber),
            r1_km: v(self.r1_km),
            r1_sigma_km: s(self.r1_km),
            t0_ps: v(self.t0),
            t0_sigma_ps: s(self.t0),
            t0_symmetric_ps: v(self.t0_symmetric),
            t0_symmetric_sigma_ps: s(self.t0_symmetric),
        }
    }
}

pub fn write_solution_csv<W: Write>(writer: W, rows: &[SolutionRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_solution_csv<R: std::io::Read>(reader: R) -> Result<Vec<SolutionRow>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}
