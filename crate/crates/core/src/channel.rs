//! Optical paths between the source and the two detectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("invalid fiber: {0}")]
    Fiber(String),
    #[error("invalid detector: {0}")]
    Detector(String),
}

/// Which photon of the pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Photon {
    Signal,
    Idler,
}

impl Photon {
    pub fn partner(self) -> Photon {
        match self {
            Photon::Signal => Photon::Idler,
            Photon::Idler => Photon::Signal,
        }
    }
}

/// Half-wave plate setting in front of the polarizing splitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapState {
    /// 0°: signal → D1, idler → D2.
    Plate0,
    /// 45°: idler → D1, signal → D2.
    Plate45,
}

impl SwapState {
    pub fn swapped(self) -> SwapState {
        match self {
            SwapState::Plate0 => SwapState::Plate45,
            SwapState::Plate45 => SwapState::Plate0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            SwapState::Plate0 => 0,
            SwapState::Plate45 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<SwapState> {
        match code {
            0 => Some(SwapState::Plate0),
            1 => Some(SwapState::Plate45),
            _ => None,
        }
    }
}

impl std::fmt::Display for SwapState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SwapState::Plate0 => "plate0",
            SwapState::Plate45 => "plate45",
        })
    }
}

/// Photon routing for one plate setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Routing {
    pub d1: Photon,
    pub d2: Photon,
}

pub fn route(state: SwapState) -> Routing {
    match state {
        SwapState::Plate0 => Routing { d1: Photon::Signal, d2: Photon::Idler },
        SwapState::Plate45 => Routing { d1: Photon::Idler, d2: Photon::Signal },
    }
}

/// An intermodal copy of the main mode: extra delay and relative amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideMode {
    pub delay_ps: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiberChannel {
    pub length_km: f64,
    pub inv_u_s_ps_per_km: f64,
    pub inv_u_i_ps_per_km: f64,
    pub k2_s_s2_per_cm: f64,
    pub k2_i_s2_per_cm: f64,
    pub side_modes: Vec<SideMode>,
}

/// Fiber inverse group velocity difference measured in the reference run.
pub const REFERENCE_FIBER_D_PS_PER_KM: f64 = 1799.9;
/// Absolute inverse group velocity scale (silica group index ≈ 1.47).
pub const DEFAULT_INV_U_PS_PER_KM: f64 = 4.9e6;
pub const REFERENCE_FIBER_LENGTH_KM: f64 = 1.5;
pub const REFERENCE_K2_SIGNAL_S2_PER_CM: f64 = 2.76e-28;
pub const REFERENCE_K2_IDLER_S2_PER_CM: f64 = 2.96e-28;

impl FiberChannel {
    /// 1.5 km single-mode fiber matching the reference run, no side modes.
    pub fn reference() -> Self {
        FiberChannel {
            length_km: REFERENCE_FIBER_LENGTH_KM,
            inv_u_s_ps_per_km: DEFAULT_INV_U_PS_PER_KM + REFERENCE_FIBER_D_PS_PER_KM,
            inv_u_i_ps_per_km: DEFAULT_INV_U_PS_PER_KM,
            k2_s_s2_per_cm: REFERENCE_K2_SIGNAL_S2_PER_CM,
            k2_i_s2_per_cm: REFERENCE_K2_IDLER_S2_PER_CM,
            side_modes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: &str| Err(ChannelError::Fiber(m.to_string()));
        if !(self.length_km >= 0.0 && self.length_km.is_finite()) {
            return bad("length must be nonnegative");
        }
        if !(self.inv_u_s_ps_per_km > 0.0 && self.inv_u_i_ps_per_km > 0.0)
            || !self.inv_u_s_ps_per_km.is_finite()
            || !self.inv_u_i_ps_per_km.is_finite()
        {
            return bad("inverse group velocities must be positive and finite");
        }
        if !(self.k2_s_s2_per_cm.is_finite() && self.k2_i_s2_per_cm.is_finite())
            || self.k2_s_s2_per_cm < 0.0
            || self.k2_i_s2_per_cm < 0.0
        {
            return bad("k2 values must be nonnegative and finite");
        }
        let mut last = 0.0;
        for m in &self.side_modes {
            if !(m.amplitude > 0.0 && m.amplitude <= 1.0) {
                return bad("side-mode amplitude must be in (0, 1]");
            }
            if !(m.delay_ps > last && m.delay_ps.is_finite()) {
                return bad("side-mode delays must be positive and strictly increasing");
            }
            last = m.delay_ps;
        }
        Ok(())
    }

    pub fn inv_u(&self, photon: Photon) -> f64 {
        match photon {
            Photon::Signal => self.inv_u_s_ps_per_km,
            Photon::Idler => self.inv_u_i_ps_per_km,
        }
    }

    pub fn k2(&self, photon: Photon) -> f64 {
        match photon {
            Photon::Signal => self.k2_s_s2_per_cm,
            Photon::Idler => self.k2_i_s2_per_cm,
        }
    }

    /// Group delay r/u for the given photon (ps).
    pub fn propagation_delay(&self, photon: Photon) -> f64 {
        self.length_km * self.inv_u(photon)
    }

    /// D = 1/u_s − 1/u_i (ps/km).
    pub fn fiber_d(&self) -> f64 {
        self.inv_u_s_ps_per_km - self.inv_u_i_ps_per_km
    }

    /// Probability of the main mode followed by each side mode, in order.
    pub fn mode_probabilities(&self) -> Vec<f64> {
        let total = 1.0 + self.side_modes.iter().map(|m| m.amplitude).sum::<f64>();
        std::iter::once(1.0)
            .chain(self.side_modes.iter().map(|m| m.amplitude))
            .map(|a| a / total)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub jitter_fwhm_ps: f64,
    pub efficiency: f64,
    pub dark_rate_per_s: f64,
    pub dead_time_ps: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        DetectorModel { jitter_fwhm_ps: 0.0, efficiency: 1.0, dark_rate_per_s: 0.0, dead_time_ps: 0.0 }
    }
}

impl DetectorModel {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |m: &str| Err(ChannelError::Detector(m.to_string()));
        if !(0.0..=1.0).contains(&self.efficiency) {
            return bad("efficiency must be in [0, 1]");
        }
        for (name, v) in [
            ("jitter", self.jitter_fwhm_ps),
            ("dark rate", self.dark_rate_per_s),
            ("dead time", self.dead_time_ps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be nonnegative"));
            }
        }
        Ok(())
    }
}
