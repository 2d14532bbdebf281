//! Scenario configuration files (TOML). Units are spelled out in key names;
//! unknown keys are rejected and omitted keys take the reference-scenario
//! value.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{DetectorModel, FiberChannel, SideMode, SwapState};
use crate::simulator::{PairDelay, Scenario};
use crate::spdc::{PhaseMatching, SpectralModel};
use crate::timetag::ClockModel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("{}{message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Validation { line: Option<usize>, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    pub kind: PhaseMatching,
    pub crystal_length_mm: f64,
    pub crystal_d_fs_per_mm: f64,
    pub crystal_dpp_fs2_per_mm: f64,
    pub signal_wavelength_nm: f64,
    pub idler_wavelength_nm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiberConfig {
    pub length_km: f64,
    pub inv_u_s_ps_per_km: f64,
    pub inv_u_i_ps_per_km: f64,
    pub k2_s_s2_per_cm: f64,
    pub k2_i_s2_per_cm: f64,
    pub side_modes: Vec<SideMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub jitter_fwhm_ps: f64,
    pub efficiency: f64,
    pub dark_rate_per_s: f64,
    pub dead_time_ps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClockConfig {
    pub offset_ps: f64,
    pub drift_ps_per_s: f64,
    pub resolution_ps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub rng_seed: u64,
    pub swap_state: SwapState,
    pub pair_rate_per_s: f64,
    pub duration_s: f64,
    pub pair_delay: PairDelay,
    pub max_events: f64,
    pub spectral: SpectralConfig,
    pub fiber1: FiberConfig,
    pub fiber2: FiberConfig,
    pub detector1: DetectorConfig,
    pub detector2: DetectorConfig,
    pub clock1: ClockConfig,
    pub clock2: ClockConfig,
}

impl From<&SpectralModel> for SpectralConfig {
    fn from(m: &SpectralModel) -> Self {
        use crate::spdc::SPEED_OF_LIGHT;
        let nm = |w: f64| 2.0 * std::f64::consts::PI * SPEED_OF_LIGHT / w * 1e9;
        SpectralConfig {
            kind: m.kind,
            crystal_length_mm: m.crystal_length_mm,
            crystal_d_fs_per_mm: m.crystal_d_fs_per_mm,
            crystal_dpp_fs2_per_mm: m.crystal_dpp_fs2_per_mm,
            signal_wavelength_nm: (nm(m.omega_s0) * 1e6).round() / 1e6,
            idler_wavelength_nm: (nm(m.omega_i0) * 1e6).round() / 1e6,
        }
    }
}

impl Default for SpectralConfig {
    fn default() -> Self {
        let mut c = SpectralConfig::from(&SpectralModel::lbo_type_ii());
        c.crystal_dpp_fs2_per_mm = crate::spdc::LBO_TYPE_I_DPP_FS2_PER_MM;
        c
    }
}

impl From<&FiberChannel> for FiberConfig {
    fn from(f: &FiberChannel) -> Self {
        FiberConfig {
            length_km: f.length_km,
            inv_u_s_ps_per_km: f.inv_u_s_ps_per_km,
            inv_u_i_ps_per_km: f.inv_u_i_ps_per_km,
            k2_s_s2_per_cm: f.k2_s_s2_per_cm,
            k2_i_s2_per_cm: f.k2_i_s2_per_cm,
            side_modes: f.side_modes.clone(),
        }
    }
}

impl Default for FiberConfig {
    fn default() -> Self {
        FiberConfig::from(&FiberChannel::reference())
    }
}

impl From<&DetectorModel> for DetectorConfig {
    fn from(d: &DetectorModel) -> Self {
        DetectorConfig {
            jitter_fwhm_ps: d.jitter_fwhm_ps,
            efficiency: d.efficiency,
            dark_rate_per_s: d.dark_rate_per_s,
            dead_time_ps: d.dead_time_ps,
        }
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::from(&Scenario::reference().det1)
    }
}

impl From<&ClockModel> for ClockConfig {
    fn from(c: &ClockModel) -> Self {
        ClockConfig { offset_ps: c.offset_ps, drift_ps_per_s: c.drift_ps_per_s, resolution_ps: c.resolution_ps }
    }
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig::from(&ClockModel::default())
    }
}

impl From<&Scenario> for ScenarioConfig {
    fn from(s: &Scenario) -> Self {
        let mut spectral = SpectralConfig::from(&s.spectral);
        if spectral.crystal_dpp_fs2_per_mm == 0.0 {
            spectral.crystal_dpp_fs2_per_mm = crate::spdc::LBO_TYPE_I_DPP_FS2_PER_MM;
        }
        if spectral.crystal_d_fs_per_mm == 0.0 {
            spectral.crystal_d_fs_per_mm = crate::spdc::LBO_TYPE_II_D_FS_PER_MM;
        }
        ScenarioConfig {
            rng_seed: s.rng_seed,
            swap_state: s.swap_state,
            pair_rate_per_s: s.pair_rate_per_s,
            duration_s: s.duration_s,
            pair_delay: s.pair_delay,
            max_events: s.max_events,
            spectral,
            fiber1: (&s.fiber1).into(),
            fiber2: (&s.fiber2).into(),
            detector1: (&s.det1).into(),
            detector2: (&s.det2).into(),
            clock1: (&s.clock1).into(),
            clock2: (&s.clock2).into(),
        }
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::from(&Scenario::reference())
    }
}

fn line_of(text: &str, key: &str) -> Option<usize> {
    // last path component, matched at the start of a line
    let leaf = key.rsplit('.').next().unwrap_or(key);
    let section = key.rsplit_once('.').map(|(s, _)| s.split('.').next().unwrap_or(s));
    let mut in_section = section.is_none();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim_start();
        if let Some(name) = t.strip_prefix('[') {
            let name = name.trim_end().trim_end_matches(']').trim();
            in_section = section == Some(name);
            continue;
        }
        if in_section && t.starts_with(leaf) && t[leaf.len()..].trim_start().starts_with('=') {
            return Some(i + 1);
        }
    }
    None
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate(Some(text))?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }

    /// Returns a copy with the dotted `key` (e.g. `fiber2.length_km`) set to
    /// a TOML literal.
    pub fn with_key(&self, key: &str, literal: &str) -> Result<Self, ConfigError> {
        let mut root: toml::Table = toml::from_str(&self.to_toml_string()).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let parsed: toml::Table =
            toml::from_str(&format!("v = {literal}")).map_err(|e| ConfigError::Parse(format!("value `{literal}`: {e}")))?;
        let value = parsed["v"].clone();
        let mut parts = key.split('.').peekable();
        let mut table = &mut root;
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                let slot = table.get_mut(part).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
                // keep float keys floats when given an integer literal
                *slot = match (&*slot, value.clone()) {
                    (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                    (_, v) => v,
                };
            } else {
                table = table
                    .get_mut(part)
                    .and_then(|v| v.as_table_mut())
                    .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
            }
        }
        let text = toml::to_string(&root).expect("table serializes");
        let cfg: ScenarioConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate(None)?;
        Ok(cfg)
    }

    pub fn validate(&self, text: Option<&str>) -> Result<(), ConfigError> {
        let fail = |key: &str, msg: &str| -> Result<(), ConfigError> {
            Err(ConfigError::Validation {
                line: text.and_then(|t| line_of(t, key)),
                message: format!("{key}: {msg}"),
            })
        };
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();

        if !positive(self.duration_s) || self.duration_s > u32::MAX as f64 {
            return fail("duration_s", "must be positive");
        }
        if !positive(self.pair_rate_per_s) {
            return fail("pair_rate_per_s", "must be positive");
        }
        if !positive(self.max_events) {
            return fail("max_events", "must be positive");
        }
        let s = &self.spectral;
        if !positive(s.crystal_length_mm) {
            return fail("spectral.crystal_length_mm", "must be positive");
        }
        match s.kind {
            PhaseMatching::TypeII if s.crystal_d_fs_per_mm == 0.0 || !s.crystal_d_fs_per_mm.is_finite() => {
                return fail("spectral.crystal_d_fs_per_mm", "must be nonzero for type_ii");
            }
            PhaseMatching::TypeIDegenerate if s.crystal_dpp_fs2_per_mm == 0.0 || !s.crystal_dpp_fs2_per_mm.is_finite() => {
                return fail("spectral.crystal_dpp_fs2_per_mm", "must be nonzero for type_i_degenerate");
            }
            _ => {}
        }
        if !positive(s.signal_wavelength_nm) {
            return fail("spectral.signal_wavelength_nm", "must be positive");
        }
        if !positive(s.idler_wavelength_nm) {
            return fail("spectral.idler_wavelength_nm", "must be positive");
        }
        for (name, f) in [("fiber1", &self.fiber1), ("fiber2", &self.fiber2)] {
            if !nonneg(f.length_km) {
                return fail(&format!("{name}.length_km"), "must be nonnegative");
            }
            if !positive(f.inv_u_s_ps_per_km) {
                return fail(&format!("{name}.inv_u_s_ps_per_km"), "must be positive");
            }
            if !positive(f.inv_u_i_ps_per_km) {
                return fail(&format!("{name}.inv_u_i_ps_per_km"), "must be positive");
            }
            if !nonneg(f.k2_s_s2_per_cm) {
                return fail(&format!("{name}.k2_s_s2_per_cm"), "must be nonnegative");
            }
            if !nonneg(f.k2_i_s2_per_cm) {
                return fail(&format!("{name}.k2_i_s2_per_cm"), "must be nonnegative");
            }
            let mut last = 0.0;
            for m in &f.side_modes {
                if !(m.amplitude > 0.0 && m.amplitude <= 1.0) {
                    return fail(&format!("{name}.side_modes"), "amplitudes must be in (0, 1]");
                }
                if !(m.delay_ps > last && m.delay_ps.is_finite()) {
                    return fail(&format!("{name}.side_modes"), "delays must be positive and increasing");
                }
                last = m.delay_ps;
            }
        }
        for (name, d) in [("detector1", &self.detector1), ("detector2", &self.detector2)] {
            if !(0.0..=1.0).contains(&d.efficiency) {
                return fail(&format!("{name}.efficiency"), "must be in [0, 1]");
            }
            if !nonneg(d.jitter_fwhm_ps) {
                return fail(&format!("{name}.jitter_fwhm_ps"), "must be nonnegative");
            }
            if !nonneg(d.dark_rate_per_s) {
                return fail(&format!("{name}.dark_rate_per_s"), "must be nonnegative");
            }
            if !nonneg(d.dead_time_ps) {
                return fail(&format!("{name}.dead_time_ps"), "must be nonnegative");
            }
        }
        for (name, c) in [("clock1", &self.clock1), ("clock2", &self.clock2)] {
            let r = c.resolution_ps;
            if !(r >= 1.0 && r <= u16::MAX as f64 && r.fract() == 0.0) {
                return fail(&format!("{name}.resolution_ps"), "must be a whole number of ps in 1..=65535");
            }
            if !c.offset_ps.is_finite() {
                return fail(&format!("{name}.offset_ps"), "must be finite");
            }
            if !c.drift_ps_per_s.is_finite() {
                return fail(&format!("{name}.drift_ps_per_s"), "must be finite");
            }
        }
        Ok(())
    }

    pub fn to_scenario(&self) -> Result<Scenario, ConfigError> {
        self.validate(None)?;
        let s = &self.spectral;
        let spectral = SpectralModel {
            kind: s.kind,
            crystal_length_mm: s.crystal_length_mm,
            crystal_d_fs_per_mm: s.crystal_d_fs_per_mm,
            crystal_dpp_fs2_per_mm: s.crystal_dpp_fs2_per_mm,
            omega_s0: 0.0,
            omega_i0: 0.0,
        }
        .with_wavelengths(s.signal_wavelength_nm, s.idler_wavelength_nm);
        let fiber = |f: &FiberConfig| FiberChannel {
            length_km: f.length_km,
            inv_u_s_ps_per_km: f.inv_u_s_ps_per_km,
            inv_u_i_ps_per_km: f.inv_u_i_ps_per_km,
            k2_s_s2_per_cm: f.k2_s_s2_per_cm,
            k2_i_s2_per_cm: f.k2_i_s2_per_cm,
            side_modes: f.side_modes.clone(),
        };
        let det = |d: &DetectorConfig| DetectorModel {
            jitter_fwhm_ps: d.jitter_fwhm_ps,
            efficiency: d.efficiency,
            dark_rate_per_s: d.dark_rate_per_s,
            dead_time_ps: d.dead_time_ps,
        };
        let clock = |c: &ClockConfig| ClockModel {
            offset_ps: c.offset_ps,
            drift_ps_per_s: c.drift_ps_per_s,
            resolution_ps: c.resolution_ps,
        };
        Ok(Scenario {
            spectral,
            fiber1: fiber(&self.fiber1),
            fiber2: fiber(&self.fiber2),
            det1: det(&self.detector1),
            det2: det(&self.detector2),
            clock1: clock(&self.clock1),
            clock2: clock(&self.clock2),
            swap_state: self.swap_state,
            pair_rate_per_s: self.pair_rate_per_s,
            duration_s: self.duration_s,
            rng_seed: self.rng_seed,
            pair_delay: self.pair_delay,
            max_events: self.max_events,
        })
    }
}

/// SHA-256 of `bytes`, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One output file listed in a [`RunManifest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub records: u64,
    pub sha256: String,
}

/// Provenance of a simulated run, written next to the record files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub rng_seed: u64,
    pub swap_state: SwapState,
    pub duration_s: f64,
    pub slabs: usize,
    pub stats: crate::simulator::RunStats,
    pub files: Vec<ManifestFile>,
}

impl RunManifest {
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}
