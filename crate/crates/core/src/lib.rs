//! Clock synchronization and fiber ranging from the arrival times of
//! entangled photon pairs.
//!
//! The crate covers the whole chain: SPDC spectral models and their far-field
//! G² ([`spdc`]), fiber and detector models ([`channel`]), quantized time-tag
//! streams and their binary format ([`timetag`]), a Monte Carlo source
//! ([`simulator`]), histogramming and peak estimation ([`correlator`]) and the
//! closed-form solvers for D, r₁ and t₀ ([`protocol`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod config;
pub mod correlator;
pub mod protocol;
pub mod simulator;
pub mod spdc;
pub mod stats;
pub mod timetag;

pub use channel::{DetectorModel, FiberChannel, Photon, SideMode, SwapState};
pub use config::{sha256_hex, ConfigError, ManifestFile, RunManifest, ScenarioConfig};
pub use correlator::{
    correlate_timestamps, cross_correlate, find_peaks, peak_center, track_offset, Binning, CorrelationHistogram,
    locate_peak, measure_peak, CorrelatorError, FitModel, Peak, PeakFit, PeakMeasurement, PeakMethod, TrackSettings,
};
pub use protocol::{MeasurementResult, ProtocolError, SyncSolution};
pub use simulator::{simulate_run, PairDelay, Scenario, SimulatedRun, SimulationError};
pub use spdc::{BroadeningModel, ModelError, PhaseMatching, SampledDensity, SpectralModel};
pub use stats::Estimate;
pub use timetag::{ClockModel, DecodeError, Detector, TagStream, TimeTag};
