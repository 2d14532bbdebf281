//! Monte-Carlo generation of paired detection streams.
//!
//! A run is cut into fixed one-second chunks. Chunk `k` draws from its own
//! ChaCha stream (`seed`, stream `k`), so the output does not depend on how
//! chunks are grouped into parallel slabs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::channel::{route, ChannelError, DetectorModel, FiberChannel, Photon, SideMode, SwapState};
use crate::spdc::{farfield_g2, BroadeningModel, Grid, ModelError, SampledDensity, SpectralModel, GAUSSIAN_FWHM_PER_SIGMA};
use crate::timetag::{apply_clock, ClockModel, Detector, TagStream, TimeTag, TimeTagError};

const CHUNK_S: f64 = 1.0;
const PS_PER_S: f64 = 1e12;
pub const DEFAULT_MAX_EVENTS: f64 = 1e8;

/// Combined two-detector jitter FWHM that broadens the 597 ps far-field
/// shape of the reference scenario to 750 ps (see `solve_jitter_for_width`).
pub const DEFAULT_COMBINED_JITTER_PS: f64 = 491.5;
pub const REFERENCE_CLOCK_OFFSET_PS: f64 = 40369.0;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Clock(#[from] TimeTagError),
    #[error("expected {expected:.3e} events exceeds the cap of {cap:.3e}")]
    TooManyEvents { expected: f64, cap: f64 },
}

/// How the pair's detection-time difference is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairDelay {
    /// From the far-field G² of the spectral model and fiber dispersion.
    #[default]
    Modeled,
    /// Zero: both photons leave the source at the same instant.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spectral: SpectralModel,
    pub fiber1: FiberChannel,
    pub fiber2: FiberChannel,
    pub det1: DetectorModel,
    pub det2: DetectorModel,
    pub clock1: ClockModel,
    pub clock2: ClockModel,
    pub swap_state: SwapState,
    pub pair_rate_per_s: f64,
    pub duration_s: f64,
    pub rng_seed: u64,
    pub pair_delay: PairDelay,
    pub max_events: f64,
}

impl Scenario {
    /// The reference experiment: 8 mm type-II LBO, two 1.5 km fibers with
    /// intermodal copies, 3 ps event timers and a 40369 ps offset on clock 1.
    pub fn reference() -> Self {
        let per_detector_jitter = DEFAULT_COMBINED_JITTER_PS / std::f64::consts::SQRT_2;
        let det = DetectorModel {
            jitter_fwhm_ps: per_detector_jitter,
            efficiency: 0.5,
            dark_rate_per_s: 200.0,
            dead_time_ps: 50_000.0,
        };
        let fiber1 = FiberChannel {
            side_modes: vec![SideMode { delay_ps: 3500.0, amplitude: 0.3 }, SideMode { delay_ps: 7500.0, amplitude: 0.1 }],
            ..FiberChannel::reference()
        };
        let fiber2 = FiberChannel {
            side_modes: vec![SideMode { delay_ps: 12_000.0, amplitude: 0.3 }, SideMode { delay_ps: 17_000.0, amplitude: 0.1 }],
            ..FiberChannel::reference()
        };
        Scenario {
            spectral: SpectralModel::lbo_type_ii(),
            fiber1,
            fiber2,
            det1: det.clone(),
            det2: det,
            clock1: ClockModel::with_offset(REFERENCE_CLOCK_OFFSET_PS),
            clock2: ClockModel::default(),
            swap_state: SwapState::Plate0,
            pair_rate_per_s: 1e4,
            duration_s: 100.0,
            rng_seed: 1,
            pair_delay: PairDelay::Modeled,
            max_events: DEFAULT_MAX_EVENTS,
        }
    }

    /// Every stochastic width set to zero: no G² width, jitter, darks,
    /// dead time or side modes; perfect detectors.
    pub fn noiseless(mut self) -> Self {
        self.pair_delay = PairDelay::Zero;
        for d in [&mut self.det1, &mut self.det2] {
            *d = DetectorModel::default();
        }
        self.fiber1.side_modes.clear();
        self.fiber2.side_modes.clear();
        self
    }

    pub fn with_swap(mut self, state: SwapState) -> Self {
        self.swap_state = state;
        self
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        self.spectral.validate()?;
        self.fiber1.validate()?;
        self.fiber2.validate()?;
        self.det1.validate()?;
        self.det2.validate()?;
        for c in [&self.clock1, &self.clock2] {
            c.validate()?;
            let r = c.resolution_ps;
            if r.fract() != 0.0 || r > u16::MAX as f64 {
                return Err(SimulationError::Invalid("clock resolution must be a whole number of ps up to 65535".into()));
            }
        }
        if !(self.pair_rate_per_s > 0.0 && self.pair_rate_per_s.is_finite()) {
            return Err(SimulationError::Invalid("pair rate must be positive".into()));
        }
        if !(self.duration_s > 0.0 && self.duration_s <= u32::MAX as f64) {
            return Err(SimulationError::Invalid("duration must be positive".into()));
        }
        Ok(())
    }

    pub fn expected_events(&self) -> f64 {
        self.duration_s * (2.0 * self.pair_rate_per_s + self.det1.dark_rate_per_s + self.det2.dark_rate_per_s)
    }

    /// Fiber carrying each photon for the current plate setting.
    fn fiber_for(&self, photon: Photon) -> &FiberChannel {
        if route(self.swap_state).d1 == photon {
            &self.fiber1
        } else {
            &self.fiber2
        }
    }

    /// Far-field broadening for the current routing, optionally with jitter.
    pub fn broadening(&self, jitter_fwhm_ps: f64) -> Result<BroadeningModel, ModelError> {
        let fs = self.fiber_for(Photon::Signal);
        let fi = self.fiber_for(Photon::Idler);
        BroadeningModel::from_fibers(fs.k2_s_s2_per_cm, fs.length_km, fi.k2_i_s2_per_cm, fi.length_km, jitter_fwhm_ps)
    }

    /// Combined FWHM of the two detector jitters.
    pub fn combined_jitter_ps(&self) -> f64 {
        self.det1.jitter_fwhm_ps.hypot(self.det2.jitter_fwhm_ps)
    }

    /// Expected τ density of the recorded coincidences' central peak.
    pub fn expected_g2(&self) -> Result<SampledDensity, ModelError> {
        farfield_g2(&self.spectral, &self.broadening(self.combined_jitter_ps())?, &Grid::default())
    }

    /// Noise-free t₁ − t₂ of the central peak (ps), before quantization.
    pub fn nominal_delay_difference_ps(&self) -> f64 {
        let r = route(self.swap_state);
        self.fiber1.propagation_delay(r.d1) + self.clock1.offset_ps
            - self.fiber2.propagation_delay(r.d2)
            - self.clock2.offset_ps
    }
}

/// Inverse-CDF sampler over a gridded density.
#[derive(Debug, Clone)]
pub struct PairDelaySampler {
    taus: Vec<f64>,
    cdf: Vec<f64>,
    point: Option<f64>,
}

impl PairDelaySampler {
    pub fn new(density: &SampledDensity) -> Self {
        let nonzero: Vec<usize> = (0..density.len()).filter(|&i| density.values[i] > 0.0).collect();
        let point = (nonzero.len() == 1).then(|| density.tau(nonzero[0]));
        let cdf = density.cdf();
        let total = *cdf.last().unwrap_or(&0.0);
        let cdf = cdf.into_iter().map(|c| if total > 0.0 { c / total } else { 0.0 }).collect();
        PairDelaySampler { taus: density.taus().collect(), cdf, point }
    }

    pub fn delta() -> Self {
        PairDelaySampler { taus: vec![0.0], cdf: vec![1.0], point: Some(0.0) }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.quantile(u)
    }

    fn quantile(&self, u: f64) -> f64 {
        if let Some(p) = self.point {
            return p;
        }
        let k = self.cdf.partition_point(|&c| c <= u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        self.taus[k - 1] + t * (self.taus[k] - self.taus[k - 1])
    }
}

/// Draws one pair delay δ (ps) from `sampler`.
pub fn sample_pair_delay<R: Rng + ?Sized>(sampler: &PairDelaySampler, rng: &mut R) -> f64 {
    sampler.sample(rng)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RunStats {
    pub pairs_emitted: u64,
    pub d1_photons: u64,
    pub d2_photons: u64,
    pub d1_darks: u64,
    pub d2_darks: u64,
    pub d1_recorded: u64,
    pub d2_recorded: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedRun {
    pub d1: TagStream,
    pub d2: TagStream,
    pub stats: RunStats,
}

struct ArmSampler {
    base_delay_ps: f64,
    side_delays: Vec<f64>,
    mode_cdf: Vec<f64>,
    jitter: Option<Normal<f64>>,
    efficiency: f64,
}

impl ArmSampler {
    fn new(fiber: &FiberChannel, photon: Photon, det: &DetectorModel) -> Self {
        let mut acc = 0.0;
        let mode_cdf = fiber
            .mode_probabilities()
            .into_iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let sigma = det.jitter_fwhm_ps / GAUSSIAN_FWHM_PER_SIGMA;
        ArmSampler {
            base_delay_ps: fiber.propagation_delay(photon),
            side_delays: std::iter::once(0.0).chain(fiber.side_modes.iter().map(|m| m.delay_ps)).collect(),
            mode_cdf,
            jitter: (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma")),
            efficiency: det.efficiency,
        }
    }

    /// Arrival offset after emission, or `None` if the photon is not detected.
    /// Always consumes the same number of draws.
    fn draw<R: Rng>(&self, rng: &mut R) -> Option<f64> {
        let u: f64 = rng.random();
        let mode = self.mode_cdf.partition_point(|&c| c <= u).min(self.side_delays.len() - 1);
        let jitter = self.jitter.map_or(0.0, |n| n.sample(rng));
        let detected = rng.random::<f64>() < self.efficiency;
        detected.then_some(self.base_delay_ps + self.side_delays[mode] + jitter)
    }
}

#[derive(Default)]
struct ChunkEvents {
    d1: Vec<f64>,
    d2: Vec<f64>,
    stats: RunStats,
}

/// Generates the two detector streams of `scenario` with the default
/// parallelism (one slab per available thread).
pub fn simulate_run(scenario: &Scenario) -> Result<SimulatedRun, SimulationError> {
    simulate_run_slabs(scenario, rayon::current_num_threads())
}

/// As [`simulate_run`] with an explicit number of parallel slabs. The
/// output is identical for every `slabs` value.
pub fn simulate_run_slabs(scenario: &Scenario, slabs: usize) -> Result<SimulatedRun, SimulationError> {
    scenario.validate()?;
    let expected = scenario.expected_events();
    if expected > scenario.max_events {
        return Err(SimulationError::TooManyEvents { expected, cap: scenario.max_events });
    }

    let sampler = match scenario.pair_delay {
        PairDelay::Zero => PairDelaySampler::delta(),
        PairDelay::Modeled => PairDelaySampler::new(&farfield_g2(
            &scenario.spectral,
            &scenario.broadening(0.0)?,
            &Grid::default(),
        )?),
    };
    let r = route(scenario.swap_state);
    let arm1 = ArmSampler::new(&scenario.fiber1, r.d1, &scenario.det1);
    let arm2 = ArmSampler::new(&scenario.fiber2, r.d2, &scenario.det2);

    let n_chunks = (scenario.duration_s / CHUNK_S).ceil() as u64;
    let slabs = slabs.clamp(1, n_chunks.max(1) as usize);
    let per_slab = n_chunks.div_ceil(slabs as u64);
    let slab_events: Vec<ChunkEvents> = (0..slabs as u64)
        .into_par_iter()
        .map(|s| {
            let mut acc = ChunkEvents::default();
            for k in s * per_slab..((s + 1) * per_slab).min(n_chunks) {
                let c = simulate_chunk(scenario, k, &sampler, &arm1, &arm2);
                acc.d1.extend(c.d1);
                acc.d2.extend(c.d2);
                add_stats(&mut acc.stats, &c.stats);
            }
            acc
        })
        .collect();

    let mut stats = RunStats::default();
    let (mut d1, mut d2) = (Vec::new(), Vec::new());
    for e in slab_events {
        d1.extend(e.d1);
        d2.extend(e.d2);
        add_stats(&mut stats, &e.stats);
    }
    let duration = scenario.duration_s.ceil() as u32;
    let d1 = seal(d1, &scenario.det1, &scenario.clock1, Detector::D1, scenario.swap_state, duration)?;
    let d2 = seal(d2, &scenario.det2, &scenario.clock2, Detector::D2, scenario.swap_state, duration)?;
    stats.d1_recorded = d1.len() as u64;
    stats.d2_recorded = d2.len() as u64;
    Ok(SimulatedRun { d1, d2, stats })
}

fn add_stats(a: &mut RunStats, b: &RunStats) {
    a.pairs_emitted += b.pairs_emitted;
    a.d1_photons += b.d1_photons;
    a.d2_photons += b.d2_photons;
    a.d1_darks += b.d1_darks;
    a.d2_darks += b.d2_darks;
}

fn simulate_chunk(
    scenario: &Scenario,
    index: u64,
    sampler: &PairDelaySampler,
    arm1: &ArmSampler,
    arm2: &ArmSampler,
) -> ChunkEvents {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.rng_seed);
    rng.set_stream(index);
    let start_s = index as f64 * CHUNK_S;
    let end_s = (start_s + CHUNK_S).min(scenario.duration_s);
    let (start, end) = (start_s * PS_PER_S, end_s * PS_PER_S);
    let mut out = ChunkEvents::default();

    let gaps = Exp::new(scenario.pair_rate_per_s / PS_PER_S).expect("positive rate");
    let mut t = start;
    loop {
        t += gaps.sample(&mut rng);
        if t >= end {
            break;
        }
        out.stats.pairs_emitted += 1;
        let delta = sampler.sample(&mut rng);
        if let Some(a) = arm1.draw(&mut rng) {
            out.d1.push(t + a);
            out.stats.d1_photons += 1;
        }
        // the pair delay rides on the D2-bound photon
        if let Some(a) = arm2.draw(&mut rng) {
            out.d2.push(t + a + delta);
            out.stats.d2_photons += 1;
        }
    }

    for (det, events, count) in [
        (&scenario.det1, &mut out.d1, &mut out.stats.d1_darks),
        (&scenario.det2, &mut out.d2, &mut out.stats.d2_darks),
    ] {
        let mean = det.dark_rate_per_s * (end_s - start_s);
        if mean > 0.0 {
            let n = Poisson::new(mean).expect("positive mean").sample(&mut rng) as u64;
            for _ in 0..n {
                events.push(rng.random_range(start..end));
            }
            *count += n;
        }
    }
    out
}

/// Sorts, applies dead time, records through the clock and builds the stream.
fn seal(
    mut times: Vec<f64>,
    det: &DetectorModel,
    clock: &ClockModel,
    detector: Detector,
    swap_state: SwapState,
    duration_s: u32,
) -> Result<TagStream, SimulationError> {
    times.sort_unstable_by(|a, b| a.total_cmp(b));
    let mut tags = Vec::with_capacity(times.len());
    let mut last = f64::NEG_INFINITY;
    for t in times {
        if t - last < det.dead_time_ps {
            continue;
        }
        last = t;
        tags.push(TimeTag { timestamp_fs: apply_clock(t, clock)?, detector });
    }
    // a strongly negative drift could reorder readings; keep the stream sealed
    if tags.windows(2).any(|w| w[1].timestamp_fs < w[0].timestamp_fs) {
        tags.sort();
    }
    let stream = TagStream::new(detector.code(), swap_state, clock.resolution_ps as u16, duration_s, tags)?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spdc::natural_g2;

    fn small() -> Scenario {
        Scenario { duration_s: 3.0, pair_rate_per_s: 2e3, ..Scenario::reference() }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = simulate_run(&small()).unwrap();
        let b = simulate_run(&small()).unwrap();
        assert_eq!(a, b);
        let c = simulate_run(&Scenario { rng_seed: 2, ..small() }).unwrap();
        assert_ne!(a.d1, c.d1);
    }

    #[test]
    fn slab_count_does_not_change_output() {
        let s = Scenario { duration_s: 5.5, ..small() };
        let one = simulate_run_slabs(&s, 1).unwrap();
        for slabs in [2, 3, 8] {
            assert_eq!(simulate_run_slabs(&s, slabs).unwrap(), one);
        }
    }

    #[test]
    fn noiseless_differences_equal_path_delay() {
        let s = Scenario { duration_s: 1.0, pair_rate_per_s: 500.0, ..Scenario::reference() }.noiseless();
        let run = simulate_run(&s).unwrap();
        assert_eq!(run.d1.len(), run.d2.len());
        let expected = s.nominal_delay_difference_ps();
        // r1/u_s + t0 − r2/u_i, each reading quantized to 3 ps
        for (a, b) in run.d1.tags().iter().zip(run.d2.tags()) {
            let diff_ps = (a.timestamp_fs - b.timestamp_fs) as f64 / 1000.0;
            assert!((diff_ps - expected).abs() <= 3.0, "{diff_ps} vs {expected}");
        }
    }

    #[test]
    fn singles_rate_matches_efficiency_and_darks() {
        let mut s = small();
        s.duration_s = 4.0;
        s.det1.dead_time_ps = 0.0;
        s.det2.dead_time_ps = 0.0;
        let run = simulate_run(&s).unwrap();
        for (n, det) in [(run.d1.len(), &s.det1), (run.d2.len(), &s.det2)] {
            let mean = s.duration_s * (s.pair_rate_per_s * det.efficiency + det.dark_rate_per_s);
            assert!((n as f64 - mean).abs() < 3.0 * mean.sqrt() + 1.0, "{n} vs {mean}");
        }
    }

    #[test]
    fn dead_time_enforced() {
        let mut s = small();
        s.det1.dead_time_ps = 2e6; // 2 µs at 1 kHz singles
        let run = simulate_run(&s).unwrap();
        let ts = run.d1.timestamps();
        assert!(ts.windows(2).all(|w| w[1] - w[0] >= 2_000_000_000 - 3000));
    }

    #[test]
    fn event_cap() {
        let s = Scenario { pair_rate_per_s: 1e7, duration_s: 100.0, ..Scenario::reference() };
        assert!(matches!(simulate_run(&s), Err(SimulationError::TooManyEvents { .. })));
    }

    #[test]
    fn invalid_scenarios() {
        assert!(simulate_run(&Scenario { duration_s: 0.0, ..small() }).is_err());
        assert!(simulate_run(&Scenario { pair_rate_per_s: 0.0, ..small() }).is_err());
        let mut s = small();
        s.clock1.resolution_ps = 2.5;
        assert!(simulate_run(&s).is_err());
    }

    #[test]
    fn sampler_reproduces_rectangle() {
        let d = natural_g2(&SpectralModel::lbo_type_ii(), &Grid::new(1e-3, 6.4)).unwrap();
        let sampler = PairDelaySampler::new(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| sample_pair_delay(&sampler, &mut rng)).collect();
        xs.sort_by(|a, b| a.total_cmp(b));
        // Kolmogorov–Smirnov against the uniform CDF on [−0.4, 0.4] ps
        let cdf = |x: f64| ((x + 0.4) / 0.8).clamp(0.0, 1.0);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| (cdf(x) - i as f64 / n as f64).abs().max((cdf(x) - (i + 1) as f64 / n as f64).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / (n as f64).sqrt(), "KS = {ks}");
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005);
        let width = xs[n - 1] - xs[0];
        assert!((width - 0.8).abs() < 0.002, "{width}");
    }

    #[test]
    fn delta_sampler_is_constant_and_repeatable() {
        let d = SampledDensity { origin_ps: -2.0, step_ps: 1.0, values: vec![0.0, 0.0, 1.0, 0.0, 0.0] };
        let s = PairDelaySampler::new(&d);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!((0..100).all(|_| s.sample(&mut rng) == 0.0));

        let d = natural_g2(&SpectralModel::lbo_type_ii(), &Grid::default()).unwrap();
        let s = PairDelaySampler::new(&d);
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..10).map(|_| s.sample(&mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
    }
}
