use std::fs;
use std::io::Write;
use std::path::Path;

use qsync_core::config::{sha256_hex, ManifestFile, RunManifest};
use qsync_core::correlator::{
    fit_peak, locate_peak, measure_peak, track_offset, write_offset_csv, Binning, FitModel, PeakMeasurement,
    PeakMethod, TrackSettings,
};
use qsync_core::protocol::{
    delta_minus, read_solution_csv, solve_d, solve_multi_r2, solve_r1, solve_t0, solve_t0_symmetric,
    write_solution_csv, MeasurementResult, MultiPoint, PathModel, SolutionRow, SyncSolution,
};
use qsync_core::simulator::{simulate_run_slabs, RunStats};
use qsync_core::stats::fit_line;
use qsync_core::timetag::{encode_stream, read_stream};
use qsync_core::{Estimate, Scenario, ScenarioConfig, SwapState, TagStream};

use crate::error::CliError;
use crate::{CorrelateArgs, HistogramArgs, SimulateArgs, SolveArgs, SweepArgs, TrackArgs};

const COARSE_BIN_PS: f64 = 1000.0;

fn slab_count(requested: usize) -> usize {
    if requested == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        requested
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn binning_for(t1: &[i64], t2: &[i64], h: &HistogramArgs) -> Result<Binning, CliError> {
    let center_ps = match h.center_ns {
        Some(c) => c * 1e3,
        None => locate_peak(t1, t2, h.search_us * 1e6, COARSE_BIN_PS)?,
    };
    Ok(Binning::around(h.bin_ps, center_ps, h.window_ns * 1e3)?)
}

fn measure_streams(s1: &TagStream, s2: &TagStream, h: &HistogramArgs) -> Result<PeakMeasurement, CliError> {
    let binning = binning_for(&s1.timestamps(), &s2.timestamps(), h)?;
    Ok(measure_peak(s1, s2, &binning, PeakMethod::Centroid)?)
}

fn simulate_scenario(scenario: &Scenario, slabs: usize) -> Result<(TagStream, TagStream, RunStats), CliError> {
    let run = simulate_run_slabs(scenario, slab_count(slabs))?;
    Ok((run.d1, run.d2, run.stats))
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = ScenarioConfig::from_path(&a.config)?;
    if let Some(p) = a.swap {
        cfg.swap_state = p.into();
    }
    if let Some(seed) = a.seed {
        cfg.rng_seed = seed;
    }
    let scenario = cfg.to_scenario()?;
    let (d1, d2, stats) = simulate_scenario(&scenario, a.slabs)?;

    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut files = Vec::new();
    for (name, stream) in [("d1.bptt", &d1), ("d2.bptt", &d2)] {
        let bytes = encode_stream(stream);
        write_file(&a.out.join(name), &bytes)?;
        files.push(ManifestFile { name: name.into(), records: stream.len() as u64, sha256: sha256_hex(&bytes) });
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        rng_seed: cfg.rng_seed,
        swap_state: cfg.swap_state,
        duration_s: cfg.duration_s,
        slabs: slab_count(a.slabs),
        stats,
        files,
    };
    write_file(&a.out.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    write_file(&a.out.join("manifest.toml"), manifest.to_toml_string().as_bytes())?;

    let s = &stats;
    println!("swap_state: {}", cfg.swap_state);
    println!("config_hash: {}", manifest.config_hash);
    println!("pairs_emitted: {}", s.pairs_emitted);
    println!("d1_recorded: {}", s.d1_recorded);
    println!("d2_recorded: {}", s.d2_recorded);
    println!("expected_delay_ps: {:.3}", scenario.nominal_delay_difference_ps());
    Ok(())
}

fn peak_report(m: &PeakMeasurement) -> String {
    let mut out = String::new();
    let h = &m.histogram;
    out += &format!("singles: {} {}\ncoincidences: {}\npeaks: {}\n", h.n1, h.n2, h.coincidences, m.peaks.len());
    out += "rank,center_ps,fwhm_ps,height,prominence,area_fraction\n";
    for (i, p) in m.peaks.iter().enumerate() {
        out += &format!(
            "{},{:.1},{:.1},{:.2},{:.2},{:.5}\n",
            i, p.center_ps, p.fwhm_ps, p.height, p.prominence, p.area_fraction
        );
    }
    out += &format!("center: {:.3} ± {:.3} ps\n", m.center.value, m.center.sigma);
    out
}

pub fn correlate(a: &CorrelateArgs) -> Result<(), CliError> {
    let s1 = read_stream(&a.file1)?;
    let s2 = read_stream(&a.file2)?;
    let m = measure_streams(&s1, &s2, &a.hist)?;
    if let Some(path) = &a.csv {
        let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        m.histogram.write_csv(std::io::BufWriter::new(f))?;
    }
    print!("{}", peak_report(&m));

    if a.fit {
        let cfg_path = a.config.as_ref().expect("clap enforces --config with --fit");
        let scenario = ScenarioConfig::from_path(cfg_path)?.to_scenario()?;
        let (signal_km, idler_km) = match s1.swap_state {
            SwapState::Plate0 => (scenario.fiber1.length_km, scenario.fiber2.length_km),
            SwapState::Plate45 => (scenario.fiber2.length_km, scenario.fiber1.length_km),
        };
        let model = FitModel {
            spectral: scenario.spectral.clone(),
            signal_path_km: signal_km,
            idler_path_km: idler_km,
            jitter_fwhm_ps: scenario.combined_jitter_ps(),
            k2_signal_guess: scenario.fiber1.k2_s_s2_per_cm,
            k2_idler_guess: scenario.fiber1.k2_i_s2_per_cm,
        };
        let fit = fit_peak(&m.histogram, &m.peaks[0], &model)?;
        println!("fit_center: {:.3} ± {:.3} ps", fit.center.value, fit.center.sigma);
        println!("k2_signal_s2_per_cm: {:.4e}", fit.k2_signal_s2_per_cm);
        println!("k2_idler_s2_per_cm: {:.4e}", fit.k2_idler_s2_per_cm);
        println!("chi2_per_dof: {:.4}", fit.chi2 / fit.dof.max(1) as f64);
    }
    Ok(())
}

fn measurement(files: &[std::path::PathBuf], expect: SwapState, r2_km: f64, h: &HistogramArgs) -> Result<MeasurementResult, CliError> {
    let s1 = read_stream(&files[0])?;
    let s2 = read_stream(&files[1])?;
    if s1.swap_state != expect || s2.swap_state != expect {
        return Err(CliError::Usage(format!(
            "{} / {}: recorded at {} / {}, expected {expect}",
            files[0].display(),
            files[1].display(),
            s1.swap_state,
            s2.swap_state
        )));
    }
    let m = measure_streams(&s1, &s2, h)?;
    Ok(MeasurementResult::new(expect, m.center, r2_km))
}

fn append_rows(path: &Path, rows: &[SolutionRow]) -> Result<(), CliError> {
    let mut all = match fs::read(path) {
        Ok(bytes) if !bytes.is_empty() => {
            read_solution_csv(&bytes[..]).map_err(|e| CliError::Decode(format!("{}: {e}", path.display())))?
        }
        _ => Vec::new(),
    };
    all.extend_from_slice(rows);
    let mut buf = Vec::new();
    write_solution_csv(&mut buf, &all).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(path, &buf)
}

pub fn solve(a: &SolveArgs) -> Result<(), CliError> {
    let pairs0: Vec<_> = a.m0.chunks(2).collect();
    let pairs45: Vec<_> = a.m45.chunks(2).collect();
    if pairs0.len() != pairs45.len() || pairs0.len() != a.r2_km.len() {
        return Err(CliError::Usage("need one --m0, one --m45 and one --r2-km per measurement".into()));
    }
    if a.multi {
        if a.r2_km.len() < 2 {
            return Err(CliError::Usage("--multi needs at least two measurement pairs".into()));
        }
    } else {
        if a.r2_km.len() != 1 {
            return Err(CliError::Usage("several measurement pairs need --multi".into()));
        }
        if a.r1_km.is_some() == a.d_ps_per_km.is_some() {
            return Err(CliError::Usage("give exactly one of --r1-km and --d-ps-per-km, or use --multi".into()));
        }
    }

    let mut measured = Vec::new();
    for ((f0, f45), &r2) in pairs0.iter().zip(&pairs45).zip(&a.r2_km) {
        let m0 = measurement(f0, SwapState::Plate0, r2, &a.hist)?;
        let m45 = measurement(f45, SwapState::Plate45, r2, &a.hist)?;
        let dm = delta_minus(&m0, &m45)?;
        measured.push((m0, m45, dm));
    }

    let mut sol = SyncSolution::default();
    let r1: Estimate;
    if a.multi {
        let points: Vec<MultiPoint> =
            measured.iter().map(|(m0, _, dm)| MultiPoint { r2_km: m0.r2_km, delta_minus: *dm }).collect();
        let multi = solve_multi_r2(&points)?;
        sol.d_fiber = Some(multi.d);
        sol.r1_km = Some(multi.r1_km);
        sol.unphysical_range = multi.r1_km.value < 0.0;
        r1 = multi.r1_km;
    } else {
        let (m0, m45, dm) = &measured[0];
        sol.delta_minus = Some(*dm);
        if let Some(r1_km) = a.r1_km {
            sol.d_fiber = Some(solve_d(*dm, r1_km, m0.r2_km)?);
            r1 = Estimate::exact(r1_km);
            if r1_km == m0.r2_km {
                sol.t0_symmetric = Some(solve_t0_symmetric(m0, m45, r1_km, m0.r2_km)?);
            }
        } else {
            let d = Estimate::exact(a.d_ps_per_km.expect("checked above"));
            let range = solve_r1(*dm, d, m0.r2_km)?;
            sol.r1_km = Some(range.r1_km);
            sol.unphysical_range = range.unphysical;
            r1 = range.r1_km;
        }
    }
    if let (Some(inv_u_s), Some(inv_u_i)) = (a.inv_u_s, a.inv_u_i) {
        let (m0, _, _) = &measured[0];
        let paths = PathModel { inv_u_s_ps_per_km: inv_u_s, inv_u_i_ps_per_km: inv_u_i, r1_km: r1, r2_km: m0.r2_km };
        sol.t0 = Some(solve_t0(m0, &paths)?);
    } else if sol.t0_symmetric.is_none() {
        eprintln!("note: t0 needs --inv-u-s and --inv-u-i unless r1 = r2 is given");
    }

    print!("{}", sol.report());
    if let Some(path) = &a.csv {
        append_rows(path, &[sol.to_row(&a.label)])?;
    }
    Ok(())
}

pub fn track(a: &TrackArgs) -> Result<(), CliError> {
    let s1 = read_stream(&a.file1)?;
    let s2 = read_stream(&a.file2)?;
    let mut settings = TrackSettings::new(a.window_s, a.stride_s);
    settings.binning = binning_for(&s1.timestamps(), &s2.timestamps(), &a.hist)?;
    let samples = track_offset(&s1, &s2, &settings)?;

    let mut buf = Vec::new();
    write_offset_csv(&mut buf, &samples)?;
    match &a.csv {
        Some(path) => write_file(path, &buf)?,
        None => std::io::stdout().write_all(&buf).map_err(|e| CliError::Io(e.to_string()))?,
    }

    let points: Vec<(f64, f64, f64)> = samples
        .iter()
        .filter_map(|s| s.center.map(|c| (s.window_start_s, c.value, c.sigma)))
        .collect();
    let gaps = samples.len() - points.len();
    eprintln!("windows: {} ({gaps} gaps)", samples.len());
    if let Some(fit) = fit_line(&points) {
        eprintln!("drift_ps_per_s: {:.4} ± {:.4}", fit.slope, fit.var_slope.sqrt());
    }
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let base = ScenarioConfig::from_path(&a.config)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for value in &a.values {
        let cfg = base.with_key(&a.key, value)?;
        let mut results = Vec::new();
        for (state, seed) in [(SwapState::Plate0, cfg.rng_seed), (SwapState::Plate45, cfg.rng_seed.wrapping_add(1))] {
            let scenario = Scenario { swap_state: state, rng_seed: seed, ..cfg.to_scenario()? };
            let (d1, d2, _) = simulate_scenario(&scenario, a.slabs)?;
            let m = measure_streams(&d1, &d2, &a.hist)?;
            results.push(MeasurementResult::new(state, m.center, cfg.fiber2.length_km));
        }
        let (m0, m45) = (&results[0], &results[1]);
        let (r1, r2) = (cfg.fiber1.length_km, cfg.fiber2.length_km);
        let dm = delta_minus(m0, m45)?;
        let paths = PathModel {
            inv_u_s_ps_per_km: cfg.fiber1.inv_u_s_ps_per_km,
            inv_u_i_ps_per_km: cfg.fiber1.inv_u_i_ps_per_km,
            r1_km: Estimate::exact(r1),
            r2_km: r2,
        };
        let sol = SyncSolution {
            delta_minus: Some(dm),
            d_fiber: Some(solve_d(dm, r1, r2)?),
            t0: Some(solve_t0(m0, &paths)?),
            t0_symmetric: if r1 == r2 { Some(solve_t0_symmetric(m0, m45, r1, r2)?) } else { None },
            ..Default::default()
        };
        let label = format!("{}={}", a.key, value);
        eprintln!("{label}\n{}", sol.report());
        rows.push(sol.to_row(&label));
        points.push(MultiPoint { r2_km: r2, delta_minus: dm });
    }
    let distinct_r2 = points.iter().any(|p| p.r2_km != points[0].r2_km);
    if distinct_r2 {
        let multi = solve_multi_r2(&points)?;
        let sol = SyncSolution {
            d_fiber: Some(multi.d),
            r1_km: Some(multi.r1_km),
            unphysical_range: multi.r1_km.value < 0.0,
            ..Default::default()
        };
        eprintln!("multi\n{}", sol.report());
        rows.push(sol.to_row("multi"));
    }
    let mut buf = Vec::new();
    write_solution_csv(&mut buf, &rows).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(&a.out.join("sweep.csv"), &buf)?;
    std::io::stdout().write_all(&buf).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

pub fn print_config() -> Result<(), CliError> {
    print!("{}", ScenarioConfig::default().to_toml_string());
    Ok(())
}
