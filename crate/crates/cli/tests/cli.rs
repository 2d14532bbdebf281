use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const NOISELESS: &str = r#"
duration_s = 2.0
pair_rate_per_s = 2000.0
pair_delay = "zero"

[fiber1]
side_modes = []

[fiber2]
side_modes = []

[detector1]
jitter_fwhm_ps = 0.0
efficiency = 1.0
dark_rate_per_s = 0.0
dead_time_ps = 0.0

[detector2]
jitter_fwhm_ps = 0.0
efficiency = 1.0
dark_rate_per_s = 0.0
dead_time_ps = 0.0
"#;

fn qsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsync")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn simulate(config: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = qsync(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

/// `key: value ± sigma unit` line from a report.
fn reported(text: &str, key: &str) -> (f64, f64) {
    let line = text.lines().find(|l| l.starts_with(&format!("{key}:"))).unwrap_or_else(|| panic!("{key} in {text}"));
    let mut parts = line[key.len() + 1..].split_whitespace();
    let v = parts.next().unwrap().parse().unwrap();
    assert_eq!(parts.next(), Some("±"));
    (v, parts.next().unwrap().parse().unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic_across_slabs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "n.toml", NOISELESS);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate(&cfg, &a, &["--slabs", "1"]);
    simulate(&cfg, &b, &["--slabs", "3"]);
    for f in ["d1.bptt", "d2.bptt", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("config_hash = \""));
    assert!(manifest.contains("name = \"d1.bptt\""));
}

#[test]
fn config_errors_exit_3_with_line_numbers() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), "z.toml", "rng_seed = 4\nduration_s = 0.0\n");
    let o = qsync(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("line 2: duration_s"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "u.toml", "[fiber1]\nlength_m = 1.0\n");
    let o = qsync(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("length_m"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let o = qsync(&["correlate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = qsync(&["solve", "--m0", "a", "b", "--m45", "c", "d", "--r2-km", "1", "--r1-km", "1", "--d-ps-per-km", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = qsync(&["solve", "--m0", "a", "b", "--m45", "c", "d", "--r2-km", "1", "--inv-u-s", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn correlate_reports_peaks_and_writes_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "n.toml", NOISELESS);
    let run = dir.path().join("run");
    simulate(&cfg, &run, &[]);
    let csv = dir.path().join("h.csv");
    let o = qsync(&["correlate", s(&run.join("d1.bptt")), s(&run.join("d2.bptt")), "--csv", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (center, _) = reported(&stdout(&o), "center");
    // 1.5·1799.9 + 40369, within one quantization step
    assert!((center - 43068.85).abs() <= 3.0, "{center}");
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("bin_center_ps,counts\n"));

    // a stream against itself peaks at zero
    let f = s(&run.join("d1.bptt")).to_string();
    let o = qsync(&["correlate", &f, &f]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(reported(&stdout(&o), "center").0, 0.0);
}

#[test]
fn disjoint_streams_exit_no_peak() {
    let dir = TempDir::new().unwrap();
    let text = format!("{NOISELESS}\n[clock1]\noffset_ps = 5e12\n");
    let cfg = write_config(dir.path(), "far.toml", &text);
    let run = dir.path().join("run");
    simulate(&cfg, &run, &[]);
    let o = qsync(&["correlate", s(&run.join("d1.bptt")), s(&run.join("d2.bptt"))]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn corrupt_file_exits_decode_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "n.toml", NOISELESS);
    let run = dir.path().join("run");
    simulate(&cfg, &run, &[]);
    let f = run.join("d1.bptt");
    let mut bytes = fs::read(&f).unwrap();
    bytes[40] ^= 0x10;
    fs::write(&f, bytes).unwrap();
    let o = qsync(&["correlate", s(&f), s(&run.join("d2.bptt"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("checksum mismatch"), "{}", stderr(&o));
}

fn noiseless_pair(dir: &Path, tag: &str, r2_km: f64) -> (PathBuf, PathBuf) {
    let text = NOISELESS.replace("[fiber2]\n", &format!("[fiber2]\nlength_km = {r2_km:?}\n"));
    let cfg = write_config(dir, &format!("{tag}.toml"), &text);
    let (r0, r45) = (dir.join(format!("{tag}_0")), dir.join(format!("{tag}_45")));
    simulate(&cfg, &r0, &["--swap", "plate0"]);
    simulate(&cfg, &r45, &["--swap", "plate45"]);
    (r0, r45)
}

#[test]
fn solve_noiseless_recovers_geometry_and_offset() {
    let dir = TempDir::new().unwrap();
    let (r0, r45) = noiseless_pair(dir.path(), "n", 1.5);
    let csv = dir.path().join("sol.csv");
    let files = [r0.join("d1.bptt"), r0.join("d2.bptt"), r45.join("d1.bptt"), r45.join("d2.bptt")];
    let args = |extra: &[&str]| -> Output {
        let mut v = vec!["solve", "--m0", s(&files[0]), s(&files[1]), "--m45", s(&files[2]), s(&files[3]), "--r2-km", "1.5"];
        v.extend_from_slice(extra);
        qsync(&v)
    };
    let o = args(&["--r1-km", "1.5", "--inv-u-s", "4901799.9", "--inv-u-i", "4900000", "--csv", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!((reported(&out, "delta_minus").0 - 5399.7).abs() <= 6.0, "{out}");
    assert!((reported(&out, "D").0 - 1799.9).abs() <= 2.0, "{out}");
    assert!((reported(&out, "t0").0 - 40369.0).abs() <= 3.0, "{out}");
    assert!((reported(&out, "t0_symmetric").0 - 40369.0).abs() <= 3.0, "{out}");

    let o = args(&["--d-ps-per-km", "1799.9", "--csv", s(&csv), "--label", "range"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!((reported(&stdout(&o), "r1").0 - 1.5).abs() <= 0.004);

    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert!(lines[0].starts_with("label,delta_minus_ps,delta_minus_sigma_ps,d_ps_per_km"));
    assert!(lines[2].starts_with("range,"));
}

#[test]
fn solve_multi_joins_three_r2_values() {
    let dir = TempDir::new().unwrap();
    let mut args: Vec<String> = vec!["solve".into(), "--multi".into()];
    for r2 in ["1.0", "2.0", "3.0"] {
        let (r0, r45) = noiseless_pair(dir.path(), &format!("r{r2}"), r2.parse().unwrap());
        args.extend(["--m0".into(), s(&r0.join("d1.bptt")).into(), s(&r0.join("d2.bptt")).into()]);
        args.extend(["--m45".into(), s(&r45.join("d1.bptt")).into(), s(&r45.join("d2.bptt")).into()]);
        args.extend(["--r2-km".into(), r2.into()]);
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = qsync(&refs);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!((reported(&out, "D").0 - 1799.9).abs() <= 3.0, "{out}");
    assert!((reported(&out, "r1").0 - 1.5).abs() <= 0.005, "{out}");

    // one pair is not enough for a joint solve
    let o = qsync(&refs[..11]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn track_shows_drift_and_flat_series() {
    let dir = TempDir::new().unwrap();
    let base = "duration_s = 8.0\npair_rate_per_s = 20000.0\n";
    for (drift, tag) in [(0.0, "flat"), (40.0, "slope")] {
        let cfg = write_config(
            dir.path(),
            &format!("{tag}.toml"),
            &format!("{base}[clock1]\noffset_ps = 40369.0\ndrift_ps_per_s = {drift}\n"),
        );
        let run = dir.path().join(tag);
        simulate(&cfg, &run, &[]);
        let csv = dir.path().join(format!("{tag}.csv"));
        let o = qsync(&["track", s(&run.join("d1.bptt")), s(&run.join("d2.bptt")), "--window-s", "2", "--stride-s", "2", "--csv", s(&csv)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let (slope, sigma) = reported(&stderr(&o), "drift_ps_per_s");
        assert!((slope - drift).abs() < 5.0 * sigma + 0.5, "{tag}: {slope} ± {sigma}");
        let text = fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("window_start_s,center_ps,sigma_ps\n"));
        // windows must fit inside the 8 s run: starts 0, 2, 4
        assert_eq!(text.lines().count(), 4);
    }
}

#[test]
fn sweep_tabulates_rows_and_joint_solution() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "n.toml", NOISELESS);
    let out = dir.path().join("sweep");
    let o = qsync(&["sweep", "--config", s(&cfg), "--key", "fiber2.length_km", "--values", "1,2,3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut rdr = text.lines();
    let header: Vec<&str> = rdr.next().unwrap().split(',').collect();
    let rows: Vec<Vec<&str>> = rdr.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4, "{text}");
    assert_eq!(rows[0][0], "fiber2.length_km=1");
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let multi = &rows[3];
    assert_eq!(multi[0], "multi");
    let d: f64 = multi[col("d_ps_per_km")].parse().unwrap();
    let r1: f64 = multi[col("r1_km")].parse().unwrap();
    assert!((d - 1799.9).abs() <= 3.0 && (r1 - 1.5).abs() <= 0.005, "{d} {r1}");

    let o = qsync(&["sweep", "--config", s(&cfg), "--key", "fiber9.length_km", "--values", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_command_round_trips() {
    let dir = TempDir::new().unwrap();
    let o = qsync(&["config"]);
    assert!(o.status.success());
    let cfg = write_config(dir.path(), "p.toml", &stdout(&o));
    let o = qsync(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("x")), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
}
