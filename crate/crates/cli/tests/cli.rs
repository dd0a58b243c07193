use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use biphoton_cli::io::{read_binary, read_csv};
use serde_json::Value;

const TINY: &str = "\
[experiment]
name = tiny

[grid]
n = 32
extent = 640um

[pump]
profile = tem01
width = 200um
wavelength = 404nm

[crystal]
material = bbo
length = 2mm
cut_angle = 42.4deg
type = II
extraordinary = idler
walkoff_azimuth = 90deg

[mask.near.signal]
shape = double_slit
separation = 280um
width = 80um
axis = y

[mask.near.idler]
shape = circle
radius = 50um
center_y = 25um

[execution]
mode = in_core
memory_budget = 1GB

[output]
stages = p1_pre_t, p2_post_n, p3
photons = signal, idler
formats = csv, bin, pgm

[analysis]
distinguishability = true
detector_radius = 50um

[sweep]
idler_radius = 50um
positions = 0um, 25um
";

fn biphoton(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biphoton"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn smoke_validation_is_quick() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let start = Instant::now();
    let o = biphoton(&["--out", out, "validate", "smoke.cfg"]);
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(elapsed < 1.0, "smoke validation took {elapsed:.2} s");
    let report = json(&dir.path().join("validation.json"));
    assert_eq!(report["pass"], true);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}

#[test]
fn missed_threshold_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = biphoton_cli::config::shipped("smoke.cfg")
        .unwrap()
        .replace("near_max = 1", "near_max = 1e-9");
    let cfg = write_config(dir.path(), "strict.cfg", &text);
    let o = biphoton(&["--out", dir.path().to_str().unwrap(), "validate", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert!(dir.path().join("validation.json").exists());
}

#[test]
fn corrupted_configs_exit_with_config_code_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (TINY.replace("extent = 640um", "extent = 640"), "extent"),
        (TINY.replace("width = 80um", "widht = 80um"), "widht"),
        (TINY.replace("n = 32", "n = 15"), "n"),
        (TINY.replace("[mask.near.idler]", "[mask.near.idler"), "unknown section"),
    ];
    for (i, (text, field)) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("bad{i}.cfg"), text);
        let o = biphoton(&["--out", dir.path().to_str().unwrap(), "run", cfg.to_str().unwrap()]);
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(code(&o), 2, "case {i}: {err}");
        assert!(err.contains(field), "case {i} does not name '{field}': {err}");
    }
}

#[test]
fn budget_below_the_field_is_a_resource_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let o = biphoton(&[
        "--memory-budget",
        "1MB",
        "--out",
        dir.path().to_str().unwrap(),
        "run",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_outputs_round_trip_and_repeat_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = biphoton(&[
            "--threads",
            "2",
            "--out",
            out.to_str().unwrap(),
            "run",
            cfg.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let summary = json(&a.join("summary.json"));
    let hash = biphoton_cli::ExperimentConfig::load(&cfg).unwrap().hash;
    assert_eq!(summary["config_hash"], hash.as_str());
    let d = summary["distinguishability"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&d));

    for stem in [
        "p1_pre_t_signal",
        "p2_post_n_idler",
        "p3_signal",
        "p2_post_n_signal_detector",
    ] {
        let bin = read_binary(&a.join(format!("{stem}.bin"))).unwrap();
        assert_eq!(bin.dims, [32, 32]);
        let csv = read_csv(&a.join(format!("{stem}.csv"))).unwrap();
        assert_eq!(csv.values, bin.data, "{stem}: csv and binary disagree");
        assert!(a.join(format!("{stem}.pgm")).exists());
        assert_eq!(
            fs::read(a.join(format!("{stem}.bin"))).unwrap(),
            fs::read(b.join(format!("{stem}.bin"))).unwrap()
        );
    }
}

#[test]
fn sweep_records_off_grid_positions_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let out = dir.path().join("s");
    let o = biphoton(&[
        "--out",
        out.to_str().unwrap(),
        "sweep",
        cfg.to_str().unwrap(),
        "--positions",
        "-25um,1mm,0um",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&out.join("sweep.json"));
    assert_eq!(s["records"].as_array().unwrap().len(), 2);
    let failures = s["failures"].as_array().unwrap();
    assert_eq!(failures.len(), 1);
    assert!((failures[0][0].as_f64().unwrap() - 1e-3).abs() < 1e-12);
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn empty_position_list_gives_an_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let out = dir.path().join("s");
    let o = biphoton(&[
        "--out",
        out.to_str().unwrap(),
        "sweep",
        cfg.to_str().unwrap(),
        "--positions",
        "",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 1);
    assert!(table.starts_with("position_m,"));
    assert_eq!(json(&out.join("sweep.json"))["records"].as_array().unwrap().len(), 0);
}

#[test]
fn estimate_reports_field_bytes() {
    let o = biphoton(&["estimate", "--n", "240"]);
    assert_eq!(code(&o), 0);
    let e: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(e["field_bytes"], 16u64 * 240u64.pow(4));
    let o = biphoton(&["estimate", "--n", "7"]);
    assert_eq!(code(&o), 2);
}
