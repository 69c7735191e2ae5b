use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn msa(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msa"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("scenario.ini");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn optics_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = msa(&["optics"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("optics_summary.csv")).unwrap();
    assert!(summary.contains("magnification_z13"));
    assert!(out.join("optics_curve.svg").exists());
    assert!(!out.join(".msa.lock").exists());
}

#[test]
fn csv_format_skips_svg() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = msa(&["optics", "--format", "csv"], &out);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.join("optics_curve.csv").exists());
    assert!(!out.join("optics_curve.svg").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let unit = write_config(dir.path(), "[optics]\nradius = 3 ghz\n");
    let o = msa(&["optics", "--config", &unit], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let unknown = write_config(dir.path(), "[scan]\nsead = 3\n");
    assert_eq!(msa(&["scan", "--config", &unknown], &out).status.code(), Some(2));
}

#[test]
fn tolerance_failure_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let tight = write_config(dir.path(), "[odmr]\noffset_tolerance = 1 hz\n");
    let o = msa(&["odmr", "--config", &tight], &out);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    assert!(out.join("report.csv").exists());
}

#[test]
fn held_lock_refuses_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".msa.lock"), "1\n").unwrap();
    let o = msa(&["optics"], &out);
    assert_ne!(o.status.code(), Some(0));
    assert!(!out.join("optics_summary.csv").exists());
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(msa(&["odmr", "--seed", "7"], &a).status.code(), Some(0));
    assert_eq!(msa(&["odmr", "--seed", "7"], &b).status.code(), Some(0));
    for name in ["odmr_merged.csv", "odmr_resolved.csv", "odmr_summary.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let c = dir.path().join("c");
    msa(&["odmr", "--seed", "8"], &c);
    assert_ne!(fs::read(a.join("odmr_merged.csv")).unwrap(), fs::read(c.join("odmr_merged.csv")).unwrap());
}

#[test]
fn fits_a_spectrum_file() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert_eq!(msa(&["odmr"], &sim).status.code(), Some(0));
    let input = sim.join("odmr_resolved.csv");
    let fit = dir.path().join("fit");
    let o = msa(&["odmr", "--input", input.to_str().unwrap(), "--dips", "2"], &fit);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(fit.join("odmr_fit.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn fits_a_profile_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("profile.csv");
    let mut text = String::from("position_nm,value\n");
    for i in -40..=40 {
        let x = i as f64 * 20.0;
        let sigma = 200.0 / (8.0 * 2.0f64.ln()).sqrt();
        let v = 10.0 + 1000.0 * (-x * x / (2.0 * sigma * sigma)).exp();
        text.push_str(&format!("{x},{v}\n"));
    }
    fs::write(&input, text).unwrap();
    let out = dir.path().join("out");
    let o = msa(&["psf", "--input", input.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let fit = fs::read_to_string(out.join("psf_fit.csv")).unwrap();
    let fwhm: f64 = fit
        .lines()
        .find_map(|l| l.strip_prefix("fwhm_nm,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((fwhm - 200.0).abs() < 1.0, "{fwhm}");
}

#[test]
fn missing_input_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = msa(&["psf", "--input", "/nonexistent/profile.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
