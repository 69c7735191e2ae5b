use std::fs;

use msa_core::config::{OutputFormat, ScenarioConfig};
use msa_core::io::{fmt_num, read_csv};
use msa_core::pipeline::{run_stages, RunOptions, Stage, LOCK_FILE, REPORT_FILE};

fn options(dir: &std::path::Path, format: OutputFormat) -> RunOptions {
    RunOptions {
        out_dir: dir.to_path_buf(),
        format,
        run_fdtd: false,
    }
}

#[test]
fn every_reported_number_is_in_its_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ScenarioConfig::default();
    let report = run_stages(&cfg, &options(dir.path(), OutputFormat::Csv), &[Stage::Optics, Stage::G2, Stage::Odmr]).unwrap();
    assert!(report.all_passed());
    for h in &report.headlines {
        let table = read_csv(&h.artifact).unwrap();
        let wanted = fmt_num(h.value);
        assert!(
            table.rows.iter().flatten().any(|cell| *cell == wanted),
            "{} = {wanted} missing from {}",
            h.key,
            h.artifact.display()
        );
    }
    let summary = read_csv(&dir.path().join(REPORT_FILE)).unwrap();
    assert_eq!(summary.rows.len(), report.headlines.len());
    assert!(!dir.path().join(LOCK_FILE).exists());
    assert!(report.artifacts.iter().all(|p| p.extension().is_some_and(|e| e == "csv")));
}

#[test]
fn skipped_fdtd_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_stages(&ScenarioConfig::default(), &options(dir.path(), OutputFormat::Both), &[Stage::Nanojet]).unwrap();
    assert_eq!(report.skipped, vec![Stage::Nanojet]);
    assert!(report.headlines.is_empty());
}

#[test]
fn stage_failure_keeps_the_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::default();
    cfg.odmr.freq_max_mhz = 2900.0;
    let err = run_stages(&cfg, &options(dir.path(), OutputFormat::Csv), &[Stage::Optics, Stage::Odmr]).unwrap_err();
    assert_eq!(err.stage, Stage::Odmr);
    assert_eq!(err.partial.completed, vec![Stage::Optics]);
    assert!(fs::read_dir(dir.path()).unwrap().count() > 0);
    assert!(!dir.path().join(LOCK_FILE).exists());
}
