//! `msa`: command-line front end for the microsphere imaging toolkit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use msa_core::config::{parse_config, ConfigError, OutputFormat, ScenarioConfig};
use msa_core::io::{self, fmt_num, read_profile, read_spectrum_columns, read_timestamps, Table};
use msa_core::odmr::{fit_odmr_with, MagneticField, OdmrFitOptions, OdmrSpectrum};
use msa_core::photon::{emitter_count_estimate, fit_g2_with, hbt_correlate, PhotonStream, LOW_STATISTICS_DETECTIONS};
use msa_core::pipeline::{run_stages, OutputLock, PipelineError, RunOptions, RunReport, Stage, StageFailure};
use msa_core::psf::{fit_gaussian_1d_with, select_peak_count_with};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_TOLERANCE: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "msa", version, about = "Microsphere-assisted confocal imaging: simulation and analysis")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Scenario file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_format)]
    format: Option<OutputFormat>,
    /// Skip the FDTD nanojet stage.
    #[arg(long, global = true)]
    no_fdtd: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse()
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Focal length, virtual image and magnification curve.
    Optics,
    /// FDTD simulation of the photonic nanojet.
    Nanojet {
        /// Grid spacing override (nm).
        #[arg(long)]
        dx: Option<f64>,
    },
    /// Synthetic conventional and through-sphere scans with SNR.
    Scan,
    /// PSF width fits; fits a measured profile CSV when given.
    Psf {
        /// `position_nm,value[,sigma]` profile.
        #[arg(long, value_name = "CSV")]
        input: Option<PathBuf>,
    },
    /// Photon correlation scenarios; correlates timestamp files when given.
    G2 {
        #[arg(long, value_name = "FILE", requires = "channel_b")]
        channel_a: Option<PathBuf>,
        #[arg(long, value_name = "FILE", requires = "channel_a")]
        channel_b: Option<PathBuf>,
    },
    /// ODMR scenarios; fits a spectrum CSV when given.
    Odmr {
        /// `frequency_mhz,normalized_pl` spectrum.
        #[arg(long, value_name = "CSV")]
        input: Option<PathBuf>,
        /// Number of dips to fit (1, 2 or 4).
        #[arg(long, default_value_t = 4)]
        dips: usize,
    },
    /// All stages in order, with tolerance checks.
    Pipeline,
}

#[derive(Debug)]
enum Failure {
    Config(ConfigError),
    Stage(Box<StageFailure>),
    Pipeline(PipelineError),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Stage(f) => f.error.exit_code() as u8,
            Failure::Pipeline(e) => e.exit_code() as u8,
            Failure::Other(_) => EXIT_OTHER,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load_config(g: &GlobalArgs) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = match &g.config {
        Some(p) => parse_config(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.scan.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output.directory = o.clone();
    }
    if let Some(f) = g.format {
        cfg.output.format = f;
    }
    if g.no_fdtd {
        cfg.fdtd.enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &RunReport) {
    for h in &report.headlines {
        let bounds = match (h.min, h.max) {
            (None, None) => String::new(),
            (lo, hi) => format!(
                "[{}, {}]",
                lo.map_or("-inf".into(), |v| format!("{v:.4}")),
                hi.map_or("inf".into(), |v| format!("{v:.4}"))
            ),
        };
        let status = match h.passed() {
            None => "",
            Some(true) => "pass",
            Some(false) => "FAIL",
        };
        println!("{:<36} {:>14.6} {:<6} {:<22} {}", h.key, h.value, h.unit, bounds, status);
    }
    for s in &report.skipped {
        println!("(stage {} skipped)", s.name());
    }
}

fn run_stage_list(cfg: &ScenarioConfig, stages: &[Stage]) -> Result<u8, Failure> {
    let opts = RunOptions::from_config(cfg);
    match run_stages(cfg, &opts, stages) {
        Ok(report) => {
            print_report(&report);
            println!("artifacts in {}", opts.out_dir.display());
            if report.all_passed() {
                Ok(0)
            } else {
                for h in report.failures() {
                    error!("{} = {} outside tolerance", h.key, h.value);
                }
                Ok(EXIT_TOLERANCE)
            }
        }
        Err(f) => {
            print_report(&f.partial);
            Err(Failure::Stage(f))
        }
    }
}

fn write_key_values(dir: &Path, name: &str, rows: &[(&str, f64)]) -> Result<PathBuf, Failure> {
    let mut t = Table::new(&["key", "value"]);
    for (k, v) in rows {
        t.push(vec![k.to_string(), fmt_num(*v)]);
        println!("{k:<24} {v:.6}");
    }
    let path = dir.join(name);
    io::write_csv(&path, &t).map_err(PipelineError::from)?;
    Ok(path)
}

fn fit_profile_file(cfg: &ScenarioConfig, input: &Path) -> Result<u8, Failure> {
    let profile = read_profile(input).map_err(PipelineError::from)?;
    let single = fit_gaussian_1d_with(&profile, &cfg.fit).map_err(PipelineError::from)?;
    let selection = select_peak_count_with(&profile, &cfg.fit).map_err(PipelineError::from)?;
    let mut rows = vec![
        ("fwhm_nm", single.fwhm_nm),
        ("center_nm", single.center_nm),
        ("amplitude", single.amplitude),
        ("offset", single.offset),
        ("chosen_k", selection.chosen_k as f64),
    ];
    if let (2, Some(pair)) = (selection.chosen_k, &selection.pair) {
        rows.push(("pair_separation_nm", pair.separation_nm()));
    }
    let _lock = OutputLock::acquire(&cfg.output.directory)?;
    write_key_values(&cfg.output.directory, "psf_fit.csv", &rows)?;
    Ok(if single.converged { 0 } else { EXIT_NUMERICAL })
}

fn correlate_files(cfg: &ScenarioConfig, a: &Path, b: &Path) -> Result<u8, Failure> {
    let channel_a = read_timestamps(a).map_err(PipelineError::from)?;
    let channel_b = read_timestamps(b).map_err(PipelineError::from)?;
    let last = channel_a.iter().chain(&channel_b).copied().max().unwrap_or(0);
    let detections = channel_a.len() + channel_b.len();
    let stream = PhotonStream {
        channel_a,
        channel_b,
        duration_ns: last + 1,
        seed: 0,
        low_statistics: (detections as f64) < LOW_STATISTICS_DETECTIONS,
    };
    let hist = hbt_correlate(&stream, cfg.g2.bin_ns, cfg.g2.window_ns).map_err(PipelineError::from)?;
    let fit = fit_g2_with(&hist, &cfg.fit).map_err(PipelineError::from)?;
    let _lock = OutputLock::acquire(&cfg.output.directory)?;
    io::write_csv(&cfg.output.directory.join("g2_histogram.csv"), &io::histogram_table(&hist))
        .map_err(PipelineError::from)?;
    write_key_values(
        &cfg.output.directory,
        "g2_fit.csv",
        &[
            ("detections", detections as f64),
            ("g0", fit.g0),
            ("g0_err", fit.g0_err),
            ("tau_c_ns", fit.tau_c_ns),
            ("baseline", fit.baseline),
        ],
    )?;
    if stream.low_statistics {
        println!("warning: fewer than {LOW_STATISTICS_DETECTIONS} detections");
    }
    if let Ok(count) = emitter_count_estimate(fit.g0_clamped().min(0.999)) {
        println!("emitter estimate: N = {:.2} ({:?})", count.n, count.verdict);
    }
    Ok(if fit.converged { 0 } else { EXIT_NUMERICAL })
}

fn fit_spectrum_file(cfg: &ScenarioConfig, input: &Path, dips: usize) -> Result<u8, Failure> {
    let (f, v) = read_spectrum_columns(input).map_err(PipelineError::from)?;
    let spectrum = OdmrSpectrum {
        frequencies_mhz: f,
        normalized_pl: v,
        defect_axes: Vec::new(),
        field: MagneticField::zero(),
    };
    let opts = OdmrFitOptions {
        lm: cfg.fit,
        ..OdmrFitOptions::default()
    };
    let fit = fit_odmr_with(&spectrum, dips, &opts).map_err(PipelineError::from)?;
    let mut t = Table::new(&["center_mhz", "depth", "linewidth_mhz"]);
    for d in &fit.dips {
        println!("dip at {:.3} MHz, depth {:.4}, width {:.3} MHz", d.center_mhz, d.depth, d.linewidth_mhz);
        t.push_numbers(&[d.center_mhz, d.depth, d.linewidth_mhz]);
    }
    for (i, o) in fit.pair_offsets_mhz().iter().enumerate() {
        println!("pair {i}: offset {o:.3} MHz");
    }
    println!("contrast {:.4}", fit.contrast());
    let _lock = OutputLock::acquire(&cfg.output.directory)?;
    io::write_csv(&cfg.output.directory.join("odmr_fit.csv"), &t).map_err(PipelineError::from)?;
    Ok(0)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Optics => run_stage_list(&cfg, &[Stage::Optics]),
        Command::Nanojet { dx } => {
            let mut cfg = cfg;
            if let Some(dx) = dx {
                cfg.fdtd.dx_nm = dx;
                cfg.validate()?;
            }
            run_stage_list(&cfg, &[Stage::Nanojet])
        }
        Command::Scan => run_stage_list(&cfg, &[Stage::Scan]),
        Command::Psf { input: Some(p) } => fit_profile_file(&cfg, &p),
        Command::Psf { input: None } => run_stage_list(&cfg, &[Stage::Psf]),
        Command::G2 {
            channel_a: Some(a),
            channel_b: Some(b),
        } => correlate_files(&cfg, &a, &b),
        Command::G2 { .. } => run_stage_list(&cfg, &[Stage::G2]),
        Command::Odmr { input: Some(p), dips } => fit_spectrum_file(&cfg, &p, dips),
        Command::Odmr { input: None, .. } => run_stage_list(&cfg, &[Stage::Odmr]),
        Command::Pipeline => run_stage_list(&cfg, &Stage::ALL),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let code = f.code();
            match &f {
                Failure::Config(e) => eprintln!("config error: {e}"),
                Failure::Stage(s) => eprintln!("error: {s}"),
                Failure::Pipeline(e) => eprintln!("error: {e}"),
                Failure::Other(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(code)
        }
    }
}
