//! Scenario orchestration: runs the optics, nanojet, scan, PSF, photon
//! statistics and ODMR stages, writes their artifacts and collects headline
//! numbers with tolerance checks into a [`RunReport`].

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, OutputFormat, ScenarioConfig};
use crate::fdtd::{build_scene, extract_focus, run_fdtd, FdtdError, FocusMetrics};
use crate::field::FieldGrid;
use crate::io::{self, fmt_num, IoError, Raster, Table};
use crate::odmr::{
    self, fit_odmr_with, frequency_grid, spectrum_for_axes, with_shot_noise, MagneticField, OdmrError, OdmrFitOptions, OdmrSpectrum,
};
use crate::optics::{
    self, focal_length, magnification, paraxial_focal_length, plane_magnification, relative_index,
    virtual_image_distance, ImagingSystem, Microsphere, OpticsError,
};
use crate::photon::{
    fit_g2_with, g2_zero_analytic, hbt_correlate, simulate_stream, CorrelationHistogram, Emitter, EmitterEnsemble,
    G2Fit, PhotonError,
};
use crate::psf::{fit_gaussian_1d_with, select_peak_count_with, FitError, Profile1D};
use crate::scan::{
    emitter_rate, image_position, psf_model, render_scan, render_zstack, sample_defects, snr, DefectSite, PsfMode,
    PsfSpec, Roi, SampleRegion, ScanError, ScanGrid, ScanMap, ScanSettings, ZStackGrid, FOOTPRINT_FRACTION,
};
use crate::svg::{self, ColorScale, Series};

pub const LOCK_FILE: &str = ".msa.lock";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Fdtd(#[from] FdtdError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Photon(#[from] PhotonError),
    #[error(transparent)]
    Odmr(#[from] OdmrError),
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
}

impl PipelineError {
    /// Process exit code: 2 for configuration problems, 3 for numerical
    /// failures, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Optics(_) => 2,
            Self::Fdtd(e) => match e {
                FdtdError::Instability { .. } | FdtdError::NoFocus(_) | FdtdError::Truncation { .. } => 3,
                _ => 2,
            },
            Self::Scan(e) => match e {
                ScanError::ZeroNoise | ScanError::EmptyRoi => 3,
                _ => 2,
            },
            Self::Fit(_) => 3,
            Self::Photon(e) => match e {
                PhotonError::InvalidEmitter(_) | PhotonError::InvalidArgument(_) => 2,
                _ => 3,
            },
            Self::Odmr(e) => match e {
                OdmrError::InvalidParameter(_)
                | OdmrError::AxisIndex(_)
                | OdmrError::GridCoverage { .. }
                | OdmrError::NoDirection => 2,
                _ => 3,
            },
            Self::Io(_) | Self::Locked(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Optics,
    Nanojet,
    Scan,
    Psf,
    G2,
    Odmr,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Optics, Stage::Nanojet, Stage::Scan, Stage::Psf, Stage::G2, Stage::Odmr];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Optics => "optics",
            Stage::Nanojet => "nanojet",
            Stage::Scan => "scan",
            Stage::Psf => "psf",
            Stage::G2 => "g2",
            Stage::Odmr => "odmr",
        }
    }
}

/// A reported number with an optional acceptance interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Headline {
    pub stage: Stage,
    pub key: String,
    pub value: f64,
    pub unit: String,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// File the value was written to.
    pub artifact: PathBuf,
}

impl Headline {
    pub fn passed(&self) -> Option<bool> {
        if self.min.is_none() && self.max.is_none() {
            return None;
        }
        let lo = self.min.is_none_or(|m| self.value >= m);
        let hi = self.max.is_none_or(|m| self.value <= m);
        Some(lo && hi)
    }

    fn status(&self) -> &'static str {
        match self.passed() {
            None => "info",
            Some(true) => "pass",
            Some(false) => "FAIL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub headlines: Vec<Headline>,
    /// Every file written, in order.
    pub artifacts: Vec<PathBuf>,
    pub completed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

impl RunReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.headlines.iter().find(|h| h.key == key).map(|h| h.value)
    }

    pub fn failures(&self) -> Vec<&Headline> {
        self.headlines.iter().filter(|h| h.passed() == Some(false)).collect()
    }

    pub fn all_passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["stage", "key", "value", "unit", "min", "max", "status", "artifact"]);
        for h in &self.headlines {
            t.push(vec![
                h.stage.name().to_string(),
                h.key.clone(),
                fmt_num(h.value),
                h.unit.clone(),
                h.min.map(fmt_num).unwrap_or_default(),
                h.max.map(fmt_num).unwrap_or_default(),
                h.status().to_string(),
                h.artifact.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            ]);
        }
        t
    }
}

/// A stage failed; the report holds everything finished before it.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: PipelineError,
    pub partial: RunReport,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {}", self.stage.name(), self.error)
    }
}

impl std::error::Error for StageFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Exclusive ownership of an output directory for the life of a run.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(dir.to_path_buf())),
            Err(source) => Err(IoError::Io { path, source }.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub format: OutputFormat,
    pub run_fdtd: bool,
}

impl RunOptions {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            out_dir: cfg.output.directory.clone(),
            format: cfg.output.format,
            run_fdtd: cfg.fdtd.enabled,
        }
    }
}

/// Independent seed for sub-scenario `tag` of a run with master `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

// Scenario computations (no file output)

#[derive(Debug, Clone, PartialEq)]
pub struct OpticsSummary {
    pub relative_index: f64,
    pub paraxial_focal_um: f64,
    pub focal_um: f64,
    pub virtual_image_um: f64,
    pub magnification: f64,
    /// `(z, M(z))` over the configured plane range.
    pub curve: Vec<(f64, f64)>,
}

impl OpticsSummary {
    pub fn at_plane(&self, z_um: f64, cfg: &ScenarioConfig) -> f64 {
        plane_magnification(z_um, cfg.optics.radius_um, cfg.optics.depth_um)
    }
}

pub fn optics_summary(cfg: &ScenarioConfig) -> Result<OpticsSummary, PipelineError> {
    let sphere = cfg.optics.sphere()?;
    let system = cfg.optics.system();
    let geom = cfg.optics.geometry();
    let n_r = relative_index(&sphere, &system);
    let curve = optics::magnification_curve(cfg.optics.z_min_um, cfg.optics.z_max_um, 37, &sphere, &geom)?;
    Ok(OpticsSummary {
        relative_index: n_r,
        paraxial_focal_um: paraxial_focal_length(sphere.radius_um, n_r),
        focal_um: focal_length(geom.transverse_offset_um, sphere.radius_um, n_r)?,
        virtual_image_um: virtual_image_distance(&sphere, &system, &geom)?,
        magnification: magnification(&sphere, &system, &geom)?,
        curve,
    })
}

/// The sphere-on-diamond nanojet scene of the `[fdtd]` section.
pub fn nanojet(cfg: &ScenarioConfig, dx_nm: f64) -> Result<(FieldGrid, FocusMetrics), PipelineError> {
    let f = &cfg.fdtd;
    let sphere = Microsphere::new(f.radius_um, f.n_sphere)?;
    let system = ImagingSystem {
        medium_index: cfg.optics.n_medium,
        excitation_wavelength_nm: f.wavelength_nm,
        ..ImagingSystem::default()
    };
    let scene = build_scene(Some(&sphere), &system, Some(f.n_substrate), f.domain(), dx_nm * 1e-3)?;
    info!("nanojet: {}x{} cells at dx = {dx_nm} nm", scene.nx, scene.ny);
    let field = run_fdtd(&scene, &f.solver())?;
    let focus = extract_focus(&field)?;
    Ok((field, focus))
}

fn sphere_and_psf(cfg: &ScenarioConfig, mode: PsfMode) -> Result<(Microsphere, PsfSpec), PipelineError> {
    let sphere = cfg.optics.sphere()?;
    let psf = psf_model(&sphere, cfg.optics.depth_um, mode)?;
    Ok((sphere, psf))
}

fn pixel_for(cfg: &ScenarioConfig, mode: PsfMode) -> f64 {
    match mode {
        PsfMode::Conventional => cfg.scan.conventional_pixel_nm,
        PsfMode::ThroughSphere { .. } => cfg.scan.sphere_pixel_nm,
    }
}

/// Dwell (ms) that gives `peak_counts` at the centre of an isolated defect.
fn dwell_for_peak(defect: &DefectSite, psf: &PsfSpec, power: f64, peak_counts: f64) -> f64 {
    let rate = emitter_rate(defect, power, psf.mode) * psf.rel_peak_intensity;
    peak_counts / rate * 1e3
}

/// The row through a single on-axis defect, with the calibrated background.
pub fn fwhm_profile(cfg: &ScenarioConfig, mode: PsfMode, seed: u64) -> Result<(PsfSpec, Profile1D), PipelineError> {
    let (_, psf) = sphere_and_psf(cfg, mode)?;
    let defect = DefectSite {
        depth_um: cfg.optics.depth_um,
        ..DefectSite::at(0.0, 0.0)
    };
    let pixel = pixel_for(cfg, mode);
    let half = (3.0 * psf.fwhm_image_nm() / pixel).ceil() as usize;
    let grid = ScanGrid::centered(2 * half + 1, 3, pixel);
    let settings = ScanSettings {
        dwell_ms: dwell_for_peak(&defect, &psf, cfg.scan.power, cfg.scan.fit_peak_counts),
        power: cfg.scan.power,
    };
    let map = render_scan(&[defect], &psf, &cfg.scan.background, &settings, &grid, seed)?;
    let (x, v) = map.row_profile(1);
    Ok((psf, Profile1D::new(x, v)?))
}

/// Sample-referred FWHM fitted to a rendered single defect.
pub fn fwhm_roundtrip(cfg: &ScenarioConfig, mode: PsfMode, seed: u64) -> Result<f64, PipelineError> {
    let (psf, profile) = fwhm_profile(cfg, mode, seed)?;
    Ok(fit_gaussian_1d_with(&profile, &cfg.fit)?.fwhm_nm / psf.magnification)
}

/// A line scan across two defects `pair_separation` apart.
pub fn pair_profile(cfg: &ScenarioConfig, mode: PsfMode, seed: u64) -> Result<Profile1D, PipelineError> {
    let (_, psf) = sphere_and_psf(cfg, mode)?;
    let half_sep = 0.5e-3 * cfg.scan.pair_separation_nm;
    let defects = [-half_sep, half_sep].map(|x| DefectSite {
        depth_um: cfg.optics.depth_um,
        ..DefectSite::at(x, 0.0)
    });
    let peak = match mode {
        PsfMode::Conventional => cfg.scan.pair_peak_counts_conventional,
        PsfMode::ThroughSphere { .. } => cfg.scan.pair_peak_counts_sphere,
    };
    let pixel = pixel_for(cfg, mode);
    // +-(half separation + 2.5 sample-referred FWHM)
    let reach_nm = (1e3 * half_sep + 2.5 * psf.fwhm_sample_nm) * psf.magnification;
    let half = (reach_nm / pixel).round() as usize;
    let grid = ScanGrid::centered(2 * half + 1, 3, pixel);
    let settings = ScanSettings {
        dwell_ms: dwell_for_peak(&defects[0], &psf, cfg.scan.power, peak),
        power: cfg.scan.power,
    };
    let map = render_scan(&defects, &psf, &cfg.scan.background, &settings, &grid, seed)?;
    let (x, v) = map.row_profile(1);
    Ok(Profile1D::new(x, v)?)
}

/// Number of peaks chosen by the information criterion for the pair scan.
pub fn resolvability_trial(cfg: &ScenarioConfig, mode: PsfMode, seed: u64) -> Result<usize, PipelineError> {
    let profile = pair_profile(cfg, mode, seed)?;
    Ok(select_peak_count_with(&profile, &cfg.fit)?.chosen_k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnrTrial {
    pub conventional: f64,
    pub sphere: f64,
    pub conventional_map: ScanMap,
    pub sphere_map: ScanMap,
    pub defects: Vec<DefectSite>,
}

impl SnrTrial {
    pub fn ratio(&self) -> f64 {
        self.sphere / self.conventional
    }
}

fn snr_of(map: &ScanMap, defects: &[DefectSite], target: usize, psf: &PsfSpec) -> Result<f64, PipelineError> {
    let fwhm_um = psf.fwhm_image_nm() * 1e-3;
    let spots: Vec<(f64, f64)> = defects.iter().map(|d| image_position(d, psf)).collect();
    let signal = Roi::disk(map, spots[target], 0.5 * fwhm_um);
    let background = Roi::away_from(map, &spots, 2.0 * fwhm_um);
    Ok(snr(map, &signal, &background)?)
}

/// Conventional and through-sphere scans of one random defect field; the
/// SNR is taken on the defect nearest the sphere axis.
pub fn snr_trial(cfg: &ScenarioConfig, seed: u64) -> Result<SnrTrial, PipelineError> {
    let s = &cfg.scan;
    let region = SampleRegion {
        width_um: s.region_um,
        height_um: s.region_um,
    };
    let sphere = cfg.optics.sphere()?;
    let defects: Vec<DefectSite> = sample_defects(s.density_per_um2, region, seed)?
        .into_iter()
        .filter(|d| d.lateral_offset_um() <= FOOTPRINT_FRACTION * sphere.radius_um)
        .collect();
    if defects.is_empty() {
        return Err(ScanError::EmptyRoi.into());
    }
    // nearest to the axis among defects with no neighbour within two
    // conventional FWHMs, falling back to the nearest overall
    let isolation_um = 2e-3 * crate::scan::CONVENTIONAL_FWHM_NM;
    let isolated = |i: usize| {
        let (x, y) = defects[i].position_um;
        defects
            .iter()
            .enumerate()
            .all(|(j, d)| j == i || (d.position_um.0 - x).hypot(d.position_um.1 - y) > isolation_um)
    };
    let by_offset = |&a: &usize, &b: &usize| defects[a].lateral_offset_um().total_cmp(&defects[b].lateral_offset_um());
    let target = (0..defects.len())
        .filter(|&i| isolated(i))
        .min_by(by_offset)
        .or_else(|| (0..defects.len()).min_by(by_offset))
        .unwrap_or(0);
    let settings = ScanSettings {
        dwell_ms: s.dwell_ms,
        power: s.power,
    };
    let mut out = Vec::with_capacity(2);
    for (k, mode) in [PsfMode::Conventional, cfg.through_sphere()].into_iter().enumerate() {
        let (_, psf) = sphere_and_psf(cfg, mode)?;
        let pixel = pixel_for(cfg, mode);
        let n = (s.region_um * psf.magnification * 1e3 / pixel).round() as usize + 1;
        let grid = ScanGrid::centered(n, n, pixel);
        let map = render_scan(&defects, &psf, &s.background, &settings, &grid, derive_seed(seed, k as u64))?;
        let value = snr_of(&map, &defects, target, &psf)?;
        out.push((value, map));
    }
    let (sphere_snr, sphere_map) = out.pop().unwrap();
    let (conv_snr, conv_map) = out.pop().unwrap();
    Ok(SnrTrial {
        conventional: conv_snr,
        sphere: sphere_snr,
        conventional_map: conv_map,
        sphere_map,
        defects,
    })
}

/// Mean SNR ratio over `snr_seeds` defect fields.
pub fn snr_ratio(cfg: &ScenarioConfig, seed: u64) -> Result<(f64, Vec<SnrTrial>), PipelineError> {
    let trials = (0..cfg.scan.snr_seeds as u64)
        .map(|k| snr_trial(cfg, derive_seed(seed, 100 + k)))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = trials.iter().map(SnrTrial::ratio).sum::<f64>() / trials.len() as f64;
    Ok((mean, trials))
}

#[derive(Debug, Clone, PartialEq)]
pub struct G2Scenario {
    pub key: &'static str,
    pub label: &'static str,
    pub ensemble: EmitterEnsemble,
    /// Acceptance interval for the fitted `g0`.
    pub bounds: (f64, f64),
}

/// Reference emitter configurations and the merged-pair scenario.
pub fn g2_scenarios(cfg: &ScenarioConfig) -> Result<Vec<G2Scenario>, PipelineError> {
    let g = &cfg.g2;
    let t = g.total_rate_cps;
    let make = |rates: Vec<f64>, blink: bool| EmitterEnsemble {
        emitters: rates
            .into_iter()
            .map(|r| Emitter {
                tau_c_ns: g.tau_c_ns,
                blinking: blink.then_some(g.blinking),
                ..Emitter::new(r)
            })
            .collect(),
        background_cps: 0.0,
    };
    let around = |rates: &[f64]| -> Result<(f64, f64), PipelineError> {
        let g0 = g2_zero_analytic(rates)?;
        Ok((g0 - g.g0_tolerance, g0 + g.g0_tolerance))
    };
    let cases = [
        ("g0_single", "1 emitter", vec![t]),
        ("g0_two_equal", "2 equal emitters", vec![t / 2.0; 2]),
        ("g0_three_equal", "3 equal emitters", vec![t / 3.0; 3]),
        ("g0_two_to_one", "2 emitters, rates 2:1", vec![2.0 * t / 3.0, t / 3.0]),
    ];
    let mut out = Vec::new();
    for (key, label, rates) in cases {
        out.push(G2Scenario {
            key,
            label,
            bounds: around(&rates)?,
            ensemble: make(rates, false),
        });
    }
    out.push(G2Scenario {
        key: "g0_merged_pair",
        label: "merged blinking pair",
        ensemble: make(g.merged_rates_cps.clone(), true),
        bounds: (g.merged_g0_min, g.merged_g0_max),
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct G2Outcome {
    pub detections: usize,
    pub histogram: CorrelationHistogram,
    pub fit: G2Fit,
}

pub fn run_g2(cfg: &ScenarioConfig, ensemble: &EmitterEnsemble, seed: u64) -> Result<G2Outcome, PipelineError> {
    let stream = simulate_stream(ensemble, cfg.g2.duration_s, seed)?;
    let histogram = hbt_correlate(&stream, cfg.g2.bin_ns, cfg.g2.window_ns)?;
    let fit = fit_g2_with(&histogram, &cfg.fit)?;
    Ok(G2Outcome {
        detections: stream.detections(),
        histogram,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdmrOutcome {
    pub field: MagneticField,
    pub merged: OdmrSpectrum,
    pub resolved: OdmrSpectrum,
    /// Outer and inner half-splittings of the merged fit.
    pub merged_offsets_mhz: Vec<f64>,
    pub resolved_offset_mhz: f64,
    /// Dip depth of the noiseless resolved spectrum at the other defect's
    /// resonances, relative to its own dip depth.
    pub crosstalk: f64,
    pub zero_field: [OdmrSpectrum; 2],
    /// Fitted zero-field contrasts, conventional then through the sphere.
    pub contrasts: [f64; 2],
}

pub fn odmr_scenarios(cfg: &ScenarioConfig, seed: u64) -> Result<OdmrOutcome, PipelineError> {
    let d = &cfg.odmr;
    let field = d.field()?;
    let grid = frequency_grid(d.freq_min_mhz, d.freq_max_mhz, d.points);
    let conv = d.model(d.contrast_conventional);
    let sph = d.model(d.contrast_sphere);
    let opts = OdmrFitOptions {
        lm: cfg.fit,
        ..OdmrFitOptions::default()
    };
    let fit = |s: &OdmrSpectrum, n| fit_odmr_with(s, n, &opts);
    let noisy = |s: OdmrSpectrum, tag| with_shot_noise(&s, d.counts_per_point, derive_seed(seed, tag));

    let merged = noisy(spectrum_for_axes(&[d.axis_a, d.axis_b], &conv, &field, &grid)?, 1);
    let merged_offsets_mhz = fit(&merged, 4)?.pair_offsets_mhz();

    // the microsphere isolates the defect on axis_a
    let clean = spectrum_for_axes(&[d.axis_a], &sph, &field, &grid)?;
    let other = sph.splitting(&field, d.axis_b)?;
    let own = sph.splitting(&field, d.axis_a)?;
    let centre = sph.zero_field_splitting_mhz;
    let depth_at = |f: f64| {
        0.5 * sph.contrast
            * (odmr::lorentzian(f, centre - own, sph.linewidth_mhz) + odmr::lorentzian(f, centre + own, sph.linewidth_mhz))
    };
    let own_depth = depth_at(centre + own);
    let leak = depth_at(centre - other).max(depth_at(centre + other));
    let resolved = noisy(clean, 2);
    let resolved_offset_mhz = fit(&resolved, 2)?.pair_offsets_mhz()[0];

    let zero = MagneticField::zero();
    let z_conv = noisy(spectrum_for_axes(&[d.axis_a], &conv, &zero, &grid)?, 3);
    let z_sph = noisy(spectrum_for_axes(&[d.axis_a], &sph, &zero, &grid)?, 4);
    let contrasts = [fit(&z_conv, 1)?.contrast(), fit(&z_sph, 1)?.contrast()];
    Ok(OdmrOutcome {
        field,
        merged,
        resolved,
        merged_offsets_mhz,
        resolved_offset_mhz,
        crosstalk: leak / own_depth,
        zero_field: [z_conv, z_sph],
        contrasts,
    })
}

// Stage runner

struct Run<'a> {
    cfg: &'a ScenarioConfig,
    opts: &'a RunOptions,
    seed: u64,
    report: RunReport,
}

struct Row {
    key: String,
    value: f64,
    unit: &'static str,
    min: Option<f64>,
    max: Option<f64>,
}

fn row(key: impl Into<String>, value: f64, unit: &'static str) -> Row {
    Row {
        key: key.into(),
        value,
        unit,
        min: None,
        max: None,
    }
}

impl Row {
    fn within(mut self, min: f64, max: f64) -> Self {
        self.min = Some(min);
        self.max = Some(max);
        self
    }

    fn at_least(mut self, min: f64) -> Self {
        self.min = Some(min);
        self
    }

    fn at_most(mut self, max: f64) -> Self {
        self.max = Some(max);
        self
    }
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.opts.out_dir.join(name)
    }

    fn table(&mut self, name: &str, table: &Table) -> Result<(), PipelineError> {
        if self.opts.format.csv() {
            let p = self.path(name);
            io::write_csv(&p, table)?;
            self.report.artifacts.push(p);
        }
        Ok(())
    }

    fn svg(&mut self, name: &str, content: &str) -> Result<(), PipelineError> {
        if self.opts.format.svg() {
            let p = self.path(name);
            svg::emit_svg(&p, content)?;
            self.report.artifacts.push(p);
        }
        Ok(())
    }

    fn raster(&mut self, name: &str, raster: &Raster) -> Result<(), PipelineError> {
        let p = self.path(name);
        io::write_raster(&p, raster)?;
        self.report.artifacts.push(p);
        Ok(())
    }

    fn scan_outputs(&mut self, stem: &str, map: &ScanMap, scale: ColorScale) -> Result<(), PipelineError> {
        self.table(&format!("{stem}.csv"), &io::scan_table(map))?;
        self.raster(&format!("{stem}.raster"), &Raster::from_scan(map))?;
        let values: Vec<f64> = map.counts.iter().map(|&c| c as f64).collect();
        self.svg(&format!("{stem}.svg"), &svg::heatmap(&values, map.nx, map.ny, scale, stem))
    }

    /// Writes `<stage>_summary.csv` and records the rows as headlines.
    fn summary(&mut self, stage: Stage, rows: Vec<Row>) -> Result<(), PipelineError> {
        let path = self.path(&format!("{}_summary.csv", stage.name()));
        let mut t = Table::new(&["key", "value", "unit"]);
        for r in &rows {
            t.push(vec![r.key.clone(), fmt_num(r.value), r.unit.to_string()]);
        }
        io::write_csv(&path, &t)?;
        self.report.artifacts.push(path.clone());
        for r in rows {
            self.report.headlines.push(Headline {
                stage,
                key: r.key,
                value: r.value,
                unit: r.unit.to_string(),
                min: r.min,
                max: r.max,
                artifact: path.clone(),
            });
        }
        Ok(())
    }

    fn optics(&mut self) -> Result<(), PipelineError> {
        let s = optics_summary(self.cfg)?;
        let mut t = Table::new(&["z_um", "magnification"]);
        for &(z, m) in &s.curve {
            t.push_numbers(&[z, m]);
        }
        self.table("optics_curve.csv", &t)?;
        let series = Series {
            label: "M(z)".into(),
            points: s.curve.clone(),
        };
        self.svg("optics_curve.svg", &svg::line_plot(&[series], "z (um)", "magnification", "Virtual-image magnification"))?;
        let at = |z| s.at_plane(z, self.cfg);
        self.summary(
            Stage::Optics,
            vec![
                row("relative_index", s.relative_index, ""),
                row("paraxial_focal_length", s.paraxial_focal_um, "um"),
                row("focal_length", s.focal_um, "um"),
                row("virtual_image_distance", s.virtual_image_um, "um"),
                row("magnification", s.magnification, ""),
                row("magnification_z9", at(-9.0), "").within(1.83, 1.95),
                row("magnification_z13", at(-13.0), "").within(2.26, 2.30),
                row("magnification_z15", at(-15.0), "").within(2.40, 2.55),
            ],
        )
    }

    fn nanojet(&mut self) -> Result<(), PipelineError> {
        let t0 = Instant::now();
        let (field, focus) = nanojet(self.cfg, self.cfg.fdtd.dx_nm)?;
        let elapsed = t0.elapsed().as_secs_f64();
        self.raster("nanojet.raster", &Raster::from_field(&field))?;
        let col = focus.peak_col;
        let mut axis = Table::new(&["y_um", "intensity"]);
        let mut pts = Vec::new();
        for r in 0..field.ny {
            axis.push_numbers(&[field.y_at(r), field.get(col, r)]);
            pts.push((field.y_at(r), field.get(col, r)));
        }
        self.table("nanojet_axis.csv", &axis)?;
        self.svg(
            "nanojet.svg",
            &svg::heatmap(&field.values, field.nx, field.ny, ColorScale::Log, "|E|^2 (log)"),
        )?;
        self.svg(
            "nanojet_axis.svg",
            &svg::line_plot(&[Series { label: "|E|^2 on axis".into(), points: pts }], "y (um)", "|E|^2", "Nanojet axis"),
        )?;
        let f = &self.cfg.fdtd;
        self.summary(
            Stage::Nanojet,
            vec![
                row("waist_fwhm", focus.waist_fwhm_nm, "nm").within(f.waist_min_nm, f.waist_max_nm),
                row("focus_y", focus.peak_y_um, "um").at_most(0.0),
                row("peak_enhancement", focus.peak_enhancement, ""),
                row("fdtd_seconds", elapsed, "s"),
            ],
        )
    }

    fn scan(&mut self) -> Result<(), PipelineError> {
        let cfg = self.cfg;
        let (mean_ratio, trials) = snr_ratio(cfg, derive_seed(self.seed, 1))?;
        let mut t = Table::new(&["trial", "defects", "snr_conventional", "snr_sphere", "ratio"]);
        for (k, tr) in trials.iter().enumerate() {
            t.push_numbers(&[k as f64, tr.defects.len() as f64, tr.conventional, tr.sphere, tr.ratio()]);
        }
        self.table("snr_trials.csv", &t)?;
        let first = &trials[0];
        self.scan_outputs("scan_conventional", &first.conventional_map, ColorScale::Linear)?;
        self.scan_outputs("scan_sphere", &first.sphere_map, ColorScale::Linear)?;

        let sphere = cfg.optics.sphere()?;
        let zgrid = ZStackGrid {
            nx: 101,
            pixel_nm: 100.0,
            y_um: 0.0,
            z_min_um: -20.0,
            z_max_um: 3.0,
            nz: 116,
        };
        let settings = ScanSettings {
            dwell_ms: cfg.scan.dwell_ms,
            power: cfg.scan.power,
        };
        let line: Vec<DefectSite> = [-1.5, 0.0, 1.5, 6.0]
            .iter()
            .map(|&x| DefectSite {
                depth_um: cfg.optics.depth_um,
                ..DefectSite::at(x, 0.0)
            })
            .collect();
        let stack = render_zstack(
            &line,
            &cfg.optics.system(),
            Some(&sphere),
            &cfg.scan.background,
            &settings,
            &zgrid,
            derive_seed(self.seed, 2),
        )?;
        self.scan_outputs("zstack", &stack, ColorScale::Log)?;
        let n = trials.len() as f64;
        self.summary(
            Stage::Scan,
            vec![
                row("snr_conventional", trials.iter().map(|t| t.conventional).sum::<f64>() / n, ""),
                row("snr_sphere", trials.iter().map(|t| t.sphere).sum::<f64>() / n, ""),
                row("snr_ratio", mean_ratio, "").at_least(cfg.scan.snr_min_ratio),
            ],
        )
    }

    fn psf(&mut self) -> Result<(), PipelineError> {
        let cfg = self.cfg;
        let s = &cfg.scan;
        let modes = [
            ("conventional", PsfMode::Conventional),
            ("sphere_best_focus", cfg.through_sphere()),
            ("sphere_sharp", PsfMode::ThroughSphere { z_plane_um: s.sharp_plane_um }),
        ];
        let mut rows = Vec::new();
        let mut table = Table::new(&["mode", "seed", "fwhm_nm"]);
        for (i, (name, mode)) in modes.iter().enumerate() {
            let (_, psf) = sphere_and_psf(cfg, *mode)?;
            let target = psf.fwhm_sample_nm;
            let mut worst: f64 = 0.0;
            let mut sum = 0.0;
            for k in 0..s.fit_seeds as u64 {
                let w = fwhm_roundtrip(cfg, *mode, derive_seed(self.seed, 1000 * (i as u64 + 1) + k))?;
                table.push(vec![name.to_string(), k.to_string(), fmt_num(w)]);
                worst = worst.max((w - target).abs());
                sum += w;
            }
            rows.push(row(format!("fwhm_{name}"), sum / s.fit_seeds as f64, "nm"));
            rows.push(row(format!("fwhm_{name}_max_deviation"), worst, "nm").at_most(s.fwhm_tolerance_nm));
        }
        self.table("psf_fwhm_trials.csv", &table)?;
        let (_, example) = fwhm_profile(cfg, modes[0].1, derive_seed(self.seed, 999))?;
        self.table("psf_profile_conventional.csv", &io::profile_table(&example))?;

        let mut picks = Table::new(&["mode", "seed", "chosen_k"]);
        for (name, mode, want) in [
            ("conventional", PsfMode::Conventional, 1),
            ("sphere_sharp", PsfMode::ThroughSphere { z_plane_um: s.sharp_plane_um }, 2),
        ] {
            let mut correct = 0;
            for k in 0..s.fit_seeds as u64 {
                let chosen = resolvability_trial(cfg, mode, derive_seed(self.seed, 5000 + k))?;
                picks.push(vec![name.to_string(), k.to_string(), chosen.to_string()]);
                correct += usize::from(chosen == want);
            }
            rows.push(row(format!("pair_k{want}_{name}"), correct as f64, "seeds").at_least(s.pair_min_correct as f64));
        }
        self.table("psf_pair_selection.csv", &picks)?;
        let profile = pair_profile(cfg, PsfMode::ThroughSphere { z_plane_um: s.sharp_plane_um }, derive_seed(self.seed, 5000))?;
        self.table("psf_pair_profile_sphere.csv", &io::profile_table(&profile))?;
        self.summary(Stage::Psf, rows)
    }

    fn g2(&mut self) -> Result<(), PipelineError> {
        let mut rows = Vec::new();
        let mut series = Vec::new();
        let mut fits = Table::new(&["scenario", "detections", "g0", "g0_err", "tau_c_ns", "baseline"]);
        for (i, sc) in g2_scenarios(self.cfg)?.into_iter().enumerate() {
            let out = run_g2(self.cfg, &sc.ensemble, derive_seed(self.seed, 10 + i as u64))?;
            self.table(&format!("g2_{}.csv", sc.key), &io::histogram_table(&out.histogram))?;
            fits.push(vec![
                sc.key.to_string(),
                out.detections.to_string(),
                fmt_num(out.fit.g0),
                fmt_num(out.fit.g0_err),
                fmt_num(out.fit.tau_c_ns),
                fmt_num(out.fit.baseline),
            ]);
            series.push(Series {
                label: sc.label.to_string(),
                points: out.histogram.tau_ns.iter().copied().zip(out.histogram.g2.iter().copied()).collect(),
            });
            rows.push(row(sc.key, out.fit.g0, "").within(sc.bounds.0, sc.bounds.1));
            rows.push(row(format!("{}_detections", sc.key), out.detections as f64, "").at_least(1e6));
        }
        self.table("g2_fits.csv", &fits)?;
        self.svg("g2.svg", &svg::line_plot(&series, "tau (ns)", "g2(tau)", "Photon correlations"))?;
        self.summary(Stage::G2, rows)
    }

    fn odmr(&mut self) -> Result<(), PipelineError> {
        let d = &self.cfg.odmr;
        let out = odmr_scenarios(self.cfg, derive_seed(self.seed, 3))?;
        self.table("odmr_merged.csv", &io::spectrum_table(&out.merged))?;
        self.table("odmr_resolved.csv", &io::spectrum_table(&out.resolved))?;
        self.table("odmr_zero_field_conventional.csv", &io::spectrum_table(&out.zero_field[0]))?;
        self.table("odmr_zero_field_sphere.csv", &io::spectrum_table(&out.zero_field[1]))?;
        let pts = |s: &OdmrSpectrum| s.frequencies_mhz.iter().copied().zip(s.normalized_pl.iter().copied()).collect();
        self.svg(
            "odmr.svg",
            &svg::line_plot(
                &[
                    Series { label: "merged".into(), points: pts(&out.merged) },
                    Series { label: "resolved".into(), points: pts(&out.resolved) },
                ],
                "frequency (MHz)",
                "normalised PL",
                "ODMR",
            ),
        )?;
        let tol = d.offset_tolerance_mhz;
        let (a, b) = (d.splitting_a_mhz.max(d.splitting_b_mhz), d.splitting_a_mhz.min(d.splitting_b_mhz));
        let model = d.model(d.contrast_sphere);
        let resolved_target = model.splitting(&out.field, d.axis_a)?;
        let ct = d.contrast_tolerance;
        self.summary(
            Stage::Odmr,
            vec![
                row("merged_offset_outer", out.merged_offsets_mhz[0], "MHz").within(a - tol, a + tol),
                row("merged_offset_inner", out.merged_offsets_mhz[1], "MHz").within(b - tol, b + tol),
                row("resolved_offset", out.resolved_offset_mhz, "MHz").within(resolved_target - tol, resolved_target + tol),
                row("resolved_crosstalk", out.crosstalk, "").at_most(1e-2),
                row("contrast_conventional", out.contrasts[0], "")
                    .within(d.contrast_conventional - ct, d.contrast_conventional + ct),
                row("contrast_sphere", out.contrasts[1], "").within(d.contrast_sphere - ct, d.contrast_sphere + ct),
                row("zeeman_gamma", odmr::GYROMAGNETIC_MHZ_PER_GAUSS, "MHz/G"),
            ],
        )
    }

    fn stage(&mut self, stage: Stage) -> Result<(), PipelineError> {
        match stage {
            Stage::Optics => self.optics(),
            Stage::Nanojet => self.nanojet(),
            Stage::Scan => self.scan(),
            Stage::Psf => self.psf(),
            Stage::G2 => self.g2(),
            Stage::Odmr => self.odmr(),
        }
    }
}

/// Runs the given stages in order. `report.csv` is written even when a
/// stage fails.
pub fn run_stages(cfg: &ScenarioConfig, opts: &RunOptions, stages: &[Stage]) -> Result<RunReport, Box<StageFailure>> {
    let fail = |stage, error, partial| Box::new(StageFailure { stage, error, partial });
    let lock = match OutputLock::acquire(&opts.out_dir) {
        Ok(l) => l,
        Err(e) => return Err(fail(stages.first().copied().unwrap_or(Stage::Optics), e, RunReport::default())),
    };
    let mut run = Run {
        cfg,
        opts,
        seed: cfg.scan.seed,
        report: RunReport::default(),
    };
    let mut failure = None;
    for &stage in stages {
        if stage == Stage::Nanojet && !opts.run_fdtd {
            info!("nanojet stage skipped");
            run.report.skipped.push(stage);
            continue;
        }
        let t0 = Instant::now();
        info!("stage {} started", stage.name());
        match run.stage(stage) {
            Ok(()) => {
                info!("stage {} finished in {:.1} s", stage.name(), t0.elapsed().as_secs_f64());
                run.report.completed.push(stage);
            }
            Err(e) => {
                failure = Some((stage, e));
                break;
            }
        }
    }
    let report_path = opts.out_dir.join(REPORT_FILE);
    let written = io::write_csv(&report_path, &run.report.to_table());
    if written.is_ok() {
        run.report.artifacts.push(report_path);
    }
    drop(lock);
    match (failure, written) {
        (Some((stage, e)), _) => Err(fail(stage, e, run.report)),
        (None, Err(e)) => Err(fail(*stages.last().unwrap_or(&Stage::Odmr), e.into(), run.report)),
        (None, Ok(())) => Ok(run.report),
    }
}

/// The full pipeline: optics, nanojet (unless disabled), scan, PSF fits,
/// photon statistics and ODMR.
pub fn run_pipeline(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<RunReport, Box<StageFailure>> {
    run_stages(cfg, opts, &Stage::ALL)
}
