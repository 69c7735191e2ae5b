//! Scenario configuration: a sectioned `key = value` text format with unit
//! suffixes. Every key is optional; missing keys keep the calibrated
//! defaults, unknown keys are rejected.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fdtd::{Domain, FdtdConfig, DIAMOND_INDEX};
use crate::odmr::{
    direction_for_projections, MagneticField, OdmrError, OdmrModel, CONVENTIONAL_CONTRAST, DEFAULT_LINEWIDTH_MHZ,
    THROUGH_SPHERE_CONTRAST,
};
use crate::optics::{EmitterGeometry, ImagingSystem, Microsphere, OIL_INDEX, SPHERE_INDEX};
use crate::photon::{Blinking, DEFAULT_BLINK_RATE_HZ, DEFAULT_TAU_C_NS};
use crate::psf::LmOptions;
use crate::scan::{BackgroundProfile, PsfMode, THROUGH_SPHERE_Z_RANGE_UM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Read { path: PathBuf, msg: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown section [{section}]")]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: unknown key '{key}' in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: '{key}' given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: unit '{unit}' does not fit '{key}' (expected {expected})")]
    UnitMismatch {
        line: usize,
        key: String,
        unit: String,
        expected: &'static str,
    },
    #[error("line {line}: bad value for '{key}': {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Svg,
    Both,
}

impl OutputFormat {
    pub fn csv(self) -> bool {
        matches!(self, Self::Csv | Self::Both)
    }

    pub fn svg(self) -> bool {
        matches!(self, Self::Svg | Self::Both)
    }
}

impl std::str::FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "svg" => Ok(Self::Svg),
            "both" => Ok(Self::Both),
            other => Err(format!("expected csv, svg or both, got '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpticsSection {
    pub radius_um: f64,
    pub n_sphere: f64,
    pub n_medium: f64,
    pub depth_um: f64,
    pub ray_height_um: f64,
    pub z_min_um: f64,
    pub z_max_um: f64,
}

impl Default for OpticsSection {
    fn default() -> Self {
        Self {
            radius_um: 10.0,
            n_sphere: SPHERE_INDEX,
            n_medium: OIL_INDEX,
            depth_um: 0.1,
            ray_height_um: 1.0,
            z_min_um: -18.0,
            z_max_um: -9.0,
        }
    }
}

impl OpticsSection {
    pub fn sphere(&self) -> Result<Microsphere, ConfigError> {
        Microsphere::new(self.radius_um, self.n_sphere).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn system(&self) -> ImagingSystem {
        ImagingSystem {
            medium_index: self.n_medium,
            ..ImagingSystem::default()
        }
    }

    pub fn geometry(&self) -> EmitterGeometry {
        EmitterGeometry {
            depth_um: self.depth_um,
            transverse_offset_um: self.ray_height_um,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdtdSection {
    pub enabled: bool,
    pub radius_um: f64,
    pub n_sphere: f64,
    pub n_substrate: f64,
    pub wavelength_nm: f64,
    pub dx_nm: f64,
    pub side_margin_um: f64,
    pub top_margin_um: f64,
    pub depth_um: f64,
    /// Fixed run length in optical periods; automatic when absent.
    pub periods: Option<f64>,
    pub waist_min_nm: f64,
    pub waist_max_nm: f64,
}

impl Default for FdtdSection {
    fn default() -> Self {
        Self {
            enabled: true,
            radius_um: 10.0,
            n_sphere: 2.0,
            n_substrate: DIAMOND_INDEX,
            wavelength_nm: 532.0,
            dx_nm: 14.0,
            side_margin_um: 2.0,
            top_margin_um: 1.0,
            depth_um: 16.0,
            periods: None,
            waist_min_nm: 160.0,
            waist_max_nm: 300.0,
        }
    }
}

impl FdtdSection {
    pub fn domain(&self) -> Domain {
        Domain::around_sphere(self.radius_um, self.side_margin_um, self.top_margin_um, self.depth_um)
    }

    pub fn solver(&self) -> FdtdConfig {
        FdtdConfig {
            wavelength_nm: self.wavelength_nm,
            run_periods: self.periods,
            ..FdtdConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSection {
    pub seed: u64,
    pub density_per_um2: f64,
    /// Side of the square sample region, centred on the sphere axis.
    pub region_um: f64,
    pub dwell_ms: f64,
    /// Excitation power in units of the saturation power.
    pub power: f64,
    pub z_plane_um: f64,
    /// Virtual plane of the sharpest (dimmer) image.
    pub sharp_plane_um: f64,
    pub conventional_pixel_nm: f64,
    pub sphere_pixel_nm: f64,
    pub background: BackgroundProfile,
    pub snr_seeds: usize,
    pub snr_min_ratio: f64,
    pub fit_seeds: usize,
    pub fit_peak_counts: f64,
    pub fwhm_tolerance_nm: f64,
    pub pair_separation_nm: f64,
    pub pair_peak_counts_conventional: f64,
    pub pair_peak_counts_sphere: f64,
    pub pair_min_correct: usize,
}

impl Default for ScanSection {
    fn default() -> Self {
        Self {
            seed: 1,
            density_per_um2: 1.5,
            region_um: 5.0,
            dwell_ms: 1.0,
            power: 2.0,
            z_plane_um: -13.0,
            sharp_plane_um: -17.0,
            conventional_pixel_nm: 90.0,
            sphere_pixel_nm: 100.0,
            background: BackgroundProfile::default(),
            snr_seeds: 10,
            snr_min_ratio: 3.5,
            fit_seeds: 20,
            fit_peak_counts: 1e4,
            fwhm_tolerance_nm: 10.0,
            pair_separation_nm: 150.0,
            pair_peak_counts_conventional: 200.0,
            pair_peak_counts_sphere: 150.0,
            pair_min_correct: 18,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct G2Section {
    pub duration_s: f64,
    pub tau_c_ns: f64,
    pub bin_ns: u64,
    pub window_ns: u64,
    /// Total detected rate shared by the emitters of each reference case.
    pub total_rate_cps: f64,
    pub merged_rates_cps: Vec<f64>,
    pub blinking: Blinking,
    pub g0_tolerance: f64,
    pub merged_g0_min: f64,
    pub merged_g0_max: f64,
}

impl Default for G2Section {
    fn default() -> Self {
        Self {
            duration_s: 2.0,
            tau_c_ns: DEFAULT_TAU_C_NS,
            bin_ns: 1,
            window_ns: 200,
            total_rate_cps: 1e6,
            merged_rates_cps: vec![1.5e6, 0.5e6],
            blinking: Blinking {
                on_rate_hz: DEFAULT_BLINK_RATE_HZ,
                off_rate_hz: DEFAULT_BLINK_RATE_HZ,
            },
            g0_tolerance: 0.03,
            merged_g0_min: 0.16,
            merged_g0_max: 0.30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdmrSection {
    pub field_gauss: f64,
    /// Target splittings on the two defect axes; the field direction is
    /// solved from them.
    pub splitting_a_mhz: f64,
    pub splitting_b_mhz: f64,
    pub axis_a: usize,
    pub axis_b: usize,
    pub linewidth_mhz: f64,
    pub contrast_conventional: f64,
    pub contrast_sphere: f64,
    pub freq_min_mhz: f64,
    pub freq_max_mhz: f64,
    pub points: usize,
    /// Detected counts per frequency point off resonance.
    pub counts_per_point: f64,
    pub offset_tolerance_mhz: f64,
    pub contrast_tolerance: f64,
}

impl Default for OdmrSection {
    fn default() -> Self {
        Self {
            field_gauss: 50.0,
            splitting_a_mhz: 118.0,
            splitting_b_mhz: 50.0,
            axis_a: 0,
            axis_b: 1,
            linewidth_mhz: DEFAULT_LINEWIDTH_MHZ,
            contrast_conventional: CONVENTIONAL_CONTRAST,
            contrast_sphere: THROUGH_SPHERE_CONTRAST,
            freq_min_mhz: 2600.0,
            freq_max_mhz: 3140.0,
            points: 1081,
            counts_per_point: 1e5,
            offset_tolerance_mhz: 2.0,
            contrast_tolerance: 0.01,
        }
    }
}

impl OdmrSection {
    pub fn model(&self, contrast: f64) -> OdmrModel {
        OdmrModel {
            linewidth_mhz: self.linewidth_mhz,
            contrast,
            ..OdmrModel::default()
        }
    }

    pub fn field(&self) -> Result<MagneticField, OdmrError> {
        if self.field_gauss == 0.0 {
            return Ok(MagneticField::zero());
        }
        let full = self.model(self.contrast_conventional).gyromagnetic_mhz_per_gauss * self.field_gauss;
        let dir = direction_for_projections(
            self.axis_a,
            self.axis_b,
            self.splitting_a_mhz / full,
            self.splitting_b_mhz / full,
        )?;
        MagneticField::new(self.field_gauss, dir)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub format: OutputFormat,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("msa-out"),
            format: OutputFormat::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioConfig {
    pub optics: OpticsSection,
    pub fdtd: FdtdSection,
    pub scan: ScanSection,
    pub g2: G2Section,
    pub odmr: OdmrSection,
    pub output: OutputSection,
    /// Convergence settings shared by every least-squares fit.
    pub fit: LmOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dim {
    Length,
    Frequency,
    Field,
    Time,
    Rate,
}

impl Dim {
    fn name(self) -> &'static str {
        match self {
            Dim::Length => "a length (um, nm, mm)",
            Dim::Frequency => "a frequency (hz, khz, mhz, ghz)",
            Dim::Field => "a magnetic field (g, mt)",
            Dim::Time => "a time (s, ms, us, ns)",
            Dim::Rate => "a count rate (cps, kcps, mcps)",
        }
    }
}

/// Unit suffixes and their SI factors.
const UNITS: [(&str, Dim, f64); 17] = [
    ("um", Dim::Length, 1e-6),
    ("nm", Dim::Length, 1e-9),
    ("mm", Dim::Length, 1e-3),
    ("hz", Dim::Frequency, 1.0),
    ("khz", Dim::Frequency, 1e3),
    ("mhz", Dim::Frequency, 1e6),
    ("ghz", Dim::Frequency, 1e9),
    ("g", Dim::Field, 1e-4),
    ("mt", Dim::Field, 1e-3),
    ("t", Dim::Field, 1.0),
    ("s", Dim::Time, 1.0),
    ("ms", Dim::Time, 1e-3),
    ("us", Dim::Time, 1e-6),
    ("ns", Dim::Time, 1e-9),
    ("cps", Dim::Rate, 1.0),
    ("kcps", Dim::Rate, 1e3),
    ("mcps", Dim::Rate, 1e6),
];

fn unit_factor(unit: &str) -> Option<(Dim, f64)> {
    UNITS.iter().find(|u| u.0 == unit).map(|u| (u.1, u.2))
}

struct Value<'a> {
    line: usize,
    key: &'a str,
    text: &'a str,
}

impl Value<'_> {
    fn bad(&self, msg: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            line: self.line,
            key: self.key.to_string(),
            msg: msg.into(),
        }
    }

    fn split_unit(text: &str) -> (&str, Option<String>) {
        let text = text.trim();
        if let Some((num, unit)) = text.split_once(char::is_whitespace) {
            return (num.trim(), Some(unit.trim().to_ascii_lowercase()));
        }
        if text.parse::<f64>().is_ok() {
            return (text, None);
        }
        let cut = text.trim_end_matches(|c: char| c.is_ascii_alphabetic()).len();
        let (num, unit) = text.split_at(cut);
        (num, (!unit.is_empty()).then(|| unit.to_ascii_lowercase()))
    }

    fn number_of(&self, text: &str) -> Result<f64, ConfigError> {
        let v: f64 = text.parse().map_err(|_| self.bad(format!("'{text}' is not a number")))?;
        if !v.is_finite() {
            return Err(self.bad("value must be finite"));
        }
        Ok(v)
    }

    /// Plain number, no unit allowed.
    fn number(&self) -> Result<f64, ConfigError> {
        let (num, unit) = Self::split_unit(self.text);
        if let Some(unit) = unit {
            return Err(ConfigError::UnitMismatch {
                line: self.line,
                key: self.key.to_string(),
                unit,
                expected: "a plain number",
            });
        }
        self.number_of(num)
    }

    fn quantity_of(&self, text: &str, dim: Dim, target: &str) -> Result<f64, ConfigError> {
        let (num, unit) = Self::split_unit(text);
        let v = self.number_of(num)?;
        let target_factor = unit_factor(target).map(|u| u.1).unwrap_or(1.0);
        let factor = match unit {
            None => target_factor,
            Some(u) => match unit_factor(&u) {
                Some((d, f)) if d == dim => f,
                _ => {
                    return Err(ConfigError::UnitMismatch {
                        line: self.line,
                        key: self.key.to_string(),
                        unit: u,
                        expected: dim.name(),
                    })
                }
            },
        };
        Ok(v * factor / target_factor)
    }

    /// Quantity converted to `target`; a bare number is taken in `target`.
    fn quantity(&self, dim: Dim, target: &str) -> Result<f64, ConfigError> {
        self.quantity_of(self.text, dim, target)
    }

    fn quantity_list(&self, dim: Dim, target: &str) -> Result<Vec<f64>, ConfigError> {
        self.text
            .split(',')
            .map(|t| self.quantity_of(t, dim, target))
            .collect()
    }

    fn count(&self) -> Result<usize, ConfigError> {
        self.text
            .trim()
            .parse()
            .map_err(|_| self.bad(format!("'{}' is not a non-negative integer", self.text.trim())))
    }

    fn integer(&self) -> Result<u64, ConfigError> {
        self.count().map(|v| v as u64)
    }

    fn boolean(&self) -> Result<bool, ConfigError> {
        match self.text.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            other => Err(self.bad(format!("'{other}' is not a boolean"))),
        }
    }
}

const SECTIONS: [&str; 7] = ["optics", "fdtd", "scan", "g2", "odmr", "output", "fit"];

fn apply(cfg: &mut ScenarioConfig, section: &str, v: &Value) -> Result<(), ConfigError> {
    use Dim::*;
    match (section, v.key) {
        ("optics", "radius") => cfg.optics.radius_um = v.quantity(Length, "um")?,
        ("optics", "n_sphere") => cfg.optics.n_sphere = v.number()?,
        ("optics", "n_medium") => cfg.optics.n_medium = v.number()?,
        ("optics", "depth") => cfg.optics.depth_um = v.quantity(Length, "um")?,
        ("optics", "ray_height") => cfg.optics.ray_height_um = v.quantity(Length, "um")?,
        ("optics", "z_min") => cfg.optics.z_min_um = v.quantity(Length, "um")?,
        ("optics", "z_max") => cfg.optics.z_max_um = v.quantity(Length, "um")?,

        ("fdtd", "enabled") => cfg.fdtd.enabled = v.boolean()?,
        ("fdtd", "radius") => cfg.fdtd.radius_um = v.quantity(Length, "um")?,
        ("fdtd", "n_sphere") => cfg.fdtd.n_sphere = v.number()?,
        ("fdtd", "n_substrate") => cfg.fdtd.n_substrate = v.number()?,
        ("fdtd", "wavelength") => cfg.fdtd.wavelength_nm = v.quantity(Length, "nm")?,
        ("fdtd", "dx") => cfg.fdtd.dx_nm = v.quantity(Length, "nm")?,
        ("fdtd", "side_margin") => cfg.fdtd.side_margin_um = v.quantity(Length, "um")?,
        ("fdtd", "top_margin") => cfg.fdtd.top_margin_um = v.quantity(Length, "um")?,
        ("fdtd", "depth") => cfg.fdtd.depth_um = v.quantity(Length, "um")?,
        ("fdtd", "periods") => {
            cfg.fdtd.periods = match v.text.trim() {
                "auto" => None,
                _ => Some(v.number()?),
            }
        }
        ("fdtd", "waist_min") => cfg.fdtd.waist_min_nm = v.quantity(Length, "nm")?,
        ("fdtd", "waist_max") => cfg.fdtd.waist_max_nm = v.quantity(Length, "nm")?,

        ("scan", "seed") => cfg.scan.seed = v.integer()?,
        ("scan", "density") => cfg.scan.density_per_um2 = v.number()?,
        ("scan", "region") => cfg.scan.region_um = v.quantity(Length, "um")?,
        ("scan", "dwell") => cfg.scan.dwell_ms = v.quantity(Time, "ms")?,
        ("scan", "power") => cfg.scan.power = v.number()?,
        ("scan", "z_plane") => cfg.scan.z_plane_um = v.quantity(Length, "um")?,
        ("scan", "sharp_plane") => cfg.scan.sharp_plane_um = v.quantity(Length, "um")?,
        ("scan", "conventional_pixel") => cfg.scan.conventional_pixel_nm = v.quantity(Length, "nm")?,
        ("scan", "sphere_pixel") => cfg.scan.sphere_pixel_nm = v.quantity(Length, "nm")?,
        ("scan", "background_surface") => cfg.scan.background.surface_level = v.quantity(Rate, "cps")?,
        ("scan", "background_above") => cfg.scan.background.above_surface_level = v.quantity(Rate, "cps")?,
        ("scan", "background_virtual") => cfg.scan.background.virtual_plane_level = v.quantity(Rate, "cps")?,
        ("scan", "background_decay") => cfg.scan.background.decay_into_bulk_um = v.quantity(Length, "um")?,
        ("scan", "snr_seeds") => cfg.scan.snr_seeds = v.count()?,
        ("scan", "snr_min_ratio") => cfg.scan.snr_min_ratio = v.number()?,
        ("scan", "fit_seeds") => cfg.scan.fit_seeds = v.count()?,
        ("scan", "fit_peak_counts") => cfg.scan.fit_peak_counts = v.number()?,
        ("scan", "fwhm_tolerance") => cfg.scan.fwhm_tolerance_nm = v.quantity(Length, "nm")?,
        ("scan", "pair_separation") => cfg.scan.pair_separation_nm = v.quantity(Length, "nm")?,
        ("scan", "pair_peak_counts_conventional") => cfg.scan.pair_peak_counts_conventional = v.number()?,
        ("scan", "pair_peak_counts_sphere") => cfg.scan.pair_peak_counts_sphere = v.number()?,
        ("scan", "pair_min_correct") => cfg.scan.pair_min_correct = v.count()?,

        ("g2", "duration") => cfg.g2.duration_s = v.quantity(Time, "s")?,
        ("g2", "tau_c") => cfg.g2.tau_c_ns = v.quantity(Time, "ns")?,
        ("g2", "bin") => cfg.g2.bin_ns = v.quantity(Time, "ns")?.round() as u64,
        ("g2", "window") => cfg.g2.window_ns = v.quantity(Time, "ns")?.round() as u64,
        ("g2", "total_rate") => cfg.g2.total_rate_cps = v.quantity(Rate, "cps")?,
        ("g2", "merged_rates") => cfg.g2.merged_rates_cps = v.quantity_list(Rate, "cps")?,
        ("g2", "blink_on_rate") => cfg.g2.blinking.on_rate_hz = v.quantity(Frequency, "hz")?,
        ("g2", "blink_off_rate") => cfg.g2.blinking.off_rate_hz = v.quantity(Frequency, "hz")?,
        ("g2", "g0_tolerance") => cfg.g2.g0_tolerance = v.number()?,
        ("g2", "merged_g0_min") => cfg.g2.merged_g0_min = v.number()?,
        ("g2", "merged_g0_max") => cfg.g2.merged_g0_max = v.number()?,

        ("odmr", "field") => cfg.odmr.field_gauss = v.quantity(Field, "g")?,
        ("odmr", "splitting_a") => cfg.odmr.splitting_a_mhz = v.quantity(Frequency, "mhz")?,
        ("odmr", "splitting_b") => cfg.odmr.splitting_b_mhz = v.quantity(Frequency, "mhz")?,
        ("odmr", "axis_a") => cfg.odmr.axis_a = v.count()?,
        ("odmr", "axis_b") => cfg.odmr.axis_b = v.count()?,
        ("odmr", "linewidth") => cfg.odmr.linewidth_mhz = v.quantity(Frequency, "mhz")?,
        ("odmr", "contrast_conventional") => cfg.odmr.contrast_conventional = v.number()?,
        ("odmr", "contrast_sphere") => cfg.odmr.contrast_sphere = v.number()?,
        ("odmr", "freq_min") => cfg.odmr.freq_min_mhz = v.quantity(Frequency, "mhz")?,
        ("odmr", "freq_max") => cfg.odmr.freq_max_mhz = v.quantity(Frequency, "mhz")?,
        ("odmr", "points") => cfg.odmr.points = v.count()?,
        ("odmr", "counts_per_point") => cfg.odmr.counts_per_point = v.number()?,
        ("odmr", "offset_tolerance") => cfg.odmr.offset_tolerance_mhz = v.quantity(Frequency, "mhz")?,
        ("odmr", "contrast_tolerance") => cfg.odmr.contrast_tolerance = v.number()?,

        ("output", "directory") => cfg.output.directory = PathBuf::from(v.text.trim()),
        ("fit", "gradient_tol") => cfg.fit.gradient_tol = v.number()?,
        ("fit", "step_tol") => cfg.fit.step_tol = v.number()?,
        ("fit", "max_iterations") => cfg.fit.max_iterations = v.count()?,

        ("output", "format") => cfg.output.format = v.text.trim().parse().map_err(|m: String| v.bad(m))?,

        _ => {
            return Err(ConfigError::UnknownKey {
                line: v.line,
                section: section.to_string(),
                key: v.key.to_string(),
            })
        }
    }
    Ok(())
}

pub fn parse_config_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = ScenarioConfig::default();
    let mut section: Option<&str> = None;
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() || content.starts_with(';') {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: "unterminated section header".into(),
            })?;
            let name = name.trim();
            section = Some(SECTIONS.iter().copied().find(|s| *s == name).ok_or_else(|| {
                ConfigError::UnknownSection {
                    line,
                    section: name.to_string(),
                }
            })?);
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            msg: format!("expected 'key = value', got '{content}'"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                msg: "empty key or value".into(),
            });
        }
        let sec = section.ok_or_else(|| ConfigError::Syntax {
            line,
            msg: format!("'{key}' appears before any section header"),
        })?;
        if !seen.insert((sec, key.to_string())) {
            return Err(ConfigError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
        apply(&mut cfg, sec, &Value { line, key, text: value })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    parse_config_str(&text)
}

impl ScenarioConfig {
    pub fn relative_index(&self) -> f64 {
        self.optics.n_sphere / self.optics.n_medium
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        let o = &self.optics;
        o.sphere()?;
        o.system().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(o.depth_um >= 0.0 && o.ray_height_um > 0.0 && o.ray_height_um < o.radius_um) {
            return inv("optics: need depth >= 0 and 0 < ray_height < radius".into());
        }
        if !(o.z_min_um < o.z_max_um && o.z_max_um <= 0.0) {
            return inv("optics: need z_min < z_max <= 0".into());
        }
        let f = &self.fdtd;
        if !(f.radius_um > 0.0
            && f.n_sphere >= 1.0
            && f.n_substrate >= 1.0
            && f.wavelength_nm > 0.0
            && f.dx_nm > 0.0
            && f.side_margin_um >= 0.0
            && f.top_margin_um >= 0.0
            && f.depth_um > 0.0
            && f.waist_min_nm < f.waist_max_nm)
        {
            return inv("fdtd: sizes, indices and wavelength must be positive".into());
        }
        if f.periods.is_some_and(|p| !(p > 0.0)) {
            return inv("fdtd: periods must be positive".into());
        }
        f.solver().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let s = &self.scan;
        if !(s.density_per_um2 >= 0.0 && s.region_um > 0.0 && s.dwell_ms > 0.0 && s.power > 0.0) {
            return inv("scan: density >= 0, region, dwell and power > 0".into());
        }
        let (lo, hi) = THROUGH_SPHERE_Z_RANGE_UM;
        for z in [s.z_plane_um, s.sharp_plane_um] {
            if !(lo..=hi).contains(&z) {
                return inv(format!("scan: virtual plane {z} um outside [{lo}, {hi}]"));
            }
        }
        if !(s.conventional_pixel_nm > 0.0 && s.sphere_pixel_nm > 0.0) {
            return inv("scan: pixel sizes must be positive".into());
        }
        s.background.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if s.snr_seeds == 0 || s.fit_seeds == 0 || s.pair_min_correct > s.fit_seeds {
            return inv("scan: seed counts must be positive and pair_min_correct <= fit_seeds".into());
        }
        if !(s.fit_peak_counts > 0.0 && s.pair_peak_counts_conventional > 0.0 && s.pair_peak_counts_sphere > 0.0) {
            return inv("scan: peak counts must be positive".into());
        }
        let g = &self.g2;
        if !(g.duration_s > 0.0 && g.tau_c_ns > 0.0 && g.total_rate_cps > 0.0) {
            return inv("g2: duration, tau_c and rate must be positive".into());
        }
        if g.bin_ns == 0 || g.window_ns == 0 || !g.window_ns.is_multiple_of(g.bin_ns) {
            return inv("g2: bin must be positive and divide the window".into());
        }
        if g.merged_rates_cps.is_empty() || g.merged_rates_cps.iter().any(|r| !(*r > 0.0)) {
            return inv("g2: merged_rates must be positive".into());
        }
        if !(g.blinking.on_rate_hz > 0.0 && g.blinking.off_rate_hz > 0.0) {
            return inv("g2: blink rates must be positive".into());
        }
        let d = &self.odmr;
        for c in [d.contrast_conventional, d.contrast_sphere] {
            d.model(c).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        d.field().map_err(|e| ConfigError::Invalid(format!("odmr: {e}")))?;
        if !(d.freq_min_mhz < d.freq_max_mhz && d.points >= 16 && d.counts_per_point > 0.0) {
            return inv("odmr: need freq_min < freq_max, points >= 16, counts_per_point > 0".into());
        }
        let f = &self.fit;
        if !(f.gradient_tol > 0.0 && f.step_tol > 0.0 && f.max_iterations > 0) {
            return inv("fit: tolerances and max_iterations must be positive".into());
        }
        Ok(())
    }

    pub fn through_sphere(&self) -> PsfMode {
        PsfMode::ThroughSphere {
            z_plane_um: self.scan.z_plane_um,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config_str("").unwrap(), ScenarioConfig::default());
        assert_eq!(parse_config_str("# only a comment\n\n").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn override_and_units() {
        let c = parse_config_str("[optics]\nn_sphere = 1.9\ndepth = 50 nm\n[odmr]\nlinewidth = 0.012 ghz\n").unwrap();
        assert!((c.relative_index() - 1.2516).abs() < 1e-4);
        assert!((c.optics.depth_um - 0.05).abs() < 1e-12);
        assert!((c.odmr.linewidth_mhz - 12.0).abs() < 1e-9);
        let c = parse_config_str("[fdtd]\ndx=0.02um\nperiods = auto\n").unwrap();
        assert!((c.fdtd.dx_nm - 20.0).abs() < 1e-9);
        let c = parse_config_str("[g2]\nmerged_rates = 1.2 mcps, 400 kcps\n").unwrap();
        assert_eq!(c.g2.merged_rates_cps, vec![1.2e6, 4e5]);
    }

    #[test]
    fn unit_mismatch() {
        let e = parse_config_str("[optics]\n\nradius = 10 s\n").unwrap_err();
        assert!(matches!(e, ConfigError::UnitMismatch { line: 3, .. }), "{e:?}");
        assert!(matches!(
            parse_config_str("[optics]\nn_sphere = 2 um").unwrap_err(),
            ConfigError::UnitMismatch { .. }
        ));
    }

    #[test]
    fn strictness() {
        assert!(matches!(
            parse_config_str("[optics]\nradus = 10\n").unwrap_err(),
            ConfigError::UnknownKey { line: 2, .. }
        ));
        assert!(matches!(parse_config_str("[optic]\n").unwrap_err(), ConfigError::UnknownSection { .. }));
        assert!(matches!(parse_config_str("radius = 1\n").unwrap_err(), ConfigError::Syntax { line: 1, .. }));
        assert!(matches!(parse_config_str("[optics]\nradius\n").unwrap_err(), ConfigError::Syntax { .. }));
        assert!(matches!(
            parse_config_str("[optics]\nradius = 9\nradius = 9\n").unwrap_err(),
            ConfigError::DuplicateKey { line: 3, .. }
        ));
        assert!(matches!(parse_config_str("[optics]\nn_sphere = 0.5\n").unwrap_err(), ConfigError::Invalid(_)));
    }
}
