//! Synthetic confocal scans: defect placement, a calibrated parametric PSF,
//! depth-dependent background and Poisson shot noise.
//!
//! Lateral positions are measured from the microsphere axis. Through the
//! sphere a defect at sample position `s` appears at image position `M s`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::optics::{
    plane_magnification, virtual_image_distance, EmitterGeometry, ImagingSystem, Microsphere, OpticsError,
};
use crate::photon::Blinking;
use crate::psf::FWHM_PER_SIGMA;

pub const CONVENTIONAL_FWHM_NM: f64 = 280.0;
/// Valid virtual-plane range of the through-sphere calibration.
pub const THROUGH_SPHERE_Z_RANGE_UM: (f64, f64) = (-18.0, -9.0);
/// Sample-referred FWHM and relative peak intensity versus virtual-plane
/// position `(z_um, fwhm_nm, rel_peak)`.
pub const THROUGH_SPHERE_TABLE: [(f64, f64, f64); 6] = [
    (-18.0, 135.0, 0.12),
    (-17.0, 142.0, 0.2),
    (-15.0, 165.0, 0.55),
    (-13.0, 188.0, 1.0),
    (-12.0, 200.0, 0.95),
    (-9.0, 260.0, 0.5),
];
/// Peak brightness gain directly under the sphere.
pub const MAX_BRIGHTNESS_GAIN: f64 = 1.4;
/// Radius of full brightness gain; the gain tapers linearly to none over the
/// next micrometre.
pub const GAIN_RADIUS_UM: f64 = 1.0;
pub const GAIN_TAPER_UM: f64 = 1.0;
/// Pixels must be at most this fraction of the image-space FWHM.
pub const MAX_PIXEL_FRACTION: f64 = 1.0 / 3.0;
pub const DEFAULT_DEPTH_RANGE_UM: f64 = 0.1;
pub const DEFAULT_BRIGHTNESS_KCPS: f64 = 100.0;
/// Axial FWHM of the confocal spot at the surface.
pub const CONVENTIONAL_AXIAL_FWHM_UM: f64 = 0.8;
/// Axial FWHM of the elongated virtual image.
pub const VIRTUAL_AXIAL_FWHM_UM: f64 = 4.0;
/// Sidelobe placement for the optional shoulder term, in FWHM units.
pub const SIDELOBE_OFFSET_FWHM: f64 = 1.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScanError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("virtual plane z = {z_um} um outside the calibrated range [{lo}, {hi}]")]
    PlaneOutOfRange { z_um: f64, lo: f64, hi: f64 },
    #[error("pixel {pixel_nm:.1} nm exceeds a third of the {fwhm_nm:.1} nm image FWHM")]
    Undersampled { pixel_nm: f64, fwhm_nm: f64 },
    #[error("region of interest is empty")]
    EmptyRoi,
    #[error("signal and background regions overlap")]
    OverlappingRoi,
    #[error("background region has zero variance")]
    ZeroNoise,
    #[error(transparent)]
    Optics(#[from] OpticsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefectSite {
    pub position_um: (f64, f64),
    /// Depth below the surface.
    pub depth_um: f64,
    /// Saturated count rate `I_inf`.
    pub brightness_sat_kcps: f64,
    pub p_sat: f64,
    pub blinking: Option<Blinking>,
    /// Index into [`crate::odmr::nv_axes`].
    pub nv_axis: usize,
}

impl DefectSite {
    pub fn at(x_um: f64, y_um: f64) -> Self {
        Self {
            position_um: (x_um, y_um),
            depth_um: 0.0,
            brightness_sat_kcps: DEFAULT_BRIGHTNESS_KCPS,
            p_sat: 1.0,
            blinking: None,
            nv_axis: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ScanError> {
        let ok = self.brightness_sat_kcps > 0.0
            && self.p_sat > 0.0
            && self.depth_um >= 0.0
            && self.nv_axis < 4
            && self.position_um.0.is_finite()
            && self.position_um.1.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ScanError::InvalidParameter(format!("invalid defect {self:?}")))
        }
    }

    pub fn lateral_offset_um(&self) -> f64 {
        self.position_um.0.hypot(self.position_um.1)
    }
}

/// Rectangular sample region centred on the sphere axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRegion {
    pub width_um: f64,
    pub height_um: f64,
}

impl SampleRegion {
    pub fn area_um2(&self) -> f64 {
        self.width_um * self.height_um
    }
}

/// Poisson number of defects, uniform in the region and in depth.
pub fn sample_defects(density_per_um2: f64, region: SampleRegion, seed: u64) -> Result<Vec<DefectSite>, ScanError> {
    if !(density_per_um2 >= 0.0 && density_per_um2.is_finite()) {
        return Err(ScanError::InvalidParameter(format!("density {density_per_um2}")));
    }
    if !(region.width_um > 0.0 && region.height_um > 0.0) {
        return Err(ScanError::InvalidParameter("region area must be positive".into()));
    }
    let mean = density_per_um2 * region.area_um2();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if mean == 0.0 {
        return Ok(Vec::new());
    }
    let count = Poisson::new(mean)
        .map_err(|e| ScanError::InvalidParameter(e.to_string()))?
        .sample(&mut rng) as usize;
    Ok((0..count)
        .map(|_| {
            let x = (rng.gen::<f64>() - 0.5) * region.width_um;
            let y = (rng.gen::<f64>() - 0.5) * region.height_um;
            DefectSite {
                depth_um: rng.gen::<f64>() * DEFAULT_DEPTH_RANGE_UM,
                nv_axis: rng.gen_range(0..4),
                ..DefectSite::at(x, y)
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsfMode {
    Conventional,
    ThroughSphere { z_plane_um: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsfSpec {
    pub mode: PsfMode,
    pub fwhm_sample_nm: f64,
    pub magnification: f64,
    pub rel_peak_intensity: f64,
    /// Height of the optional shoulder ring relative to the peak.
    pub sidelobe_fraction: f64,
}

impl PsfSpec {
    pub fn fwhm_image_nm(&self) -> f64 {
        self.fwhm_sample_nm * self.magnification
    }

    pub fn with_sidelobes(self, fraction: f64) -> Self {
        Self {
            sidelobe_fraction: fraction,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), ScanError> {
        if self.fwhm_sample_nm > 0.0
            && self.magnification >= 1.0
            && self.rel_peak_intensity > 0.0
            && self.rel_peak_intensity <= MAX_BRIGHTNESS_GAIN
            && self.sidelobe_fraction >= 0.0
        {
            Ok(())
        } else {
            Err(ScanError::InvalidParameter(format!("invalid PSF {self:?}")))
        }
    }

    /// Normalised response at image-space offset `r_nm` from the image of a
    /// point source.
    pub fn shape(&self, r_nm: f64) -> f64 {
        let fwhm = self.fwhm_image_nm();
        let sigma = fwhm / FWHM_PER_SIGMA;
        let core = (-0.5 * (r_nm / sigma).powi(2)).exp();
        if self.sidelobe_fraction == 0.0 {
            return core;
        }
        let ring = (-0.5 * ((r_nm - SIDELOBE_OFFSET_FWHM * fwhm) / sigma).powi(2)).exp();
        core + self.sidelobe_fraction * ring
    }
}

/// Monotone piecewise-cubic Hermite interpolation (Fritsch-Carlson slopes).
#[derive(Debug, Clone, PartialEq)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, ScanError> {
        let n = xs.len();
        if n < 2 || ys.len() != n || xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ScanError::InvalidParameter(
                "interpolation nodes must be strictly increasing".into(),
            ));
        }
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let d: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes = vec![d[0]; 2];
        } else {
            for i in 1..n - 1 {
                if d[i - 1] * d[i] > 0.0 {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    slopes[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
                }
            }
            slopes[0] = end_slope(h[0], h[1], d[0], d[1]);
            slopes[n - 1] = end_slope(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
        }
        Ok(Self { xs, ys, slopes })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let i = match self.xs.partition_point(|&v| v <= x) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[i] + h10 * h * self.slopes[i] + h01 * self.ys[i + 1] + h11 * h * self.slopes[i + 1]
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if s.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        s
    }
}

/// The calibrated PSF for a mode. Magnification follows the plane formula
/// `M(z) = (R - z)/(R + depth)` for the given sphere and depth.
pub fn psf_model(sphere: &Microsphere, depth_um: f64, mode: PsfMode) -> Result<PsfSpec, ScanError> {
    match mode {
        PsfMode::Conventional => Ok(PsfSpec {
            mode,
            fwhm_sample_nm: CONVENTIONAL_FWHM_NM,
            magnification: 1.0,
            rel_peak_intensity: 1.0,
            sidelobe_fraction: 0.0,
        }),
        PsfMode::ThroughSphere { z_plane_um } => {
            let (lo, hi) = THROUGH_SPHERE_Z_RANGE_UM;
            if !(z_plane_um >= lo && z_plane_um <= hi) {
                return Err(ScanError::PlaneOutOfRange { z_um: z_plane_um, lo, hi });
            }
            let zs: Vec<f64> = THROUGH_SPHERE_TABLE.iter().map(|r| r.0).collect();
            let fwhm = Pchip::new(zs.clone(), THROUGH_SPHERE_TABLE.iter().map(|r| r.1).collect())?;
            let peak = Pchip::new(zs, THROUGH_SPHERE_TABLE.iter().map(|r| r.2).collect())?;
            let spec = PsfSpec {
                mode,
                fwhm_sample_nm: fwhm.eval(z_plane_um),
                magnification: plane_magnification(z_plane_um, sphere.radius_um, depth_um),
                rel_peak_intensity: peak.eval(z_plane_um),
                sidelobe_fraction: 0.0,
            };
            spec.validate()?;
            Ok(spec)
        }
    }
}

/// Brightness gain at a lateral distance from the sphere axis.
pub fn brightness_gain(mode: PsfMode, offset_um: f64) -> f64 {
    match mode {
        PsfMode::Conventional => 1.0,
        PsfMode::ThroughSphere { .. } => {
            let excess = MAX_BRIGHTNESS_GAIN - 1.0;
            let t = ((offset_um - GAIN_RADIUS_UM) / GAIN_TAPER_UM).clamp(0.0, 1.0);
            1.0 + excess * (1.0 - t)
        }
    }
}

/// Mean detected rate `eta I_inf P/(P + P_sat)` in counts/s, scaled by the
/// on-state duty cycle for blinking defects.
pub fn emitter_rate(defect: &DefectSite, power: f64, mode: PsfMode) -> f64 {
    let sat = if power.is_infinite() {
        1.0
    } else {
        power / (power + defect.p_sat)
    };
    let duty = defect.blinking.map_or(1.0, |b| b.duty_cycle());
    brightness_gain(mode, defect.lateral_offset_um()) * defect.brightness_sat_kcps * 1e3 * sat * duty
}

/// Background count rates (counts/s) as a function of focal depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundProfile {
    pub surface_level: f64,
    pub decay_into_bulk_um: f64,
    pub above_surface_level: f64,
    pub virtual_plane_level: f64,
}

impl Default for BackgroundProfile {
    fn default() -> Self {
        Self {
            surface_level: 20e3,
            decay_into_bulk_um: 2.0,
            above_surface_level: 30e3,
            virtual_plane_level: 2.5e3,
        }
    }
}

impl BackgroundProfile {
    pub fn zero() -> Self {
        Self {
            surface_level: 0.0,
            decay_into_bulk_um: 1.0,
            above_surface_level: 0.0,
            virtual_plane_level: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ScanError> {
        if self.above_surface_level >= self.surface_level
            && self.surface_level >= self.virtual_plane_level
            && self.virtual_plane_level >= 0.0
            && self.decay_into_bulk_um > 0.0
        {
            Ok(())
        } else {
            Err(ScanError::InvalidParameter(format!("invalid background {self:?}")))
        }
    }

    /// Rate with the focus at height `z_um` (negative inside the diamond).
    pub fn level_at(&self, z_um: f64) -> f64 {
        if z_um > 0.0 {
            self.above_surface_level
        } else {
            self.virtual_plane_level
                + (self.surface_level - self.virtual_plane_level) * (z_um / self.decay_into_bulk_um).exp()
        }
    }

    pub fn level_for(&self, mode: PsfMode) -> f64 {
        match mode {
            PsfMode::Conventional => self.surface_level,
            PsfMode::ThroughSphere { .. } => self.virtual_plane_level,
        }
    }
}

/// Lateral raster in image-space coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanGrid {
    pub nx: usize,
    pub ny: usize,
    pub pixel_nm: f64,
    pub center_um: (f64, f64),
}

impl ScanGrid {
    pub fn centered(nx: usize, ny: usize, pixel_nm: f64) -> Self {
        Self {
            nx,
            ny,
            pixel_nm,
            center_um: (0.0, 0.0),
        }
    }

    pub fn x_at(&self, col: usize) -> f64 {
        self.center_um.0 + (col as f64 - 0.5 * (self.nx as f64 - 1.0)) * self.pixel_nm * 1e-3
    }

    pub fn y_at(&self, row: usize) -> f64 {
        self.center_um.1 + (row as f64 - 0.5 * (self.ny as f64 - 1.0)) * self.pixel_nm * 1e-3
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScanKind {
    Lateral,
    /// Rows are focal planes; the row coordinate is `z` in micrometres.
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanMeta {
    pub kind: ScanKind,
    pub mode: PsfMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanMap {
    pub nx: usize,
    pub ny: usize,
    /// Image-space pixel pitch along `x`.
    pub pixel_size_nm: f64,
    /// Coordinate of the first column (um).
    pub x0_um: f64,
    /// Coordinate and pitch of the rows (um): `y` for lateral maps, `z` for
    /// vertical stacks.
    pub row0_um: f64,
    pub row_step_um: f64,
    pub dwell_time_ms: f64,
    /// Row-major photon counts.
    pub counts: Vec<u32>,
    pub meta: ScanMeta,
}

impl ScanMap {
    pub fn get(&self, col: usize, row: usize) -> u32 {
        self.counts[row * self.nx + col]
    }

    pub fn x_at(&self, col: usize) -> f64 {
        self.x0_um + col as f64 * self.pixel_size_nm * 1e-3
    }

    pub fn row_at(&self, row: usize) -> f64 {
        self.row0_um + row as f64 * self.row_step_um
    }

    /// One row as `(x_nm, counts)`.
    pub fn row_profile(&self, row: usize) -> (Vec<f64>, Vec<f64>) {
        let xs = (0..self.nx).map(|c| self.x_at(c) * 1e3).collect();
        let vs = (0..self.nx).map(|c| self.get(c, row) as f64).collect();
        (xs, vs)
    }

    /// Counts summed over rows, as `(x_nm, counts)`.
    pub fn column_sums(&self) -> (Vec<f64>, Vec<f64>) {
        let xs = (0..self.nx).map(|c| self.x_at(c) * 1e3).collect();
        let vs = (0..self.nx)
            .map(|c| (0..self.ny).map(|r| self.get(c, r) as f64).sum())
            .collect();
        (xs, vs)
    }

    /// Counts summed along each row, indexed by row coordinate.
    pub fn row_sums(&self) -> (Vec<f64>, Vec<f64>) {
        let ys = (0..self.ny).map(|r| self.row_at(r)).collect();
        let vs = (0..self.ny)
            .map(|r| self.counts[r * self.nx..(r + 1) * self.nx].iter().map(|&v| v as f64).sum())
            .collect();
        (ys, vs)
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// Draws Poisson counts row by row, each row from its own stream of the
/// master seed so the result does not depend on scheduling.
fn poisson_rows(expected: &[f64], nx: usize, seed: u64) -> Vec<u32> {
    let mut counts = vec![0u32; expected.len()];
    counts
        .par_chunks_mut(nx)
        .zip(expected.par_chunks(nx))
        .enumerate()
        .for_each(|(row, (out, mean))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(row as u64);
            for (o, &m) in out.iter_mut().zip(mean) {
                *o = if m > 0.0 {
                    Poisson::new(m).map(|p| p.sample(&mut rng) as u32).unwrap_or(0)
                } else {
                    0
                };
            }
        });
    counts
}

/// Image-space position of a defect.
pub fn image_position(defect: &DefectSite, psf: &PsfSpec) -> (f64, f64) {
    (
        psf.magnification * defect.position_um.0,
        psf.magnification * defect.position_um.1,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanSettings {
    pub dwell_ms: f64,
    /// Excitation power in units of the defects' saturation powers.
    pub power: f64,
}

impl Default for ScanSettings {
    fn default() -> Self {
        Self {
            dwell_ms: 1.0,
            power: 2.0,
        }
    }
}

fn check_sampling(psf: &PsfSpec, pixel_nm: f64) -> Result<(), ScanError> {
    if !(pixel_nm > 0.0) {
        return Err(ScanError::InvalidParameter(format!("pixel size {pixel_nm}")));
    }
    let fwhm = psf.fwhm_image_nm();
    if pixel_nm > fwhm * MAX_PIXEL_FRACTION * (1.0 + 1e-12) {
        return Err(ScanError::Undersampled {
            pixel_nm,
            fwhm_nm: fwhm,
        });
    }
    Ok(())
}

/// Expected counts per pixel before shot noise.
pub fn expected_scan(
    defects: &[DefectSite],
    psf: &PsfSpec,
    background: &BackgroundProfile,
    settings: &ScanSettings,
    grid: &ScanGrid,
) -> Result<Vec<f64>, ScanError> {
    psf.validate()?;
    background.validate()?;
    check_sampling(psf, grid.pixel_nm)?;
    if !(settings.dwell_ms >= 0.0 && settings.power >= 0.0) {
        return Err(ScanError::InvalidParameter("dwell and power must be non-negative".into()));
    }
    for d in defects {
        d.validate()?;
    }
    let dwell_s = settings.dwell_ms * 1e-3;
    let sources: Vec<((f64, f64), f64)> = defects
        .iter()
        .map(|d| {
            let rate = emitter_rate(d, settings.power, psf.mode) * psf.rel_peak_intensity;
            (image_position(d, psf), rate * dwell_s)
        })
        .collect();
    let bg = background.level_for(psf.mode) * dwell_s;
    let mut expected = vec![0.0; grid.nx * grid.ny];
    expected.par_chunks_mut(grid.nx).enumerate().for_each(|(row, out)| {
        let y = grid.y_at(row);
        for (col, o) in out.iter_mut().enumerate() {
            let x = grid.x_at(col);
            let signal: f64 = sources
                .iter()
                .map(|&((sx, sy), amp)| amp * psf.shape((x - sx).hypot(y - sy) * 1e3))
                .sum();
            *o = signal + bg;
        }
    });
    Ok(expected)
}

/// A lateral scan with Poisson noise.
pub fn render_scan(
    defects: &[DefectSite],
    psf: &PsfSpec,
    background: &BackgroundProfile,
    settings: &ScanSettings,
    grid: &ScanGrid,
    seed: u64,
) -> Result<ScanMap, ScanError> {
    let expected = expected_scan(defects, psf, background, settings, grid)?;
    Ok(ScanMap {
        nx: grid.nx,
        ny: grid.ny,
        pixel_size_nm: grid.pixel_nm,
        x0_um: grid.x_at(0),
        row0_um: grid.y_at(0),
        row_step_um: grid.pixel_nm * 1e-3,
        dwell_time_ms: settings.dwell_ms,
        counts: poisson_rows(&expected, grid.nx, seed),
        meta: ScanMeta {
            kind: ScanKind::Lateral,
            mode: psf.mode,
            seed,
        },
    })
}

/// Vertical (x-z) scan geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZStackGrid {
    pub nx: usize,
    pub pixel_nm: f64,
    /// Lateral scan line (um).
    pub y_um: f64,
    pub z_min_um: f64,
    pub z_max_um: f64,
    pub nz: usize,
}

impl ZStackGrid {
    pub fn z_at(&self, row: usize) -> f64 {
        self.z_max_um - (self.z_max_um - self.z_min_um) * row as f64 / (self.nz - 1).max(1) as f64
    }

    pub fn x_at(&self, col: usize) -> f64 {
        (col as f64 - 0.5 * (self.nx as f64 - 1.0)) * self.pixel_nm * 1e-3
    }
}

/// Fraction of the sphere radius within which defects are imaged through it.
pub const FOOTPRINT_FRACTION: f64 = 0.5;

/// Expected x-z stack. Rows run from `z_max` down to `z_min`.
///
/// Defects inside the sphere footprint appear magnified at the virtual
/// plane `z = -d_v`; the rest appear at the surface. Without a sphere all
/// defects appear at the surface.
pub fn expected_zstack(
    defects: &[DefectSite],
    system: &ImagingSystem,
    sphere: Option<&Microsphere>,
    background: &BackgroundProfile,
    settings: &ScanSettings,
    grid: &ZStackGrid,
) -> Result<Vec<f64>, ScanError> {
    background.validate()?;
    if grid.nx == 0 || grid.nz < 2 || !(grid.z_min_um < grid.z_max_um) || !(grid.pixel_nm > 0.0) {
        return Err(ScanError::InvalidParameter("invalid z-stack grid".into()));
    }
    if !(grid.z_min_um <= 0.0 && grid.z_max_um >= 0.0) {
        return Err(ScanError::InvalidParameter("z range must include the surface".into()));
    }
    let dwell_s = settings.dwell_ms * 1e-3;
    let conv_sigma = CONVENTIONAL_FWHM_NM * 1e-3 / FWHM_PER_SIGMA;
    let conv_axial = CONVENTIONAL_AXIAL_FWHM_UM / FWHM_PER_SIGMA;
    // (x, y, z, lateral sigma, axial sigma, counts)
    let mut sources = Vec::with_capacity(defects.len());
    for d in defects {
        d.validate()?;
        let (x, y) = d.position_um;
        let under = sphere.filter(|s| d.lateral_offset_um() <= FOOTPRINT_FRACTION * s.radius_um);
        match under {
            Some(s) => {
                let geom = EmitterGeometry {
                    depth_um: d.depth_um,
                    ..EmitterGeometry::default()
                };
                let dv = virtual_image_distance(s, system, &geom)?;
                let m = plane_magnification(-dv, s.radius_um, d.depth_um);
                if grid.z_min_um > -dv {
                    return Err(ScanError::InvalidParameter(format!(
                        "z range must reach the virtual plane at {:.2} um",
                        -dv
                    )));
                }
                let psf = psf_model(s, d.depth_um, PsfMode::ThroughSphere { z_plane_um: -dv })
                    .unwrap_or_else(|_| PsfSpec {
                        mode: PsfMode::ThroughSphere { z_plane_um: -dv },
                        fwhm_sample_nm: THROUGH_SPHERE_TABLE[3].1,
                        magnification: m,
                        rel_peak_intensity: 1.0,
                        sidelobe_fraction: 0.0,
                    });
                let rate = emitter_rate(d, settings.power, psf.mode) * dwell_s;
                sources.push((
                    m * x,
                    m * y,
                    -dv,
                    psf.fwhm_image_nm() * 1e-3 / FWHM_PER_SIGMA,
                    VIRTUAL_AXIAL_FWHM_UM / FWHM_PER_SIGMA,
                    rate,
                ));
            }
            None => {
                let rate = emitter_rate(d, settings.power, PsfMode::Conventional) * dwell_s;
                sources.push((x, y, -d.depth_um, conv_sigma, conv_axial, rate));
            }
        }
    }
    let mut expected = vec![0.0; grid.nx * grid.nz];
    expected.par_chunks_mut(grid.nx).enumerate().for_each(|(row, out)| {
        let z = grid.z_at(row);
        let bg = background.level_at(z) * dwell_s;
        for (col, o) in out.iter_mut().enumerate() {
            let x = grid.x_at(col);
            let signal: f64 = sources
                .iter()
                .map(|&(sx, sy, sz, sl, sa, amp)| {
                    let r2 = (x - sx).powi(2) + (grid.y_um - sy).powi(2);
                    amp * (-0.5 * r2 / (sl * sl) - 0.5 * ((z - sz) / sa).powi(2)).exp()
                })
                .sum();
            *o = signal + bg;
        }
    });
    Ok(expected)
}

pub fn render_zstack(
    defects: &[DefectSite],
    system: &ImagingSystem,
    sphere: Option<&Microsphere>,
    background: &BackgroundProfile,
    settings: &ScanSettings,
    grid: &ZStackGrid,
    seed: u64,
) -> Result<ScanMap, ScanError> {
    let expected = expected_zstack(defects, system, sphere, background, settings, grid)?;
    let mode = match sphere {
        Some(_) => PsfMode::ThroughSphere {
            z_plane_um: grid.z_min_um,
        },
        None => PsfMode::Conventional,
    };
    Ok(ScanMap {
        nx: grid.nx,
        ny: grid.nz,
        pixel_size_nm: grid.pixel_nm,
        x0_um: grid.x_at(0),
        row0_um: grid.z_at(0),
        row_step_um: grid.z_at(1) - grid.z_at(0),
        dwell_time_ms: settings.dwell_ms,
        counts: poisson_rows(&expected, grid.nx, seed),
        meta: ScanMeta {
            kind: ScanKind::Vertical,
            mode,
            seed,
        },
    })
}

/// A set of pixel indices into a [`ScanMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Roi(Vec<usize>);

impl Roi {
    pub fn from_indices(mut idx: Vec<usize>) -> Self {
        idx.sort_unstable();
        idx.dedup();
        Self(idx)
    }

    /// Pixels whose centres lie within `radius_um` of `center_um`.
    pub fn disk(map: &ScanMap, center_um: (f64, f64), radius_um: f64) -> Self {
        Self::select(map, |x, y| (x - center_um.0).hypot(y - center_um.1) <= radius_um)
    }

    /// Pixels at least `radius_um` away from every listed point.
    pub fn away_from(map: &ScanMap, points_um: &[(f64, f64)], radius_um: f64) -> Self {
        Self::select(map, |x, y| {
            points_um.iter().all(|p| (x - p.0).hypot(y - p.1) >= radius_um)
        })
    }

    pub fn rect(map: &ScanMap, cols: std::ops::Range<usize>, rows: std::ops::Range<usize>) -> Self {
        let mut idx = Vec::new();
        for r in rows.clone() {
            for c in cols.clone() {
                if r < map.ny && c < map.nx {
                    idx.push(r * map.nx + c);
                }
            }
        }
        Self::from_indices(idx)
    }

    fn select(map: &ScanMap, keep: impl Fn(f64, f64) -> bool) -> Self {
        let mut idx = Vec::new();
        for r in 0..map.ny {
            for c in 0..map.nx {
                if keep(map.x_at(c), map.row_at(r)) {
                    idx.push(r * map.nx + c);
                }
            }
        }
        Self(idx)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    fn overlaps(&self, other: &Roi) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

/// `(mean signal - mean background) / std(background)`.
pub fn snr(map: &ScanMap, signal: &Roi, background: &Roi) -> Result<f64, ScanError> {
    if signal.is_empty() || background.is_empty() {
        return Err(ScanError::EmptyRoi);
    }
    if signal.overlaps(background) {
        return Err(ScanError::OverlappingRoi);
    }
    if signal.0.iter().chain(&background.0).any(|&i| i >= map.counts.len()) {
        return Err(ScanError::InvalidParameter("ROI index outside the map".into()));
    }
    let mean = |roi: &Roi| roi.0.iter().map(|&i| map.counts[i] as f64).sum::<f64>() / roi.len() as f64;
    let (s, b) = (mean(signal), mean(background));
    let var = background
        .0
        .iter()
        .map(|&i| (map.counts[i] as f64 - b).powi(2))
        .sum::<f64>()
        / (background.len().max(2) - 1) as f64;
    if var <= 0.0 {
        return Err(ScanError::ZeroNoise);
    }
    Ok((s - b) / var.sqrt())
}
