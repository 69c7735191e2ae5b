//! Optically detected magnetic resonance of NV centres: Zeeman-split
//! Lorentzian dips around the zero-field splitting, and their fits.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

use crate::psf::{lm_fit, FitError, LmOptions, Model, Profile1D};
use crate::scan::DefectSite;

pub const ZERO_FIELD_SPLITTING_MHZ: f64 = 2870.0;
/// NV electron gyromagnetic ratio.
pub const GYROMAGNETIC_MHZ_PER_GAUSS: f64 = 2.8025;
pub const DEFAULT_LINEWIDTH_MHZ: f64 = 10.0;
pub const CONVENTIONAL_CONTRAST: f64 = 0.15;
pub const THROUGH_SPHERE_CONTRAST: f64 = 0.25;
/// Lowest normalised PL a spectrum may reach.
pub const PL_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdmrError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("NV axis index {0} out of range 0..4")]
    AxisIndex(usize),
    #[error("frequency grid {lo:.1}..{hi:.1} MHz does not cover resonances {need_lo:.1}..{need_hi:.1} MHz")]
    GridCoverage {
        lo: f64,
        hi: f64,
        need_lo: f64,
        need_hi: f64,
    },
    #[error("spectrum has no dip")]
    FlatSpectrum,
    #[error("fitted dips at {a:.2} and {b:.2} MHz overlap")]
    Overlap { a: f64, b: f64 },
    #[error("fit did not converge")]
    NoConvergence,
    #[error("no real field direction gives these projections")]
    NoDirection,
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// The four `<111>` bond directions of the diamond lattice.
pub fn nv_axes() -> [Vector3<f64>; 4] {
    let s = 1.0 / 3f64.sqrt();
    [
        Vector3::new(s, s, s),
        Vector3::new(s, -s, -s),
        Vector3::new(-s, s, -s),
        Vector3::new(-s, -s, s),
    ]
}

fn axis(index: usize) -> Result<Vector3<f64>, OdmrError> {
    nv_axes().get(index).copied().ok_or(OdmrError::AxisIndex(index))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagneticField {
    pub magnitude_gauss: f64,
    /// Unit vector.
    pub direction: Vector3<f64>,
}

impl MagneticField {
    pub fn new(magnitude_gauss: f64, direction: Vector3<f64>) -> Result<Self, OdmrError> {
        let n = direction.norm();
        if !(magnitude_gauss >= 0.0 && magnitude_gauss.is_finite()) || !(n > 0.0 && n.is_finite()) {
            return Err(OdmrError::InvalidParameter(
                "field magnitude must be >= 0 and direction non-zero".into(),
            ));
        }
        Ok(Self {
            magnitude_gauss,
            direction: direction / n,
        })
    }

    pub fn zero() -> Self {
        Self {
            magnitude_gauss: 0.0,
            direction: Vector3::z(),
        }
    }

    pub fn reversed(&self) -> Self {
        Self {
            direction: -self.direction,
            ..*self
        }
    }
}

/// A direction whose projections on two NV axes are `cos_a` and `cos_b`.
///
/// Only `|cos|` is observable, so both sign combinations of `cos_b` are
/// tried; the first with a real solution is returned.
pub fn direction_for_projections(
    axis_a: usize,
    axis_b: usize,
    cos_a: f64,
    cos_b: f64,
) -> Result<Vector3<f64>, OdmrError> {
    let (a, b) = (axis(axis_a)?, axis(axis_b)?);
    if axis_a == axis_b {
        return Err(OdmrError::InvalidParameter("axes must differ".into()));
    }
    let g = a.dot(&b);
    let det = 1.0 - g * g;
    let normal = a.cross(&b).normalize();
    for cb in [cos_b, -cos_b] {
        let u = (cos_a - g * cb) / det;
        let v = (cb - g * cos_a) / det;
        let inplane = a * u + b * v;
        let rest = 1.0 - inplane.norm_squared();
        if rest >= 0.0 {
            return Ok(inplane + normal * rest.sqrt());
        }
    }
    Err(OdmrError::NoDirection)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdmrModel {
    pub zero_field_splitting_mhz: f64,
    pub gyromagnetic_mhz_per_gauss: f64,
    /// Lorentzian FWHM of each dip.
    pub linewidth_mhz: f64,
    /// Depth of the zero-field dip (both branches together).
    pub contrast: f64,
}

impl Default for OdmrModel {
    fn default() -> Self {
        Self {
            zero_field_splitting_mhz: ZERO_FIELD_SPLITTING_MHZ,
            gyromagnetic_mhz_per_gauss: GYROMAGNETIC_MHZ_PER_GAUSS,
            linewidth_mhz: DEFAULT_LINEWIDTH_MHZ,
            contrast: CONVENTIONAL_CONTRAST,
        }
    }
}

impl OdmrModel {
    pub fn with_contrast(contrast: f64) -> Self {
        Self {
            contrast,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OdmrError> {
        if !(self.zero_field_splitting_mhz > 0.0
            && self.gyromagnetic_mhz_per_gauss > 0.0
            && self.linewidth_mhz > 0.0)
        {
            return Err(OdmrError::InvalidParameter(
                "splitting, gyromagnetic ratio and linewidth must be positive".into(),
            ));
        }
        if !(self.contrast > 0.0 && self.contrast < 1.0) {
            return Err(OdmrError::InvalidParameter(format!(
                "contrast {} outside (0, 1)",
                self.contrast
            )));
        }
        Ok(())
    }

    /// First-order Zeeman shift `gamma B |cos theta|` for one NV axis.
    pub fn splitting(&self, field: &MagneticField, axis_index: usize) -> Result<f64, OdmrError> {
        let a = axis(axis_index)?;
        Ok(self.gyromagnetic_mhz_per_gauss * field.magnitude_gauss * field.direction.dot(&a).abs())
    }
}

/// Zeeman shift with the standard gyromagnetic ratio; dips sit at `D +/- shift`.
pub fn zeeman_splitting(field: &MagneticField, axis: &Vector3<f64>) -> f64 {
    GYROMAGNETIC_MHZ_PER_GAUSS * field.magnitude_gauss * field.direction.dot(axis).abs() / axis.norm()
}

/// Unit-height Lorentzian of full width `fwhm`.
#[inline]
pub fn lorentzian(f: f64, center: f64, fwhm: f64) -> f64 {
    let h = 0.5 * fwhm;
    let d = f - center;
    h * h / (d * d + h * h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdmrSpectrum {
    pub frequencies_mhz: Vec<f64>,
    pub normalized_pl: Vec<f64>,
    /// NV axis index of each defect in the measurement.
    pub defect_axes: Vec<usize>,
    pub field: MagneticField,
}

/// Normalised PL `1 - sum (C/2) L(f; D +/- delta_d)` over the given defects.
pub fn odmr_spectrum(
    defects: &[DefectSite],
    model: &OdmrModel,
    field: &MagneticField,
    freqs_mhz: &[f64],
) -> Result<OdmrSpectrum, OdmrError> {
    let axes: Vec<usize> = defects.iter().map(|d| d.nv_axis).collect();
    spectrum_for_axes(&axes, model, field, freqs_mhz)
}

pub fn spectrum_for_axes(
    axes: &[usize],
    model: &OdmrModel,
    field: &MagneticField,
    freqs_mhz: &[f64],
) -> Result<OdmrSpectrum, OdmrError> {
    model.validate()?;
    if freqs_mhz.len() < 2 || freqs_mhz.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(OdmrError::InvalidParameter(
            "frequency grid must be strictly increasing with at least 2 points".into(),
        ));
    }
    let d = model.zero_field_splitting_mhz;
    let mut shifts = Vec::with_capacity(axes.len());
    for &a in axes {
        shifts.push(model.splitting(field, a)?);
    }
    if let Some(max) = shifts.iter().copied().reduce(f64::max) {
        let (lo, hi) = (freqs_mhz[0], freqs_mhz[freqs_mhz.len() - 1]);
        if lo > d - max || hi < d + max {
            return Err(OdmrError::GridCoverage {
                lo,
                hi,
                need_lo: d - max,
                need_hi: d + max,
            });
        }
    }
    let half = 0.5 * model.contrast;
    let normalized_pl = freqs_mhz
        .iter()
        .map(|&f| {
            let dip: f64 = shifts
                .iter()
                .map(|&s| {
                    half * (lorentzian(f, d - s, model.linewidth_mhz)
                        + lorentzian(f, d + s, model.linewidth_mhz))
                })
                .sum();
            (1.0 - dip).max(PL_FLOOR)
        })
        .collect();
    Ok(OdmrSpectrum {
        frequencies_mhz: freqs_mhz.to_vec(),
        normalized_pl,
        defect_axes: axes.to_vec(),
        field: *field,
    })
}

/// Evenly spaced grid from `lo` to `hi` inclusive.
pub fn frequency_grid(lo_mhz: f64, hi_mhz: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| lo_mhz + (hi_mhz - lo_mhz) * i as f64 / (points - 1) as f64)
        .collect()
}

/// Photon shot noise for `counts_off_resonance` detected counts per point
/// off resonance. The result stays normalised to that level.
pub fn with_shot_noise(spectrum: &OdmrSpectrum, counts_off_resonance: f64, seed: u64) -> OdmrSpectrum {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normalized_pl = spectrum
        .normalized_pl
        .iter()
        .map(|&v| {
            let mean = v * counts_off_resonance;
            let n = Poisson::new(mean).map(|p| p.sample(&mut rng)).unwrap_or(0.0);
            (n / counts_off_resonance).max(PL_FLOOR)
        })
        .collect();
    OdmrSpectrum {
        normalized_pl,
        ..spectrum.clone()
    }
}

/// Fractional depth of the deepest dip below the off-resonance level.
pub fn contrast(spectrum: &OdmrSpectrum) -> Result<f64, OdmrError> {
    let hi = spectrum.normalized_pl.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = spectrum.normalized_pl.iter().copied().fold(f64::INFINITY, f64::min);
    if !(hi - lo > 1e-12) {
        return Err(OdmrError::FlatSpectrum);
    }
    Ok((hi - lo) / hi)
}

/// `B - sum a_i L(f; c_i, w_i)`.
///
/// Independent dips: `p = [B, c_1, a_1, w_1, ...]`. With tied pairs the dips
/// are grouped outermost-first into pairs sharing depth and width:
/// `p = [B, lo_1, hi_1, a_1, w_1, ...]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorentzianDipsModel {
    pub dips: usize,
    pub tied_pairs: bool,
}

impl LorentzianDipsModel {
    /// `(center, depth, width, parameter offsets)` for every dip.
    fn dips_of<'a>(&self, p: &'a [f64]) -> impl Iterator<Item = (f64, f64, f64, [usize; 3])> + 'a {
        let tied = self.tied_pairs;
        (0..self.dips).map(move |i| {
            if tied {
                let base = 1 + 4 * (i / 2);
                let c = base + (i % 2);
                (p[c], p[base + 2], p[base + 3], [c, base + 2, base + 3])
            } else {
                let base = 1 + 3 * i;
                (p[base], p[base + 1], p[base + 2], [base, base + 1, base + 2])
            }
        })
    }
}

impl Model for LorentzianDipsModel {
    fn n_params(&self) -> usize {
        if self.tied_pairs {
            1 + 2 * self.dips
        } else {
            1 + 3 * self.dips
        }
    }

    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        p[0] - self.dips_of(p).map(|(c, a, w, _)| a * lorentzian(x, c, w)).sum::<f64>()
    }

    fn gradient(&self, x: f64, p: &[f64], g: &mut [f64]) {
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = 1.0;
        for (c, a, w, [ic, ia, iw]) in self.dips_of(p) {
            let h = 0.5 * w;
            let d = x - c;
            let den = d * d + h * h;
            let l = h * h / den;
            g[ia] -= l;
            g[ic] -= a * 2.0 * h * h * d / (den * den);
            g[iw] -= a * h * d * d / (den * den);
        }
    }

    fn admissible(&self, p: &[f64]) -> bool {
        self.dips_of(p).all(|(_, a, w, _)| w > 0.0 && a >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dip {
    pub center_mhz: f64,
    pub depth: f64,
    pub linewidth_mhz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdmrFit {
    pub baseline: f64,
    /// Ascending in frequency.
    pub dips: Vec<Dip>,
    pub converged: bool,
    pub chi2: f64,
}

impl OdmrFit {
    /// Deepest fitted dip relative to the baseline.
    pub fn contrast(&self) -> f64 {
        self.dips.iter().map(|d| d.depth).fold(0.0, f64::max) / self.baseline
    }

    /// Half the distance between the outermost-but-`k` symmetric pair.
    pub fn pair_offsets_mhz(&self) -> Vec<f64> {
        let n = self.dips.len();
        (0..n / 2)
            .map(|i| 0.5 * (self.dips[n - 1 - i].center_mhz - self.dips[i].center_mhz))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OdmrFitOptions {
    /// Dips at `D +/- delta` share depth and width.
    pub tied_pairs: bool,
    pub lm: LmOptions,
}

/// Greedy dip picking on the depth profile to seed the fit.
fn initial_dips(f: &[f64], pl: &[f64], baseline: f64, n: usize) -> Vec<Dip> {
    let mut taken = vec![false; f.len()];
    let mut out = Vec::with_capacity(n);
    let step = (f[f.len() - 1] - f[0]) / (f.len() - 1) as f64;
    for _ in 0..n {
        let Some(i) = (0..f.len())
            .filter(|&i| !taken[i])
            .min_by(|&a, &b| pl[a].total_cmp(&pl[b]))
        else {
            break;
        };
        let depth = (baseline - pl[i]).max(1e-6);
        let half = baseline - 0.5 * depth;
        let mut l = i;
        while l > 0 && pl[l] < half {
            l -= 1;
        }
        let mut r = i;
        while r + 1 < f.len() && pl[r] < half {
            r += 1;
        }
        let width = (f[r] - f[l]).max(2.0 * step);
        out.push(Dip {
            center_mhz: f[i],
            depth,
            linewidth_mhz: width,
        });
        // hide this dip from the next search
        for (k, t) in taken.iter_mut().enumerate() {
            if (f[k] - f[i]).abs() <= 1.5 * width {
                *t = true;
            }
        }
    }
    out.sort_by(|a, b| a.center_mhz.total_cmp(&b.center_mhz));
    out
}

/// Multi-Lorentzian least-squares fit with `n_dips` in {1, 2, 4}.
pub fn fit_odmr(spectrum: &OdmrSpectrum, n_dips: usize) -> Result<OdmrFit, OdmrError> {
    fit_odmr_with(spectrum, n_dips, &OdmrFitOptions::default())
}

pub fn fit_odmr_with(spectrum: &OdmrSpectrum, n_dips: usize, opts: &OdmrFitOptions) -> Result<OdmrFit, OdmrError> {
    if ![1, 2, 4].contains(&n_dips) {
        return Err(OdmrError::InvalidParameter(format!("n_dips must be 1, 2 or 4, got {n_dips}")));
    }
    if opts.tied_pairs && !n_dips.is_multiple_of(2) {
        return Err(OdmrError::InvalidParameter("tied pairs need an even dip count".into()));
    }
    let f = &spectrum.frequencies_mhz;
    let pl = &spectrum.normalized_pl;
    let baseline = pl.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if contrast(spectrum).is_err() {
        return Err(OdmrError::FlatSpectrum);
    }
    let seeds = initial_dips(f, pl, baseline, n_dips);
    if seeds.len() < n_dips {
        return Err(OdmrError::FlatSpectrum);
    }
    let model = LorentzianDipsModel {
        dips: n_dips,
        tied_pairs: opts.tied_pairs,
    };
    let mut init = vec![baseline];
    if opts.tied_pairs {
        for i in 0..n_dips / 2 {
            let (lo, hi) = (seeds[i], seeds[n_dips - 1 - i]);
            init.extend([
                lo.center_mhz,
                hi.center_mhz,
                0.5 * (lo.depth + hi.depth),
                0.5 * (lo.linewidth_mhz + hi.linewidth_mhz),
            ]);
        }
    } else {
        for d in &seeds {
            init.extend([d.center_mhz, d.depth, d.linewidth_mhz]);
        }
    }
    // uniform weights: the spectrum is already normalised
    let data = Profile1D::with_sigma(f.clone(), pl.clone(), vec![1.0; f.len()])?;
    let r = lm_fit(&model, &data, &init, &opts.lm)?;
    if !r.converged {
        return Err(OdmrError::NoConvergence);
    }
    let mut dips: Vec<Dip> = model
        .dips_of(&r.params)
        .map(|(c, a, w, _)| Dip {
            center_mhz: c,
            depth: a,
            linewidth_mhz: w,
        })
        .collect();
    dips.sort_by(|a, b| a.center_mhz.total_cmp(&b.center_mhz));
    for w in dips.windows(2) {
        let lw = w[0].linewidth_mhz.min(w[1].linewidth_mhz);
        if w[1].center_mhz - w[0].center_mhz < 0.25 * lw {
            return Err(OdmrError::Overlap {
                a: w[0].center_mhz,
                b: w[1].center_mhz,
            });
        }
    }
    Ok(OdmrFit {
        baseline: r.params[0],
        dips,
        converged: r.converged,
        chi2: r.chi2,
    })
}
