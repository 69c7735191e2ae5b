//! Geometric optics of a microsphere lens immersed in oil.
//!
//! A dielectric sphere resting on the sample acts as a thick ball lens. For a
//! small index contrast with the immersion medium the focal length exceeds the
//! sphere-to-emitter distance and the sphere forms a magnified virtual image
//! below the sample surface. All lengths are in micrometres. The vertical
//! coordinate `z` is negative below the sample surface; image distances are
//! reported as positive magnitudes.

use thiserror::Error;

/// Default immersion oil index.
pub const OIL_INDEX: f64 = 1.518;
/// Default BaTiO3 sphere index (upper end of the 1.9–2.1 range).
pub const SPHERE_INDEX: f64 = 2.1;
/// Relative index obtained from the rounded value often quoted for the
/// BaTiO3/oil pair. Kept as an option; it does not reproduce the worked
/// image-distance and magnification pair simultaneously.
pub const ROUNDED_RELATIVE_INDEX: f64 = 1.38;
/// Default emitter depth below the surface.
pub const DEFAULT_DEPTH_UM: f64 = 0.1;
/// Default transverse ray height used for the aberrated focal length.
pub const DEFAULT_RAY_HEIGHT_UM: f64 = 1.0;

const BOUNDARY_RTOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("ray height {x_um} um is outside the sphere aperture (radius {radius_um} um)")]
    OutsideAperture { x_um: f64, radius_um: f64 },
    #[error("relative index {n_r} <= 1 gives no real focus")]
    NoRealFocus { n_r: f64 },
    #[error("image is not virtual: focal length {focal_um} um <= R + depth = {limit_um} um ({mode:?} image)")]
    NotVirtual {
        focal_um: f64,
        limit_um: f64,
        mode: ImageMode,
    },
    #[error("relative index {n_r} sits on the virtual/real boundary")]
    ModeBoundary { n_r: f64 },
}

pub type Result<T> = std::result::Result<T, OpticsError>;

/// A dielectric microsphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Microsphere {
    pub radius_um: f64,
    pub index: f64,
}

impl Microsphere {
    pub fn new(radius_um: f64, index: f64) -> Result<Self> {
        if !(radius_um > 0.0 && radius_um.is_finite()) {
            return Err(OpticsError::InvalidParameter(format!(
                "sphere radius must be positive, got {radius_um}"
            )));
        }
        if !(index > 1.0 && index.is_finite()) {
            return Err(OpticsError::InvalidParameter(format!(
                "sphere index must exceed 1, got {index}"
            )));
        }
        Ok(Self { radius_um, index })
    }
}

impl Default for Microsphere {
    fn default() -> Self {
        Self {
            radius_um: 10.0,
            index: SPHERE_INDEX,
        }
    }
}

/// Objective, immersion medium and wavelengths of the confocal setup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagingSystem {
    pub medium_index: f64,
    pub na: f64,
    pub excitation_wavelength_nm: f64,
    pub emission_wavelength_nm: f64,
}

impl ImagingSystem {
    pub fn validate(&self) -> Result<()> {
        if !(self.medium_index >= 1.0) {
            return Err(OpticsError::InvalidParameter(format!(
                "medium index must be >= 1, got {}",
                self.medium_index
            )));
        }
        if !(self.na > 0.0 && self.na <= self.medium_index) {
            return Err(OpticsError::InvalidParameter(format!(
                "NA must lie in (0, {}], got {}",
                self.medium_index, self.na
            )));
        }
        if !(self.excitation_wavelength_nm > 0.0 && self.emission_wavelength_nm > 0.0) {
            return Err(OpticsError::InvalidParameter(
                "wavelengths must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ImagingSystem {
    fn default() -> Self {
        Self {
            medium_index: OIL_INDEX,
            na: 1.4,
            excitation_wavelength_nm: 532.0,
            emission_wavelength_nm: 700.0,
        }
    }
}

/// Emitter depth below the surface and the ray height used for the focal
/// length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmitterGeometry {
    pub depth_um: f64,
    pub transverse_offset_um: f64,
}

impl Default for EmitterGeometry {
    fn default() -> Self {
        Self {
            depth_um: DEFAULT_DEPTH_UM,
            transverse_offset_um: DEFAULT_RAY_HEIGHT_UM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    Virtual,
    Real,
}

pub fn relative_index(sphere: &Microsphere, system: &ImagingSystem) -> f64 {
    sphere.index / system.medium_index
}

/// Paraxial focal length of a ball lens measured from its centre.
pub fn paraxial_focal_length(radius_um: f64, n_r: f64) -> f64 {
    n_r * radius_um / (2.0 * (n_r - 1.0))
}

/// Focal length for a ray entering at height `x_um`, including spherical
/// aberration: `f(x) = x / sin(2 asin(x/R) - 2 asin(x/(n_r R)))`.
pub fn focal_length(x_um: f64, radius_um: f64, n_r: f64) -> Result<f64> {
    if !(radius_um > 0.0) {
        return Err(OpticsError::InvalidParameter(format!(
            "radius must be positive, got {radius_um}"
        )));
    }
    if !(x_um > 0.0) {
        return Err(OpticsError::InvalidParameter(format!(
            "ray height must be positive, got {x_um}"
        )));
    }
    if x_um >= radius_um {
        return Err(OpticsError::OutsideAperture {
            x_um,
            radius_um,
        });
    }
    if !(n_r > 1.0) {
        return Err(OpticsError::NoRealFocus { n_r });
    }
    let u = x_um / radius_um;
    let deviation = 2.0 * u.asin() - 2.0 * (u / n_r).asin();
    Ok(x_um / deviation.sin())
}

/// Virtual image distance below the surface for explicit parameters.
///
/// `n_r == 1` is the index-matched limit: no refraction, the image sits at
/// the emitter itself.
pub fn virtual_image_distance_with(
    radius_um: f64,
    depth_um: f64,
    x_um: f64,
    n_r: f64,
) -> Result<f64> {
    if !(depth_um >= 0.0) {
        return Err(OpticsError::InvalidParameter(format!(
            "depth must be non-negative, got {depth_um}"
        )));
    }
    if n_r == 1.0 {
        return Ok(depth_um);
    }
    let f = focal_length(x_um, radius_um, n_r)?;
    let object = radius_um + depth_um;
    if f <= object {
        let mode = if f < object {
            ImageMode::Real
        } else {
            ImageMode::Virtual
        };
        return Err(OpticsError::NotVirtual {
            focal_um: f,
            limit_um: object,
            mode,
        });
    }
    Ok(object * f / (f - object) - radius_um)
}

pub fn virtual_image_distance(
    sphere: &Microsphere,
    system: &ImagingSystem,
    geom: &EmitterGeometry,
) -> Result<f64> {
    virtual_image_distance_with(
        sphere.radius_um,
        geom.depth_um,
        geom.transverse_offset_um,
        relative_index(sphere, system),
    )
}

/// Lateral magnification `(R + d_v) / (R + depth)` for explicit parameters.
pub fn magnification_with(radius_um: f64, depth_um: f64, x_um: f64, n_r: f64) -> Result<f64> {
    let dv = virtual_image_distance_with(radius_um, depth_um, x_um, n_r)?;
    Ok((radius_um + dv) / (radius_um + depth_um))
}

pub fn magnification(
    sphere: &Microsphere,
    system: &ImagingSystem,
    geom: &EmitterGeometry,
) -> Result<f64> {
    magnification_with(
        sphere.radius_um,
        geom.depth_um,
        geom.transverse_offset_um,
        relative_index(sphere, system),
    )
}

/// Magnification of the virtual image observed at plane `z_um` (negative
/// below the surface).
pub fn magnification_at_plane(z_um: f64, sphere: &Microsphere, geom: &EmitterGeometry) -> f64 {
    plane_magnification(z_um, sphere.radius_um, geom.depth_um)
}

pub fn plane_magnification(z_um: f64, radius_um: f64, depth_um: f64) -> f64 {
    (radius_um - z_um) / (radius_um + depth_um)
}

/// Classifies the image formed by the paraxial focus: virtual when the focus
/// lies beyond the emitter (`f0 > R + depth`), real when it lies before it.
pub fn image_mode(n_r: f64, radius_um: f64, depth_um: f64) -> Result<ImageMode> {
    if !(n_r > 1.0) {
        return Err(OpticsError::NoRealFocus { n_r });
    }
    let f0 = paraxial_focal_length(radius_um, n_r);
    let object = radius_um + depth_um;
    if ((f0 - object) / object).abs() <= BOUNDARY_RTOL {
        Err(OpticsError::ModeBoundary { n_r })
    } else if f0 > object {
        Ok(ImageMode::Virtual)
    } else {
        Ok(ImageMode::Real)
    }
}

/// Evenly sampled `(z, M(z))` table over `[z_min, z_max]`.
pub fn magnification_curve(
    z_min_um: f64,
    z_max_um: f64,
    steps: usize,
    sphere: &Microsphere,
    geom: &EmitterGeometry,
) -> Result<Vec<(f64, f64)>> {
    if steps < 2 {
        return Err(OpticsError::InvalidParameter(format!(
            "magnification curve needs at least 2 steps, got {steps}"
        )));
    }
    if !(z_min_um < z_max_um && z_max_um <= 0.0) {
        return Err(OpticsError::InvalidParameter(format!(
            "need z_min < z_max <= 0, got [{z_min_um}, {z_max_um}]"
        )));
    }
    let span = z_max_um - z_min_um;
    Ok((0..steps)
        .map(|k| {
            let z = if k + 1 == steps {
                z_max_um
            } else {
                z_min_um + span * k as f64 / (steps - 1) as f64
            };
            (z, magnification_at_plane(z, sphere, geom))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_nr() -> f64 {
        2.1 / 1.518
    }

    #[test]
    fn relative_index_examples() {
        let sys = ImagingSystem::default();
        let n = relative_index(&Microsphere::new(10.0, 2.1).unwrap(), &sys);
        assert!((n - 1.383_399_209_486_166).abs() < 1e-12);
        let n = relative_index(&Microsphere::new(10.0, 1.9).unwrap(), &sys);
        assert!((n - 1.251_646_903_820_817).abs() < 1e-12);
        let n = relative_index(&Microsphere::new(10.0, 1.518).unwrap(), &sys);
        assert_eq!(n, 1.0);
    }

    // Reference values from a 40-digit evaluation of the closed forms.
    #[test]
    fn focal_length_examples() {
        let f = focal_length(1.0, 10.0, paper_nr()).unwrap();
        assert!((f - 17.982_857_792_586_82).abs() < 1e-9, "{f}");
        let f5 = focal_length(5.0, 10.0, 1.38).unwrap();
        assert!((f5 - 16.614_070_291_170_845).abs() < 1e-9);
        assert!(f5 < paraxial_focal_length(10.0, 1.38));
        let tiny = focal_length(1e-5, 10.0, 1.38).unwrap();
        assert!((tiny - 18.157_894_736_842_1).abs() / 18.157_894_736_842_1 < 1e-6);
    }

    #[test]
    fn focal_length_errors() {
        assert!(matches!(
            focal_length(10.0, 10.0, 1.38),
            Err(OpticsError::OutsideAperture { .. })
        ));
        assert!(matches!(
            focal_length(1.0, 10.0, 1.0),
            Err(OpticsError::NoRealFocus { .. })
        ));
        assert!(focal_length(0.0, 10.0, 1.38).is_err());
    }

    #[test]
    fn worked_example_image_distance_and_magnification() {
        let dv = virtual_image_distance_with(10.0, 0.1, 1.0, paper_nr()).unwrap();
        assert!((dv - 13.040_738_331_716_698).abs() < 1e-9, "{dv}");
        let m = magnification_with(10.0, 0.1, 1.0, paper_nr()).unwrap();
        assert!((m - 2.281_261_220_962_049).abs() < 1e-9);

        let dv = virtual_image_distance_with(10.0, 0.1, 1.0, 1.38).unwrap();
        assert!((dv - 12.853_025_644_396_915).abs() < 1e-9);
        let m = magnification_with(10.0, 0.1, 1.0, 1.38).unwrap();
        assert!((m - 2.262_675_806_375_932).abs() < 1e-9);
    }

    #[test]
    fn index_matched_limits() {
        assert_eq!(virtual_image_distance_with(10.0, 0.1, 1.0, 1.0).unwrap(), 0.1);
        assert_eq!(magnification_with(10.0, 0.1, 1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn real_image_is_reported() {
        let err = virtual_image_distance_with(10.0, 0.1, 1.0, 2.5).unwrap_err();
        assert!(matches!(
            err,
            OpticsError::NotVirtual {
                mode: ImageMode::Real,
                ..
            }
        ));
    }

    #[test]
    fn plane_magnification_examples() {
        let s = Microsphere::default();
        let g = EmitterGeometry::default();
        assert!((magnification_at_plane(-9.0, &s, &g) - 19.0 / 10.1).abs() < 1e-12);
        assert!((magnification_at_plane(-15.0, &s, &g) - 25.0 / 10.1).abs() < 1e-12);
        let flat = EmitterGeometry {
            depth_um: 0.0,
            ..g
        };
        assert_eq!(magnification_at_plane(0.0, &s, &flat), 1.0);
    }

    #[test]
    fn image_mode_examples() {
        assert_eq!(image_mode(1.38, 10.0, 0.1).unwrap(), ImageMode::Virtual);
        assert_eq!(image_mode(2.5, 10.0, 0.1).unwrap(), ImageMode::Real);
        assert!(matches!(
            image_mode(2.0, 10.0, 0.0),
            Err(OpticsError::ModeBoundary { .. })
        ));
    }

    #[test]
    fn magnification_curve_shape() {
        let s = Microsphere::default();
        let g = EmitterGeometry::default();
        let c = magnification_curve(-15.0, -9.0, 7, &s, &g).unwrap();
        assert_eq!(c.len(), 7);
        assert_eq!(c[0].0, -15.0);
        assert_eq!(c[6].0, -9.0);
        assert!(c.windows(2).all(|w| w[1].1 < w[0].1));
        assert!(magnification_curve(-9.0, -9.0, 2, &s, &g).is_err());
        assert!(magnification_curve(-13.0, -9.0, 1, &s, &g).is_err());
        assert!(magnification_curve(-13.0, 1.0, 3, &s, &g).is_err());
    }

    #[test]
    fn constructor_invariants() {
        assert!(Microsphere::new(0.0, 2.0).is_err());
        assert!(Microsphere::new(5.0, 1.0).is_err());
        let bad = ImagingSystem {
            na: 1.6,
            ..ImagingSystem::default()
        };
        assert!(bad.validate().is_err());
        assert!(ImagingSystem::default().validate().is_ok());
    }
}
