//! Rasterised permittivity maps for the 2-D solver.

use super::FdtdError;
use crate::optics::{ImagingSystem, Microsphere};

/// Diamond refractive index.
pub const DIAMOND_INDEX: f64 = 2.42;
/// Cells per material wavelength required at the densest material.
pub const CELLS_PER_WAVELENGTH: f64 = 15.0;
/// Default cap on the number of scene cells.
pub const DEFAULT_MAX_CELLS: usize = 40_000_000;

const SUBSAMPLES: usize = 8;

/// A material primitive. Coordinates in micrometres, `y` pointing up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Circle {
        cx_um: f64,
        cy_um: f64,
        radius_um: f64,
        index: f64,
    },
    /// Everything with `y < top_um`.
    HalfPlane { top_um: f64, index: f64 },
}

impl Region {
    fn index(&self) -> f64 {
        match *self {
            Region::Circle { index, .. } | Region::HalfPlane { index, .. } => index,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Region::Circle {
                cx_um,
                cy_um,
                radius_um,
                ..
            } => {
                let dx = x - cx_um;
                let dy = y - cy_um;
                dx * dx + dy * dy < radius_um * radius_um
            }
            Region::HalfPlane { top_um, .. } => y < top_um,
        }
    }

    /// Signed distance-like test: true when the square cell of side `h`
    /// centred at (x, y) lies entirely on one side of the boundary.
    fn cell_is_uniform(&self, x: f64, y: f64, h: f64) -> bool {
        let half_diag = h * std::f64::consts::FRAC_1_SQRT_2;
        match *self {
            Region::Circle {
                cx_um,
                cy_um,
                radius_um,
                ..
            } => {
                let d = ((x - cx_um).powi(2) + (y - cy_um).powi(2)).sqrt();
                (d - radius_um).abs() > half_diag
            }
            Region::HalfPlane { top_um, .. } => (y - top_um).abs() > 0.5 * h,
        }
    }
}

/// Extent of the simulated window. `x` spans `[-width/2, width/2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub width_um: f64,
    pub top_um: f64,
    pub bottom_um: f64,
}

impl Domain {
    /// A window around a sphere of radius `r` resting on the surface `y = 0`:
    /// `side_margin` beside the sphere, `top_margin` above it and `depth`
    /// into the substrate.
    pub fn around_sphere(radius_um: f64, side_margin_um: f64, top_margin_um: f64, depth_um: f64) -> Self {
        Self {
            width_um: 2.0 * (radius_um + side_margin_um),
            top_um: 2.0 * radius_um + top_margin_um,
            bottom_um: -depth_um,
        }
    }
}

/// A mirror-symmetric permittivity raster. Column `nx / 2` sits on `x = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrid {
    pub nx: usize,
    pub ny: usize,
    pub dx_um: f64,
    pub x_left_um: f64,
    pub y_top_um: f64,
    pub background_index: f64,
    pub regions: Vec<Region>,
    /// Relative permittivity per cell, row-major, row 0 at the top.
    pub permittivity: Vec<f64>,
    /// First row below the lowest point of any circular region.
    pub focus_search_row: usize,
}

impl SceneGrid {
    /// Rasterises `regions` (later entries paint over earlier ones) on top of
    /// a uniform background. Boundary cells get the area-weighted mean
    /// permittivity.
    pub fn from_regions(
        domain: Domain,
        dx_um: f64,
        background_index: f64,
        regions: Vec<Region>,
        wavelength_nm: f64,
        max_cells: usize,
    ) -> Result<Self, FdtdError> {
        if !(dx_um > 0.0 && domain.width_um > 0.0 && domain.top_um > domain.bottom_um) {
            return Err(FdtdError::InvalidScene("empty domain or non-positive dx".into()));
        }
        if background_index < 1.0 || regions.iter().any(|r| r.index() < 1.0) {
            return Err(FdtdError::InvalidScene("refractive indices must be >= 1".into()));
        }
        let n_max = regions
            .iter()
            .map(Region::index)
            .fold(background_index, f64::max);
        let floor_um = wavelength_nm * 1e-3 / (CELLS_PER_WAVELENGTH * n_max);
        if dx_um > floor_um * (1.0 + 1e-9) {
            return Err(FdtdError::Resolution {
                dx_nm: dx_um * 1e3,
                max_nm: floor_um * 1e3,
            });
        }
        let half = (0.5 * domain.width_um / dx_um).round() as usize;
        let nx = 2 * half + 1;
        let ny = ((domain.top_um - domain.bottom_um) / dx_um).round() as usize + 1;
        if nx.saturating_mul(ny) > max_cells {
            return Err(FdtdError::MemoryCap {
                cells: nx * ny,
                cap: max_cells,
            });
        }
        let x_left_um = -(half as f64) * dx_um;
        let y_top_um = domain.top_um;
        let eps_bg = background_index * background_index;
        let mut permittivity = vec![eps_bg; nx * ny];
        let step = dx_um / SUBSAMPLES as f64;
        for row in 0..ny {
            let y = y_top_um - row as f64 * dx_um;
            for col in 0..nx {
                let x = x_left_um + col as f64 * dx_um;
                let uniform = regions.iter().all(|r| r.cell_is_uniform(x, y, dx_um));
                permittivity[row * nx + col] = if uniform {
                    let n = index_at(&regions, background_index, x, y);
                    n * n
                } else {
                    let mut acc = 0.0;
                    for sy in 0..SUBSAMPLES {
                        let yy = y - 0.5 * dx_um + (sy as f64 + 0.5) * step;
                        for sx in 0..SUBSAMPLES {
                            let xx = x - 0.5 * dx_um + (sx as f64 + 0.5) * step;
                            let n = index_at(&regions, background_index, xx, yy);
                            acc += n * n;
                        }
                    }
                    acc / (SUBSAMPLES * SUBSAMPLES) as f64
                };
            }
        }
        // symmetrise exactly so the mirror solver sees identical halves
        for row in 0..ny {
            for col in 0..half {
                let a = permittivity[row * nx + col];
                let b = permittivity[row * nx + nx - 1 - col];
                let m = 0.5 * (a + b);
                permittivity[row * nx + col] = m;
                permittivity[row * nx + nx - 1 - col] = m;
            }
        }
        let lowest = regions
            .iter()
            .filter_map(|r| match *r {
                Region::Circle {
                    cy_um, radius_um, ..
                } => Some(cy_um - radius_um),
                Region::HalfPlane { .. } => None,
            })
            .fold(f64::INFINITY, f64::min);
        let focus_search_row = if lowest.is_finite() {
            (((y_top_um - lowest) / dx_um).floor() as usize + 1).min(ny)
        } else {
            0
        };
        Ok(Self {
            nx,
            ny,
            dx_um,
            x_left_um,
            y_top_um,
            background_index,
            regions,
            permittivity,
            focus_search_row,
        })
    }

    pub fn max_index(&self) -> f64 {
        self.permittivity.iter().copied().fold(1.0, f64::max).sqrt()
    }

    #[inline]
    pub fn eps(&self, col: usize, row: usize) -> f64 {
        self.permittivity[row * self.nx + col]
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }
}

fn index_at(regions: &[Region], background: f64, x: f64, y: f64) -> f64 {
    regions
        .iter()
        .rev()
        .find(|r| r.contains(x, y))
        .map_or(background, Region::index)
}

/// A sphere (cross-section: cylinder) resting on a diamond half-space,
/// immersed in the imaging medium. The surface of the diamond is `y = 0` and
/// the sphere touches it at the origin. Either part may be omitted.
pub fn build_scene(
    sphere: Option<&Microsphere>,
    system: &ImagingSystem,
    diamond_index: Option<f64>,
    domain: Domain,
    dx_um: f64,
) -> Result<SceneGrid, FdtdError> {
    build_scene_capped(sphere, system, diamond_index, domain, dx_um, DEFAULT_MAX_CELLS)
}

pub fn build_scene_capped(
    sphere: Option<&Microsphere>,
    system: &ImagingSystem,
    diamond_index: Option<f64>,
    domain: Domain,
    dx_um: f64,
    max_cells: usize,
) -> Result<SceneGrid, FdtdError> {
    let mut regions = Vec::new();
    if let Some(n) = diamond_index {
        regions.push(Region::HalfPlane {
            top_um: 0.0,
            index: n,
        });
    }
    if let Some(s) = sphere {
        if domain.top_um <= 2.0 * s.radius_um || domain.width_um <= 2.0 * s.radius_um {
            return Err(FdtdError::InvalidScene(
                "domain does not contain the sphere".into(),
            ));
        }
        regions.push(Region::Circle {
            cx_um: 0.0,
            cy_um: s.radius_um,
            radius_um: s.radius_um,
            index: s.index,
        });
    }
    SceneGrid::from_regions(
        domain,
        dx_um,
        system.medium_index,
        regions,
        system.excitation_wavelength_nm,
        max_cells,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oil() -> ImagingSystem {
        ImagingSystem::default()
    }

    #[test]
    fn homogeneous_scene_is_uniform_oil() {
        let d = Domain {
            width_um: 2.0,
            top_um: 1.0,
            bottom_um: -1.0,
        };
        let s = build_scene(None, &oil(), None, d, 0.02).unwrap();
        let e = 1.518f64 * 1.518;
        assert!(s.permittivity.iter().all(|&v| (v - e).abs() < 1e-12));
        assert_eq!(s.nx % 2, 1);
        assert_eq!(s.focus_search_row, 0);
    }

    #[test]
    fn oil_above_diamond_without_sphere() {
        let d = Domain {
            width_um: 2.0,
            top_um: 1.0,
            bottom_um: -1.0,
        };
        let s = build_scene(None, &oil(), Some(DIAMOND_INDEX), d, 0.014).unwrap();
        let top = s.eps(s.nx / 2, 0);
        let bottom = s.eps(s.nx / 2, s.ny - 1);
        assert!((top - 1.518f64.powi(2)).abs() < 1e-12);
        assert!((bottom - 2.42f64.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let d = Domain::around_sphere(10.0, 1.0, 0.5, 2.0);
        let s = Microsphere::new(10.0, 2.0).unwrap();
        let err = build_scene(Some(&s), &oil(), Some(DIAMOND_INDEX), d, 0.1).unwrap_err();
        match err {
            FdtdError::Resolution { max_nm, .. } => assert!((max_nm - 532.0 / (15.0 * 2.42)).abs() < 1e-9),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn memory_cap_is_enforced() {
        let d = Domain::around_sphere(10.0, 1.0, 0.5, 2.0);
        let s = Microsphere::new(10.0, 2.0).unwrap();
        let err = build_scene_capped(Some(&s), &oil(), Some(DIAMOND_INDEX), d, 0.014, 1000).unwrap_err();
        assert!(matches!(err, FdtdError::MemoryCap { .. }));
    }

    #[test]
    fn paper_scene_dimensions_and_averaging() {
        let d = Domain::around_sphere(10.0, 3.0, 3.0, 3.0);
        let s = Microsphere::new(10.0, 2.0).unwrap();
        let g = build_scene(Some(&s), &oil(), Some(DIAMOND_INDEX), d, 0.014).unwrap();
        assert_eq!(g.nx, 2 * (13.0f64 / 0.014).round() as usize + 1);
        // the sphere centre is pure sphere material
        let row_c = ((g.y_top_um - 10.0) / g.dx_um).round() as usize;
        assert!((g.eps(g.nx / 2, row_c) - 4.0).abs() < 1e-12);
        // some boundary cells are fractional
        let lo = 1.518f64.powi(2);
        let frac = g
            .permittivity
            .iter()
            .filter(|&&v| v > lo + 1e-6 && v < 4.0 - 1e-6 && (v - 2.42f64.powi(2)).abs() > 1e-6)
            .count();
        assert!(frac > 100);
        // focus search begins just below the tangent point
        let y = g.y_top_um - g.focus_search_row as f64 * g.dx_um;
        assert!(y < 0.0 && y > -g.dx_um - 1e-9);
        // mirror symmetry
        for row in (0..g.ny).step_by(97) {
            for col in 0..g.nx / 2 {
                assert_eq!(g.eps(col, row), g.eps(g.nx - 1 - col, row));
            }
        }
    }
}
