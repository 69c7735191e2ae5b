//! Exact scattering of a TM plane wave by an infinite dielectric cylinder.
//!
//! The incident wave `exp(i k r cos(phi))` travels towards `-y`; `phi` is
//! measured from the propagation direction. Outside the cylinder the field is
//! the incident wave plus `sum_n i^n b_n H_n(k r) e^{i n phi}`, inside it is
//! `sum_n i^n c_n J_n(m k r) e^{i n phi}`.

use nalgebra::Complex;

use super::FdtdError;
use crate::field::{FieldGrid, GridSpec};

type C64 = Complex<f64>;

/// Largest size parameter handled by the series.
pub const MAX_SIZE_PARAMETER: f64 = 200.0;
/// Relative magnitude of the last retained coefficient above which the
/// series is reported as under-resolved.
pub const TRUNCATION_TOLERANCE: f64 = 1e-10;

/// Truncation order `ceil(x + 4 x^(1/3) + 2)` for size parameter `x`.
pub fn truncation_order(size_parameter: f64) -> usize {
    (size_parameter + 4.0 * size_parameter.cbrt() + 2.0).ceil() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct CylinderSeries {
    pub k_um: f64,
    pub relative_index: f64,
    pub radius_um: f64,
    /// Exterior coefficients `b_n`, `n = 0..=order` (`b_{-n} = b_n`).
    pub b: Vec<C64>,
    /// Interior coefficients `c_n`.
    pub c: Vec<C64>,
    /// Number of exterior terms retained (highest order).
    pub order: usize,
}

fn jn(n: usize, x: f64) -> f64 {
    libm::jn(n as i32, x)
}

fn bessel_j_all(max: usize, x: f64) -> Vec<f64> {
    (0..=max + 1).map(|n| jn(n, x)).collect()
}

/// `Y_n` by forward recurrence, which is stable for the second kind.
fn bessel_y_all(max: usize, x: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(max + 2);
    y.push(libm::y0(x));
    y.push(libm::y1(x));
    for n in 1..=max {
        let next = 2.0 * n as f64 / x * y[n] - y[n - 1];
        y.push(next);
    }
    y
}

fn derivative(vals: &[f64], n: usize) -> f64 {
    if n == 0 {
        -vals[1]
    } else {
        0.5 * (vals[n - 1] - vals[n + 1])
    }
}

impl CylinderSeries {
    /// Scattering coefficients with the default truncation order.
    pub fn new(
        radius_um: f64,
        cylinder_index: f64,
        medium_index: f64,
        wavelength_nm: f64,
    ) -> Result<Self, FdtdError> {
        let k = 2.0 * std::f64::consts::PI * medium_index / (wavelength_nm * 1e-3);
        let series = Self::with_order(
            radius_um,
            cylinder_index,
            medium_index,
            wavelength_nm,
            truncation_order(k * radius_um),
        )?;
        let last = series.b[series.order].norm();
        let largest = series.b.iter().map(|b| b.norm()).fold(0.0, f64::max);
        if largest > 0.0 && last > TRUNCATION_TOLERANCE * largest {
            return Err(FdtdError::Truncation {
                order: series.order,
                ratio: last / largest,
            });
        }
        Ok(series)
    }

    /// Scattering coefficients truncated at an explicit order.
    pub fn with_order(
        radius_um: f64,
        cylinder_index: f64,
        medium_index: f64,
        wavelength_nm: f64,
        order: usize,
    ) -> Result<Self, FdtdError> {
        if !(radius_um > 0.0 && cylinder_index >= 1.0 && medium_index >= 1.0 && wavelength_nm > 0.0) {
            return Err(FdtdError::InvalidScene("invalid cylinder parameters".into()));
        }
        let k = 2.0 * std::f64::consts::PI * medium_index / (wavelength_nm * 1e-3);
        let x = k * radius_um;
        if x > MAX_SIZE_PARAMETER {
            return Err(FdtdError::InvalidScene(format!(
                "size parameter {x:.1} exceeds {MAX_SIZE_PARAMETER}"
            )));
        }
        let m = cylinder_index / medium_index;
        let mx = m * x;
        // the interior expansion converges like Jacobi-Anger and needs a wider margin
        let interior = order.max((mx + 8.0 * mx.cbrt() + 10.0).ceil() as usize);
        let jx = bessel_j_all(interior, x);
        let yx = bessel_y_all(interior, x);
        let jm = bessel_j_all(interior, mx);
        let mut b = Vec::with_capacity(interior + 1);
        let mut c = Vec::with_capacity(interior + 1);
        for n in 0..=interior {
            let h = C64::new(jx[n], yx[n]);
            let dh = C64::new(derivative(&jx, n), derivative(&yx, n));
            let (j_in, dj_in) = (jm[n], derivative(&jm, n));
            let (j_out, dj_out) = (jx[n], derivative(&jx, n));
            let num = C64::from(m * dj_in * j_out - j_in * dj_out);
            let den = j_in * dh - m * dj_in * h;
            let bn = if m == 1.0 { C64::new(0.0, 0.0) } else { num / den };
            let cn = if m == 1.0 {
                C64::new(1.0, 0.0)
            } else {
                (C64::from(j_out) + bn * h) / j_in
            };
            b.push(bn);
            c.push(cn);
        }
        Ok(Self {
            k_um: k,
            relative_index: m,
            radius_um,
            b,
            c,
            order,
        })
    }

    /// Complex total field at offset `(x, y)` from the cylinder axis.
    pub fn field_at(&self, x: f64, y: f64) -> C64 {
        let r = (x * x + y * y).sqrt();
        // angle from the propagation direction (-y)
        let phi = x.atan2(-y);
        let kr = self.k_um * r;
        let i_pow = |n: usize| match n % 4 {
            0 => C64::new(1.0, 0.0),
            1 => C64::new(0.0, 1.0),
            2 => C64::new(-1.0, 0.0),
            _ => C64::new(0.0, -1.0),
        };
        if r < self.radius_um {
            let n_max = self.c.len() - 1;
            let mkr = self.relative_index * kr;
            let j = bessel_j_all(n_max, mkr);
            let mut sum = self.c[0] * j[0];
            for (n, (c, jn)) in self.c.iter().zip(&j).enumerate().skip(1) {
                sum += 2.0 * i_pow(n) * c * jn * (n as f64 * phi).cos();
            }
            sum
        } else {
            let incident = C64::from_polar(1.0, -self.k_um * y);
            if kr == 0.0 {
                return incident;
            }
            let j = bessel_j_all(self.order, kr);
            let yv = bessel_y_all(self.order, kr);
            let mut sum = self.b[0] * C64::new(j[0], yv[0]);
            for n in 1..=self.order {
                sum += 2.0 * i_pow(n) * self.b[n] * C64::new(j[n], yv[n]) * (n as f64 * phi).cos();
            }
            incident + sum
        }
    }
}

/// `|E|^2` of the cylinder problem on a raster, with the cylinder axis at
/// `(cx, cy)`.
pub fn mie_cylinder_field(
    radius_um: f64,
    cylinder_index: f64,
    medium_index: f64,
    wavelength_nm: f64,
    centre_um: (f64, f64),
    grid: &GridSpec,
) -> Result<FieldGrid, FdtdError> {
    let series = CylinderSeries::new(radius_um, cylinder_index, medium_index, wavelength_nm)?;
    Ok(series.intensity_on(centre_um, grid))
}

impl CylinderSeries {
    pub fn intensity_on(&self, centre_um: (f64, f64), grid: &GridSpec) -> FieldGrid {
        FieldGrid::from_fn(grid.nx, grid.ny, grid.dx_um, grid.x_left_um, grid.y_top_um, |x, y| {
            self.field_at(x - centre_um.0, y - centre_um.1).norm_sqr()
        })
    }
}
