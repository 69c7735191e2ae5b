//! Yee-grid time stepping for the TM (out-of-plane E) polarisation.
//!
//! The solver exploits the mirror symmetry of the scene about `x = 0` and
//! only stores the right half. A plane wave travelling towards `-y` is
//! injected through a total-field/scattered-field line just below the top
//! PML using a one-dimensional auxiliary grid with identical discretisation,
//! so the incident wave sees exactly the same numerical dispersion as the
//! main grid. The outer `x` boundary is a magnetic mirror behind a CPML, which
//! leaves an `x`-uniform incident wave untouched while absorbing scattered
//! light.
//!
//! Units: lengths in micrometres, `c = eps0 = mu0 = 1`.

use rayon::prelude::*;

use super::scene::SceneGrid;
use super::FdtdError;
use crate::field::FieldGrid;

/// Rows of homogeneous medium between the top PML and the first
/// total-field row.
const SF_BUFFER_ROWS: usize = 3;
const AUX_TAIL_CELLS: usize = 40;
const PML_ORDER: f64 = 3.0;
const PML_REFLECTION: f64 = 1e-8;
/// Extra periods after the estimated transit time before averaging starts.
const SETTLE_PERIODS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdtdConfig {
    pub wavelength_nm: f64,
    pub pml_cells: usize,
    /// `c dt / dx`; the effective value is rounded down so that one optical
    /// period is an integer number of steps.
    pub courant: f64,
    pub ramp_periods: f64,
    pub average_periods: usize,
    /// Total simulated periods. `None` derives it from the optical path
    /// through the scene.
    pub run_periods: Option<f64>,
    pub blowup_factor: f64,
}

impl Default for FdtdConfig {
    fn default() -> Self {
        Self {
            wavelength_nm: 532.0,
            pml_cells: 20,
            courant: 0.7,
            ramp_periods: 10.0,
            average_periods: 5,
            run_periods: None,
            blowup_factor: 1e6,
        }
    }
}

impl FdtdConfig {
    pub fn validate(&self) -> Result<(), FdtdError> {
        if !(self.courant > 0.0 && self.courant <= std::f64::consts::FRAC_1_SQRT_2) {
            return Err(FdtdError::InvalidConfig(format!(
                "courant number {} outside (0, 1/sqrt 2]",
                self.courant
            )));
        }
        if self.pml_cells < 8 {
            return Err(FdtdError::InvalidConfig(format!(
                "need at least 8 PML cells, got {}",
                self.pml_cells
            )));
        }
        if !(self.wavelength_nm > 0.0) || !(self.ramp_periods >= 0.0) || self.average_periods == 0 {
            return Err(FdtdError::InvalidConfig(
                "wavelength, ramp and averaging window must be positive".into(),
            ));
        }
        if let Some(run) = self.run_periods {
            let min = self.ramp_periods + SETTLE_PERIODS + self.average_periods as f64;
            if run < min {
                return Err(FdtdError::InvalidConfig(format!(
                    "run_periods {run} shorter than ramp + settle + average ({min})"
                )));
            }
        }
        Ok(())
    }

    pub fn steps_per_period(&self, dx_um: f64) -> usize {
        (self.wavelength_nm * 1e-3 / (self.courant * dx_um)).ceil() as usize
    }
}

/// Optical path (in wavelengths) from the top of the scene to its bottom,
/// maximised over columns.
fn transit_periods(scene: &SceneGrid, wavelength_um: f64) -> f64 {
    let mut worst = 0.0f64;
    for col in (scene.nx / 2)..scene.nx {
        let path: f64 = (0..scene.ny).map(|row| scene.eps(col, row).sqrt()).sum::<f64>() * scene.dx_um;
        worst = worst.max(path);
    }
    worst / wavelength_um
}

pub fn planned_periods(scene: &SceneGrid, cfg: &FdtdConfig) -> f64 {
    cfg.run_periods.unwrap_or_else(|| {
        (cfg.ramp_periods
            + transit_periods(scene, cfg.wavelength_nm * 1e-3)
            + SETTLE_PERIODS
            + cfg.average_periods as f64)
            .ceil()
    })
}

struct Pml {
    b: Vec<f32>,
    a: Vec<f32>,
}

impl Pml {
    /// Coefficients at depths `rho` (in cells) into a layer of `cells` cells.
    fn new(depths: impl Iterator<Item = f64>, cells: usize, dx: f64, dt: f64, index: f64) -> Self {
        let thickness = cells as f64 * dx;
        let sigma_max = -(PML_ORDER + 1.0) * PML_REFLECTION.ln() / (2.0 * index * thickness);
        let (mut b, mut a) = (Vec::new(), Vec::new());
        for rho in depths {
            let s = sigma_max * (rho.clamp(0.0, cells as f64) / cells as f64).powf(PML_ORDER);
            let bb = (-s * dt).exp();
            b.push(bb as f32);
            a.push(if s > 0.0 { (bb - 1.0) as f32 } else { 0.0 });
        }
        Self { b, a }
    }
}

/// Runs the scene to a time-harmonic steady state and returns the time
/// averaged `|E|^2` normalised to the incident plane wave.
pub fn run_fdtd(scene: &SceneGrid, cfg: &FdtdConfig) -> Result<FieldGrid, FdtdError> {
    cfg.validate()?;
    if scene.nx.is_multiple_of(2) || scene.nx < 3 || scene.ny < 2 {
        return Err(FdtdError::InvalidScene("scene must have an odd width of at least 3 cells".into()));
    }
    let half = scene.nx / 2;
    for row in 0..scene.ny {
        for col in 0..half {
            if scene.eps(col, row) != scene.eps(scene.nx - 1 - col, row) {
                return Err(FdtdError::InvalidScene("scene is not mirror symmetric about x = 0".into()));
            }
        }
    }
    let eps_bg = scene.background_index * scene.background_index;
    if (0..scene.nx).any(|c| (scene.eps(c, 0) - eps_bg).abs() > 1e-12) {
        return Err(FdtdError::InvalidScene(
            "top scene row must be homogeneous background medium".into(),
        ));
    }

    let pml = cfg.pml_cells;
    let dx = scene.dx_um;
    let lambda = cfg.wavelength_nm * 1e-3;
    let spp = cfg.steps_per_period(dx);
    let dt = lambda / spp as f64;
    let omega = 2.0 * std::f64::consts::PI / lambda;
    let periods = planned_periods(scene, cfg);
    let total_steps = (periods * spp as f64).ceil() as usize;
    let avg_steps = cfg.average_periods * spp;
    let avg_start = total_steps.saturating_sub(avg_steps);

    // internal half grid
    let nh = half + 1;
    let nx = nh + pml;
    let j0 = pml + SF_BUFFER_ROWS;
    let jb = j0 + scene.ny;
    let ny = jb + pml;

    let cb = (dt / dx) as f32;
    let mut ca = vec![0f32; nx * ny];
    for j in 0..ny {
        let srow = j.saturating_sub(j0).min(scene.ny - 1);
        for i in 0..nx {
            let eps = if j < j0 {
                eps_bg
            } else {
                scene.eps(half + i.min(nh - 1), srow)
            };
            ca[j * nx + i] = (dt / (eps * dx)) as f32;
        }
    }

    let edge_index = |col: usize, row: usize| scene.eps(col, row).sqrt();
    let top_index = scene.background_index;
    let bottom_index = (half..scene.nx).map(|c| edge_index(c, scene.ny - 1)).fold(1.0, f64::max);
    let side_index = (0..scene.ny).map(|r| edge_index(scene.nx - 1, r)).fold(1.0, f64::max);

    // x-PML: Ez columns nh..nx (rho = i - (nh-1)), Hy columns nh-1..nx-1 (rho = i + 1/2 - (nh-1))
    let px_e = Pml::new((0..pml).map(|k| (k + 1) as f64), pml, dx, dt, side_index);
    let px_h = Pml::new((0..pml).map(|k| k as f64 + 0.5), pml, dx, dt, side_index);
    // top y-PML: Ez rows 0..pml (rho = pml - j), Hx rows 0..pml (rho = pml - j - 1/2)
    let pt_e = Pml::new((0..pml).map(|j| (pml - j) as f64), pml, dx, dt, top_index);
    let pt_h = Pml::new((0..pml).map(|j| (pml - j) as f64 - 0.5), pml, dx, dt, top_index);
    // bottom y-PML: Ez rows jb..ny (rho = j - jb + 1), Hx rows jb-1..ny-1 (rho = j + 1/2 - (jb - 1))
    let pb_e = Pml::new((0..pml).map(|k| (k + 1) as f64), pml, dx, dt, bottom_index);
    let pb_h = Pml::new((0..pml).map(|k| k as f64 + 0.5), pml, dx, dt, bottom_index);

    let mut ez = vec![0f32; nx * ny];
    let mut hx = vec![0f32; nx * ny];
    let mut hy = vec![0f32; nx * ny];
    let mut psi_ezx = vec![0f32; ny * pml];
    let mut psi_hyx = vec![0f32; ny * pml];
    let mut psi_ezy_top = vec![0f32; pml * nx];
    let mut psi_hxy_top = vec![0f32; pml * nx];
    let mut psi_ezy_bot = vec![0f32; pml * nx];
    let mut psi_hxy_bot = vec![0f32; pml * nx];

    // auxiliary 1-D grid in the background medium
    let aux_pml = 2 * pml;
    let n_aux = j0 + AUX_TAIL_CELLS + aux_pml;
    let aux_start = aux_pml.max(n_aux - aux_pml);
    let pa_e = Pml::new((0..aux_pml).map(|k| (k + 1) as f64), aux_pml, dx, dt, top_index);
    let pa_h = Pml::new((0..aux_pml).map(|k| k as f64 + 0.5), aux_pml, dx, dt, top_index);
    let ca_bg = (dt / (eps_bg * dx)) as f32;
    let mut ez_inc = vec![0f32; n_aux];
    let mut hx_inc = vec![0f32; n_aux];
    let mut psi_e_aux = vec![0f32; aux_pml];
    let mut psi_h_aux = vec![0f32; aux_pml];
    let j_src = j0 - 2;
    let ramp_time = cfg.ramp_periods * lambda;
    let source = |t: f64| -> f32 {
        let env = if ramp_time > 0.0 && t < ramp_time {
            0.5 * (1.0 - (std::f64::consts::PI * t / ramp_time).cos())
        } else {
            1.0
        };
        (env * (omega * t).sin()) as f32
    };

    let mut accum = vec![0f64; nh * scene.ny];
    let mut inc_accum = 0f64;
    let limit = cfg.blowup_factor as f32;

    for n in 0..total_steps {
        // --- H update
        {
            let ez = &ez;
            hx.par_chunks_mut(nx)
                .zip(hy.par_chunks_mut(nx))
                .enumerate()
                .for_each(|(j, (hx_row, hy_row))| {
                    let e = &ez[j * nx..(j + 1) * nx];
                    if j + 1 < ny {
                        let e_next = &ez[(j + 1) * nx..(j + 2) * nx];
                        for ((h, &a), &b) in hx_row.iter_mut().zip(e_next).zip(e) {
                            *h -= cb * (a - b);
                        }
                    }
                    for (h, w) in hy_row[..nx - 1].iter_mut().zip(e.windows(2)) {
                        *h += cb * (w[1] - w[0]);
                    }
                });
        }
        // x-PML on Hy: columns nh-1 .. nx-1
        for j in 0..ny {
            let e = &ez[j * nx..(j + 1) * nx];
            for k in 0..pml {
                let i = nh - 1 + k;
                if i + 1 >= nx {
                    break;
                }
                let p = &mut psi_hyx[j * pml + k];
                *p = px_h.b[k] * *p + px_h.a[k] * (e[i + 1] - e[i]);
                hy[j * nx + i] += cb * *p;
            }
        }
        // y-PML on Hx
        for k in 0..pml {
            let j = k; // top, rho = pml - j - 1/2
            for i in 0..nx {
                let curl = ez[(j + 1) * nx + i] - ez[j * nx + i];
                let p = &mut psi_hxy_top[k * nx + i];
                *p = pt_h.b[k] * *p + pt_h.a[k] * curl;
                hx[j * nx + i] -= cb * *p;
            }
            let j = jb - 1 + k; // bottom
            if j + 1 < ny {
                for i in 0..nx {
                    let curl = ez[(j + 1) * nx + i] - ez[j * nx + i];
                    let p = &mut psi_hxy_bot[k * nx + i];
                    *p = pb_h.b[k] * *p + pb_h.a[k] * curl;
                    hx[j * nx + i] -= cb * *p;
                }
            }
        }
        // TF/SF correction on the scattered-field Hx just above the line
        let e_inc_line = ez_inc[j0];
        for h in &mut hx[(j0 - 1) * nx..j0 * nx] {
            *h += cb * e_inc_line;
        }
        // auxiliary H
        for j in 0..n_aux - 1 {
            hx_inc[j] -= cb * (ez_inc[j + 1] - ez_inc[j]);
            if j + 1 >= aux_start && j + 1 - aux_start < aux_pml {
                let k = j + 1 - aux_start;
                psi_h_aux[k] = pa_h.b[k] * psi_h_aux[k] + pa_h.a[k] * (ez_inc[j + 1] - ez_inc[j]);
                hx_inc[j] -= cb * psi_h_aux[k];
            }
        }

        // --- E update, rows 1..ny-1 (rows 0 and ny-1 are electric walls)
        {
            let hx = &hx;
            let hy = &hy;
            let ca = &ca;
            ez.par_chunks_mut(nx)
                .enumerate()
                .skip(1)
                .take(ny - 2)
                .for_each(|(j, e_row)| {
                    let h_up = &hx[(j - 1) * nx..j * nx];
                    let h_dn = &hx[j * nx..(j + 1) * nx];
                    let hyr = &hy[j * nx..(j + 1) * nx];
                    let c = &ca[j * nx..(j + 1) * nx];
                    e_row[0] += c[0] * (2.0 * hyr[0] - (h_dn[0] - h_up[0]));
                    for i in 1..nx - 1 {
                        e_row[i] += c[i] * ((hyr[i] - hyr[i - 1]) - (h_dn[i] - h_up[i]));
                    }
                    let l = nx - 1;
                    e_row[l] += c[l] * (-2.0 * hyr[l - 1] - (h_dn[l] - h_up[l]));
                });
        }
        for j in 1..ny - 1 {
            let row = j * nx;
            for k in 0..pml {
                let i = nh + k;
                let curl = if i == nx - 1 {
                    -2.0 * hy[row + i - 1]
                } else {
                    hy[row + i] - hy[row + i - 1]
                };
                let p = &mut psi_ezx[j * pml + k];
                *p = px_e.b[k] * *p + px_e.a[k] * curl;
                ez[row + i] += ca[row + i] * *p;
            }
        }
        for k in 0..pml {
            let j = k; // top rows; row 0 is a wall
            if j >= 1 {
                for i in 0..nx {
                    let curl = hx[j * nx + i] - hx[(j - 1) * nx + i];
                    let p = &mut psi_ezy_top[k * nx + i];
                    *p = pt_e.b[k] * *p + pt_e.a[k] * curl;
                    ez[j * nx + i] -= ca[j * nx + i] * *p;
                }
            }
            let j = jb + k;
            if j + 1 < ny {
                for i in 0..nx {
                    let curl = hx[j * nx + i] - hx[(j - 1) * nx + i];
                    let p = &mut psi_ezy_bot[k * nx + i];
                    *p = pb_e.b[k] * *p + pb_e.a[k] * curl;
                    ez[j * nx + i] -= ca[j * nx + i] * *p;
                }
            }
        }
        // TF/SF correction on the first total-field row
        let h_inc_line = hx_inc[j0 - 1];
        for i in 0..nx {
            ez[j0 * nx + i] += ca[j0 * nx + i] * h_inc_line;
        }
        // auxiliary E
        for j in 1..n_aux - 1 {
            ez_inc[j] -= ca_bg * (hx_inc[j] - hx_inc[j - 1]);
            if j >= aux_start && j - aux_start < aux_pml {
                let k = j - aux_start;
                psi_e_aux[k] = pa_e.b[k] * psi_e_aux[k] + pa_e.a[k] * (hx_inc[j] - hx_inc[j - 1]);
                ez_inc[j] -= ca_bg * psi_e_aux[k];
            }
        }
        let t_next = (n + 1) as f64 * dt;
        ez_inc[j_src] = source(t_next);
        for v in &mut ez_inc[..j_src] {
            *v = 0.0;
        }

        if n >= avg_start {
            for (r, acc_row) in accum.chunks_mut(nh).enumerate() {
                let e = &ez[(j0 + r) * nx..(j0 + r) * nx + nh];
                for (a, &v) in acc_row.iter_mut().zip(e) {
                    *a += (v as f64) * (v as f64);
                }
            }
            let v = ez_inc[j0] as f64;
            inc_accum += v * v;
        }

        if (n + 1) % spp == 0 || n + 1 == total_steps {
            let peak = ez.iter().fold(0f32, |m, v| m.max(v.abs()));
            if !(peak <= limit) {
                return Err(FdtdError::Instability {
                    step: n + 1,
                    magnitude: peak as f64,
                });
            }
        }
    }

    if !(inc_accum > 0.0) {
        return Err(FdtdError::InvalidConfig("incident wave never reached the scene".into()));
    }
    let mut out = FieldGrid::zeros(scene.nx, scene.ny, dx, scene.x_left_um, scene.y_top_um);
    out.focus_search_row = scene.focus_search_row;
    for r in 0..scene.ny {
        for c in 0..scene.nx {
            let i = c.abs_diff(half);
            out.values[r * scene.nx + c] = accum[r * nh + i] / inc_accum;
        }
    }
    Ok(out)
}
