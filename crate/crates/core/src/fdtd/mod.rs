//! Two-dimensional TM finite-difference time-domain solver, the analytic
//! cylinder reference and focal-spot extraction.

mod focus;
pub mod mie;
mod scene;
mod solver;

use thiserror::Error;

pub use focus::{extract_focus, FocusMetrics, MIN_ENHANCEMENT};
pub use mie::{mie_cylinder_field, CylinderSeries};
pub use scene::{
    build_scene, build_scene_capped, Domain, Region, SceneGrid, CELLS_PER_WAVELENGTH,
    DEFAULT_MAX_CELLS, DIAMOND_INDEX,
};
pub use solver::{planned_periods, run_fdtd, FdtdConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdtdError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("grid spacing {dx_nm:.2} nm is coarser than the {max_nm:.2} nm resolution floor")]
    Resolution { dx_nm: f64, max_nm: f64 },
    #[error("grid of {cells} cells exceeds the cap of {cap}")]
    MemoryCap { cells: usize, cap: usize },
    #[error("field diverged at step {step} (|E| = {magnitude:.3e})")]
    Instability { step: usize, magnitude: f64 },
    #[error("no focal spot: {0}")]
    NoFocus(String),
    #[error("series truncated at order {order} leaves a relative tail of {ratio:.2e}")]
    Truncation { order: usize, ratio: f64 },
}
