//! Simulation and analysis toolkit for microsphere-assisted imaging of
//! colour centres in diamond.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod fdtd;
pub mod field;
pub mod io;
pub mod odmr;
pub mod optics;
pub mod photon;
pub mod pipeline;
pub mod psf;
pub mod scan;
pub mod svg;
