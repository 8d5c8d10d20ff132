//! Energy-stable FDTD engine with Yee-grid subgridding.
//!
//! Each grid region is treated as a discrete dynamical system with hanging
//! boundary variables as inputs. Regions connect through interface patches
//! that cancel the exchanged power exactly, so stability of the whole
//! composite follows from stability of each region.

pub mod dissipation;
pub mod error;
pub mod kernels;
pub mod mesh;
pub mod operators;
pub mod scenario;
pub mod subgrid;

pub use error::{Error, Result};

/// Vacuum permittivity in F/m.
pub const EPS0: f64 = 8.854_187_812_8e-12;
/// Vacuum permeability in H/m.
pub const MU0: f64 = 1.256_637_062_12e-6;
/// Speed of light in vacuum in m/s.
pub const C0: f64 = 299_792_458.0;
