//! Pseudo-spectral toolkit for the anisotropic incompressible MHD perturbation
//! system near the background field `e2` in a horizontally periodic slab with
//! slip boundaries at the top and bottom walls.
//!
//! Horizontal directions use a Fourier basis on the periodic box, the vertical
//! direction uses discrete cosine and sine expansions on an equispaced grid
//! that satisfy the slip conditions exactly:
//!
//! * horizontal components (velocity, magnetic perturbation) are cosine series,
//!   so their normal derivative vanishes on the walls,
//! * vertical components are sine series, so they vanish on the walls.
//!
//! On top of the solver the crate provides conormal Sobolev diagnostics: the
//! weighted vector fields `Z1 = d1`, `Z2 = d2`, `Z3 = phi(x3) d3`, tangential
//! and conormal norm hierarchies, the energy/dissipation ledgers used by the
//! decay, uniform-bound and vanishing-dissipation studies, and anisotropic
//! Sobolev inequality probes.

pub mod conormal;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod field;
pub mod grid;
pub mod io;
pub mod ops;
pub mod transform;

pub use error::MhdError;
pub use field::{SpectralField, SpectralVectorField, VerticalBasis};
pub use grid::{plan_grid, Grid, GridSpec};

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, MhdError>;
