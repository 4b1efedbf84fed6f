//! Nonlinear Kirchhoff-Love plate toolkit: energy, rigidity and minimization
//! on structured quadrilateral meshes with bicubic Hermite elements.

pub mod analysis;
pub mod energy;
pub mod error;
pub mod expr;
pub mod forms;
pub mod jet;
pub mod linalg;
pub mod mesh;
pub mod minimize;
pub mod quadrature;
pub mod rigidity;
pub mod space;

pub use error::{PlateError, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
