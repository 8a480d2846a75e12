//! Parallel translation and stochastic flows on the Wasserstein space over
//! the circle, computed with spectral grids in Lagrangian coordinates.

pub mod error;
pub mod field;
pub mod flow;
pub mod random;
pub mod functionals;
pub mod stats;
pub mod stochastic_flow;
pub mod tangent;
pub mod transport_det;
pub mod transport_stoch;

pub use error::{Error, Result};
pub use field::{GridField, Interpolation, LiftedMap, Spectrum};
pub use flow::{Density, FlowState, VelocityPotential};
