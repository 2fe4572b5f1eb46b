//! Stabilized leapfrog local time-stepping (LF-LTS) for the second-order wave
//! equation, discretized with mass-lumped conforming P1 finite elements.
//!
//! The crate is organized along the pipeline of a solver run:
//!
//! * [`cheb`] — the damped Chebyshev polynomial family `P` that defines the
//!   stabilized scheme, with closed-form and recursive evaluation and sampled
//!   verification of its analytic bounds.
//! * [`mesh`] — 1D locally refined interval meshes and 2D graded L-shape
//!   triangulations, the coarse/fine degree-of-freedom partition, and a
//!   plain-text mesh exchange format.
//! * [`fem`] — P1 assembly of the stiffness operator `K` and the diagonal
//!   lumped mass `D`, the operator `A = D^{-1} K`, nodal interpolation and
//!   error norms.
//! * [`lts`] — the time integrator itself: the `p`-substep update, starting
//!   step, trajectory driver and discrete energy.
//! * [`spectral`] — the effective one-step operator `A P(dt^2 Pi_f A)`,
//!   its extreme eigenvalues, maximal stable step, critical-step scan and
//!   block-structure checks.
//! * [`harness`] — experiment drivers (convergence ladders, energy traces,
//!   instability demonstration, CFL tables, L-shape study), configuration
//!   parsing and CSV/manifest output.
//!
//! All floating-point work is in `f64`. Solver state is explicit and
//! immutable inputs (`Mesh`, `LumpedSystem`, `StabParams`) are freely
//! shareable across threads.

// `!(x > 0.0)` rejects NaN along with the out-of-range values; `partial_cmp`
// would obscure that. Kernels that walk several slices in lockstep stay as
// indexed loops on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod cheb;
pub mod error;
pub mod fem;
pub mod harness;
pub mod lts;
pub mod mesh;
pub mod spectral;

pub use cheb::{PolyBoundsReport, StabParams};
pub use error::{Error, Result};
pub use fem::LumpedSystem;
pub use lts::{EnergySample, StartScheme, WaveState};
pub use mesh::{DofPartition, Mesh, MeshStats};
pub use spectral::{CriticalPoint, ScanSettings, StabilityReport, StabilizedOperator};
