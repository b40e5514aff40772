//! Port-Hamiltonian modeling and optimal vibration damping for frame structures.
//!
//! The crate covers the full pipeline:
//!
//! 1. [`structure`]: frame geometry, element matrices, assembly of the
//!    second-order model `M q'' + D q' + K q = F_u u`.
//! 2. [`ph`]: lift to a linear port-Hamiltonian system
//!    `x' = (J - R) Q x + B u`, `y = B^T Q x` with `H(x) = x^T Q x / 2`.
//! 3. [`integrate`]: implicit-midpoint time stepping with an exact discrete
//!    energy balance, and the energy ledger audit built on it.
//! 4. [`qp`]: a structure-exploiting operator-splitting solver for the
//!    box-constrained transcribed problems.
//! 5. [`ocp`]: transcription of the damping optimal control problems
//!    (quadratic control cost and supplied-energy cost) and solution
//!    extraction including adjoints.
//! 6. [`analysis`]: switching functions, bang/singular arc classification,
//!    Riccati references, turnpike metrics and cost comparisons.
//! 7. [`scenario`]: config-driven runs and plot data emission used by the
//!    command line interface.

pub mod analysis;
pub mod integrate;
pub mod ocp;
pub mod ph;
pub mod qp;
pub mod report;
pub mod scenario;
pub mod structure;
pub mod triplet;
