//! Multicomponent Smoluchowski coagulation.
//!
//! The crate offers three independent ways to evolve a cluster population,
//! plus certificates that check theorem-level inequalities on the results:
//!
//! * [`regularized`] solves the size-truncated equation over Dirac mixtures by
//!   Picard iteration on short time windows glued together.
//! * [`discrete`] integrates the lattice equation with an embedded Runge-Kutta
//!   pair on a size-capped index set.
//! * [`stochastic`] runs the Marcus-Lushnikov particle system with majorant
//!   thinning.
//! * [`diagnostics`] turns trajectories into pass/fail [`diagnostics::Certificate`]s.
//!
//! [`runner`] wires everything to JSON configs and on-disk artifacts.

// `!(x > 0.0)` guards reject NaN on purpose; index loops follow the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod diagnostics;
pub mod discrete;
pub mod error;
pub mod kernels;
pub mod measures;
pub mod plots;
pub mod regularized;
pub mod runner;
pub mod stochastic;
pub mod trajectory;

pub use error::{CoagError, Result};
