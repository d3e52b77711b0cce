//! Convex relaxations of small AC optimal power flow problems.
//!
//! The crate formulates an OPF instance as a polynomial optimization problem in
//! rectangular voltage coordinates and builds three families of conic
//! relaxations from it:
//!
//! * the first-order (Shor) semidefinite relaxation,
//! * order-γ moment relaxations from the Lasserre hierarchy,
//! * the mixed SDP/SOCP hierarchy, where higher-order PSD blocks are weakened
//!   to 2×2-minor second-order cone conditions.
//!
//! Programs are solved with the in-tree primal-dual interior-point method in
//! [`conic`], certified by the rank test in [`recover`], and checked against an
//! independent Newton power-flow oracle.
//!
//! ```no_run
//! use opf_relax::{cases, hierarchy::Relaxation, pipeline};
//!
//! let case = cases::builtin("two-bus").unwrap();
//! let report = pipeline::solve_case(&case, Relaxation::Moment(1), &Default::default()).unwrap();
//! assert!(report.solution.exact);
//! ```

pub mod cases;
pub mod conic;
mod error;
pub mod hierarchy;
pub mod network;
pub mod pipeline;
pub mod poly;
pub mod recover;
pub mod sweep;

pub use error::{Error, Result};
