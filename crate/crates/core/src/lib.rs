//! Three-phase infeasibility analysis (TPIA) for unbalanced distribution
//! feeders, solved to a certified optimality gap.
//!
//! The pipeline reformulates the current-injection infeasibility problem as a
//! bilinear program, tightens the voltage-deviation box with sequential bound
//! tightening over McCormick relaxations, and closes the gap with spatial
//! branch-and-bound warm-started from a local interior-point solution.
//!
//! All global certificates are relative to the initial voltage-deviation box
//! (`dv_box`, 0.25 pu by default).

pub mod convex;
pub mod error;
pub mod feeder;
pub mod formulation;
pub mod interval;
pub mod nlp;
pub mod pipeline;
pub mod relaxation;
pub mod report;
pub mod rows;
pub mod sbnb;
pub mod sbt;

pub use error::{Error, Result};
pub use feeder::{parse_feeder, serialize_feeder, validate, Network, Phase};
pub use formulation::{build, Norm};
