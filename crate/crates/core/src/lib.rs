//! Exact optimal-stopping values of step processes on finite filtered
//! scenario trees, together with the diagnostics needed to study how these
//! values behave when processes and filtrations converge.
//!
//! The crate is organised bottom-up:
//!
//! * [`steppath`]: càdlàg step paths and the exact Skorokhod J1 distance;
//! * [`scenario`]: finite filtered probability spaces and conditional
//!   expectations on value-prefix atoms;
//! * [`procgen`]: CRR trees, scaled random walks, grid discretizations and
//!   the deterministic counterexample pair;
//! * [`stoprule`]: adapted (and randomized) stopping rules and the
//!   constructive transformations between them;
//! * [`snell`]: backward-induction solvers for every value of interest;
//! * [`convergence`]: finite-sample gap statistics for each convergence mode;
//! * [`experiment`]: the seeded experiment harness behind the CLI.

pub mod convergence;
pub mod error;
pub mod experiment;
pub mod procgen;
pub mod scenario;
pub mod snell;
pub mod steppath;
pub mod stoprule;

pub use error::{Error, Result};
pub use scenario::{CoupledSpace, Filtration, ScenarioTree};
pub use snell::{Payoff, ValueReport};
pub use steppath::{StepPath, TimeGrid};
pub use stoprule::{RandomizedStoppingRule, StoppingRule};
