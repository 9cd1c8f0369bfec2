//! Joint active-user detection, channel estimation and data detection for
//! grant-free uplink transmission in cell-free massive MIMO systems.
//!
//! The crate is organised bottom-up:
//!
//! * [`scenario`] draws random deployments, channels, pilots, payloads and
//!   received signals.
//! * [`mathcore`] holds the proximal operators, shrinkage/clamp primitives and
//!   posterior-mean denoisers shared by every solver.
//! * [`solvers`] implements the classical box-constrained forward-backward
//!   splitting solver and its posterior-mean variant.
//! * [`dunfold`] unrolls both solvers into trainable layer stacks with
//!   momentum, a soft activity head, a hand-written reverse pass and a trainer.
//! * [`detection`] turns estimates into activity decisions, symbol decisions
//!   and metrics.
//! * [`baselines`] provides the reference receivers.
//! * [`harness`] wires everything into seeded Monte-Carlo experiments and the
//!   `jacd` command line tool.

pub mod baselines;
pub mod detection;
pub mod dunfold;
pub mod error;
pub mod exec;
pub mod harness;
pub mod kvfile;
pub mod linalg;
pub mod mathcore;
pub mod rng;
pub mod scenario;
pub mod solvers;

pub use error::{Error, Result};
pub use linalg::{CMat, C64};
