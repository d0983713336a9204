//! Simulation and estimation toolkit for droop-controlled DC microgrids.
//!
//! The crate covers the whole monitoring and optimization loop:
//!
//! * [`grid`]: topology, conductance Laplacian, ZIP loads and droop settings.
//! * [`steady`]: per-slot power balance residual, its Jacobians and a damped Newton solver.
//! * [`training`]: training epoch layout, perturbation sequences, excitation checks, noisy measurements.
//! * [`channel`]: the implicit power-talk channel (estimation, modulation, demodulation, covariance).
//! * [`jsise`]: joint system identification and state estimation.
//! * [`crlb`]: constrained Cramér-Rao bounds and RRMSE reporting.
//! * [`dispatch`]: merit-order dispatch, bus signaling and relative cost metrics.
//! * [`harness`]: scenarios, Monte Carlo experiments and CSV tables.
//!
//! ```
//! use dcmg::grid::{GridParameters, Topology};
//!
//! let topo = Topology::line(3).unwrap();
//! let params = GridParameters::uniform(topo, 1000.0, 200.0, 200.0, 0.0, 1.0).unwrap();
//! assert_eq!(params.pack().len(), 15);
//! ```

pub mod channel;
pub mod crlb;
pub mod dispatch;
pub mod error;
pub mod grid;
pub mod harness;
pub mod jsise;
pub mod linalg;
pub mod parallel;
pub mod rng;
pub mod steady;
pub mod training;

pub use error::{Error, Result};
