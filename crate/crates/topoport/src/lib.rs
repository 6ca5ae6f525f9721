//! Continual transfer of multi-agent communication topologies.
//!
//! A topology that worked for one task stream stage is worth keeping: this
//! crate stores validated communication structures as factorized prior
//! atoms, retrieves the most transferable atom for a new task by entropic
//! fused Gromov-Wasserstein alignment, projects its consensus structure into
//! the current agent space, and then adapts a sparse residual posterior
//! around that prior under a PAC-Bayes-style complexity budget. A synthetic
//! continual-learning harness with planted-topology oracles makes the
//! stability-plasticity behavior measurable without any model calls.
//!
//! Modules:
//!
//! - [`graph`]: attributed topologies, feasibility masks, structural metrics
//! - [`fgw`]: entropic fused Gromov-Wasserstein couplings and costs
//! - [`bank`]: the prior-atom bank: retrieval, projection, consolidation
//! - [`posterior`]: edge-factorized stochastic topologies and sampling
//! - [`adapt`]: residual training, transfer complexity, the risk bound
//! - [`harness`]: synthetic task streams, the continual driver, AA/AF
//! - [`runner`]: config files, run orchestration, artifacts on disk
//!
//! The `examples/` directory has one runnable walkthrough per capability;
//! start with `fgw_alignment` and `continual_run`.

pub mod adapt;
pub mod bank;
pub mod error;
pub mod fgw;
pub mod graph;
pub mod posterior;

pub use error::{Error, Result};
