//! Batch Bayesian optimization for calibrating expensive black-box
//! simulators, with optional reduction of the search space through active
//! subspaces or a learned autoencoder, and an optional neural prior mean.

pub mod acquisition;
pub mod active_subspace;
pub mod error;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod neural;
pub mod orchestrator;
pub mod rng;
pub mod sampling;
pub mod simulators;
pub mod special;

pub use acquisition::{AcquisitionFamily, AcquisitionSpec, FantasyMode};
pub use error::{Error, Result};
pub use gp::{GpModel, MeanFunction};
pub use kernels::{KernelFamily, KernelSpec};
pub use orchestrator::{run, CalibrationConfig, CalibrationReport, CalibrationState, Calibrator, DrMode, MeanMode};
pub use sampling::BoxDomain;
pub use simulators::{Builtin, BuiltinSimulator, ExternalSimulator, Simulator, SimulatorError};
