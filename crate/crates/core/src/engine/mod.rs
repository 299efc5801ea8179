//! Discrete-time simulation core: roofline rates, bandwidth contention, the
//! TDP frequency governor and the stepping loop that emits power traces.

pub mod governor;
pub mod rates;
pub mod sim;

use thiserror::Error;

use crate::gpu_model::ModelError;
use crate::policy::PolicyError;
use crate::workload::{KernelId, WorkloadError};

pub use governor::{govern, operating_point, place, solve_frequency, KernelFlow, OperatingPoint, GOVERNOR_TOL_MHZ};
pub use rates::{
    contention_shares, copy_capacity, kernel_duration, kernel_rates, utilizations, BandwidthShare, KernelShares,
    Placement, ResourceRates,
};
pub use sim::{run, Category, KernelTimeline, PowerSample, RunOutput, SampleFlow, SimState, SimTrace};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("kernel {0} cannot make progress: every rate it needs is zero")]
    Stall(KernelId),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("policy produced unusable settings: {0}")]
    Policy(#[from] PolicyError),
}
