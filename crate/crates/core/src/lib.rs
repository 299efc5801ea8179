//! Component-level GPU power simulation.
//!
//! A chiplet GPU is modeled as three power components (XCD, IOD, HBM) driven
//! by roofline utilization of GEMM and all-gather kernels. A TDP governor
//! clamps the clock, policies set frequency/power caps and CU partitions, and
//! the analysis layer turns traces into energy, savings and overlap numbers.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod engine;
pub mod experiment;
pub mod format;
pub mod gpu_model;
pub mod parallel;
pub mod policy;
pub mod scenario;
pub mod workload;

pub use analysis::{Metrics, OverlapReport};
pub use engine::{run, EngineError, SimTrace};
pub use gpu_model::{validate_spec, ComponentKind, GpuSpec, PerComponent, PowerBreakdown, ValidatedSpec};
pub use parallel::Exec;
pub use policy::{AutoConfig, PolicyConfig};
pub use scenario::{parse_scenario, Scenario};
pub use workload::{KernelDesc, KernelId, Op};
