//! Discrete-event simulator and scheduling library for a serverless LLM
//! inference control plane that shares CPU and GPU nodes across models.
//!
//! The crate is organised bottom-up:
//!
//! * [`simcore`]: virtual clock, event queue and run loop.
//! * [`workload`]: traces, length datasets, SLO targets.
//! * [`perfmodel`]: interpolated iteration latencies and memory-op costs.
//! * [`compute`]: headroom scheduling and shadow validation.
//! * [`memory`]: KV-cache demand, watermark scaling, node memory orchestration.
//! * [`defrag`]: preemption plans and bin-packing order.
//! * [`cluster`]: routing, instance lifecycle and baseline policies.
//! * [`metrics`]: SLO compliance, usage and TTFT reports.
//! * [`config`] and [`experiment`]: config files and end-to-end runs.

pub mod cluster;
pub mod compute;
pub mod config;
pub mod defrag;
pub mod error;
pub mod experiment;
pub mod memory;
pub mod metrics;
pub mod perfmodel;
pub mod simcore;
pub mod types;
pub mod workload;

pub use error::{ConfigError, Error, PerfError, SimError, WorkloadError};
pub use simcore::SimTime;
pub use types::{
    Bytes, HardwareClass, InstanceId, ModelId, NodeId, OpId, RequestId, GIB, KIB, MIB,
};
