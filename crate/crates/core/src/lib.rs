//! Deterministic latency simulator for single-batch Mixture-of-Experts
//! inference on an edge system: one consumer GPU plus a set of near-data
//! processing DIMMs (NDP-DIMMs) hanging off the CPU memory bus.
//!
//! The simulator is an analytical roofline model driven by a discrete-event
//! engine over serial resources (GPU, CPU, PCIe link, the GPU weight-stream
//! channel, each NDP DIMM). Expert routing comes from synthetic
//! Zipf-distributed traces or from
//! trace files; six scheduling policies map expert work onto the devices,
//! ranging from naive on-demand weight fetching to tensor-parallel NDP
//! execution with analytic GPU/NDP load balancing and dataset-free expert
//! prefetching.
//!
//! Everything is deterministic: identical configs and seeds produce
//! bit-identical reports, traces, and rendered artifacts.

pub mod balance;
pub mod config;
pub mod cost;
pub mod engine;
pub mod plan;
pub mod prefetch;
pub mod report;
pub mod runner;
pub mod schedulers;
pub mod trace;

pub use config::{
    bundled_hardware, bundled_model, ConfigError, HardwareConfig, MoeModelConfig,
    SchedulabilityVerdict, WorkloadConfig,
};
pub use engine::{run, RunOptions, RunReport, RunStatus};
pub use schedulers::PolicyId;
