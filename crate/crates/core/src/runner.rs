//! Batch execution: sweeps over (model, DIMM count, policy) run as
//! independent jobs, in parallel when the `parallel` feature is on (the
//! default). Results always come back in job order, so parallel and
//! sequential execution are interchangeable.

use crate::config::{HardwareConfig, MoeModelConfig};
use crate::engine::{run, RunOptions, RunReport};
use crate::schedulers::PolicyId;
use crate::trace::{generate, RoutingTrace, SyntheticTraceParams};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct Job {
    pub model: Arc<MoeModelConfig>,
    pub hw: HardwareConfig,
    pub trace: Arc<RoutingTrace>,
    pub policy: PolicyId,
    pub opts: RunOptions,
}

pub fn run_job(job: &Job) -> RunReport {
    run(&job.model, &job.hw, &job.trace, job.policy, &job.opts)
}

/// Run jobs across threads (with the `parallel` feature) in input order.
#[cfg(feature = "parallel")]
pub fn run_many(jobs: &[Job]) -> Vec<RunReport> {
    use rayon::prelude::*;
    jobs.par_iter().map(run_job).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_many(jobs: &[Job]) -> Vec<RunReport> {
    run_many_sequential(jobs)
}

/// Single-threaded reference path; always available.
pub fn run_many_sequential(jobs: &[Job]) -> Vec<RunReport> {
    jobs.iter().map(run_job).collect()
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub models: Vec<MoeModelConfig>,
    pub hw: HardwareConfig,
    pub ndp_counts: Vec<usize>,
    pub policies: Vec<PolicyId>,
    pub prompt_len: usize,
    pub output_len: usize,
    pub trace_params: SyntheticTraceParams,
    pub opts: RunOptions,
}

/// Expand a sweep into jobs ordered by (model, policy, DIMM count), each
/// list in its given order. One trace per model: routing is independent of
/// the DIMM count and the policy, so every point of a model shares it.
pub fn sweep_jobs(spec: &SweepSpec) -> Vec<Job> {
    let mut jobs = Vec::new();
    for model in &spec.models {
        let model = Arc::new(model.clone());
        let trace = Arc::new(generate(
            &model,
            spec.prompt_len,
            spec.output_len,
            &spec.trace_params,
        ));
        for &policy in &spec.policies {
            for &n in &spec.ndp_counts {
                let hw = HardwareConfig {
                    ndp_count: n,
                    ..spec.hw.clone()
                };
                jobs.push(Job {
                    model: Arc::clone(&model),
                    hw,
                    trace: Arc::clone(&trace),
                    policy,
                    opts: spec.opts,
                });
            }
        }
    }
    jobs
}

pub fn sweep(spec: &SweepSpec) -> Vec<RunReport> {
    run_many(&sweep_jobs(spec))
}
