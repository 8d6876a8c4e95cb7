//! Per-layer execution plans: small DAGs of compute and transfer items that
//! the engine list-schedules over the serial resources (GPU, CPU, PCIe link,
//! the GPU weight-stream channel, individual NDP DIMMs).
//!
//! Plans are pure data with structural equality, so tests can assert that two
//! policies degenerate to the identical schedule.

use crate::cost::Stage;
use std::collections::BTreeMap;

/// Granularity denominator factor for fractional expert shards: a shard is a
/// multiple of `1/(SHARD_GRID * ndp_count)` of one expert.
pub const SHARD_GRID: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComputeDevice {
    Gpu,
    Cpu,
    Ndp(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Resource {
    Gpu,
    Cpu,
    /// Shared link carrying on-demand weight fetches and all activation
    /// traffic.
    Pcie,
    /// GPU copy-engine channel for the load-balanced policies' expert weight
    /// stream: it rides under NDP compute and activation returns, so the
    /// balance equation's GPU side and NDP side progress concurrently.
    Stream,
    Ndp(u16),
}

impl ComputeDevice {
    pub fn resource(self) -> Resource {
        match self {
            ComputeDevice::Gpu => Resource::Gpu,
            ComputeDevice::Cpu => Resource::Cpu,
            ComputeDevice::Ndp(i) => Resource::Ndp(i),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExpertRef {
    Routed(u16),
    Shared(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferKind {
    Weights,
    ActivationIn,
    ActivationOut,
}

/// Expert compute on one device. `fraction` is the share of the expert's
/// weights this item touches (work conservation: fractions of a routed
/// expert sum to 1 across the plan). `seconds` is the busy time the engine
/// charges, which for split-hidden GPU work may be less than the roofline
/// time of `fraction` (the hidden part overlaps a weight transfer).
#[derive(Debug, Clone, PartialEq)]
pub struct WorkItem {
    pub device: ComputeDevice,
    pub expert: ExpertRef,
    pub fraction: f64,
    pub flops: f64,
    pub bytes_read: u64,
    pub seconds: f64,
}

/// PCIe transfer. Fractional weight transfers scale linearly in the carried
/// fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferItem {
    pub kind: TransferKind,
    pub bytes: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanOpKind {
    Work(WorkItem),
    Transfer(TransferItem),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOp {
    pub resource: Resource,
    pub kind: PlanOpKind,
    /// Indices of ops that must finish before this one starts. Ops sharing a
    /// resource additionally serialize in plan order.
    pub deps: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    pub stage: Stage,
    pub moe_layer: u32,
    pub ops: Vec<PlanOp>,
}

impl ExecutionPlan {
    pub fn new(stage: Stage, moe_layer: u32) -> Self {
        ExecutionPlan {
            stage,
            moe_layer,
            ops: Vec::new(),
        }
    }

    pub fn push(&mut self, op: PlanOp) -> u32 {
        self.ops.push(op);
        (self.ops.len() - 1) as u32
    }

    pub fn work(
        &mut self,
        device: ComputeDevice,
        expert: ExpertRef,
        fraction: f64,
        flops: f64,
        bytes_read: u64,
        seconds: f64,
        deps: Vec<u32>,
    ) -> u32 {
        self.push(PlanOp {
            resource: device.resource(),
            kind: PlanOpKind::Work(WorkItem {
                device,
                expert,
                fraction,
                flops,
                bytes_read,
                seconds,
            }),
            deps,
        })
    }

    pub fn transfer(
        &mut self,
        kind: TransferKind,
        bytes: u64,
        seconds: f64,
        deps: Vec<u32>,
    ) -> u32 {
        self.transfer_on(Resource::Pcie, kind, bytes, seconds, deps)
    }

    pub fn transfer_on(
        &mut self,
        resource: Resource,
        kind: TransferKind,
        bytes: u64,
        seconds: f64,
        deps: Vec<u32>,
    ) -> u32 {
        self.push(PlanOp {
            resource,
            kind: PlanOpKind::Transfer(TransferItem {
                kind,
                bytes,
                seconds,
            }),
            deps,
        })
    }

    /// Summed work fractions per routed expert (work-conservation checks).
    pub fn routed_fraction_sums(&self) -> BTreeMap<u16, f64> {
        let mut sums = BTreeMap::new();
        for op in &self.ops {
            if let PlanOpKind::Work(w) = &op.kind {
                if let ExpertRef::Routed(id) = w.expert {
                    *sums.entry(id).or_insert(0.0) += w.fraction;
                }
            }
        }
        sums
    }

    pub fn total_transfer_bytes(&self) -> u64 {
        self.ops
            .iter()
            .filter_map(|op| match &op.kind {
                PlanOpKind::Transfer(t) => Some(t.bytes),
                _ => None,
            })
            .sum()
    }
}
