//! Scheduling policies: how one MoE layer's expert work maps onto the GPU,
//! CPU, PCIe link, and NDP DIMMs.
//!
//! * `ondemand` — fetch each activated expert's weights to the GPU, compute
//!   there (transfers pipeline against compute over the serial link).
//! * `cpu`     — ship activations to the CPU, compute experts from host
//!   memory, ship results back.
//! * `ep`      — expert parallelism: each expert lives whole on its home
//!   DIMM (round-robin by id); optional greedy offload of the tail expert
//!   from the most-loaded DIMM to the GPU when that strictly helps.
//! * `tp`      — tensor parallelism: every activated expert splits evenly
//!   across all DIMMs.
//! * `tp-lb`   — tensor parallelism plus the analytic GPU/NDP split: `e_g`
//!   expert-units stream to the GPU while DIMMs shard the rest.
//! * `tp-lb-pre` — `tp-lb` whose decode hits prefetched GPU-resident experts
//!   (no weight traffic for hits), falling back to `tp-lb` when nothing hit.

use crate::balance::{e_g_prime, BalanceSolution};
use crate::config::{HardwareConfig, MoeModelConfig};
use crate::cost::{
    self, activation_bytes, expert_flops, LatencyPrimitives, Stage,
};
use crate::plan::{
    ComputeDevice, ExecutionPlan, ExpertRef, Resource, TransferKind, SHARD_GRID,
};
use crate::prefetch::cap_gpu_hits;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyId {
    /// On-demand expert fetch to the GPU.
    Ondemand,
    /// CPU expert compute next to host memory.
    Cpu,
    /// Expert-parallel NDP execution.
    Ep,
    /// Tensor-parallel NDP execution.
    Tp,
    /// Tensor-parallel with analytic GPU/NDP load balancing.
    TpLb,
    /// Load balancing plus decode-time expert prefetching.
    TpLbPre,
}

impl PolicyId {
    pub const ALL: [PolicyId; 6] = [
        PolicyId::Ondemand,
        PolicyId::Cpu,
        PolicyId::Ep,
        PolicyId::Tp,
        PolicyId::TpLb,
        PolicyId::TpLbPre,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            PolicyId::Ondemand => "ondemand",
            PolicyId::Cpu => "cpu",
            PolicyId::Ep => "ep",
            PolicyId::Tp => "tp",
            PolicyId::TpLb => "tp-lb",
            PolicyId::TpLbPre => "tp-lb-pre",
        }
    }

    pub fn from_cli_name(name: &str) -> Option<PolicyId> {
        PolicyId::ALL
            .into_iter()
            .find(|p| p.cli_name() == name)
    }
}

impl std::fmt::Display for PolicyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.cli_name())
    }
}

/// Static expert-to-DIMM placement for expert parallelism.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertPlacement {
    pub ndp_count: usize,
}

impl ExpertPlacement {
    /// Round-robin by expert id, identical in every layer.
    pub fn home(&self, _layer: u32, expert: u16) -> u16 {
        expert % self.ndp_count as u16
    }
}

/// Everything a policy needs to plan one MoE layer of one stage.
#[derive(Debug, Clone, Copy)]
pub struct LayerContext<'a> {
    pub model: &'a MoeModelConfig,
    pub hw: &'a HardwareConfig,
    pub prim: &'a LatencyPrimitives,
    pub stage: Stage,
    pub tokens: usize,
    pub moe_layer: u32,
    /// Activated routed experts, ascending ids.
    pub experts: &'a [u16],
    /// Tokens routed to each activated expert (parallel to `experts`).
    pub token_counts: &'a [u32],
}

impl<'a> LayerContext<'a> {
    fn weight_bytes(&self) -> u64 {
        self.model.expert_weight_bytes()
    }

    fn act_bytes(&self) -> u64 {
        activation_bytes(self.model, self.tokens)
    }

    fn new_plan(&self) -> ExecutionPlan {
        let mut plan = ExecutionPlan::new(self.stage, self.moe_layer);
        // Shared experts are pinned on the GPU and run there every layer,
        // scheduled ahead of any policy-specific GPU work.
        for s in 0..self.model.num_shared_experts {
            plan.work(
                ComputeDevice::Gpu,
                ExpertRef::Shared(s as u16),
                1.0,
                expert_flops(self.model, self.tokens),
                self.weight_bytes(),
                self.prim.t_g,
                vec![],
            );
        }
        plan
    }
}

/// On-demand fetch: per activated expert, a weight transfer followed by GPU
/// compute; the serial link pipelines transfer i+1 under compute i.
/// Activations are already GPU-resident, so no activation traffic.
pub fn plan_on_demand(ctx: &LayerContext) -> ExecutionPlan {
    let mut plan = ctx.new_plan();
    for (i, &e) in ctx.experts.iter().enumerate() {
        let tokens = ctx.token_counts[i] as usize;
        let tw = plan.transfer(TransferKind::Weights, ctx.weight_bytes(), ctx.prim.t_w, vec![]);
        plan.work(
            ComputeDevice::Gpu,
            ExpertRef::Routed(e),
            1.0,
            expert_flops(ctx.model, tokens),
            ctx.weight_bytes(),
            cost::gpu_expert_time(ctx.model, ctx.hw, tokens),
            vec![tw],
        );
    }
    plan
}

/// CPU compute: activations over, experts serially from host memory,
/// results back.
pub fn plan_cpu(ctx: &LayerContext) -> ExecutionPlan {
    let mut plan = ctx.new_plan();
    let a_in = plan.transfer(TransferKind::ActivationIn, ctx.act_bytes(), ctx.prim.t_a, vec![]);
    let mut compute = Vec::with_capacity(ctx.experts.len());
    for (i, &e) in ctx.experts.iter().enumerate() {
        let tokens = ctx.token_counts[i] as usize;
        compute.push(plan.work(
            ComputeDevice::Cpu,
            ExpertRef::Routed(e),
            1.0,
            expert_flops(ctx.model, tokens),
            ctx.weight_bytes(),
            cost::cpu_expert_time(ctx.model, ctx.hw, tokens),
            vec![a_in],
        ));
    }
    plan.transfer(TransferKind::ActivationOut, ctx.act_bytes(), ctx.prim.t_a, compute);
    plan
}

/// Expert parallelism: whole experts on their home DIMMs, one activation
/// broadcast in and one gather out. With `gpu_offload`, the longest expert
/// on the most-loaded DIMM migrates to the GPU when that strictly shortens
/// the layer.
pub fn plan_expert_parallel(
    ctx: &LayerContext,
    placement: &ExpertPlacement,
    gpu_offload: bool,
) -> ExecutionPlan {
    let n = ctx.hw.ndp_count;
    let full_time = |tokens: usize| cost::ndp_full_expert_time(ctx.model, ctx.hw, tokens);

    let mut per_dimm: Vec<Vec<(u16, usize)>> = vec![Vec::new(); n];
    for (i, &e) in ctx.experts.iter().enumerate() {
        per_dimm[placement.home(ctx.moe_layer, e) as usize]
            .push((e, ctx.token_counts[i] as usize));
    }
    let queue: Vec<f64> = per_dimm
        .iter()
        .map(|v| v.iter().map(|&(_, t)| full_time(t)).sum())
        .collect();

    // Offload decision, evaluated against the exact layer makespan the plan
    // below realizes: DIMM queues start after the activation broadcast, the
    // gather waits for all DIMMs and a free link, the migrated expert's
    // weights follow the broadcast on the link.
    let shared_gpu = ctx.model.num_shared_experts as f64 * ctx.prim.t_g;
    let t_a = ctx.prim.t_a;
    let mut moved: Option<(usize, usize)> = None; // (dimm, index within dimm)
    if gpu_offload {
        // Most-loaded DIMM, ties to the lower index.
        let mut busiest = 0usize;
        for d in 1..n {
            if queue[d] > queue[busiest] {
                busiest = d;
            }
        }
        // Longest expert there, ties to the earlier (lower id) entry.
        let mut cand: Option<(usize, usize, f64)> = None;
        for (i, &(_, tokens)) in per_dimm[busiest].iter().enumerate() {
            let t = full_time(tokens);
            if cand.map_or(true, |(_, _, best)| t > best) {
                cand = Some((i, tokens, t));
            }
        }
        if let Some((idx, tokens, cand_time)) = cand {
            let max_q = queue.iter().cloned().fold(0.0, f64::max);
            let old_mk = (t_a + max_q + t_a).max(shared_gpu);
            let new_max_q = queue
                .iter()
                .enumerate()
                .map(|(d, &q)| if d == busiest { q - cand_time } else { q })
                .fold(0.0, f64::max);
            let gpu_done = shared_gpu.max(t_a + ctx.prim.t_w)
                + cost::gpu_expert_time(ctx.model, ctx.hw, tokens);
            let gather = (t_a + new_max_q).max(t_a + ctx.prim.t_w) + t_a;
            if gather.max(gpu_done) < old_mk {
                moved = Some((busiest, idx));
            }
        }
    }

    let mut plan = ctx.new_plan();
    let any_ndp = ctx.experts.len() > usize::from(moved.is_some());
    let a_in = any_ndp.then(|| {
        plan.transfer(TransferKind::ActivationIn, ctx.act_bytes(), t_a, vec![])
    });
    if let Some((d, idx)) = moved {
        let (e, tokens) = per_dimm[d].remove(idx);
        let tw = plan.transfer(TransferKind::Weights, ctx.weight_bytes(), ctx.prim.t_w, vec![]);
        plan.work(
            ComputeDevice::Gpu,
            ExpertRef::Routed(e),
            1.0,
            expert_flops(ctx.model, tokens),
            ctx.weight_bytes(),
            cost::gpu_expert_time(ctx.model, ctx.hw, tokens),
            vec![tw],
        );
    }
    let mut ndp_items = Vec::new();
    for (d, experts) in per_dimm.iter().enumerate() {
        for &(e, tokens) in experts {
            ndp_items.push(plan.work(
                ComputeDevice::Ndp(d as u16),
                ExpertRef::Routed(e),
                1.0,
                expert_flops(ctx.model, tokens),
                ctx.weight_bytes(),
                full_time(tokens),
                vec![a_in.expect("NDP work implies an activation broadcast")],
            ));
        }
    }
    if !ndp_items.is_empty() {
        plan.transfer(TransferKind::ActivationOut, ctx.act_bytes(), t_a, ndp_items);
    }
    plan
}

/// Tensor parallelism: each expert-unit splits `1/N` onto every DIMM; one
/// broadcast in, one gather per DIMM out.
pub fn plan_tensor_parallel(ctx: &LayerContext) -> ExecutionPlan {
    let n = ctx.hw.ndp_count;
    let mut plan = ctx.new_plan();
    let a_in = plan.transfer(TransferKind::ActivationIn, ctx.act_bytes(), ctx.prim.t_a, vec![]);
    let mut ndp_items = Vec::with_capacity(ctx.experts.len() * n);
    for &e in ctx.experts {
        for d in 0..n {
            ndp_items.push(plan.work(
                ComputeDevice::Ndp(d as u16),
                ExpertRef::Routed(e),
                1.0 / n as f64,
                expert_flops(ctx.model, ctx.tokens) / n as f64,
                ctx.weight_bytes() / n as u64,
                ctx.prim.t_n,
                vec![a_in],
            ));
        }
    }
    for _ in 0..n {
        plan.transfer(
            TransferKind::ActivationOut,
            ctx.act_bytes(),
            ctx.prim.t_a,
            ndp_items.clone(),
        );
    }
    plan
}

/// Discretize the analytic split to the shard grid `1/(SHARD_GRID*N)`.
fn discretize_split(e_g: f64, topk: usize, ndp_count: usize) -> f64 {
    let grid = (SHARD_GRID * ndp_count) as f64;
    ((e_g * grid).round() / grid).clamp(0.0, topk as f64)
}

/// Tensor parallelism with the analytic GPU/NDP split: `e_g` expert-units'
/// weights stream to the GPU (hiding all but the `e_g'` compute tail) while
/// the DIMMs shard the remaining `topk - e_g`. A zero split degenerates to
/// plain tensor parallelism, byte for byte.
pub fn plan_tp_load_balance(ctx: &LayerContext, split: &BalanceSolution) -> ExecutionPlan {
    let n = ctx.hw.ndp_count;
    let e_disc = discretize_split(split.e_g, ctx.experts.len(), n);
    if e_disc <= 0.0 {
        return plan_tensor_parallel(ctx);
    }
    let mut plan = ctx.new_plan();

    // GPU fractions per expert, ascending id: whole experts first, then one
    // fractional shard.
    let mut gpu_frac = vec![0.0f64; ctx.experts.len()];
    let mut remaining = e_disc;
    for f in gpu_frac.iter_mut() {
        let take = remaining.min(1.0);
        *f = take;
        remaining -= take;
        if remaining <= 0.0 {
            break;
        }
    }

    let any_ndp = gpu_frac.iter().any(|&f| f < 1.0);
    let a_in = any_ndp.then(|| {
        plan.transfer(TransferKind::ActivationIn, ctx.act_bytes(), ctx.prim.t_a, vec![])
    });
    // The GPU branch lives on the weight-stream channel so it runs
    // concurrently with the NDP branch's activation traffic; its serial
    // length realizes the balance equation's GPU side.
    let weight_bytes = (e_disc * ctx.weight_bytes() as f64).round() as u64;
    let weights = plan.transfer_on(
        Resource::Stream,
        TransferKind::Weights,
        weight_bytes,
        e_disc * ctx.prim.t_w,
        vec![],
    );
    // Prefill additionally streams one activation slice per token per DIMM
    // beyond the first, serialized after the weights; decode (tokens == 1)
    // has no streaming cost.
    let mut stream_tail = weights;
    if ctx.tokens > 1 {
        let slices = (ctx.tokens - 1) as u64 * n as u64;
        stream_tail = plan.transfer_on(
            Resource::Stream,
            TransferKind::ActivationIn,
            slices * ctx.act_bytes(),
            slices as f64 * ctx.prim.t_a,
            vec![weights],
        );
    }

    let unhidden = e_g_prime(e_disc, n) * ctx.prim.t_g;
    for (i, &e) in ctx.experts.iter().enumerate() {
        if gpu_frac[i] > 0.0 {
            plan.work(
                ComputeDevice::Gpu,
                ExpertRef::Routed(e),
                gpu_frac[i],
                expert_flops(ctx.model, ctx.tokens) * gpu_frac[i],
                (gpu_frac[i] * ctx.weight_bytes() as f64).round() as u64,
                unhidden * (gpu_frac[i] / e_disc),
                vec![stream_tail],
            );
        }
    }
    let mut ndp_items = Vec::new();
    for (i, &e) in ctx.experts.iter().enumerate() {
        let r = 1.0 - gpu_frac[i];
        if r <= 0.0 {
            continue;
        }
        for d in 0..n {
            ndp_items.push(plan.work(
                ComputeDevice::Ndp(d as u16),
                ExpertRef::Routed(e),
                r / n as f64,
                expert_flops(ctx.model, ctx.tokens) * r / n as f64,
                ((r / n as f64) * ctx.weight_bytes() as f64).round() as u64,
                r * ctx.prim.t_n,
                vec![a_in.expect("NDP remainder implies an activation broadcast")],
            ));
        }
    }
    if !ndp_items.is_empty() {
        for _ in 0..n {
            plan.transfer(
                TransferKind::ActivationOut,
                ctx.act_bytes(),
                ctx.prim.t_a,
                ndp_items.clone(),
            );
        }
    }
    plan
}

/// Decode layer under prefetching: activated experts already GPU-resident
/// run there with no weight traffic (at most `floor(e_max)`, preferring
/// higher prediction rank); misses and overflow shard across the DIMMs. With
/// no hits at all this is exactly the load-balanced plan. Returns the plan
/// and the number of residency hits.
pub fn plan_tp_lb_prefetch(
    ctx: &LayerContext,
    split: &BalanceSolution,
    residency: &[u16],
    e_max: f64,
) -> (ExecutionPlan, usize) {
    let n = ctx.hw.ndp_count;
    let mut hits = Vec::new();
    let mut misses = Vec::new();
    for &e in ctx.experts {
        if residency.contains(&e) {
            hits.push(e);
        } else {
            misses.push(e);
        }
    }
    if hits.is_empty() {
        return (plan_tp_load_balance(ctx, split), 0);
    }
    let (kept, overflow) = cap_gpu_hits(&hits, e_max, residency);
    let mut ndp_set = misses;
    ndp_set.extend_from_slice(&overflow);
    ndp_set.sort_unstable();

    let mut plan = ctx.new_plan();
    for &e in &kept {
        plan.work(
            ComputeDevice::Gpu,
            ExpertRef::Routed(e),
            1.0,
            expert_flops(ctx.model, ctx.tokens),
            ctx.weight_bytes(),
            ctx.prim.t_g,
            vec![],
        );
    }
    if !ndp_set.is_empty() {
        let a_in =
            plan.transfer(TransferKind::ActivationIn, ctx.act_bytes(), ctx.prim.t_a, vec![]);
        let mut ndp_items = Vec::with_capacity(ndp_set.len() * n);
        for &e in &ndp_set {
            for d in 0..n {
                ndp_items.push(plan.work(
                    ComputeDevice::Ndp(d as u16),
                    ExpertRef::Routed(e),
                    1.0 / n as f64,
                    expert_flops(ctx.model, ctx.tokens) / n as f64,
                    ctx.weight_bytes() / n as u64,
                    ctx.prim.t_n,
                    vec![a_in],
                ));
            }
        }
        for _ in 0..n {
            plan.transfer(
                TransferKind::ActivationOut,
                ctx.act_bytes(),
                ctx.prim.t_a,
                ndp_items.clone(),
            );
        }
    }
    (plan, hits.len())
}
