//! Discrete-event execution: list-schedules each layer's plan over the
//! serial resources and accumulates the two-stage latency report.
//!
//! Scheduling rules:
//! * every resource (GPU, CPU, PCIe link, weight-stream channel, each DIMM)
//!   runs one item at a time;
//! * ops sharing a resource serialize in plan order; an op additionally waits
//!   for its declared dependencies;
//! * layers do not pipeline: a layer starts only when the previous layer's
//!   plan has fully drained, and decode tokens are strictly sequential;
//! * non-expert work (attention, norms, router) charges the GPU between MoE
//!   plans; the prefetch transfer block charges the PCIe link once between
//!   the stages.

use crate::balance::{self, BalanceInputs};
use crate::config::{
    check_capacity, HardwareConfig, MoeModelConfig, SchedulabilityVerdict,
};
use crate::cost::{primitives, Stage, StageContext};
use crate::plan::{ExecutionPlan, PlanOpKind, Resource};
use crate::prefetch;
use crate::schedulers::{self, ExpertPlacement, LayerContext, PolicyId};
use crate::trace::RoutingTrace;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Fixed GPU activation workspace reserved out of the prefetch budget.
pub const DEFAULT_WORKSPACE_BYTES: u64 = 1_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Let expert parallelism migrate one tail expert per layer to the GPU.
    pub ep_gpu_offload: bool,
    /// Cap prefetched experts per layer at topk (past that the marginal
    /// expert no longer pays for its transfer block).
    pub prefetch_cap_topk: bool,
    /// GPU activation workspace subtracted from the prefetch budget.
    pub workspace_bytes: u64,
    /// Record per-op timeline events (tests and inspection).
    pub record_timeline: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            ep_gpu_offload: true,
            prefetch_cap_topk: true,
            workspace_bytes: DEFAULT_WORKSPACE_BYTES,
            record_timeline: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    NotSupported {
        required_bytes: u64,
        available_bytes: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub policy: PolicyId,
    pub ndp_count: usize,
    pub status: RunStatus,
    pub prefill_moe_s: f64,
    pub prefill_total_s: f64,
    pub prefetch_transfer_s: f64,
    pub decode_moe_s: f64,
    pub decode_total_s: f64,
    pub end_to_end_s: f64,
    pub prefetch_x: Option<usize>,
    pub decode_hit_rate: Option<f64>,
    /// Busy fraction per resource over the whole run.
    pub utilization: BTreeMap<String, f64>,
}

impl RunReport {
    fn not_supported(
        model: &MoeModelConfig,
        policy: PolicyId,
        ndp_count: usize,
        required_bytes: u64,
        available_bytes: u64,
    ) -> Self {
        RunReport {
            model: model.name.clone(),
            policy,
            ndp_count,
            status: RunStatus::NotSupported {
                required_bytes,
                available_bytes,
            },
            prefill_moe_s: 0.0,
            prefill_total_s: 0.0,
            prefetch_transfer_s: 0.0,
            decode_moe_s: 0.0,
            decode_total_s: 0.0,
            end_to_end_s: 0.0,
            prefetch_x: None,
            decode_hit_rate: None,
            utilization: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineEvent {
    pub resource: Resource,
    pub start: f64,
    pub end: f64,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timeline {
    pub events: Vec<TimelineEvent>,
}

/// Serial-resource availability and busy accounting. Index order: GPU, CPU,
/// PCIe, weight-stream channel, then one slot per DIMM.
#[derive(Debug, Clone)]
pub struct ResourceClock {
    pub free_at: Vec<f64>,
    pub busy: Vec<f64>,
    ndp_count: usize,
}

impl ResourceClock {
    pub fn new(ndp_count: usize) -> Self {
        ResourceClock {
            free_at: vec![0.0; 4 + ndp_count],
            busy: vec![0.0; 4 + ndp_count],
            ndp_count,
        }
    }

    pub fn index(&self, r: Resource) -> usize {
        match r {
            Resource::Gpu => 0,
            Resource::Cpu => 1,
            Resource::Pcie => 2,
            Resource::Stream => 3,
            Resource::Ndp(i) => {
                debug_assert!((i as usize) < self.ndp_count);
                4 + i as usize
            }
        }
    }

    /// Occupy a resource for `dur` seconds starting no earlier than `now`.
    fn charge(&mut self, r: Resource, now: f64, dur: f64) -> (f64, f64) {
        let idx = self.index(r);
        let start = self.free_at[idx].max(now);
        let end = start + dur;
        self.free_at[idx] = end;
        self.busy[idx] += dur;
        (start, end)
    }

    pub fn resource_keys(&self) -> Vec<(usize, String)> {
        let mut keys = vec![
            (0, "gpu".to_string()),
            (1, "cpu".to_string()),
            (2, "pcie".to_string()),
            (3, "stream".to_string()),
        ];
        for i in 0..self.ndp_count {
            keys.push((4 + i, format!("ndp{i:02}")));
        }
        keys
    }
}

/// Per-op spans and the drain time of one scheduled plan.
#[derive(Debug, Clone)]
pub struct ScheduledPlan {
    pub op_spans: Vec<(f64, f64)>,
    pub end: f64,
}

/// List-schedule a plan starting at `now`: ops run in plan order on their
/// serial resource, each waiting for its dependencies.
pub fn schedule_plan(plan: &ExecutionPlan, now: f64, clock: &mut ResourceClock) -> ScheduledPlan {
    let mut op_spans = Vec::with_capacity(plan.ops.len());
    let mut end = now;
    for op in &plan.ops {
        let mut ready = now;
        for &d in &op.deps {
            let (_, dep_end) = op_spans[d as usize];
            ready = f64::max(ready, dep_end);
        }
        let dur = match &op.kind {
            PlanOpKind::Work(w) => w.seconds,
            PlanOpKind::Transfer(t) => t.seconds,
        };
        let span = clock.charge(op.resource, ready, dur);
        end = end.max(span.1);
        op_spans.push(span);
    }
    ScheduledPlan { op_spans, end }
}

fn op_label(plan: &ExecutionPlan, i: usize) -> String {
    match &plan.ops[i].kind {
        PlanOpKind::Work(w) => format!("work {:?} f={:.4}", w.expert, w.fraction),
        PlanOpKind::Transfer(t) => format!("xfer {:?} {}B", t.kind, t.bytes),
    }
}

/// Per-layer prefill routing digest: distinct activated experts with token
/// counts, plus the activation-frequency ranking.
struct PrefillLayer {
    experts: Vec<u16>,
    counts: Vec<u32>,
    freq_order: Vec<u16>,
    label_counts: Vec<u32>,
}

fn prefill_layers(trace: &RoutingTrace, model: &MoeModelConfig) -> Vec<PrefillLayer> {
    let hist = trace.prefill_histogram(model.num_experts);
    hist.iter()
        .map(|counts| {
            let experts: Vec<u16> = (0..model.num_experts as u16)
                .filter(|&e| counts[e as usize] > 0)
                .collect();
            let token_counts: Vec<u32> =
                experts.iter().map(|&e| counts[e as usize] as u32).collect();
            let mut freq_order = experts.clone();
            freq_order.sort_by_key(|&e| (std::cmp::Reverse(counts[e as usize]), e));
            let label_counts = freq_order
                .iter()
                .take(model.topk)
                .map(|&e| counts[e as usize] as u32)
                .collect();
            PrefillLayer {
                experts,
                counts: token_counts,
                freq_order,
                label_counts,
            }
        })
        .collect()
}

pub fn run(
    model: &MoeModelConfig,
    hw: &HardwareConfig,
    trace: &RoutingTrace,
    policy: PolicyId,
    opts: &RunOptions,
) -> RunReport {
    run_traced(model, hw, trace, policy, opts).0
}

pub fn run_traced(
    model: &MoeModelConfig,
    hw: &HardwareConfig,
    trace: &RoutingTrace,
    policy: PolicyId,
    opts: &RunOptions,
) -> (RunReport, Timeline) {
    let uses_ndp = matches!(
        policy,
        PolicyId::Ep | PolicyId::Tp | PolicyId::TpLb | PolicyId::TpLbPre
    );
    if uses_ndp {
        if let SchedulabilityVerdict::NotSupported {
            required_bytes,
            available_bytes,
        } = check_capacity(model, hw)
        {
            return (
                RunReport::not_supported(model, policy, hw.ndp_count, required_bytes, available_bytes),
                Timeline::default(),
            );
        }
    }

    let s_in = trace.prefill_len;
    let s_out = trace.decode_len;
    let prim_pre = primitives(model, hw, StageContext::prefill(s_in));
    let prim_dec = primitives(model, hw, StageContext::decode());
    let bal_pre = balance::solve_prefill(&BalanceInputs::from_primitives(
        &prim_pre,
        model.topk,
        hw.ndp_count,
        s_in,
    ));
    let dec_inputs = BalanceInputs::from_primitives(&prim_dec, model.topk, hw.ndp_count, 1);
    let bal_dec = balance::solve_decode(&dec_inputs);
    let e_max = balance::solve_e_max(&dec_inputs);
    let placement = ExpertPlacement {
        ndp_count: hw.ndp_count,
    };
    let layers = prefill_layers(trace, model);

    let mut clock = ResourceClock::new(hw.ndp_count);
    let mut timeline = Timeline::default();
    let mut now = 0.0f64;
    let dense_layers = model.num_layers - model.num_moe_layers;
    let decode_counts = vec![1u32; model.topk];

    let record_plan =
        |plan: &ExecutionPlan, sched: &ScheduledPlan, tag: &str, timeline: &mut Timeline| {
            for (i, &(start, end)) in sched.op_spans.iter().enumerate() {
                timeline.events.push(TimelineEvent {
                    resource: plan.ops[i].resource,
                    start,
                    end,
                    label: format!("{tag} L{} {}", plan.moe_layer, op_label(plan, i)),
                });
            }
        };

    // ---- prefill ----
    let mut prefill_moe = 0.0f64;
    for l in 0..model.num_layers {
        let (start, end) = clock.charge(Resource::Gpu, now, prim_pre.t_nonmoe);
        if opts.record_timeline {
            timeline.events.push(TimelineEvent {
                resource: Resource::Gpu,
                start,
                end,
                label: format!("P L{l} nonmoe"),
            });
        }
        now = end;
        if l < dense_layers {
            continue;
        }
        let lo = l - dense_layers;
        let layer = &layers[lo];
        let labels = &layer.freq_order[..model.topk.min(layer.freq_order.len())];
        let base = LayerContext {
            model,
            hw,
            prim: &prim_pre,
            stage: Stage::Prefill,
            tokens: s_in,
            moe_layer: lo as u32,
            experts: &layer.experts,
            token_counts: &layer.counts,
        };
        let plan = match policy {
            PolicyId::Ondemand => schedulers::plan_on_demand(&base),
            PolicyId::Cpu => schedulers::plan_cpu(&base),
            PolicyId::Ep => schedulers::plan_expert_parallel(&base, &placement, opts.ep_gpu_offload),
            PolicyId::Tp => schedulers::plan_tensor_parallel(&LayerContext {
                experts: labels,
                token_counts: &layer.label_counts,
                ..base
            }),
            PolicyId::TpLb | PolicyId::TpLbPre => schedulers::plan_tp_load_balance(
                &LayerContext {
                    experts: labels,
                    token_counts: &layer.label_counts,
                    ..base
                },
                &bal_pre,
            ),
        };
        let sched = schedule_plan(&plan, now, &mut clock);
        if opts.record_timeline {
            record_plan(&plan, &sched, "P", &mut timeline);
        }
        prefill_moe += sched.end - now;
        now = sched.end;
    }
    let prefill_total = now;

    // ---- prefetch transfer block ----
    let mut prefetch_transfer = 0.0f64;
    let mut prefetch_x = None;
    let mut prefetch_plan = None;
    if policy == PolicyId::TpLbPre {
        let budget = prefetch::prefetch_budget(model, hw, opts.workspace_bytes);
        let hist = trace.prefill_histogram(model.num_experts);
        let mut plan = prefetch::build_plan(&hist, model, budget);
        if opts.prefetch_cap_topk {
            plan = plan.capped(model.topk);
        }
        if plan.x > 0 {
            prefetch_transfer = (plan.x * model.num_moe_layers) as f64 * prim_dec.t_w;
            let (start, end) = clock.charge(Resource::Pcie, now, prefetch_transfer);
            if opts.record_timeline {
                timeline.events.push(TimelineEvent {
                    resource: Resource::Pcie,
                    start,
                    end,
                    label: format!("prefetch x={}", plan.x),
                });
            }
            now = end;
        }
        prefetch_x = Some(plan.x);
        prefetch_plan = Some(plan);
    }

    // ---- decode ----
    let mut decode_moe = 0.0f64;
    let mut hits_total = 0usize;
    let mut routed_total = 0usize;
    for tok in 0..s_out {
        for l in 0..model.num_layers {
            let (start, end) = clock.charge(Resource::Gpu, now, prim_dec.t_nonmoe);
            if opts.record_timeline {
                timeline.events.push(TimelineEvent {
                    resource: Resource::Gpu,
                    start,
                    end,
                    label: format!("D{tok} L{l} nonmoe"),
                });
            }
            now = end;
            if l < dense_layers {
                continue;
            }
            let lo = l - dense_layers;
            let entry = trace.decode_entry(tok, lo);
            let ctx = LayerContext {
                model,
                hw,
                prim: &prim_dec,
                stage: Stage::Decode,
                tokens: 1,
                moe_layer: lo as u32,
                experts: &entry.expert_ids,
                token_counts: &decode_counts,
            };
            let plan = match policy {
                PolicyId::Ondemand => schedulers::plan_on_demand(&ctx),
                PolicyId::Cpu => schedulers::plan_cpu(&ctx),
                PolicyId::Ep => {
                    schedulers::plan_expert_parallel(&ctx, &placement, opts.ep_gpu_offload)
                }
                PolicyId::Tp => schedulers::plan_tensor_parallel(&ctx),
                PolicyId::TpLb => schedulers::plan_tp_load_balance(&ctx, &bal_dec),
                PolicyId::TpLbPre => {
                    let pf = prefetch_plan.as_ref().expect("prefetch plan built above");
                    let (plan, hits) = schedulers::plan_tp_lb_prefetch(
                        &ctx,
                        &bal_dec,
                        &pf.per_layer[lo],
                        e_max,
                    );
                    hits_total += hits;
                    routed_total += entry.expert_ids.len();
                    plan
                }
            };
            let sched = schedule_plan(&plan, now, &mut clock);
            if opts.record_timeline {
                record_plan(&plan, &sched, &format!("D{tok}"), &mut timeline);
            }
            decode_moe += sched.end - now;
            now = sched.end;
        }
    }

    let end_to_end = now;
    let decode_total = end_to_end - prefill_total;
    let mut utilization = BTreeMap::new();
    if end_to_end > 0.0 {
        for (idx, key) in clock.resource_keys() {
            utilization.insert(key, clock.busy[idx] / end_to_end);
        }
    }
    let report = RunReport {
        model: model.name.clone(),
        policy,
        ndp_count: hw.ndp_count,
        status: RunStatus::Ok,
        prefill_moe_s: prefill_moe,
        prefill_total_s: prefill_total,
        prefetch_transfer_s: prefetch_transfer,
        decode_moe_s: decode_moe,
        decode_total_s: decode_total,
        end_to_end_s: end_to_end,
        prefetch_x,
        decode_hit_rate: (routed_total > 0).then(|| hits_total as f64 / routed_total as f64),
        utilization,
    };
    (report, timeline)
}
