//! Roofline cost primitives: every operation costs
//! `max(bytes / bandwidth, flops / compute_rate)` on its device, plus PCIe
//! latency on link transfers.
//!
//! All primitives are per MoE layer and per stage. Decode processes one token
//! at a time; prefill processes the whole prompt as one batch.

use crate::config::{HardwareConfig, MoeModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Decode,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
        }
    }
}

/// Stage plus the token count it operates on (prompt length for prefill,
/// 1 for decode).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageContext {
    pub stage: Stage,
    pub tokens: usize,
}

impl StageContext {
    pub fn prefill(prompt_len: usize) -> Self {
        StageContext {
            stage: Stage::Prefill,
            tokens: prompt_len,
        }
    }

    pub fn decode() -> Self {
        StageContext {
            stage: Stage::Decode,
            tokens: 1,
        }
    }
}

/// Per-layer, per-stage latency building blocks (seconds):
///
/// * `t_w`  — transfer one expert's weights over PCIe
/// * `t_a`  — transfer the stage's activations over PCIe (batch for prefill)
/// * `t_g`  — compute one expert on the GPU
/// * `t_n`  — compute one expert's `1/ndp_count` slice on one DIMM
///            (tensor-parallel shard time)
/// * `t_cpu` — compute one expert on the CPU
/// * `t_nonmoe` — non-expert work of one layer on the GPU
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyPrimitives {
    pub t_w: f64,
    pub t_a: f64,
    pub t_g: f64,
    pub t_n: f64,
    pub t_cpu: f64,
    pub t_nonmoe: f64,
}

/// FLOPs of one expert over `tokens` tokens: three matmuls, 2 FLOPs per MAC.
pub fn expert_flops(model: &MoeModelConfig, tokens: usize) -> f64 {
    2.0 * 3.0 * model.hidden_dim as f64 * model.intermediate_dim as f64 * tokens as f64
}

/// Activation bytes crossing the PCIe link for `tokens` tokens.
pub fn activation_bytes(model: &MoeModelConfig, tokens: usize) -> u64 {
    model.hidden_dim as u64 * model.dtype_bytes as u64 * tokens as u64
}

fn roofline(bytes: f64, bw: f64, flops: f64, rate: f64) -> f64 {
    (bytes / bw).max(flops / rate)
}

/// GPU time for one expert over `tokens` tokens.
pub fn gpu_expert_time(model: &MoeModelConfig, hw: &HardwareConfig, tokens: usize) -> f64 {
    roofline(
        model.expert_weight_bytes() as f64,
        hw.gpu_mem_bw,
        expert_flops(model, tokens),
        hw.gpu_flops,
    )
}

/// Time for one whole (unsplit) expert on a single DIMM.
pub fn ndp_full_expert_time(model: &MoeModelConfig, hw: &HardwareConfig, tokens: usize) -> f64 {
    roofline(
        model.expert_weight_bytes() as f64,
        hw.ndp_internal_bw,
        expert_flops(model, tokens),
        hw.ndp_flops,
    )
}

/// Time for one expert split evenly across all DIMMs (each DIMM's share).
pub fn ndp_shard_expert_time(model: &MoeModelConfig, hw: &HardwareConfig, tokens: usize) -> f64 {
    let n = hw.ndp_count as f64;
    roofline(
        model.expert_weight_bytes() as f64 / n,
        hw.ndp_internal_bw,
        expert_flops(model, tokens) / n,
        hw.ndp_flops,
    )
}

/// CPU time for one expert over `tokens` tokens.
pub fn cpu_expert_time(model: &MoeModelConfig, hw: &HardwareConfig, tokens: usize) -> f64 {
    roofline(
        model.expert_weight_bytes() as f64,
        hw.cpu_mem_bw,
        expert_flops(model, tokens),
        hw.cpu_flops,
    )
}

/// PCIe time for one expert's weights.
pub fn weight_transfer_time(model: &MoeModelConfig, hw: &HardwareConfig) -> f64 {
    hw.pcie_latency_s + model.expert_weight_bytes() as f64 / hw.pcie_bw
}

/// PCIe time for `tokens` tokens of activations.
pub fn activation_transfer_time(
    model: &MoeModelConfig,
    hw: &HardwareConfig,
    tokens: usize,
) -> f64 {
    hw.pcie_latency_s + activation_bytes(model, tokens) as f64 / hw.pcie_bw
}

/// Non-expert (attention + norms + router) time of one layer on the GPU,
/// roofline over the per-layer non-expert weight bytes and flops.
pub fn nonmoe_layer_time(model: &MoeModelConfig, hw: &HardwareConfig, tokens: usize) -> f64 {
    let params_per_layer = model.nonexpert_params() / model.num_layers as f64;
    let bytes = params_per_layer * model.dtype_bytes as f64;
    let flops = 2.0 * params_per_layer * tokens as f64;
    roofline(bytes, hw.gpu_mem_bw, flops, hw.gpu_flops)
}

/// All per-layer primitives for one stage.
pub fn primitives(
    model: &MoeModelConfig,
    hw: &HardwareConfig,
    ctx: StageContext,
) -> LatencyPrimitives {
    LatencyPrimitives {
        t_w: weight_transfer_time(model, hw),
        t_a: activation_transfer_time(model, hw, ctx.tokens),
        t_g: gpu_expert_time(model, hw, ctx.tokens),
        t_n: ndp_shard_expert_time(model, hw, ctx.tokens),
        t_cpu: cpu_expert_time(model, hw, ctx.tokens),
        t_nonmoe: nonmoe_layer_time(model, hw, ctx.tokens),
    }
}
