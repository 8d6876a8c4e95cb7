//! Dataset-free expert prefetching.
//!
//! After prefill, the per-layer activation histogram of the prompt itself
//! predicts which experts decode will reuse. The prefetcher copies the top-x
//! experts of every MoE layer into spare GPU memory between the stages; at
//! decode time those experts run on the GPU without any weight traffic.
//!
//! `x` is uniform across layers and chosen from the memory budget: spare GPU
//! capacity after non-expert weights, pinned shared experts, and a fixed
//! activation workspace.

use crate::config::{HardwareConfig, MoeModelConfig};
use std::io::Write;

/// Per-layer GPU residency chosen by the prefetcher. Layer lists are in
/// prediction-rank order (activation count descending, expert id ascending).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefetchPlan {
    pub x: usize,
    pub per_layer: Vec<Vec<u16>>,
    /// Expert-weight bytes the plan actually parks on the GPU.
    pub bytes_used: u64,
    /// Budget the plan was built against; `bytes_used <= budget_bytes` always.
    pub budget_bytes: u64,
}

/// Spare GPU bytes available to hold prefetched experts.
pub fn prefetch_budget(model: &MoeModelConfig, hw: &HardwareConfig, workspace_bytes: u64) -> u64 {
    let nonexpert_bytes = (model.nonexpert_params() * model.dtype_bytes as f64) as u64;
    hw.gpu_mem_capacity_bytes
        .saturating_sub(nonexpert_bytes)
        .saturating_sub(model.shared_expert_bytes_total())
        .saturating_sub(workspace_bytes)
}

/// Experts prefetched per layer: 0 when even one expert per layer overflows
/// the budget (prefetching disabled), otherwise starts at 1 and grows while
/// one more expert per layer still fits, capped by the expert count itself.
pub fn experts_per_layer_for_budget(model: &MoeModelConfig, budget_bytes: u64) -> usize {
    let per_expert = model.expert_weight_bytes() * model.num_moe_layers as u64;
    if per_expert > budget_bytes {
        return 0;
    }
    let mut x = 1usize;
    while x < model.num_experts && (x as u64 + 1) * per_expert <= budget_bytes {
        x += 1;
    }
    x
}

/// Build the residency plan from a prefill histogram
/// (`histogram[layer][expert_id]` = activation count).
pub fn build_plan(
    histogram: &[Vec<u64>],
    model: &MoeModelConfig,
    budget_bytes: u64,
) -> PrefetchPlan {
    let x = experts_per_layer_for_budget(model, budget_bytes);
    let per_layer: Vec<Vec<u16>> = histogram
        .iter()
        .map(|counts| {
            let mut ranked: Vec<u16> = (0..counts.len() as u16)
                .filter(|&id| counts[id as usize] > 0)
                .collect();
            ranked.sort_by_key(|&id| (std::cmp::Reverse(counts[id as usize]), id));
            ranked.truncate(x);
            ranked
        })
        .collect();
    let resident: u64 = per_layer.iter().map(|l| l.len() as u64).sum();
    PrefetchPlan {
        x,
        per_layer,
        bytes_used: resident * model.expert_weight_bytes(),
        budget_bytes,
    }
}

impl PrefetchPlan {
    /// Restrict the plan to at most `x_cap` experts per layer (the engine
    /// caps at topk: past that the marginal expert no longer pays for its
    /// transfer block).
    pub fn capped(&self, x_cap: usize) -> PrefetchPlan {
        let before: u64 = self.per_layer.iter().map(|l| l.len() as u64).sum();
        // Exact: bytes_used is always resident-count x per-expert size.
        let per_expert = if before == 0 { 0 } else { self.bytes_used / before };
        let per_layer: Vec<Vec<u16>> = self
            .per_layer
            .iter()
            .map(|l| l[..l.len().min(x_cap)].to_vec())
            .collect();
        let after: u64 = per_layer.iter().map(|l| l.len() as u64).sum();
        PrefetchPlan {
            x: self.x.min(x_cap),
            per_layer,
            bytes_used: after * per_expert,
            budget_bytes: self.budget_bytes,
        }
    }

    /// Split a decode token's experts into GPU-resident hits and misses.
    /// Both outputs stay in ascending id order.
    pub fn decode_lookup(&self, layer: usize, activated: &[u16]) -> (Vec<u16>, Vec<u16>) {
        let resident = &self.per_layer[layer];
        let mut hits = Vec::new();
        let mut misses = Vec::new();
        for &id in activated {
            if resident.contains(&id) {
                hits.push(id);
            } else {
                misses.push(id);
            }
        }
        (hits, misses)
    }

    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "#prefetch v1 x={}", self.x)?;
        for (layer, ids) in self.per_layer.iter().enumerate() {
            let ids = ids
                .iter()
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join(";");
            writeln!(w, "{layer},{ids}")?;
        }
        Ok(())
    }
}

/// Keep at most `floor(e_max)` hits on the GPU, preferring higher prediction
/// rank (position in `freq_order`); the rest overflow back to the DIMMs.
/// Both outputs are re-sorted ascending.
pub fn cap_gpu_hits(hits: &[u16], e_max: f64, freq_order: &[u16]) -> (Vec<u16>, Vec<u16>) {
    let cap = (e_max.max(0.0).floor() as usize).min(hits.len());
    let mut by_rank: Vec<u16> = hits.to_vec();
    by_rank.sort_by_key(|id| {
        freq_order
            .iter()
            .position(|r| r == id)
            .unwrap_or(usize::MAX)
    });
    let mut kept = by_rank[..cap].to_vec();
    let mut overflow = by_rank[cap..].to_vec();
    kept.sort_unstable();
    overflow.sort_unstable();
    (kept, overflow)
}
