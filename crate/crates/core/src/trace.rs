//! Expert routing traces: synthetic generation and file I/O.
//!
//! Synthetic routing draws each token's `topk` experts without replacement
//! from a per-layer Zipf distribution over popularity ranks
//! (`P(rank r) ∝ 1/r^skew`); a per-layer random permutation maps ranks to
//! expert ids so hot experts land on different ids in different layers.
//! Decode tokens re-draw each selection from the layer's empirical prefill
//! histogram with probability `correlation`, and from the Zipf base
//! otherwise, which reproduces the prefill/decode reuse that prefetching
//! exploits.
//!
//! Every random decision comes from its own counter-derived ChaCha stream
//! `(kind, layer, token)`, so generation is deterministic and independent of
//! evaluation order.

use crate::config::MoeModelConfig;
use crate::cost::Stage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("trace does not match model: {0}")]
    ModelMismatch(String),
}

fn format_err(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Format {
        line,
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTraceParams {
    pub seed: u64,
    pub zipf_skew: f64,
    /// Probability that a decode selection re-draws from the layer's prefill
    /// histogram instead of the Zipf base.
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub stage: Stage,
    pub token_idx: u32,
    /// MoE-layer ordinal (dense layers do not appear in traces).
    pub layer_idx: u32,
    /// Strictly ascending, exactly `topk` ids.
    pub expert_ids: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTrace {
    pub model_name: String,
    pub num_moe_layers: usize,
    pub topk: usize,
    pub prefill_len: usize,
    pub decode_len: usize,
    /// Sorted by (stage, token, layer); complete over both stages.
    pub entries: Vec<TraceEntry>,
}

const STREAM_PERMUTATION: u64 = 0;
const STREAM_PREFILL: u64 = 1;
const STREAM_DECODE: u64 = 2;

fn substream(seed: u64, kind: u64, layer: u32, token: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 56) | ((layer as u64) << 32) | token as u64);
    rng
}

fn zipf_rank_weights(n: usize, skew: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-skew)).collect()
}

/// One weighted draw over `weights`, skipping entries already zeroed.
/// The cumulative walk is in ascending index order, so equal weights resolve
/// toward the smaller expert id for a given uniform variate.
fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "weighted_pick needs positive mass");
    let mut u = rng.gen::<f64>() * total;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        if u < w {
            return i;
        }
        u -= w;
        last_positive = Some(i);
    }
    // Float summation can leave a sliver of `u` past the last bucket.
    last_positive.expect("weighted_pick needs positive mass")
}

/// Draw `topk` distinct ids by sequential renormalization: each pick zeroes
/// its weight and the next draw renormalizes over the remainder.
fn sample_topk_distinct(rng: &mut ChaCha8Rng, base: &[f64], topk: usize) -> Vec<u16> {
    let mut w = base.to_vec();
    let mut out = Vec::with_capacity(topk);
    for _ in 0..topk {
        let pick = weighted_pick(rng, &w);
        out.push(pick as u16);
        w[pick] = 0.0;
    }
    out.sort_unstable();
    out
}

/// Generate a synthetic routing trace for `prompt_len` prefill tokens and
/// `output_len` decode tokens.
pub fn generate(
    model: &MoeModelConfig,
    prompt_len: usize,
    output_len: usize,
    params: &SyntheticTraceParams,
) -> RoutingTrace {
    let ne = model.num_experts;
    let lm = model.num_moe_layers;
    let topk = model.topk;
    let rank_w = zipf_rank_weights(ne, params.zipf_skew);

    // Per-layer Zipf weight of each expert id, via the rank permutation.
    let mut zipf_by_expert: Vec<Vec<f64>> = Vec::with_capacity(lm);
    for layer in 0..lm {
        let mut perm: Vec<u16> = (0..ne as u16).collect();
        let mut rng = substream(params.seed, STREAM_PERMUTATION, layer as u32, 0);
        // Fisher-Yates, high index down, one gen_range per step.
        for i in (1..ne).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut w = vec![0.0f64; ne];
        for (rank, &expert) in perm.iter().enumerate() {
            w[expert as usize] = rank_w[rank];
        }
        zipf_by_expert.push(w);
    }

    let mut entries =
        Vec::with_capacity(lm * (prompt_len + output_len));
    for token in 0..prompt_len {
        for layer in 0..lm {
            let mut rng = substream(params.seed, STREAM_PREFILL, layer as u32, token as u32);
            entries.push(TraceEntry {
                stage: Stage::Prefill,
                token_idx: token as u32,
                layer_idx: layer as u32,
                expert_ids: sample_topk_distinct(&mut rng, &zipf_by_expert[layer], topk),
            });
        }
    }

    // Empirical prefill histogram drives correlated decode selections.
    let mut hist = vec![vec![0.0f64; ne]; lm];
    for e in &entries {
        for &id in &e.expert_ids {
            hist[e.layer_idx as usize][id as usize] += 1.0;
        }
    }

    for token in 0..output_len {
        for layer in 0..lm {
            let mut rng = substream(params.seed, STREAM_DECODE, layer as u32, token as u32);
            let mut chosen: Vec<u16> = Vec::with_capacity(topk);
            let mut masked = vec![0.0f64; ne];
            for _ in 0..topk {
                let use_empirical = rng.gen::<f64>() < params.correlation;
                let base: &[f64] = if use_empirical {
                    &hist[layer]
                } else {
                    &zipf_by_expert[layer]
                };
                masked.copy_from_slice(base);
                for &c in &chosen {
                    masked[c as usize] = 0.0;
                }
                // A short prefill can exhaust the empirical support; fall
                // back to the Zipf base over the remaining experts.
                if masked.iter().sum::<f64>() <= 0.0 {
                    masked.copy_from_slice(&zipf_by_expert[layer]);
                    for &c in &chosen {
                        masked[c as usize] = 0.0;
                    }
                }
                chosen.push(weighted_pick(&mut rng, &masked) as u16);
            }
            chosen.sort_unstable();
            entries.push(TraceEntry {
                stage: Stage::Decode,
                token_idx: token as u32,
                layer_idx: layer as u32,
                expert_ids: chosen,
            });
        }
    }

    RoutingTrace {
        model_name: model.name.clone(),
        num_moe_layers: lm,
        topk,
        prefill_len: prompt_len,
        decode_len: output_len,
        entries,
    }
}

impl RoutingTrace {
    fn entry_at(&self, stage: Stage, token: usize, layer: usize) -> &TraceEntry {
        let lm = self.num_moe_layers;
        let idx = match stage {
            Stage::Prefill => token * lm + layer,
            Stage::Decode => (self.prefill_len + token) * lm + layer,
        };
        let e = &self.entries[idx];
        debug_assert!(
            e.stage == stage && e.token_idx as usize == token && e.layer_idx as usize == layer
        );
        e
    }

    pub fn prefill_entry(&self, token: usize, layer: usize) -> &TraceEntry {
        self.entry_at(Stage::Prefill, token, layer)
    }

    pub fn decode_entry(&self, token: usize, layer: usize) -> &TraceEntry {
        self.entry_at(Stage::Decode, token, layer)
    }

    /// Prefill activation counts per MoE layer, indexed by expert id.
    pub fn prefill_histogram(&self, num_experts: usize) -> Vec<Vec<u64>> {
        let mut hist = vec![vec![0u64; num_experts]; self.num_moe_layers];
        for e in &self.entries {
            if e.stage == Stage::Prefill {
                for &id in &e.expert_ids {
                    hist[e.layer_idx as usize][id as usize] += 1;
                }
            }
        }
        hist
    }

    /// A loaded trace must agree with the model it is simulated against.
    pub fn validate_for_model(&self, model: &MoeModelConfig) -> Result<(), TraceError> {
        if self.model_name != model.name {
            return Err(TraceError::ModelMismatch(format!(
                "trace is for `{}`, not `{}`",
                self.model_name, model.name
            )));
        }
        if self.num_moe_layers != model.num_moe_layers || self.topk != model.topk {
            return Err(TraceError::ModelMismatch(format!(
                "trace has layers={} topk={}, model wants layers={} topk={}",
                self.num_moe_layers, self.topk, model.num_moe_layers, model.topk
            )));
        }
        let max_id = self
            .entries
            .iter()
            .flat_map(|e| e.expert_ids.iter())
            .max()
            .copied()
            .unwrap_or(0);
        if max_id as usize >= model.num_experts {
            return Err(TraceError::ModelMismatch(format!(
                "trace routes to expert {max_id}, model has {}",
                model.num_experts
            )));
        }
        Ok(())
    }

    pub fn save(&self, w: &mut impl Write) -> Result<(), TraceError> {
        writeln!(
            w,
            "#moe-trace v1 model={} layers={} topk={} prefill={} decode={}",
            self.model_name, self.num_moe_layers, self.topk, self.prefill_len, self.decode_len
        )?;
        for e in &self.entries {
            let stage = match e.stage {
                Stage::Prefill => 'P',
                Stage::Decode => 'D',
            };
            let ids = e
                .expert_ids
                .iter()
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join(";");
            writeln!(w, "{stage},{},{},{ids}", e.token_idx, e.layer_idx)?;
        }
        Ok(())
    }

    pub fn load(r: impl Read) -> Result<RoutingTrace, TraceError> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| format_err(1, "empty trace file"))??;
        let rest = header
            .strip_prefix("#moe-trace v1 ")
            .ok_or_else(|| format_err(1, "missing `#moe-trace v1` header"))?;
        let mut model_name = None;
        let mut fields = [0usize; 4]; // layers, topk, prefill, decode
        let mut seen = [false; 4];
        for part in rest.split(' ') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format_err(1, format!("bad header field `{part}`")))?;
            let slot = match key {
                "model" => {
                    model_name = Some(value.to_string());
                    continue;
                }
                "layers" => 0,
                "topk" => 1,
                "prefill" => 2,
                "decode" => 3,
                _ => return Err(format_err(1, format!("unknown header key `{key}`"))),
            };
            fields[slot] = value
                .parse()
                .map_err(|_| format_err(1, format!("bad value for `{key}`")))?;
            seen[slot] = true;
        }
        let model_name = model_name.ok_or_else(|| format_err(1, "header missing model="))?;
        if !seen.iter().all(|&s| s) {
            return Err(format_err(1, "header missing a required field"));
        }
        let (lm, topk, prefill_len, decode_len) =
            (fields[0], fields[1], fields[2], fields[3]);
        if lm == 0 || topk == 0 {
            return Err(format_err(1, "layers and topk must be positive"));
        }

        let mut entries = Vec::with_capacity(lm * (prefill_len + decode_len));
        let mut expected = (0..2).flat_map(|stage| {
            let tokens = if stage == 0 { prefill_len } else { decode_len };
            (0..tokens).flat_map(move |t| (0..lm).map(move |l| (stage, t, l)))
        });
        for (line_no, line) in lines.enumerate() {
            let line_no = line_no + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let (stage_s, tok_s, layer_s, ids_s) = match (
                cols.next(),
                cols.next(),
                cols.next(),
                cols.next(),
                cols.next(),
            ) {
                (Some(a), Some(b), Some(c), Some(d), None) => (a, b, c, d),
                _ => return Err(format_err(line_no, "expected 4 comma-separated columns")),
            };
            let stage = match stage_s {
                "P" => Stage::Prefill,
                "D" => Stage::Decode,
                other => return Err(format_err(line_no, format!("bad stage `{other}`"))),
            };
            let token_idx: u32 = tok_s
                .parse()
                .map_err(|_| format_err(line_no, "bad token index"))?;
            let layer_idx: u32 = layer_s
                .parse()
                .map_err(|_| format_err(line_no, "bad layer index"))?;
            let expert_ids = ids_s
                .split(';')
                .map(|s| s.parse::<u16>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| format_err(line_no, "bad expert id"))?;
            if expert_ids.len() != topk {
                return Err(format_err(
                    line_no,
                    format!("expected {topk} expert ids, got {}", expert_ids.len()),
                ));
            }
            if !expert_ids.windows(2).all(|w| w[0] < w[1]) {
                return Err(format_err(line_no, "expert ids must be strictly ascending"));
            }
            let want = expected.next().ok_or_else(|| {
                format_err(line_no, "more entries than the header declares")
            })?;
            let got = (
                if stage == Stage::Prefill { 0 } else { 1 },
                token_idx as usize,
                layer_idx as usize,
            );
            if got != want {
                return Err(format_err(
                    line_no,
                    format!(
                        "out-of-order entry: got stage/token/layer {got:?}, expected {want:?}"
                    ),
                ));
            }
            entries.push(TraceEntry {
                stage,
                token_idx,
                layer_idx,
                expert_ids,
            });
        }
        if expected.next().is_some() {
            return Err(format_err(0, "fewer entries than the header declares"));
        }
        Ok(RoutingTrace {
            model_name,
            num_moe_layers: lm,
            topk,
            prefill_len,
            decode_len,
            entries,
        })
    }
}
