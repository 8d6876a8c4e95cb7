//! Hardware, model, and workload configuration: bundled profiles, TOML
//! loading, validation, and the NDP capacity feasibility check.
//!
//! Capacities and bandwidths use decimal units (1 GB = 1e9 bytes) throughout.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable naming a directory with extra `<name>.toml` profiles.
pub const PROFILE_DIR_ENV: &str = "MOE_NDP_PROFILE_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("unknown {kind} profile `{name}` (bundled: {known}); set {PROFILE_DIR_ENV} to add more")]
    UnknownProfile {
        kind: &'static str,
        name: String,
        known: String,
    },
}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation(msg.into())
}

/// Platform description: one GPU over PCIe plus `ndp_count` NDP-DIMMs on the
/// CPU memory bus. Bandwidths in bytes/s, compute rates in FLOP/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareConfig {
    pub gpu_freq_ghz: f64,
    pub gpu_mem_capacity_bytes: u64,
    pub gpu_mem_bw: f64,
    pub gpu_flops: f64,
    pub pcie_bw: f64,
    pub pcie_latency_s: f64,
    pub ndp_count: usize,
    pub ndp_capacity_bytes: u64,
    pub ndp_internal_bw: f64,
    pub ndp_flops: f64,
    pub cpu_mem_bw: f64,
    pub cpu_flops: f64,
    pub cpu_mem_capacity_bytes: u64,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            gpu_freq_ghz: 2.30,
            gpu_mem_capacity_bytes: 16_000_000_000,
            gpu_mem_bw: 960.0e9,
            gpu_flops: 100.0e12,
            pcie_bw: 64.0e9,
            pcie_latency_s: 2.0e-6,
            ndp_count: 6,
            ndp_capacity_bytes: 32_000_000_000,
            ndp_internal_bw: 102.4e9,
            ndp_flops: 204.8e9,
            cpu_mem_bw: 89.6e9,
            cpu_flops: 2.0e12,
            cpu_mem_capacity_bytes: 192_000_000_000,
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positives = [
            ("gpu_freq_ghz", self.gpu_freq_ghz),
            ("gpu_mem_bw", self.gpu_mem_bw),
            ("gpu_flops", self.gpu_flops),
            ("pcie_bw", self.pcie_bw),
            ("ndp_internal_bw", self.ndp_internal_bw),
            ("ndp_flops", self.ndp_flops),
            ("cpu_mem_bw", self.cpu_mem_bw),
            ("cpu_flops", self.cpu_flops),
        ];
        for (name, v) in positives {
            if !(v > 0.0) || !v.is_finite() {
                return Err(err(format!("{name} must be positive, got {v}")));
            }
        }
        if self.pcie_latency_s < 0.0 || !self.pcie_latency_s.is_finite() {
            return Err(err(format!(
                "pcie_latency_s must be non-negative, got {}",
                self.pcie_latency_s
            )));
        }
        if self.ndp_count < 1 || self.ndp_count > 16 {
            return Err(err(format!(
                "ndp_count must be in 1..=16, got {}",
                self.ndp_count
            )));
        }
        if self.gpu_mem_capacity_bytes == 0
            || self.ndp_capacity_bytes == 0
            || self.cpu_mem_capacity_bytes == 0
        {
            return Err(err("memory capacities must be non-zero"));
        }
        Ok(())
    }
}

/// MoE transformer shape. Expert parameter counts derive from the dims
/// (three `hidden_dim x intermediate_dim` matrices per expert); the named
/// checkpoint total then fixes the non-expert (attention/embedding) share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeModelConfig {
    pub name: String,
    pub num_experts: usize,
    pub topk: usize,
    #[serde(default)]
    pub num_shared_experts: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub num_layers: usize,
    pub num_moe_layers: usize,
    #[serde(default = "default_dtype_bytes")]
    pub dtype_bytes: u32,
    /// Named checkpoint parameter count (all weights).
    pub total_params: f64,
    /// Override for non-expert params; default is total minus derived expert params.
    #[serde(default)]
    pub nonexpert_params: Option<f64>,
}

fn default_dtype_bytes() -> u32 {
    2
}

impl MoeModelConfig {
    /// Weight bytes of one expert: gate, up, and down projections.
    pub fn expert_weight_bytes(&self) -> u64 {
        3 * self.hidden_dim as u64 * self.intermediate_dim as u64 * self.dtype_bytes as u64
    }

    /// Parameter count of one expert.
    pub fn expert_params(&self) -> f64 {
        3.0 * self.hidden_dim as f64 * self.intermediate_dim as f64
    }

    /// All expert parameters across MoE layers, routed plus shared.
    pub fn expert_params_total(&self) -> f64 {
        (self.num_experts + self.num_shared_experts) as f64
            * self.num_moe_layers as f64
            * self.expert_params()
    }

    /// Non-expert parameters (attention, norms, embeddings, dense FFNs).
    pub fn nonexpert_params(&self) -> f64 {
        self.nonexpert_params
            .unwrap_or_else(|| self.total_params - self.expert_params_total())
    }

    /// Bytes of routed expert weights that must live on the DIMMs.
    pub fn routed_expert_bytes_total(&self) -> u64 {
        self.expert_weight_bytes() * self.num_experts as u64 * self.num_moe_layers as u64
    }

    /// Bytes of shared experts, pinned in GPU memory.
    pub fn shared_expert_bytes_total(&self) -> u64 {
        self.expert_weight_bytes() * self.num_shared_experts as u64 * self.num_moe_layers as u64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() {
            return Err(err("model name must be non-empty"));
        }
        for (name, v) in [
            ("num_experts", self.num_experts),
            ("topk", self.topk),
            ("hidden_dim", self.hidden_dim),
            ("intermediate_dim", self.intermediate_dim),
            ("num_layers", self.num_layers),
            ("num_moe_layers", self.num_moe_layers),
        ] {
            if v == 0 {
                return Err(err(format!("{name} must be positive")));
            }
        }
        if self.topk > self.num_experts {
            return Err(err(format!(
                "topk ({}) exceeds num_experts ({})",
                self.topk, self.num_experts
            )));
        }
        if self.num_moe_layers > self.num_layers {
            return Err(err(format!(
                "num_moe_layers ({}) exceeds num_layers ({})",
                self.num_moe_layers, self.num_layers
            )));
        }
        if self.num_experts > u16::MAX as usize {
            return Err(err("num_experts exceeds supported range (u16 ids)"));
        }
        if self.dtype_bytes == 0 {
            return Err(err("dtype_bytes must be positive"));
        }
        if !(self.total_params > 0.0) {
            return Err(err("total_params must be positive"));
        }
        if self.nonexpert_params() <= 0.0 {
            return Err(err(format!(
                "non-expert params resolve non-positive ({:.3e}); check total_params",
                self.nonexpert_params()
            )));
        }
        Ok(())
    }
}

/// How routing decisions are produced for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSource {
    /// Synthetic per-layer Zipf routing with prefill/decode correlation.
    Synthetic {
        seed: u64,
        zipf_skew: f64,
        correlation: f64,
    },
    /// Load routing from a trace file.
    File { path: PathBuf },
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Synthetic {
            seed: 0,
            zipf_skew: 1.2,
            correlation: 0.8,
        }
    }
}

/// Request shape. Single-request serving only: `batch_size` must be 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub batch_size: usize,
    pub prompt_len: usize,
    pub output_len: usize,
    pub trace: TraceSource,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            batch_size: 1,
            prompt_len: 512,
            output_len: 512,
            trace: TraceSource::default(),
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size != 1 {
            return Err(err(format!(
                "batch_size must be 1 (single-request edge serving), got {}",
                self.batch_size
            )));
        }
        if self.prompt_len == 0 {
            return Err(err("prompt_len must be at least 1"));
        }
        if let TraceSource::Synthetic {
            zipf_skew,
            correlation,
            ..
        } = self.trace
        {
            if !(zipf_skew >= 0.0) || !zipf_skew.is_finite() {
                return Err(err(format!(
                    "zipf_skew must be non-negative, got {zipf_skew}"
                )));
            }
            if !(0.0..=1.0).contains(&correlation) {
                return Err(err(format!(
                    "correlation must be in [0, 1], got {correlation}"
                )));
            }
        }
        Ok(())
    }
}

/// Whether the routed expert weights of a model fit on the DIMMs at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulabilityVerdict {
    Supported,
    NotSupported {
        required_bytes: u64,
        available_bytes: u64,
    },
}

/// Routed expert weights must fit in aggregate NDP capacity. Shared experts
/// are pinned on the GPU and do not count against the DIMMs.
pub fn check_capacity(model: &MoeModelConfig, hw: &HardwareConfig) -> SchedulabilityVerdict {
    let required = model.routed_expert_bytes_total();
    let available = hw.ndp_capacity_bytes * hw.ndp_count as u64;
    if required <= available {
        SchedulabilityVerdict::Supported
    } else {
        SchedulabilityVerdict::NotSupported {
            required_bytes: required,
            available_bytes: available,
        }
    }
}

/// Optional sections of a TOML config file.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub hardware: Option<HardwareConfig>,
    pub model: Option<MoeModelConfig>,
    pub workload: Option<WorkloadConfig>,
}

pub fn load_config(path: &Path) -> Result<ConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ConfigFile = toml::from_str(&text)?;
    if let Some(hw) = &cfg.hardware {
        hw.validate()?;
    }
    if let Some(m) = &cfg.model {
        m.validate()?;
    }
    if let Some(w) = &cfg.workload {
        w.validate()?;
    }
    Ok(cfg)
}

pub const MODEL_NAMES: [&str; 4] = ["deepseek-moe", "qwen3-30b-a3b", "phi-3.5-moe", "mixtral-8x7b"];

/// Built-in model profiles.
pub fn bundled_model(name: &str) -> Option<MoeModelConfig> {
    let m = match name {
        "deepseek-moe" => MoeModelConfig {
            name: "deepseek-moe".into(),
            num_experts: 64,
            topk: 6,
            num_shared_experts: 2,
            hidden_dim: 2048,
            intermediate_dim: 1408,
            num_layers: 28,
            num_moe_layers: 27,
            dtype_bytes: 2,
            total_params: 16.4e9,
            nonexpert_params: None,
        },
        "qwen3-30b-a3b" => MoeModelConfig {
            name: "qwen3-30b-a3b".into(),
            num_experts: 128,
            topk: 8,
            num_shared_experts: 0,
            hidden_dim: 2048,
            intermediate_dim: 768,
            num_layers: 48,
            num_moe_layers: 48,
            dtype_bytes: 2,
            total_params: 30.5e9,
            nonexpert_params: None,
        },
        "phi-3.5-moe" => MoeModelConfig {
            name: "phi-3.5-moe".into(),
            num_experts: 16,
            topk: 2,
            num_shared_experts: 0,
            hidden_dim: 6400,
            intermediate_dim: 4096,
            num_layers: 32,
            num_moe_layers: 32,
            dtype_bytes: 2,
            total_params: 41.9e9,
            nonexpert_params: None,
        },
        "mixtral-8x7b" => MoeModelConfig {
            name: "mixtral-8x7b".into(),
            num_experts: 8,
            topk: 2,
            num_shared_experts: 0,
            hidden_dim: 4096,
            intermediate_dim: 14336,
            num_layers: 32,
            num_moe_layers: 32,
            dtype_bytes: 2,
            total_params: 46.7e9,
            nonexpert_params: None,
        },
        _ => return None,
    };
    Some(m)
}

/// Built-in hardware profiles.
pub fn bundled_hardware(name: &str) -> Option<HardwareConfig> {
    match name {
        "default" => Some(HardwareConfig::default()),
        _ => None,
    }
}

fn profile_dir_file(name: &str) -> Option<PathBuf> {
    let dir = std::env::var_os(PROFILE_DIR_ENV)?;
    let p = Path::new(&dir).join(format!("{name}.toml"));
    p.is_file().then_some(p)
}

/// Resolve a `--model` argument: bundled name, profile-dir name, or file path.
pub fn resolve_model(arg: &str) -> Result<MoeModelConfig, ConfigError> {
    if let Some(m) = bundled_model(arg) {
        return Ok(m);
    }
    let path = if Path::new(arg).is_file() {
        PathBuf::from(arg)
    } else if let Some(p) = profile_dir_file(arg) {
        p
    } else {
        return Err(ConfigError::UnknownProfile {
            kind: "model",
            name: arg.into(),
            known: MODEL_NAMES.join(", "),
        });
    };
    load_config(&path)?.model.ok_or_else(|| {
        err(format!(
            "profile {} has no [model] section",
            path.display()
        ))
    })
}

/// Resolve a `--hw` argument the same way.
pub fn resolve_hardware(arg: &str) -> Result<HardwareConfig, ConfigError> {
    if let Some(h) = bundled_hardware(arg) {
        return Ok(h);
    }
    let path = if Path::new(arg).is_file() {
        PathBuf::from(arg)
    } else if let Some(p) = profile_dir_file(arg) {
        p
    } else {
        return Err(ConfigError::UnknownProfile {
            kind: "hardware",
            name: arg.into(),
            known: "default".into(),
        });
    };
    load_config(&path)?.hardware.ok_or_else(|| {
        err(format!(
            "profile {} has no [hardware] section",
            path.display()
        ))
    })
}
