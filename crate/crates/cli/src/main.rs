//! moesim: deterministic latency simulator for single-batch MoE inference on
//! a GPU + NDP-DIMM edge system.
//!
//! Exit codes: 0 success, 2 invalid flags or configuration, 3 simulated
//! configuration not schedulable (expert weights exceed DIMM capacity).

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use moesim_core::balance::{solve_decode, solve_e_max, solve_prefill, BalanceInputs, Clamp};
use moesim_core::config::{resolve_hardware, resolve_model, MODEL_NAMES};
use moesim_core::cost::{primitives, StageContext};
use moesim_core::prefetch::{build_plan, prefetch_budget};
use moesim_core::report::{build_table, Metric};
use moesim_core::runner::{sweep, SweepSpec};
use moesim_core::trace::{generate, RoutingTrace, SyntheticTraceParams};
use moesim_core::{run, HardwareConfig, MoeModelConfig, PolicyId, RunOptions, RunStatus};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "moesim", version, about = "MoE-on-NDP scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one (model, policy, DIMM count) simulation; emits a JSON report.
    Simulate(SimulateArgs),
    /// Run a cartesian sweep and emit a comparison table.
    Sweep(SweepArgs),
    /// Per-stage policy ablation tables and charts per model.
    Ablate(AblateArgs),
    /// Generate a synthetic routing trace file.
    TraceGen(TraceGenArgs),
    /// Solve the GPU/NDP balance split for one configuration.
    SolveBalance(SolveBalanceArgs),
}

/// Synthetic-trace knobs shared by several subcommands.
#[derive(Args, Clone)]
struct TraceOpts {
    /// RNG seed for routing generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zipf exponent of the per-layer expert popularity.
    #[arg(long, default_value_t = 1.2)]
    skew: f64,
    /// Probability a decode selection re-draws from the prefill histogram.
    #[arg(long, default_value_t = 0.8)]
    rho: f64,
    /// Prompt length in tokens.
    #[arg(long, default_value_t = 512)]
    prompt: usize,
    /// Generated output length in tokens.
    #[arg(long = "output-len", default_value_t = 512)]
    output_len: usize,
}

impl TraceOpts {
    fn params(&self) -> SyntheticTraceParams {
        SyntheticTraceParams {
            seed: self.seed,
            zipf_skew: self.skew,
            correlation: self.rho,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Model name (bundled or a TOML profile path).
    #[arg(long)]
    model: String,
    /// Hardware profile name or TOML path.
    #[arg(long, default_value = "default")]
    hw: String,
    #[arg(long, value_parser = parse_policy)]
    policy: PolicyId,
    /// Number of NDP DIMMs.
    #[arg(long, default_value_t = 6)]
    ndp: usize,
    /// Routing trace file (instead of synthetic generation).
    #[arg(long, conflicts_with_all = ["seed", "skew", "rho", "prompt", "output_len"])]
    trace: Option<PathBuf>,
    #[command(flatten)]
    trace_opts: TraceOpts,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the prefetch residency lists (one line per layer) here.
    #[arg(long)]
    dump_prefetch: Option<PathBuf>,
    /// Disable the expert-parallel GPU offload of one tail expert per layer.
    #[arg(long)]
    no_ep_offload: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated model names.
    #[arg(long, value_delimiter = ',', default_values_t = MODEL_NAMES.map(String::from))]
    models: Vec<String>,
    #[arg(long, default_value = "default")]
    hw: String,
    /// Comma-separated policy names.
    #[arg(long, value_delimiter = ',', value_parser = parse_policy, default_values_t = PolicyId::ALL)]
    policies: Vec<PolicyId>,
    /// Comma-separated DIMM counts.
    #[arg(long = "ndp-list", value_delimiter = ',', default_values_t = [2usize, 4, 6])]
    ndp_list: Vec<usize>,
    /// Policy every latency is normalized against.
    #[arg(long, value_parser = parse_policy, default_value_t = PolicyId::Ondemand)]
    baseline: PolicyId,
    /// Latency bucket to compare: e2e, prefill_moe, or decode_moe.
    #[arg(long, value_parser = parse_metric, default_value = "e2e")]
    metric: Metric,
    #[command(flatten)]
    trace_opts: TraceOpts,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    #[arg(long)]
    out_svg: Option<PathBuf>,
    #[arg(long)]
    no_ep_offload: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_values_t = MODEL_NAMES.map(String::from))]
    models: Vec<String>,
    #[arg(long, default_value = "default")]
    hw: String,
    #[arg(long = "ndp-list", value_delimiter = ',', default_values_t = [2usize, 4, 6])]
    ndp_list: Vec<usize>,
    #[command(flatten)]
    trace_opts: TraceOpts,
    /// Directory receiving <model>_{prefill,decode}.{csv,svg}.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TraceGenArgs {
    #[arg(long)]
    model: String,
    #[command(flatten)]
    trace_opts: TraceOpts,
    /// Trace file to write.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Prefill,
    Decode,
}

#[derive(Args)]
struct SolveBalanceArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    model: String,
    #[arg(long, default_value = "default")]
    hw: String,
    #[arg(long, default_value_t = 6)]
    ndp: usize,
    /// Prefill batch size (ignored for decode).
    #[arg(long, default_value_t = 512)]
    seq: usize,
}

fn parse_policy(s: &str) -> Result<PolicyId, String> {
    PolicyId::from_cli_name(s).ok_or_else(|| {
        format!(
            "unknown policy '{s}' (expected one of: {})",
            PolicyId::ALL.map(|p| p.cli_name()).join(", ")
        )
    })
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    Metric::parse(s).ok_or_else(|| {
        format!(
            "unknown metric '{s}' (expected one of: {})",
            Metric::ALL.map(|m| m.as_str()).join(", ")
        )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a).map(|()| ExitCode::SUCCESS),
        Command::Ablate(a) => cmd_ablate(a).map(|()| ExitCode::SUCCESS),
        Command::TraceGen(a) => cmd_trace_gen(a).map(|()| ExitCode::SUCCESS),
        Command::SolveBalance(a) => cmd_solve_balance(a).map(|()| ExitCode::SUCCESS),
    }
}

fn hardware_at(hw_arg: &str, ndp: usize) -> Result<HardwareConfig> {
    let mut hw = resolve_hardware(hw_arg)?;
    hw.ndp_count = ndp;
    hw.validate()?;
    Ok(hw)
}

fn load_or_generate_trace(
    model: &MoeModelConfig,
    trace_path: Option<&Path>,
    opts: &TraceOpts,
) -> Result<RoutingTrace> {
    match trace_path {
        Some(path) => {
            let file = fs::File::open(path)
                .with_context(|| format!("opening trace {}", path.display()))?;
            let trace = RoutingTrace::load(std::io::BufReader::new(file))
                .with_context(|| format!("parsing trace {}", path.display()))?;
            trace.validate_for_model(model)?;
            Ok(trace)
        }
        None => Ok(generate(
            model,
            opts.prompt,
            opts.output_len,
            &opts.params(),
        )),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<ExitCode> {
    let model = resolve_model(&a.model)?;
    let hw = hardware_at(&a.hw, a.ndp)?;
    let trace = load_or_generate_trace(&model, a.trace.as_deref(), &a.trace_opts)?;
    let run_opts = RunOptions {
        ep_gpu_offload: !a.no_ep_offload,
        ..RunOptions::default()
    };
    let report = run(&model, &hw, &trace, a.policy, &run_opts);

    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(path) => fs::write(path, json + "\n")
            .with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }

    if let Some(path) = &a.dump_prefetch {
        let budget = prefetch_budget(&model, &hw, run_opts.workspace_bytes);
        let hist = trace.prefill_histogram(model.num_experts);
        let mut plan = build_plan(&hist, &model, budget);
        if run_opts.prefetch_cap_topk {
            plan = plan.capped(model.topk);
        }
        let mut buf = Vec::new();
        plan.save(&mut buf)?;
        fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    }

    Ok(match report.status {
        RunStatus::Ok => ExitCode::SUCCESS,
        RunStatus::NotSupported { .. } => ExitCode::from(3),
    })
}

fn build_sweep_spec(
    model_args: &[String],
    hw_arg: &str,
    policies: Vec<PolicyId>,
    ndp_list: &[usize],
    trace_opts: &TraceOpts,
    ep_gpu_offload: bool,
) -> Result<SweepSpec> {
    let models: Vec<MoeModelConfig> = model_args
        .iter()
        .map(|m| resolve_model(m).map_err(Into::into))
        .collect::<Result<_>>()?;
    let hw = resolve_hardware(hw_arg)?;
    for &n in ndp_list {
        HardwareConfig {
            ndp_count: n,
            ..hw.clone()
        }
        .validate()?;
    }
    Ok(SweepSpec {
        models,
        hw,
        ndp_counts: ndp_list.to_vec(),
        policies,
        prompt_len: trace_opts.prompt,
        output_len: trace_opts.output_len,
        trace_params: trace_opts.params(),
        opts: RunOptions {
            ep_gpu_offload,
            ..RunOptions::default()
        },
    })
}

fn write_if(path: &Option<PathBuf>, contents: &str) -> Result<()> {
    if let Some(path) = path {
        fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let spec = build_sweep_spec(
        &a.models,
        &a.hw,
        a.policies.clone(),
        &a.ndp_list,
        &a.trace_opts,
        !a.no_ep_offload,
    )?;
    let reports = sweep(&spec);
    let table = build_table(&reports, a.baseline, a.metric);
    print!("{}", table.format_text());
    write_if(&a.out_csv, &table.to_csv())?;
    write_if(&a.out_json, &(table.to_json() + "\n"))?;
    write_if(
        &a.out_svg,
        &table.to_svg(&format!("{} speedup vs {}", a.metric.as_str(), a.baseline)),
    )?;
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    const DECODE_POLICIES: [PolicyId; 4] =
        [PolicyId::Ep, PolicyId::Tp, PolicyId::TpLb, PolicyId::TpLbPre];
    let baseline = PolicyId::Ep;

    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;

    for model_name in &a.models {
        let spec = build_sweep_spec(
            std::slice::from_ref(model_name),
            &a.hw,
            DECODE_POLICIES.to_vec(),
            &a.ndp_list,
            &a.trace_opts,
            true,
        )?;
        let reports = sweep(&spec);

        let decode = build_table(&reports, baseline, Metric::DecodeMoe);
        // Prefetching only changes decode; the prefill chart drops it.
        let prefill_reports: Vec<_> = reports
            .iter()
            .filter(|r| r.policy != PolicyId::TpLbPre)
            .cloned()
            .collect();
        let prefill = build_table(&prefill_reports, baseline, Metric::PrefillMoe);

        let short = &spec.models[0].name;
        for (stage, table) in [("decode", &decode), ("prefill", &prefill)] {
            let csv_path = a.out_dir.join(format!("{short}_{stage}.csv"));
            let svg_path = a.out_dir.join(format!("{short}_{stage}.svg"));
            write_table(&csv_path, &table.to_csv())?;
            write_table(
                &svg_path,
                &table.to_svg(&format!("{short} {stage} MoE speedup vs {baseline}")),
            )?;
        }
    }
    Ok(())
}

fn write_table(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_trace_gen(a: TraceGenArgs) -> Result<()> {
    let model = resolve_model(&a.model)?;
    let trace = generate(
        &model,
        a.trace_opts.prompt,
        a.trace_opts.output_len,
        &a.trace_opts.params(),
    );
    let mut buf = Vec::new();
    trace.save(&mut buf)?;
    fs::write(&a.out, buf).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} ({} entries)",
        a.out.display(),
        trace.entries.len()
    );
    Ok(())
}

fn cmd_solve_balance(a: SolveBalanceArgs) -> Result<()> {
    let model = resolve_model(&a.model)?;
    let hw = hardware_at(&a.hw, a.ndp)?;
    let (ctx, seq) = match a.stage {
        StageArg::Prefill => (StageContext::prefill(a.seq), a.seq),
        StageArg::Decode => (StageContext::decode(), 1),
    };
    let p = primitives(&model, &hw, ctx);
    let inputs = BalanceInputs::from_primitives(&p, model.topk, hw.ndp_count, seq);
    let sol = match a.stage {
        StageArg::Prefill => solve_prefill(&inputs),
        StageArg::Decode => solve_decode(&inputs),
    };
    let e_max = solve_e_max(&inputs);

    let stage = match a.stage {
        StageArg::Prefill => "prefill",
        StageArg::Decode => "decode",
    };
    println!("stage: {stage}");
    println!("model: {}", model.name);
    println!("ndp: {}", hw.ndp_count);
    println!("seq: {seq}");
    println!("t_w_s: {:.12e}", p.t_w);
    println!("t_a_s: {:.12e}", p.t_a);
    println!("t_g_s: {:.12e}", p.t_g);
    println!("t_n_s: {:.12e}", p.t_n);
    println!("e_g: {:.9}", sol.e_g);
    println!("e_n: {:.9}", sol.e_n);
    println!("e_g_prime: {:.9}", sol.e_g_prime);
    println!(
        "clamp: {}",
        match sol.clamp {
            Clamp::Interior => "interior",
            Clamp::Low => "low",
            Clamp::High => "high",
        }
    );
    println!("lhs_s: {:.12e}", sol.lhs_time);
    println!("rhs_s: {:.12e}", sol.rhs_time);
    println!("residual_s: {:.12e}", sol.residual);
    println!("e_max: {:.9}", e_max);
    Ok(())
}
