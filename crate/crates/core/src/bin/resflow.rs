use clap::{Args, Parser, Subcommand, ValueEnum};
use resflow::alloc::AllocationPlan;
use resflow::builders::{build_resnet20, build_resnet8, two_block_residual};
use resflow::model::serialize_model;
use resflow::report::*;
use resflow::sim::SimConfig;
use resflow::tensor::Tensor;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "resflow", version, about = "Plan, simulate and verify streaming residual-CNN accelerators")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Allocate parallelism and size every buffer; writes plan.json.
    Plan(Common),
    /// Run the cycle-level simulation; writes trace.json.
    Simulate(SimArgs),
    /// Check the simulator against the reference interpreter; exit 3 on mismatch.
    Verify(VerifyArgs),
    /// Consolidated metrics from a plan and a simulation; writes report.json.
    Report(SimArgs),
    /// Write a generated benchmark model (model.json + weights.bin).
    Gen(GenArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    board: Option<Board>,
    #[arg(long = "n-par")]
    n_par: Option<usize>,
    #[arg(long = "freq-mhz")]
    freq_mhz: Option<f64>,
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "resflow-out")]
    out: PathBuf,
    /// Also write the optimized graph (optimized.json + optimized.bin).
    #[arg(long = "dump-opt-graph")]
    dump_opt_graph: bool,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Reuse a plan.json instead of re-solving.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Input frames as tensor files (default: seeded random frames).
    #[arg(long, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Per-cycle task state changes as CSV (cycle,task,status).
    #[arg(long = "trace-csv")]
    trace_csv: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Parameter image loaded by the simulated accelerator (default: --weights).
    #[arg(long = "param-image")]
    param_image: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Net {
    Resnet8,
    Resnet20,
    TwoBlock,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    net: Net,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn config(c: &Common) -> Result<RunConfig, RunError> {
    RunConfig::resolve(c.model.clone(), c.weights.clone(), c.board, c.n_par, c.freq_mhz, c.frames, c.seed, c.out.clone())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(v).expect("documents serialize");
    write_file(path, format!("{text}\n").as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| RunError::Document { path: path.to_path_buf(), msg: e.to_string() })
}

fn plan_step(c: &Common) -> Result<(RunConfig, resflow::ir::Graph, AllocationPlan, PlanDoc), RunError> {
    let cfg = config(c)?;
    let (_, opt, plan) = prepare(&cfg)?;
    if c.dump_opt_graph {
        let (manifest, blob) = serialize_model(&opt);
        write_file(&cfg.out.join("optimized.json"), manifest.as_bytes())?;
        write_file(&cfg.out.join("optimized.bin"), &blob)?;
    }
    let doc = plan_doc(&opt, &plan, &cfg);
    Ok((cfg, opt, plan, doc))
}

fn sim_step(a: &SimArgs) -> Result<(RunConfig, PlanDoc, TraceDoc), RunError> {
    let (cfg, opt, mut plan, mut doc) = plan_step(&a.common)?;
    if let Some(p) = &a.plan {
        let loaded: PlanDoc = read_json(p)?;
        plan = loaded.allocation.clone();
        doc = loaded;
    }
    let frames = if a.inputs.is_empty() {
        seeded_frames(&opt, cfg.seed, cfg.frames)
    } else {
        a.inputs
            .iter()
            .map(|p| Tensor::from_bytes(&read_file(p)?).map_err(|e| RunError::Document { path: p.clone(), msg: e.to_string() }))
            .collect::<Result<_, _>>()?
    };
    let sim_cfg = SimConfig { record_events: a.trace_csv.is_some(), ..SimConfig::default() };
    let trace = run_simulation(&opt, &plan, &frames, sim_cfg)?;
    if let Some(p) = &a.trace_csv {
        write_file(p, trace.events_csv().as_bytes())?;
    }
    let t = trace_doc(&trace, doc.freq_mhz);
    Ok((cfg, doc, t))
}

fn run(cli: Cli) -> Result<ExitCode, RunError> {
    match cli.cmd {
        Cmd::Plan(c) => {
            let (cfg, _, _, doc) = plan_step(&c)?;
            write_json(&cfg.out.join("plan.json"), &doc)?;
            print!("{}", plan_table(&doc));
        }
        Cmd::Simulate(a) => {
            let (cfg, _, t) = sim_step(&a)?;
            write_json(&cfg.out.join("trace.json"), &t)?;
            let m = &t.measurement;
            println!(
                "{} frames in {} cycles: interval {} cycles, {:.1} fps, latency {} cycles ({:.3} ms), bottleneck {}",
                t.frames, t.cycles, m.interval_cycles, m.fps, m.latency_cycles, m.latency_ms, m.bottleneck
            );
        }
        Cmd::Report(a) => {
            let (cfg, doc, t) = sim_step(&a)?;
            let r = report_doc(&doc, &t);
            write_json(&cfg.out.join("report.json"), &r)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        }
        Cmd::Verify(a) => {
            let cfg = config(&a.common)?;
            let reference = load_model(&cfg.model, &cfg.weights)?;
            let sim_graph = match &a.param_image {
                Some(p) => load_model(&cfg.model, p)?,
                None => reference.clone(),
            };
            let frames = seeded_frames(&reference, cfg.seed, cfg.frames);
            match verify(&reference, &sim_graph, cfg.n_par, &frames)? {
                None => println!("ok: {} frames bit-exact", frames.len()),
                Some(m) => {
                    eprintln!("mismatch: {m}");
                    return Ok(ExitCode::from(3));
                }
            }
        }
        Cmd::Gen(a) => {
            let g = match a.net {
                Net::Resnet8 => build_resnet8(a.seed),
                Net::Resnet20 => build_resnet20(a.seed),
                Net::TwoBlock => two_block_residual(a.seed, 8, 16),
            };
            let (manifest, blob) = serialize_model(&g);
            write_file(&a.out.join("model.json"), manifest.as_bytes())?;
            write_file(&a.out.join("weights.bin"), &blob)?;
            println!("wrote {} and {}", a.out.join("model.json").display(), a.out.join("weights.bin").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
