use std::path::PathBuf;
use std::process::ExitCode;

use ade_core::execflow::Flow;
use ade_core::hetgraph::{generate_synthetic, SyntheticSpec};
use ade_core::metrics::RunReport;
use ade_core::simcore::simulate;
use ade_sim::bench::benchmark_config;
use ade_sim::config::{GraphSource, KSetting, RunConfig};
use ade_sim::error::{CliError, EXIT_INTERNAL};
use ade_sim::experiment::{build_semantics, cmd_run, cmd_sweep, load_graph, RunOptions};
use ade_sim::graph_io::save_hetgraph;
use ade_sim::inspect::{describe_graph, describe_trace};
use ade_sim::trace_io::read_trace;
use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Simulator and functional inference engine for attention-based
/// heterogeneous GNNs with top-K neighbor pruning and fused scheduling.
#[derive(Parser)]
#[command(name = "ade-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic power-law graph and write it as a manifest.
    Gen(GenArgs),
    /// Run the unpruned staged baseline and one configured flow.
    Run(RunArgs),
    /// Run the configured flow for every K in a list.
    Sweep(SweepArgs),
    /// Print graph and degree statistics, or summarize a trace dump.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON file with a synthetic spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Vertices per type, comma separated.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    exponent: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Manifest path to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FlowArg {
    Staged,
    Fused,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Two-type power-law graph of 10 000 vertices at K = 50.
    Benchmark,
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    preset: Option<Preset>,
    /// Graph manifest, replacing the configured graph source.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, value_enum)]
    flow: Option<FlowArg>,
    /// Seed for parameter initialization and for a synthetic graph.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every trace as NDJSON into the output directory.
    #[arg(long)]
    dump_trace: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Retention capacity: a positive integer or `unbounded`.
    #[arg(long)]
    k: Option<KSetting>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// K values, comma separated.
    #[arg(long = "k", value_delimiter = ',', required = true)]
    ks: Vec<KSetting>,
    /// Concurrent runs.
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Trace dump to summarize instead of a graph.
    #[arg(long, conflicts_with_all = ["graph"])]
    trace: Option<PathBuf>,
    /// Simulate the trace with the configured (or default) hardware.
    #[arg(long, requires = "trace")]
    simulate: bool,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn resolve_config(c: &CommonArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&c.config, c.preset, &c.graph) {
        (Some(path), _, _) => RunConfig::load(path)?,
        (None, Some(Preset::Benchmark), _) => benchmark_config(),
        (None, None, Some(g)) => RunConfig::new(GraphSource::Path(g.clone())),
        (None, None, None) => {
            return Err(CliError::Input("one of --config, --preset or --graph is required".into()).into())
        }
    };
    if let Some(g) = &c.graph {
        cfg.graph = GraphSource::Path(g.clone());
    }
    if let Some(f) = c.flow {
        cfg.flow = match f {
            FlowArg::Staged => Flow::Staged,
            FlowArg::Fused => Flow::Fused,
        };
    }
    if let Some(seed) = c.seed {
        cfg.model.seed = seed;
        if let GraphSource::Synthetic(spec) = &mut cfg.graph {
            spec.seed = seed;
        }
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn print_report(report: &RunReport) {
    println!(
        "{:<20} {:>14} {:>14} {:>12} {:>8} {:>10} {:>9}",
        "run", "cycles", "dram_bytes", "energy_j", "speedup", "cosine", "pruned"
    );
    for r in &report.runs {
        println!(
            "{:<20} {:>14} {:>14} {:>12.4e} {:>8.3} {:>10.6} {:>9.4}",
            r.run.name,
            r.run.sim.total_cycles,
            r.run.sim.dram_bytes,
            r.run.sim.energy.total_j,
            r.speedup,
            r.run.fidelity.mean_cosine,
            r.run.compute_reduction
        );
    }
    if let Some(m) = report.attention_mass_ratio {
        println!("attention mass of the top neighbors: {m:.4}");
    }
}

fn gen(a: &GenArgs) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read(p).map_err(CliError::io(p))?;
            serde_json::from_slice::<SyntheticSpec>(&text).map_err(CliError::json(p))?
        }
        None => SyntheticSpec {
            num_types: 1,
            counts: vec![1000],
            feature_dim: 16,
            degree_exponent: 2.2,
            seed: 0,
        },
    };
    if let Some(c) = &a.counts {
        spec.num_types = c.len();
        spec.counts = c.clone();
    }
    if let Some(d) = a.dim {
        spec.feature_dim = d;
    }
    if let Some(e) = a.exponent {
        spec.degree_exponent = e;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let g = generate_synthetic(&spec).map_err(CliError::from)?;
    save_hetgraph(&g, &a.out)?;
    println!("wrote {} ({} vertices, {} edges)", a.out.display(), g.num_vertices(), g.num_edges());
    Ok(())
}

fn inspect(a: &InspectArgs) -> anyhow::Result<()> {
    let cfg = match &a.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    if let Some(path) = &a.trace {
        let t = read_trace(path)?;
        print!("{}", describe_trace(&t));
        if a.simulate {
            let hw = cfg.map(|c| c.hardware).unwrap_or_default();
            let r = simulate(&t, &hw).map_err(CliError::from)?;
            println!("{}", serde_json::to_string_pretty(&r).context("serializing the simulation result")?);
        }
        return Ok(());
    }
    let (source, semantics) = match (&a.graph, cfg) {
        (Some(g), cfg) => (GraphSource::Path(g.clone()), cfg.map(|c| c.semantics).unwrap_or_default()),
        (None, Some(c)) => (c.graph, c.semantics),
        (None, None) => return Err(CliError::Input("one of --graph, --config or --trace is required".into()).into()),
    };
    let g = load_graph(&source)?;
    let sem = build_semantics(&g, &semantics)?;
    print!("{}", describe_graph(&g, &sem));
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Run(a) => {
            let mut cfg = resolve_config(&a.common)?;
            if let Some(k) = a.k {
                cfg.k = k;
            }
            let report = cmd_run(
                &cfg,
                &RunOptions {
                    dump_traces: a.common.dump_trace,
                },
            )?;
            print_report(&report);
            println!("reports written to {}", cfg.out.display());
            Ok(())
        }
        Command::Sweep(a) => {
            let cfg = resolve_config(&a.common)?;
            let report = cmd_sweep(
                &cfg,
                &a.ks,
                a.jobs,
                &RunOptions {
                    dump_traces: a.common.dump_trace,
                },
            )?;
            print_report(&report);
            println!("reports written to {}", cfg.out.display());
            Ok(())
        }
        Command::Inspect(a) => inspect(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADE_SIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(EXIT_INTERNAL, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
