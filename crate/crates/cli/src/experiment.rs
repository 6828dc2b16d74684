//! Experiment driver behind the `run` and `sweep` subcommands.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ade_core::execflow::{functional_execute, schedule, Flow, Trace, TraceSummary};
use ade_core::hetgraph::{build_metapath_graphs, build_relation_graphs, generate_synthetic, HetGraph, SemanticGraph};
use ade_core::metrics::{
    assemble_report, attention_mass_ratio, embedding_fidelity, na_work, sample_targets, trace_na_work, RunInput,
    RunReport,
};
use ade_core::model::{init_params, reference_forward, EmbeddingSet, ModelParams, ModelShape};
use ade_core::simcore::simulate;
use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{GraphSource, KSetting, RunConfig, SemanticConfig};
use crate::error::{CliError, Result};
use crate::graph_io::{load_hetgraph, write_file};
use crate::params_io::load_params;
use crate::trace_io::write_trace;

/// Graph, semantic graphs, parameters and the unpruned reference output
/// shared by every run of one configuration.
pub struct Prepared {
    pub graph: HetGraph,
    pub semantics: Vec<SemanticGraph>,
    pub params: ModelParams,
    pub reference: EmbeddingSet,
}

pub fn load_graph(source: &GraphSource) -> Result<HetGraph> {
    match source {
        GraphSource::Path(p) => load_hetgraph(p),
        GraphSource::Synthetic(spec) => Ok(generate_synthetic(spec)?),
    }
}

pub fn build_semantics(g: &HetGraph, cfg: &SemanticConfig) -> Result<Vec<SemanticGraph>> {
    Ok(match cfg {
        SemanticConfig::Relations => build_relation_graphs(g),
        SemanticConfig::Metapaths { specs, include_self } => build_metapath_graphs(g, specs, *include_self)?,
    })
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let graph = load_graph(&cfg.graph)?;
    let semantics = build_semantics(&graph, &cfg.semantics)?;
    if semantics.is_empty() {
        return Err(CliError::Input("the graph yields no semantic graphs".into()));
    }
    let params = match &cfg.model.params {
        Some(p) => load_params(p)?,
        None => init_params(cfg.model.seed, &ModelShape::new(&graph, &semantics, cfg.model.shape())?),
    };
    params.validate(&graph, &semantics)?;
    let reference = reference_forward(&graph, &semantics, &params)?;
    info!(
        "prepared {} vertices, {} semantic graphs, {} edges",
        graph.num_vertices(),
        semantics.len(),
        semantics.iter().map(|s| s.num_edges()).sum::<usize>()
    );
    Ok(Prepared {
        graph,
        semantics,
        params,
        reference,
    })
}

pub fn flow_name(flow: Flow) -> &'static str {
    match flow {
        Flow::Staged => "staged",
        Flow::Fused => "fused",
    }
}

/// Name of a run, e.g. `fused-k50` or `staged-unbounded`.
pub fn run_name(flow: Flow, k: KSetting) -> String {
    let f = flow_name(flow);
    match k {
        KSetting::Bounded(k) => format!("{f}-k{k}"),
        KSetting::Unbounded => format!("{f}-unbounded"),
    }
}

pub struct FlowRun {
    pub input: RunInput,
    pub trace: Trace,
    pub embeddings: EmbeddingSet,
}

/// Schedules, simulates and functionally executes one (flow, K) point.
pub fn run_flow(prep: &Prepared, cfg: &RunConfig, flow: Flow, k: KSetting) -> Result<FlowRun> {
    let name = run_name(flow, k);
    let trace = schedule(flow, &prep.graph, &prep.semantics, &prep.params, &cfg.schedule_options(k))?;
    debug!("{name}: {} events", trace.events.len());
    let sim = simulate(&trace, &cfg.hardware)?;
    let embeddings = functional_execute(&trace, &prep.graph, &prep.semantics, &prep.params)?;
    let fidelity = embedding_fidelity(&embeddings, &prep.reference)?;
    let analytic = na_work(&prep.semantics, k.get())?;
    let scheduled = trace_na_work(&trace);
    if !analytic.same_ratio(&scheduled) {
        return Err(ade_core::Error::Internal(format!(
            "{name}: scheduled work {scheduled:?} disagrees with the degree sums {analytic:?}"
        ))
        .into());
    }
    info!("{name}: {} cycles, {} DRAM bytes", sim.total_cycles, sim.dram_bytes);
    Ok(FlowRun {
        input: RunInput {
            name,
            flow,
            k: k.get(),
            sim,
            compute_reduction: analytic.reduction(),
            fidelity,
        },
        trace,
        embeddings,
    })
}

/// Mean top-`p` attention mass over seeded target samples of every semantic
/// graph, weighted by sample size.
pub fn sampled_attention_mass(prep: &Prepared, cfg: &RunConfig) -> Result<Option<f64>> {
    let a = &cfg.attention;
    let mut total = 0.0;
    let mut n = 0usize;
    for s in 0..prep.semantics.len() {
        let targets = sample_targets(&prep.semantics[s], a.samples, a.seed.wrapping_add(s as u64));
        if targets.is_empty() {
            continue;
        }
        let r = attention_mass_ratio(&prep.graph, &prep.semantics, s, &prep.params, a.p, &targets)?;
        total += r * targets.len() as f64;
        n += targets.len();
    }
    Ok((n > 0).then(|| total / n as f64))
}

/// SHA-256 of the configuration with the output directory cleared.
pub fn fingerprint(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.out = Default::default();
    let bytes = serde_json::to_vec(&c).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedSummary {
    pub name: String,
    pub summary: TraceSummary,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: RunReport,
    pub config: RunConfig,
    pub traces: Vec<NamedSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub graph: String,
    pub flow: String,
    pub k: String,
    pub cycles: u64,
    pub dram_bytes: u64,
    pub energy_j: f64,
    pub speedup: f64,
    pub mean_cosine: f64,
    pub compute_reduction: f64,
    pub dram_reduction: f64,
    pub energy_reduction: f64,
    pub max_rel_l2: f64,
}

pub fn graph_label(cfg: &RunConfig) -> String {
    match &cfg.graph {
        GraphSource::Path(p) => p.display().to_string(),
        GraphSource::Synthetic(s) => format!("synthetic-{}x{}-seed{}", s.num_types, s.counts.iter().sum::<usize>(), s.seed),
    }
}

pub fn csv_rows(cfg: &RunConfig, report: &RunReport) -> Vec<CsvRow> {
    let graph = graph_label(cfg);
    report
        .runs
        .iter()
        .map(|r| CsvRow {
            graph: graph.clone(),
            flow: flow_name(r.run.flow).to_string(),
            k: KSetting::from(r.run.k).to_string(),
            cycles: r.run.sim.total_cycles,
            dram_bytes: r.run.sim.dram_bytes,
            energy_j: r.run.sim.energy.total_j,
            speedup: r.speedup,
            mean_cosine: r.run.fidelity.mean_cosine,
            compute_reduction: r.run.compute_reduction,
            dram_reduction: r.dram_reduction,
            energy_reduction: r.energy_reduction,
            max_rel_l2: r.run.fidelity.max_rel_l2,
        })
        .collect()
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    write_file(path, &bytes)
}

fn write_report(cfg: &RunConfig, report: &RunReport, traces: Vec<NamedSummary>, csv_name: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(CliError::io(&cfg.out))?;
    let file = ReportFile {
        report: report.clone(),
        config: cfg.clone(),
        traces,
    };
    let json_path = cfg.out.join("report.json");
    let json = serde_json::to_vec_pretty(&file).map_err(CliError::json(&json_path))?;
    write_file(&json_path, &json)?;
    write_csv(&cfg.out.join(csv_name), &csv_rows(cfg, report))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Also write each run's trace as NDJSON into the output directory.
    pub dump_traces: bool,
}

fn finish(
    cfg: &RunConfig,
    prep: &Prepared,
    runs: Vec<FlowRun>,
    opts: &RunOptions,
    csv_name: &str,
) -> Result<RunReport> {
    let mass = sampled_attention_mass(prep, cfg)?;
    if opts.dump_traces {
        for r in &runs {
            write_trace(&r.trace, &cfg.out.join(format!("{}.trace.ndjson", r.input.name)))?;
        }
    }
    let traces = runs
        .iter()
        .map(|r| NamedSummary {
            name: r.input.name.clone(),
            summary: r.trace.summary.clone(),
        })
        .collect();
    let report = assemble_report(fingerprint(cfg), runs.into_iter().map(|r| r.input).collect(), mass)?;
    write_report(cfg, &report, traces, csv_name)?;
    Ok(report)
}

/// The unpruned staged baseline and, when different, the configured point.
pub fn cmd_run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunReport> {
    let prep = prepare(cfg)?;
    let mut runs = vec![run_flow(&prep, cfg, Flow::Staged, KSetting::Unbounded)?];
    if (cfg.flow, cfg.k) != (Flow::Staged, KSetting::Unbounded) {
        runs.push(run_flow(&prep, cfg, cfg.flow, cfg.k)?);
    }
    finish(cfg, &prep, runs, opts, "report.csv")
}

/// Sorted, duplicate-free K values; unbounded sorts last.
pub fn normalize_ks(ks: &[KSetting]) -> Result<Vec<KSetting>> {
    if ks.is_empty() {
        return Err(CliError::Input("the K list is empty".into()));
    }
    let set: BTreeSet<KSetting> = ks.iter().copied().collect();
    if set.len() != ks.len() {
        warn!("dropping {} duplicate K value(s)", ks.len() - set.len());
    }
    Ok(set.into_iter().collect())
}

/// One run per K in the configured flow plus the unbounded staged baseline,
/// at most `jobs` at a time. Writes `report.json` and `sweep.csv`.
pub fn cmd_sweep(cfg: &RunConfig, ks: &[KSetting], jobs: usize, opts: &RunOptions) -> Result<RunReport> {
    let ks = normalize_ks(ks)?;
    let prep = prepare(cfg)?;
    let mut points = vec![(Flow::Staged, KSetting::Unbounded)];
    points.extend(ks.iter().map(|&k| (cfg.flow, k)).filter(|p| *p != (Flow::Staged, KSetting::Unbounded)));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ade_core::Error::Internal(format!("thread pool: {e}")))?;
    let runs = pool.install(|| {
        points
            .par_iter()
            .map(|&(flow, k)| run_flow(&prep, cfg, flow, k))
            .collect::<Result<Vec<_>>>()
    })?;
    finish(cfg, &prep, runs, opts, "sweep.csv")
}
