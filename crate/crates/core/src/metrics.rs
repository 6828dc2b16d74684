//! Experiment observables: attention disparity, pruned work, embedding
//! fidelity and baseline-relative comparisons.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::execflow::{Flow, Trace};
use crate::hetgraph::{HetGraph, SemanticGraph};
use crate::model::{edge_coefficient_direct_wide, project, EmbeddingSet, ModelParams};
use crate::simcore::SimResult;

/// Number of largest values that make up the top `p` share of `n` values.
fn top_count(p: f64, n: usize) -> usize {
    // Guard against products such as 0.1 · 30 landing one ulp above an
    // integer.
    let x = p * n as f64;
    let r = libm::round(x);
    let k = if (x - r).abs() <= 1e-9 * x.max(1.0) { r } else { libm::ceil(x) };
    (k as usize).clamp(1, n)
}

/// Share of the softmax mass over `thetas` held by the top `⌈p·n⌉`
/// coefficients.
pub fn top_mass(thetas: &[f64], p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        bail!(Validation, "fraction p = {p} is outside (0, 1]");
    }
    if thetas.is_empty() {
        bail!(Validation, "no coefficients to rank");
    }
    if thetas.iter().any(|t| !t.is_finite()) {
        bail!(Validation, "non-finite coefficient");
    }
    let m = thetas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = thetas.iter().map(|&t| libm::exp(t - m)).collect();
    e.sort_by(|a, b| b.total_cmp(a));
    let k = top_count(p, e.len());
    let top: f64 = e[..k].iter().sum();
    let rest: f64 = e[k..].iter().sum();
    Ok(top / (top + rest))
}

/// Up to `count` distinct targets of `sg` with at least one neighbor, drawn
/// uniformly without replacement and returned in ascending order.
pub fn sample_targets(sg: &SemanticGraph, count: usize, seed: u64) -> Vec<u32> {
    let eligible: Vec<u32> = (0..sg.num_vertices() as u32)
        .filter(|&v| sg.aggregation_degree(v) > 0)
        .collect();
    if count >= eligible.len() {
        return eligible;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<u32> = rand::seq::index::sample(&mut rng, eligible.len(), count)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Mean over `targets` of the top-`p` attention mass among each target's
/// neighbors, using first-layer coefficients averaged over heads.
pub fn attention_mass_ratio(
    g: &HetGraph,
    semantics: &[SemanticGraph],
    semantic: usize,
    params: &ModelParams,
    p: f64,
    targets: &[u32],
) -> Result<f64> {
    params.validate(g, semantics)?;
    let Some(sg) = semantics.get(semantic) else {
        bail!(Validation, "semantic graph {semantic} does not exist");
    };
    if targets.is_empty() {
        bail!(Validation, "empty target sample");
    }
    let (src_t, dst_t) = (sg.src_type(), sg.vertex_type());
    let w_src = params.projection(0, semantic, src_t)?;
    let w_dst = params.projection(0, semantic, dst_t)?;
    let d = params.dim_out;
    let mut total = 0.0;
    for &v in targets {
        if v as usize >= sg.num_vertices() {
            bail!(Validation, "target {v} is out of range for '{}'", sg.name());
        }
        let nbrs: Vec<u32> = sg.aggregation_neighbors(v).collect();
        if nbrs.is_empty() {
            bail!(Validation, "target {v} of '{}' has no neighbors", sg.name());
        }
        let hv = project(w_dst, g.feature(dst_t, v))?;
        let hu = nbrs
            .iter()
            .map(|&u| project(w_src, g.feature(src_t, u)))
            .collect::<Result<Vec<_>>>()?;
        let mut per_target = 0.0;
        for h in 0..params.heads {
            let att = params.attention(0, semantic, h)?;
            let r = h * d..(h + 1) * d;
            let thetas = hu
                .iter()
                .map(|x| edge_coefficient_direct_wide(&att.a_src, &att.a_dst, &x[r.clone()], &hv[r.clone()], params.leaky_slope))
                .collect::<Result<Vec<f64>>>()?;
            per_target += top_mass(&thetas, p)?;
        }
        total += per_target / params.heads as f64;
    }
    Ok(total / targets.len() as f64)
}

/// Neighbor-aggregation work as retained and total (target, neighbor) pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NaWork {
    pub retained: u64,
    pub total: u64,
}

impl NaWork {
    pub fn discarded(&self) -> u64 {
        self.total - self.retained
    }

    /// `1 − retained / total`, or zero when there is no work.
    pub fn reduction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.discarded() as f64 / self.total as f64
        }
    }

    /// Whether both describe the same reduction, compared exactly.
    pub fn same_ratio(&self, other: &NaWork) -> bool {
        self.discarded() as u128 * other.total as u128 == other.discarded() as u128 * self.total as u128
    }
}

/// Pairs kept by retaining at most `k` neighbors per target over all
/// semantic graphs. Every pair costs the same NA work within a layer, so the
/// pair counts weight the semantic graphs correctly.
pub fn na_work(semantics: &[SemanticGraph], k: Option<u32>) -> Result<NaWork> {
    if k == Some(0) {
        bail!(Validation, "pruning threshold must be at least 1");
    }
    let mut w = NaWork::default();
    for sg in semantics {
        for v in 0..sg.num_vertices() as u32 {
            let deg = sg.aggregation_degree(v) as u64;
            w.total += deg;
            w.retained += k.map_or(deg, |k| deg.min(k as u64));
        }
    }
    Ok(w)
}

/// Analytic fraction of neighbor-aggregation work removed by pruning.
pub fn compute_reduction(semantics: &[SemanticGraph], k: Option<u32>) -> Result<f64> {
    Ok(na_work(semantics, k)?.reduction())
}

/// Aggregated and discarded pairs actually scheduled in a trace.
pub fn trace_na_work(trace: &Trace) -> NaWork {
    let s = &trace.summary;
    NaWork {
        retained: s.aggregated_pairs,
        total: s.aggregated_pairs + s.discarded_pairs,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub mean_cosine: f64,
    pub max_rel_l2: f64,
}

const FIDELITY_EPS: f64 = 1e-12;

/// Per-vertex cosine similarity (averaged) and worst relative L2 error of
/// `pruned` against `reference`, over every vertex of every type.
pub fn embedding_fidelity(pruned: &EmbeddingSet, reference: &EmbeddingSet) -> Result<Fidelity> {
    if pruned.per_type.len() != reference.per_type.len() {
        bail!(
            Shape,
            "{} vertex types against {} in the reference",
            pruned.per_type.len(),
            reference.per_type.len()
        );
    }
    let mut cos_sum = 0.0;
    let mut n = 0usize;
    let mut worst: f64 = 0.0;
    for (t, (a, b)) in pruned.per_type.iter().zip(&reference.per_type).enumerate() {
        if a.rows != b.rows || a.cols != b.cols {
            bail!(Shape, "type {t}: {}×{} against {}×{}", a.rows, a.cols, b.rows, b.cols);
        }
        for r in 0..a.rows {
            let (x, y) = (a.row(r), b.row(r));
            let (mut xy, mut xx, mut yy, mut dd) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for (&p, &q) in x.iter().zip(y) {
                let (p, q) = (p as f64, q as f64);
                xy += p * q;
                xx += p * p;
                yy += q * q;
                dd += (p - q) * (p - q);
            }
            let cos = match (xx > 0.0, yy > 0.0) {
                (true, true) => (xy / libm::sqrt(xx * yy)).clamp(-1.0, 1.0),
                (false, false) => 1.0,
                _ => 0.0,
            };
            cos_sum += cos;
            n += 1;
            worst = worst.max(libm::sqrt(dd) / (libm::sqrt(yy) + FIDELITY_EPS));
        }
    }
    Ok(Fidelity {
        mean_cosine: if n == 0 { 1.0 } else { cos_sum / n as f64 },
        max_rel_l2: worst,
    })
}

/// One simulated configuration going into a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInput {
    pub name: String,
    pub flow: Flow,
    pub k: Option<u32>,
    pub sim: SimResult,
    pub compute_reduction: f64,
    pub fidelity: Fidelity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub run: RunInput,
    /// Baseline cycles over these cycles.
    pub speedup: f64,
    /// `1 − dram / baseline dram`; negative when the run moves more data.
    pub dram_reduction: f64,
    pub energy_reduction: f64,
}

pub const FIDELITY_LABEL: &str = "fidelity-proxy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub fingerprint: String,
    /// Name of the fidelity measure; it stands in for task accuracy.
    pub fidelity_label: String,
    pub attention_mass_ratio: Option<f64>,
    pub baseline: String,
    pub runs: Vec<RunRecord>,
}

fn reduction(variant: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        1.0 - variant / baseline
    }
}

/// Compares every run with the unpruned staged run, which must be present.
pub fn assemble_report(fingerprint: String, runs: Vec<RunInput>, attention_mass_ratio: Option<f64>) -> Result<RunReport> {
    let Some(base) = runs.iter().find(|r| r.flow == Flow::Staged && r.k.is_none()).cloned() else {
        bail!(Validation, "report needs an unpruned staged baseline run");
    };
    let mut records = Vec::with_capacity(runs.len());
    for run in runs {
        let (b, v) = (base.sim.total_cycles, run.sim.total_cycles);
        let speedup = match (b, v) {
            (0, 0) => 1.0,
            (_, 0) => bail!(Validation, "run '{}' took no cycles against a non-empty baseline", run.name),
            _ => b as f64 / v as f64,
        };
        records.push(RunRecord {
            speedup,
            dram_reduction: reduction(run.sim.dram_bytes as f64, base.sim.dram_bytes as f64),
            energy_reduction: reduction(run.sim.energy.total_j, base.sim.energy.total_j),
            run,
        });
    }
    Ok(RunReport {
        fingerprint,
        fidelity_label: FIDELITY_LABEL.into(),
        attention_mass_ratio,
        baseline: base.name,
        runs: records,
    })
}
