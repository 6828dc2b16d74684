//! Heterogeneous graphs and semantic-graph construction.
//!
//! A [`HetGraph`] holds typed vertices with per-type dense features and typed
//! edge lists. Semantic graphs are derived from it either one per edge type
//! ([`build_relation_graphs`]) or one per metapath ([`build_metapath_graphs`]),
//! and are stored target-major in CSC form: column `v` lists the in-neighbors
//! of target `v`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub type VertexId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VertexType {
    pub name: String,
    pub count: usize,
    pub dim: usize,
}

/// A relation from `src` vertices to `dst` vertices (indices into the
/// graph's vertex types).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeType {
    pub name: String,
    pub src: usize,
    pub dst: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HetGraph {
    vertex_types: Vec<VertexType>,
    features: Vec<Vec<f32>>,
    edge_types: Vec<EdgeType>,
    edges: Vec<Vec<(VertexId, VertexId)>>,
}

impl HetGraph {
    /// Builds a graph and checks every structural invariant: type references,
    /// feature block sizes, finite features, endpoint ranges and duplicate
    /// edges.
    pub fn new(
        vertex_types: Vec<VertexType>,
        features: Vec<Vec<f32>>,
        edge_types: Vec<EdgeType>,
        edges: Vec<Vec<(VertexId, VertexId)>>,
    ) -> Result<Self> {
        if features.len() != vertex_types.len() {
            bail!(
                Validation,
                "{} feature blocks for {} vertex types",
                features.len(),
                vertex_types.len()
            );
        }
        for (vt, block) in vertex_types.iter().zip(&features) {
            if vt.dim == 0 {
                bail!(Validation, "vertex type `{}` has feature dim 0", vt.name);
            }
            if block.len() != vt.count * vt.dim {
                bail!(
                    Validation,
                    "feature block of `{}` has {} entries, expected {} ({} x {})",
                    vt.name,
                    block.len(),
                    vt.count * vt.dim,
                    vt.count,
                    vt.dim
                );
            }
            if let Some(i) = block.iter().position(|x| !x.is_finite()) {
                bail!(
                    Validation,
                    "feature block of `{}` has a non-finite entry at vertex {}",
                    vt.name,
                    i / vt.dim
                );
            }
        }
        if edges.len() != edge_types.len() {
            bail!(
                Validation,
                "{} edge lists for {} edge types",
                edges.len(),
                edge_types.len()
            );
        }
        for (et, list) in edge_types.iter().zip(&edges) {
            let (Some(src), Some(dst)) = (vertex_types.get(et.src), vertex_types.get(et.dst))
            else {
                bail!(
                    Validation,
                    "edge type `{}` references an unknown vertex type",
                    et.name
                );
            };
            for &(s, d) in list {
                if s as usize >= src.count || d as usize >= dst.count {
                    bail!(
                        Validation,
                        "edge ({s}, {d}) of `{}` is out of range for `{}` ({}) -> `{}` ({})",
                        et.name,
                        src.name,
                        src.count,
                        dst.name,
                        dst.count
                    );
                }
            }
            let mut sorted = list.clone();
            sorted.sort_unstable();
            if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
                bail!(
                    Validation,
                    "edge type `{}` lists ({}, {}) more than once",
                    et.name,
                    w[0].0,
                    w[0].1
                );
            }
        }
        Ok(Self {
            vertex_types,
            features,
            edge_types,
            edges,
        })
    }

    pub fn vertex_types(&self) -> &[VertexType] {
        &self.vertex_types
    }

    pub fn edge_types(&self) -> &[EdgeType] {
        &self.edge_types
    }

    /// Row-major feature block of one vertex type.
    pub fn features(&self, vtype: usize) -> &[f32] {
        &self.features[vtype]
    }

    pub fn feature(&self, vtype: usize, v: VertexId) -> &[f32] {
        let dim = self.vertex_types[vtype].dim;
        let start = v as usize * dim;
        &self.features[vtype][start..start + dim]
    }

    pub fn edges(&self, etype: usize) -> &[(VertexId, VertexId)] {
        &self.edges[etype]
    }

    pub fn vertex_type_index(&self, name: &str) -> Option<usize> {
        self.vertex_types.iter().position(|t| t.name == name)
    }

    pub fn edge_type_index(&self, name: &str) -> Option<usize> {
        self.edge_types.iter().position(|t| t.name == name)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_types.iter().map(|t| t.count).sum()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }
}

/// Parameters for [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_types: usize,
    pub counts: Vec<usize>,
    pub feature_dim: usize,
    pub degree_exponent: f64,
    pub seed: u64,
}

/// Generates a seeded heterogeneous graph with power-law in-degrees.
///
/// Vertex type `i` is named `t{i}`. Every type is the target of exactly one
/// relation whose sources are the next type (cyclically), so a single-type
/// graph gets one self-relation. Each target draws its in-degree from a power
/// law truncated to `[1, available sources]` and then picks that many distinct
/// sources uniformly; self-loops are never generated. Features are standard
/// normal. The output is a pure function of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<HetGraph> {
    if spec.num_types == 0 || spec.counts.len() != spec.num_types {
        bail!(
            Contract,
            "num_types = {} but {} counts given",
            spec.num_types,
            spec.counts.len()
        );
    }
    if spec.counts.contains(&0) {
        bail!(Contract, "every vertex count must be at least 1");
    }
    if spec.feature_dim == 0 {
        bail!(Contract, "feature_dim must be at least 1");
    }
    if spec.degree_exponent.is_nan() || spec.degree_exponent <= 1.0 {
        bail!(Contract, "degree_exponent must exceed 1, got {}", spec.degree_exponent);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_types;
    let vertex_types: Vec<VertexType> = (0..n)
        .map(|i| VertexType {
            name: alloc::format!("t{i}"),
            count: spec.counts[i],
            dim: spec.feature_dim,
        })
        .collect();
    let features: Vec<Vec<f32>> = vertex_types
        .iter()
        .map(|vt| {
            (0..vt.count * vt.dim)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut edge_types = Vec::with_capacity(n);
    let mut edges = Vec::with_capacity(n);
    for dst in 0..n {
        let src = (dst + 1) % n;
        edge_types.push(EdgeType {
            name: alloc::format!("t{src}-t{dst}"),
            src,
            dst,
        });
        let same = src == dst;
        let n_src = spec.counts[src];
        let available = if same { n_src - 1 } else { n_src };
        let mut list = Vec::new();
        if available > 0 {
            let cdf = power_law_cdf(available, spec.degree_exponent);
            for v in 0..spec.counts[dst] {
                let u: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
                let degree = cdf.partition_point(|&c| c <= u).min(available - 1) + 1;
                let mut picked: Vec<u32> = index::sample(&mut rng, available, degree)
                    .into_iter()
                    .map(|i| {
                        let i = if same && i >= v { i + 1 } else { i };
                        i as u32
                    })
                    .collect();
                picked.sort_unstable();
                list.extend(picked.into_iter().map(|s| (s, v as u32)));
            }
        }
        edges.push(list);
    }
    HetGraph::new(vertex_types, features, edge_types, edges)
}

/// Cumulative weights of `d^-exponent` for `d = 1..=max_degree`.
fn power_law_cdf(max_degree: usize, exponent: f64) -> Vec<f64> {
    let mut acc = 0.0;
    (1..=max_degree)
        .map(|d| {
            acc += libm::pow(d as f64, -exponent);
            acc
        })
        .collect()
}

/// One semantic graph in compressed sparse column form.
///
/// Columns index targets (of type `dst_type`), rows hold in-neighbors (of type
/// `src_type`). For relation graphs whose endpoint types differ the graph is
/// bipartite and `num_src` differs from `num_vertices`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticGraph {
    semantic_id: u32,
    name: String,
    src_type: usize,
    dst_type: usize,
    num_vertices: usize,
    num_src: usize,
    col_ptr: Vec<u32>,
    row_idx: Vec<VertexId>,
}

impl SemanticGraph {
    /// Builds the canonical CSC from an arbitrary edge list: duplicates are
    /// collapsed and rows are sorted within each column.
    pub fn from_edges(
        semantic_id: u32,
        name: impl Into<String>,
        src_type: usize,
        dst_type: usize,
        num_src: usize,
        num_vertices: usize,
        edges: impl IntoIterator<Item = (VertexId, VertexId)>,
    ) -> Result<Self> {
        let mut list: Vec<(VertexId, VertexId)> = Vec::new();
        for (s, d) in edges {
            if s as usize >= num_src || d as usize >= num_vertices {
                bail!(
                    Validation,
                    "edge ({s}, {d}) outside {num_src} x {num_vertices} semantic graph"
                );
            }
            // sort key is (dst, src) for column-major layout
            list.push((d, s));
        }
        list.sort_unstable();
        list.dedup();
        let mut col_ptr = vec![0u32; num_vertices + 1];
        for &(d, _) in &list {
            col_ptr[d as usize + 1] += 1;
        }
        for i in 0..num_vertices {
            col_ptr[i + 1] += col_ptr[i];
        }
        let row_idx = list.into_iter().map(|(_, s)| s).collect();
        Ok(Self {
            semantic_id,
            name: name.into(),
            src_type,
            dst_type,
            num_vertices,
            num_src,
            col_ptr,
            row_idx,
        })
    }

    /// Wraps raw CSC arrays after checking the canonical-form invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_csc(
        semantic_id: u32,
        name: impl Into<String>,
        src_type: usize,
        dst_type: usize,
        num_src: usize,
        col_ptr: Vec<u32>,
        row_idx: Vec<VertexId>,
    ) -> Result<Self> {
        if col_ptr.is_empty() || col_ptr[0] != 0 {
            bail!(Validation, "col_ptr must start with 0");
        }
        if *col_ptr.last().unwrap() as usize != row_idx.len() {
            bail!(Validation, "col_ptr must end at len(row_idx) = {}", row_idx.len());
        }
        if col_ptr.windows(2).any(|w| w[0] > w[1]) {
            bail!(Validation, "col_ptr must be non-decreasing");
        }
        for (v, w) in col_ptr.windows(2).enumerate() {
            let col = &row_idx[w[0] as usize..w[1] as usize];
            if col.windows(2).any(|p| p[0] >= p[1]) {
                bail!(Validation, "column {v} is not strictly increasing");
            }
            if col.iter().any(|&r| r as usize >= num_src) {
                bail!(Validation, "column {v} has a row index >= {num_src}");
            }
        }
        Ok(Self {
            semantic_id,
            name: name.into(),
            src_type,
            dst_type,
            num_vertices: col_ptr.len() - 1,
            num_src,
            col_ptr,
            row_idx,
        })
    }

    pub fn semantic_id(&self) -> u32 {
        self.semantic_id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Vertex type of the targets (columns).
    pub fn vertex_type(&self) -> usize {
        self.dst_type
    }

    pub fn src_type(&self) -> usize {
        self.src_type
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn num_src(&self) -> usize {
        self.num_src
    }

    pub fn is_bipartite(&self) -> bool {
        self.src_type != self.dst_type
    }

    pub fn col_ptr(&self) -> &[u32] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[VertexId] {
        &self.row_idx
    }

    pub fn num_edges(&self) -> usize {
        self.row_idx.len()
    }

    /// Stored in-neighbors of `v`, self-loops included.
    pub fn neighbors(&self, v: VertexId) -> &[VertexId] {
        let v = v as usize;
        &self.row_idx[self.col_ptr[v] as usize..self.col_ptr[v + 1] as usize]
    }

    /// In-neighbors that take part in aggregation as neighbors. The target
    /// itself always joins aggregation through its self term, so a stored
    /// self-loop is skipped here.
    pub fn aggregation_neighbors(&self, v: VertexId) -> impl Iterator<Item = VertexId> + '_ {
        let skip_self = !self.is_bipartite();
        self.neighbors(v)
            .iter()
            .copied()
            .filter(move |&u| !(skip_self && u == v))
    }

    /// Neighbor count used for pruning decisions (`deg(v)`).
    pub fn aggregation_degree(&self, v: VertexId) -> usize {
        let n = self.neighbors(v);
        if !self.is_bipartite() && n.binary_search(&v).is_ok() {
            n.len() - 1
        } else {
            n.len()
        }
    }

    /// Edges as `(src, dst)` pairs, column-major.
    pub fn edges(&self) -> impl Iterator<Item = (VertexId, VertexId)> + '_ {
        (0..self.num_vertices as u32)
            .flat_map(move |v| self.neighbors(v).iter().map(move |&u| (u, v)))
    }

    pub fn max_degree(&self) -> usize {
        (0..self.num_vertices as u32)
            .map(|v| self.aggregation_degree(v))
            .max()
            .unwrap_or(0)
    }
}

/// One semantic graph per edge type, in edge-type order.
pub fn build_relation_graphs(g: &HetGraph) -> Vec<SemanticGraph> {
    g.edge_types()
        .iter()
        .enumerate()
        .map(|(i, et)| {
            SemanticGraph::from_edges(
                i as u32,
                et.name.clone(),
                et.src,
                et.dst,
                g.vertex_types()[et.src].count,
                g.vertex_types()[et.dst].count,
                g.edges(i).iter().copied(),
            )
            .expect("validated graph edges are in range")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetapathStep {
    pub edge_type: String,
    #[serde(default)]
    pub reverse: bool,
}

impl MetapathStep {
    pub fn forward(edge_type: impl Into<String>) -> Self {
        Self {
            edge_type: edge_type.into(),
            reverse: false,
        }
    }

    pub fn reverse(edge_type: impl Into<String>) -> Self {
        Self {
            edge_type: edge_type.into(),
            reverse: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetapathSpec {
    pub name: String,
    pub steps: Vec<MetapathStep>,
}

impl MetapathSpec {
    /// Resolves every step to `(edge type index, from type, to type)` and
    /// checks that consecutive steps chain.
    pub fn resolve(&self, g: &HetGraph) -> Result<Vec<(usize, usize, usize)>> {
        if self.steps.is_empty() {
            bail!(Validation, "metapath `{}` has no steps", self.name);
        }
        let mut out: Vec<(usize, usize, usize)> = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let Some(e) = g.edge_type_index(&step.edge_type) else {
                bail!(
                    Validation,
                    "metapath `{}` names unknown edge type `{}`",
                    self.name,
                    step.edge_type
                );
            };
            let et = &g.edge_types()[e];
            let (from, to) = if step.reverse {
                (et.dst, et.src)
            } else {
                (et.src, et.dst)
            };
            if let Some(&(_, _, prev_to)) = out.last() {
                if prev_to != from {
                    let types = g.vertex_types();
                    return Err(Error::Metapath {
                        name: self.name.clone(),
                        step: out.len() - 1,
                        next: out.len(),
                        from: types[prev_to].name.clone(),
                        to: types[from].name.clone(),
                    });
                }
            }
            out.push((e, from, to));
        }
        Ok(out)
    }
}

/// One semantic graph per metapath: `(u, v)` is an edge iff some instance of
/// the metapath starts at `u` and ends at `v`. Multiple instances collapse to
/// one edge. Self-edges are kept only when `include_self` is set.
pub fn build_metapath_graphs(
    g: &HetGraph,
    specs: &[MetapathSpec],
    include_self: bool,
) -> Result<Vec<SemanticGraph>> {
    let mut out = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let steps = spec.resolve(g)?;
        // oriented adjacency (from -> to) for every step
        let adj: Vec<Vec<Vec<VertexId>>> = steps
            .iter()
            .zip(&spec.steps)
            .map(|(&(e, from, _), step)| {
                let mut lists = vec![Vec::new(); g.vertex_types()[from].count];
                for &(s, d) in g.edges(e) {
                    let (a, b) = if step.reverse { (d, s) } else { (s, d) };
                    lists[a as usize].push(b);
                }
                lists
            })
            .collect();

        let first = steps[0].1;
        let last = steps[steps.len() - 1].2;
        let n_last = g.vertex_types()[last].count;
        let widest = g.vertex_types().iter().map(|t| t.count).max().unwrap_or(0);
        let mut seen = vec![u32::MAX; widest];
        let mut edges = Vec::new();
        let mut frontier: Vec<VertexId> = Vec::new();
        let mut next: Vec<VertexId> = Vec::new();
        let mut stamp = 0u32;
        for start in 0..g.vertex_types()[first].count as VertexId {
            frontier.clear();
            frontier.push(start);
            for lists in &adj {
                next.clear();
                stamp = stamp.wrapping_add(1);
                if stamp == u32::MAX {
                    seen.iter_mut().for_each(|s| *s = u32::MAX);
                    stamp = 0;
                }
                for &x in &frontier {
                    for &y in &lists[x as usize] {
                        if seen[y as usize] != stamp {
                            seen[y as usize] = stamp;
                            next.push(y);
                        }
                    }
                }
                core::mem::swap(&mut frontier, &mut next);
            }
            for &end in &frontier {
                if first == last && end == start && !include_self {
                    continue;
                }
                edges.push((start, end));
            }
        }
        out.push(SemanticGraph::from_edges(
            i as u32,
            spec.name.clone(),
            first,
            last,
            g.vertex_types()[first].count,
            n_last,
            edges,
        )?);
    }
    Ok(out)
}

/// In-degree histogram summary of a semantic graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub name: String,
    pub targets: usize,
    pub edges: usize,
    pub min: usize,
    pub median: usize,
    pub mean: f64,
    pub max: usize,
}

pub fn degree_stats(s: &SemanticGraph) -> DegreeStats {
    let mut degs: Vec<usize> = (0..s.num_vertices() as u32)
        .map(|v| s.aggregation_degree(v))
        .collect();
    degs.sort_unstable();
    let n = degs.len();
    DegreeStats {
        name: s.name().to_string(),
        targets: n,
        edges: s.num_edges(),
        min: degs.first().copied().unwrap_or(0),
        median: if n == 0 { 0 } else { degs[n / 2] },
        mean: if n == 0 {
            0.0
        } else {
            degs.iter().sum::<usize>() as f64 / n as f64
        },
        max: degs.last().copied().unwrap_or(0),
    }
}
