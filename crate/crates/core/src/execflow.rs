//! Operation traces for the staged and the operation-fused execution flows.
//!
//! Schedulers emit [`OpEvent`]s and run each one on a live interpreter as it
//! is emitted, because pruning outcomes decide which events follow.
//! [`functional_execute`] replays a finished trace on a fresh interpreter,
//! re-checking every data dependency and pruning outcome.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use smallvec::{smallvec, SmallVec};

use crate::error::{bail, Result};
use crate::hetgraph::{HetGraph, SemanticGraph};
use crate::model::{
    aggregate_softmax, edge_coefficient_direct_wide, leaky_relu_wide, project, semantic_fusion,
    theta_half_wide, EmbeddingSet, FusionMode, Matrix, ModelParams, OnlineSoftmax, Stage,
};
use crate::pruner::{swap_bound, Offer, RetentionDomain, RetentionEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OpKind {
    Fp,
    CoefSrc,
    CoefDst,
    PruneCheck,
    Heapify,
    Importance,
    AggAccum,
    AggFinalize,
    Sf,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Fp,
        OpKind::CoefSrc,
        OpKind::CoefDst,
        OpKind::PruneCheck,
        OpKind::Heapify,
        OpKind::Importance,
        OpKind::AggAccum,
        OpKind::AggFinalize,
        OpKind::Sf,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    #[default]
    None,
    Pushed,
    Replaced,
    Discarded,
    /// Aggregation into a running-max accumulator.
    Online,
    /// Aggregation over a finished retention domain.
    Deferred,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemClass {
    Hbm,
    FeatureCache,
    WeightBuffer,
    AttentionBuffer,
    EdgeBuffer,
}

impl MemClass {
    pub const ALL: [MemClass; 5] = [
        MemClass::Hbm,
        MemClass::FeatureCache,
        MemClass::WeightBuffer,
        MemClass::AttentionBuffer,
        MemClass::EdgeBuffer,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    #[default]
    Staged,
    Fused,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// One retention domain per (target, head), keyed by that head's `θ_u*`.
    #[default]
    PerHead,
    /// One domain per target keyed by `Σ_h θ_u*`; all heads share the result.
    SharedSum,
}

/// One scheduled operation.
///
/// `target` is the vertex the operation produces for: the projected vertex for
/// FP, the vertex whose half-coefficient is computed for COEF, the aggregating
/// vertex for edge and aggregation events, and the first row for SF. `width`
/// is the row count of FP/SF, the domain capacity of PRUNE_CHECK/HEAPIFY, the
/// chain position of AGG_ACCUM, the aggregated-neighbor count of AGG_FINALIZE
/// and the CSC words read by the COEF_DST that carries the edge-buffer load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpEvent {
    pub kind: OpKind,
    pub layer: u8,
    pub semantic: u16,
    pub head: Option<u16>,
    pub vtype: u16,
    pub target: u32,
    pub source: Option<u32>,
    pub width: u32,
    pub tag: Tag,
    pub flops: u64,
    pub reads: [u32; 5],
    pub writes: [u32; 5],
    pub deps: SmallVec<[u32; 4]>,
}

impl OpEvent {
    pub(crate) fn new(kind: OpKind, layer: usize, semantic: usize, vtype: usize, target: u32) -> Self {
        Self {
            kind,
            layer: layer as u8,
            semantic: semantic as u16,
            head: None,
            vtype: vtype as u16,
            target,
            source: None,
            width: 0,
            tag: Tag::None,
            flops: 0,
            reads: [0; 5],
            writes: [0; 5],
            deps: SmallVec::new(),
        }
    }

    pub(crate) fn head(mut self, h: usize) -> Self {
        self.head = Some(h as u16);
        self
    }

    pub(crate) fn source(mut self, u: u32) -> Self {
        self.source = Some(u);
        self
    }

    pub(crate) fn width(mut self, w: u32) -> Self {
        self.width = w;
        self
    }

    fn tag(mut self, t: Tag) -> Self {
        self.tag = t;
        self
    }

    fn deps<I: IntoIterator<Item = Option<u32>>>(mut self, deps: I) -> Self {
        self.deps.extend(deps.into_iter().flatten());
        self
    }

    pub fn bytes_read(&self) -> u64 {
        self.reads.iter().map(|&b| b as u64).sum()
    }

    pub fn bytes_written(&self) -> u64 {
        self.writes.iter().map(|&b| b as u64).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheKind {
    Projected,
    Partial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey {
    pub layer: u8,
    pub semantic: u16,
    pub vtype: u16,
    pub vertex: u32,
    pub kind: CacheKind,
}

/// One memory movement of an event. Feature-cache accesses carry the entry
/// they touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Access {
    pub class: MemClass,
    pub bytes: u32,
    pub write: bool,
    pub key: Option<CacheKey>,
}

impl Access {
    fn read(class: MemClass, bytes: u64) -> Self {
        Self {
            class,
            bytes: bytes as u32,
            write: false,
            key: None,
        }
    }

    fn write(class: MemClass, bytes: u64) -> Self {
        Self {
            write: true,
            ..Self::read(class, bytes)
        }
    }

    fn keyed(mut self, key: CacheKey) -> Self {
        self.key = Some(key);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMeta {
    pub name: alloc::string::String,
    pub src_type: u16,
    pub dst_type: u16,
    pub num_src: u32,
    pub num_dst: u32,
    pub num_edges: u64,
}

impl SemanticMeta {
    pub fn bipartite(&self) -> bool {
        self.src_type != self.dst_type
    }
}

/// Shapes and on-chip footprints a simulator needs to cost a trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub layers: u32,
    pub heads: u32,
    pub dim_out: u32,
    pub semantic_dim: u32,
    pub fusion: FusionMode,
    /// Input width of every vertex type at each layer.
    pub layer_dims: Vec<Vec<u32>>,
    pub type_counts: Vec<u32>,
    pub semantics: Vec<SemanticMeta>,
    /// Number of semantic graphs targeting each vertex type.
    pub type_semantics: Vec<u32>,
    pub weight_bytes: u64,
    pub edge_bytes: u64,
    /// Attention values that must stay resident while one semantic graph is
    /// processed under this trace's flow.
    pub attention_bytes: Vec<u64>,
}

impl TraceMeta {
    pub fn hidden(&self) -> u32 {
        self.heads * self.dim_out
    }

    fn build(g: &HetGraph, semantics: &[SemanticGraph], params: &ModelParams, flow: Flow) -> Self {
        let hidden = params.hidden() as u64;
        let heads = params.heads as u64;
        let layer_dims: Vec<Vec<u32>> = params
            .layers
            .iter()
            .map(|l| l.input_dims.iter().map(|&d| d as u32).collect())
            .collect();
        let mut weight_bytes = 0u64;
        for dims in &layer_dims {
            for s in semantics {
                weight_bytes += hidden * dims[s.src_type()] as u64 * 4;
                if s.is_bipartite() {
                    weight_bytes += hidden * dims[s.vertex_type()] as u64 * 4;
                }
                weight_bytes += 2 * hidden * 4;
            }
            weight_bytes += (params.semantic_dim as u64 * hidden + 2 * params.semantic_dim as u64) * 4;
        }
        let edge_bytes = semantics
            .iter()
            .map(|s| (s.num_vertices() as u64 + 1 + s.num_edges() as u64) * 4)
            .sum();
        let attention_bytes = semantics
            .iter()
            .map(|s| {
                let (ns, nd) = (s.num_src() as u64, s.num_vertices() as u64);
                let self_src = if s.is_bipartite() { nd } else { 0 };
                let values = match flow {
                    // Every half-coefficient of the semantic graph is produced
                    // before aggregation starts.
                    Flow::Staged => ns + self_src + nd,
                    // Source halves are reused across targets; destination
                    // halves live only while their target is processed.
                    Flow::Fused => ns + self_src,
                };
                values * heads * 4
            })
            .collect();
        let mut type_semantics = vec![0u32; g.vertex_types().len()];
        for s in semantics {
            type_semantics[s.vertex_type()] += 1;
        }
        Self {
            layers: params.layers.len() as u32,
            heads: params.heads as u32,
            dim_out: params.dim_out as u32,
            semantic_dim: params.semantic_dim as u32,
            fusion: params.fusion_mode,
            layer_dims,
            type_counts: g.vertex_types().iter().map(|t| t.count as u32).collect(),
            semantics: semantics
                .iter()
                .map(|s| SemanticMeta {
                    name: s.name().into(),
                    src_type: s.src_type() as u16,
                    dst_type: s.vertex_type() as u16,
                    num_src: s.num_src() as u32,
                    num_dst: s.num_vertices() as u32,
                    num_edges: s.num_edges() as u64,
                })
                .collect(),
            type_semantics,
            weight_bytes,
            edge_bytes,
            attention_bytes,
        }
    }
}

/// Memory movements of one event, derived from its kind and fields.
pub fn event_accesses(e: &OpEvent, meta: &TraceMeta) -> SmallVec<[Access; 6]> {
    use MemClass::*;
    let d4 = meta.dim_out as u64 * 4;
    let hidden4 = meta.hidden() as u64 * 4;
    let (l, s, t) = (e.layer as usize, e.semantic as usize, e.vtype as usize);
    let key = |vtype: u16, vertex: u32, kind: CacheKind| CacheKey {
        layer: e.layer,
        semantic: e.semantic,
        vtype,
        vertex,
        kind,
    };
    match e.kind {
        OpKind::Fp => {
            let din = meta.layer_dims[l][t] as u64;
            let rows = e.width as u64;
            let mut v: SmallVec<[Access; 6]> = smallvec![
                Access::read(Hbm, rows * din * 4),
                Access::read(WeightBuffer, din * meta.hidden() as u64 * 4),
            ];
            for r in 0..e.width {
                v.push(Access::write(FeatureCache, hidden4).keyed(key(e.vtype, e.target + r, CacheKind::Projected)));
            }
            v
        }
        OpKind::CoefSrc | OpKind::CoefDst => {
            let mut v: SmallVec<[Access; 6]> = smallvec![
                Access::read(FeatureCache, d4).keyed(key(e.vtype, e.target, CacheKind::Projected)),
                Access::read(WeightBuffer, d4),
                Access::write(AttentionBuffer, 4),
            ];
            if e.width > 0 {
                v.push(Access::read(EdgeBuffer, e.width as u64 * 4));
            }
            v
        }
        OpKind::PruneCheck => {
            let n = if e.head.is_some() { 1 } else { meta.heads as u64 };
            smallvec![Access::read(AttentionBuffer, 4 * n)]
        }
        OpKind::Heapify => SmallVec::new(),
        OpKind::Importance => smallvec![
            Access::read(AttentionBuffer, 8),
            Access::write(AttentionBuffer, 4),
        ],
        OpKind::AggAccum => {
            let src_t = meta.semantics[s].src_type;
            let u = e.source.unwrap_or(e.target);
            let partial = key(e.vtype, e.target, CacheKind::Partial);
            let mut v: SmallVec<[Access; 6]> = smallvec![
                Access::read(FeatureCache, d4).keyed(key(src_t, u, CacheKind::Projected)),
                Access::read(AttentionBuffer, 4),
            ];
            if e.width > 0 {
                v.push(Access::read(FeatureCache, d4).keyed(partial));
            }
            v.push(Access::write(FeatureCache, d4).keyed(partial));
            v
        }
        OpKind::AggFinalize => {
            let mut v: SmallVec<[Access; 6]> = smallvec![
                Access::read(FeatureCache, d4).keyed(key(e.vtype, e.target, CacheKind::Projected)),
                Access::read(AttentionBuffer, 8),
            ];
            if e.width > 0 {
                v.push(Access::read(FeatureCache, d4).keyed(key(e.vtype, e.target, CacheKind::Partial)));
            }
            v.push(Access::write(Hbm, d4));
            v
        }
        OpKind::Sf => {
            let rows = e.width as u64;
            let p = meta.type_semantics[t] as u64;
            let sd = meta.semantic_dim as u64;
            smallvec![
                Access::read(Hbm, rows * p * hidden4),
                Access::read(WeightBuffer, (sd * meta.hidden() as u64 + 2 * sd) * 4),
                Access::write(Hbm, rows * hidden4),
            ]
        }
    }
}

/// Floating-point work of one event.
pub fn event_flops(e: &OpEvent, meta: &TraceMeta) -> u64 {
    let d = meta.dim_out as u64;
    let hidden = meta.hidden() as u64;
    match e.kind {
        OpKind::Fp => {
            let din = meta.layer_dims[e.layer as usize][e.vtype as usize] as u64;
            e.width as u64 * 2 * din * hidden
        }
        OpKind::CoefSrc | OpKind::CoefDst => 2 * d,
        OpKind::PruneCheck | OpKind::Heapify => 0,
        // add, LeakyReLU, exp
        OpKind::Importance => 4,
        OpKind::AggAccum => 2 * d,
        // self importance, self accumulate, normalize
        OpKind::AggFinalize => 4 + 3 * d,
        OpKind::Sf => {
            let p = meta.type_semantics[e.vtype as usize] as u64;
            let per_row = match meta.fusion {
                FusionMode::Attention => {
                    let sd = meta.semantic_dim as u64;
                    p * (2 * sd * hidden + 3 * sd) + 2 * p * hidden
                }
                FusionMode::Mean => 2 * p * hidden,
            };
            e.width as u64 * per_row
        }
    }
}

/// Per-(semantic graph, vertex) done flags for projections and per-head
/// half-coefficients. Each flag remembers the event that set it.
#[derive(Clone, Debug)]
pub struct DispatchBitmap {
    heads: usize,
    fp: Vec<Vec<Vec<u32>>>,
    theta_src: Vec<Vec<Vec<u32>>>,
    theta_dst: Vec<Vec<Vec<u32>>>,
}

const UNSET: u32 = u32::MAX;

impl DispatchBitmap {
    pub fn new(type_counts: &[u32], semantics: usize, heads: usize) -> Self {
        let plane = |per: usize| -> Vec<Vec<Vec<u32>>> {
            (0..semantics)
                .map(|_| type_counts.iter().map(|&c| vec![UNSET; c as usize * per]).collect())
                .collect()
        };
        Self {
            heads,
            fp: plane(1),
            theta_src: plane(heads),
            theta_dst: plane(heads),
        }
    }

    fn get(v: &[Vec<Vec<u32>>], s: usize, t: usize, i: usize) -> Option<u32> {
        let x = v[s][t][i];
        (x != UNSET).then_some(x)
    }

    fn set(v: &mut [Vec<Vec<u32>>], s: usize, t: usize, i: usize, id: u32) -> Result<()> {
        let slot = &mut v[s][t][i];
        if *slot != UNSET {
            bail!(Internal, "dispatch flag set twice");
        }
        *slot = id;
        Ok(())
    }

    pub fn fp(&self, s: usize, t: usize, v: u32) -> Option<u32> {
        Self::get(&self.fp, s, t, v as usize)
    }

    pub fn theta_src(&self, s: usize, t: usize, v: u32, h: usize) -> Option<u32> {
        Self::get(&self.theta_src, s, t, v as usize * self.heads + h)
    }

    pub fn theta_dst(&self, s: usize, t: usize, v: u32, h: usize) -> Option<u32> {
        Self::get(&self.theta_dst, s, t, v as usize * self.heads + h)
    }

    pub fn set_fp(&mut self, s: usize, t: usize, v: u32, id: u32) -> Result<()> {
        Self::set(&mut self.fp, s, t, v as usize, id)
    }

    pub fn set_theta_src(&mut self, s: usize, t: usize, v: u32, h: usize, id: u32) -> Result<()> {
        Self::set(&mut self.theta_src, s, t, v as usize * self.heads + h, id)
    }

    pub fn set_theta_dst(&mut self, s: usize, t: usize, v: u32, h: usize, id: u32) -> Result<()> {
        Self::set(&mut self.theta_dst, s, t, v as usize * self.heads + h, id)
    }
}

/// Neighbors kept by one retention domain, sorted by vertex id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retained {
    pub layer: u8,
    pub semantic: u16,
    pub target: u32,
    /// `None` for a domain shared by all heads.
    pub head: Option<u16>,
    pub vertices: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub events: u64,
    pub events_by_kind: [u64; 9],
    pub flops: u64,
    pub bytes_read: [u64; 5],
    pub bytes_written: [u64; 5],
    /// (edge, head) pairs that reached aggregation.
    pub aggregated_pairs: u64,
    /// (edge, head) pairs dropped by pruning, at PRUNE_CHECK or by eviction.
    pub discarded_pairs: u64,
    pub pruned_domains: u64,
}

impl TraceSummary {
    pub fn count(&self, k: OpKind) -> u64 {
        self.events_by_kind[k.index()]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub flow: Flow,
    pub k: Option<u32>,
    pub prune_mode: PruneMode,
    pub meta: TraceMeta,
    pub events: Vec<OpEvent>,
    /// Ids at which a new barrier segment begins; every event of a segment
    /// waits for all earlier segments.
    pub fences: Vec<u32>,
    pub retained: Vec<Retained>,
    pub summary: TraceSummary,
}

impl Trace {
    /// Segment index of every event.
    pub fn segments(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.events.len());
        let mut seg = 0u32;
        let mut next = self.fences.iter().peekable();
        for id in 0..self.events.len() as u32 {
            while next.peek().is_some_and(|&&f| f <= id) {
                next.next();
                seg += 1;
            }
            out.push(seg);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleOptions {
    /// Retention capacity per domain; `None` disables pruning.
    pub k: Option<u32>,
    pub prune_mode: PruneMode,
    /// Rows per staged FP batch.
    pub fp_batch: u32,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            k: Some(50),
            prune_mode: PruneMode::PerHead,
            fp_batch: 64,
        }
    }
}

impl ScheduleOptions {
    pub fn with_k(k: Option<u32>) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Interpreter

#[derive(Clone, Debug)]
struct Plane<T> {
    width: usize,
    data: Vec<T>,
    done: Vec<bool>,
}

impl<T: Copy + Default> Plane<T> {
    fn new(rows: usize, width: usize) -> Self {
        Self {
            width,
            data: vec![T::default(); rows * width],
            done: vec![false; rows],
        }
    }

    fn get(&self, i: usize) -> Option<&[T]> {
        if *self.done.get(i)? {
            Some(&self.data[i * self.width..(i + 1) * self.width])
        } else {
            None
        }
    }

    fn put(&mut self, i: usize, v: &[T]) -> Result<()> {
        match self.done.get(i) {
            None => bail!(Internal, "row {i} out of range"),
            Some(true) => bail!(Internal, "row {i} produced twice"),
            Some(false) => {}
        }
        self.done[i] = true;
        self.data[i * self.width..(i + 1) * self.width].copy_from_slice(v);
        Ok(())
    }
}

#[derive(Debug, Default)]
struct NaState {
    candidates: BTreeMap<u32, f64>,
    thetas: Vec<f64>,
    sources: Vec<u32>,
    online: Option<OnlineSoftmax>,
    count: usize,
}

#[derive(Debug)]
struct Domain {
    rd: RetentionDomain,
    heapify_owed: u32,
    frozen: Option<Vec<u32>>,
}

const SHARED: u16 = u16::MAX;

struct Interp<'a> {
    sem: &'a [SemanticGraph],
    params: &'a ModelParams,
    flow: Flow,
    prune_mode: PruneMode,
    k: Option<u32>,
    live: bool,
    layer: usize,
    input: Vec<Matrix>,
    next: Vec<Option<Matrix>>,
    /// `[semantic][vtype]`
    proj: Vec<Vec<Option<Plane<f32>>>>,
    theta_src: Vec<Vec<Option<Plane<f64>>>>,
    theta_dst: Vec<Vec<Option<Plane<f64>>>>,
    agg: Vec<Matrix>,
    agg_done: Vec<usize>,
    na: BTreeMap<(u16, u32, u16), NaState>,
    domains: BTreeMap<(u16, u32, u16), Domain>,
    retained: Vec<Retained>,
}

impl<'a> Interp<'a> {
    fn new(
        g: &HetGraph,
        sem: &'a [SemanticGraph],
        params: &'a ModelParams,
        flow: Flow,
        opts: &ScheduleOptions,
        live: bool,
    ) -> Self {
        let mut it = Self {
            sem,
            params,
            flow,
            prune_mode: opts.prune_mode,
            k: opts.k,
            live,
            layer: 0,
            input: EmbeddingSet::raw(g).per_type,
            next: vec![None; g.vertex_types().len()],
            proj: Vec::new(),
            theta_src: Vec::new(),
            theta_dst: Vec::new(),
            agg: Vec::new(),
            agg_done: Vec::new(),
            na: BTreeMap::new(),
            domains: BTreeMap::new(),
            retained: Vec::new(),
        };
        it.reset_layer();
        it
    }

    fn reset_layer(&mut self) {
        let (heads, d) = (self.params.heads, self.params.hidden());
        fn mk<T: Copy + Default>(
            sem: &[SemanticGraph],
            input: &[Matrix],
            rows_per_vertex: usize,
            width: usize,
        ) -> Vec<Vec<Option<Plane<T>>>> {
            sem.iter()
                .map(|s| {
                    let mut v: Vec<Option<Plane<T>>> = vec![None; input.len()];
                    for t in [s.src_type(), s.vertex_type()] {
                        v[t] = Some(Plane::new(input[t].rows * rows_per_vertex, width));
                    }
                    v
                })
                .collect()
        }
        self.proj = mk(self.sem, &self.input, 1, d);
        self.theta_src = mk(self.sem, &self.input, heads, 1);
        self.theta_dst = mk(self.sem, &self.input, heads, 1);
        self.agg = self.sem.iter().map(|s| Matrix::zeros(s.num_vertices(), d)).collect();
        self.agg_done = vec![0; self.sem.len()];
        self.na.clear();
        self.domains.clear();
    }

    fn layer_complete(&self) -> bool {
        self.sem
            .iter()
            .all(|s| self.next[s.vertex_type()].is_some())
    }

    fn advance_to(&mut self, layer: usize) -> Result<()> {
        if layer < self.layer {
            bail!(Internal, "event of layer {layer} after layer {} started", self.layer);
        }
        while self.layer < layer {
            if !self.layer_complete() {
                bail!(Internal, "layer {} used before semantic fusion of layer {}", layer, self.layer);
            }
            for (t, n) in self.next.iter_mut().enumerate() {
                if let Some(m) = n.take() {
                    self.input[t] = m;
                }
            }
            self.layer += 1;
            self.reset_layer();
        }
        Ok(())
    }

    fn finish(mut self) -> Result<EmbeddingSet> {
        if self.layer + 1 != self.params.layers.len() || !self.layer_complete() {
            bail!(Internal, "trace ended before the last layer was fused");
        }
        for (t, n) in self.next.iter_mut().enumerate() {
            if let Some(m) = n.take() {
                self.input[t] = m;
            }
        }
        Ok(EmbeddingSet {
            stage: Stage::Fused,
            per_type: self.input,
        })
    }

    fn plane<T>(planes: &[Vec<Option<Plane<T>>>], s: usize, t: usize) -> Result<&Plane<T>> {
        match planes.get(s).and_then(|p| p.get(t)) {
            Some(Some(p)) => Ok(p),
            _ => bail!(Internal, "semantic {s} has no data for vertex type {t}"),
        }
    }

    fn plane_mut<T>(planes: &mut [Vec<Option<Plane<T>>>], s: usize, t: usize) -> Result<&mut Plane<T>> {
        match planes.get_mut(s).and_then(|p| p.get_mut(t)) {
            Some(Some(p)) => Ok(p),
            _ => bail!(Internal, "semantic {s} has no data for vertex type {t}"),
        }
    }

    fn projected(&self, s: usize, t: usize, v: u32, h: usize) -> Result<&[f32]> {
        let d = self.params.dim_out;
        match Self::plane(&self.proj, s, t)?.get(v as usize) {
            Some(row) => Ok(&row[h * d..(h + 1) * d]),
            None => bail!(Internal, "projection of vertex {v} (type {t}, semantic {s}) used before FP"),
        }
    }

    fn theta(&self, src: bool, s: usize, t: usize, v: u32, h: usize) -> Result<f64> {
        let planes = if src { &self.theta_src } else { &self.theta_dst };
        match Self::plane(planes, s, t)?.get(v as usize * self.params.heads + h) {
            Some(x) => Ok(x[0]),
            None => bail!(
                Internal,
                "half-coefficient of vertex {v} (semantic {s}, head {h}) used before COEF"
            ),
        }
    }

    fn set_theta(&mut self, src: bool, s: usize, t: usize, v: u32, h: usize, x: f64) -> Result<()> {
        let heads = self.params.heads;
        let planes = if src { &mut self.theta_src } else { &mut self.theta_dst };
        Self::plane_mut(planes, s, t)?.put(v as usize * heads + h, &[x])
    }

    fn domain_key(&self, s: usize, v: u32, h: Option<u16>) -> (u16, u32, u16) {
        match self.prune_mode {
            PruneMode::PerHead => (s as u16, v, h.unwrap_or(SHARED)),
            PruneMode::SharedSum => (s as u16, v, SHARED),
        }
    }

    fn sem(&self, s: usize) -> Result<&'a SemanticGraph> {
        match self.sem.get(s) {
            Some(g) => Ok(g),
            None => bail!(Internal, "unknown semantic graph {s}"),
        }
    }

    fn head(e: &OpEvent) -> Result<usize> {
        match e.head {
            Some(h) => Ok(h as usize),
            None => bail!(Internal, "{:?} event without a head", e.kind),
        }
    }

    fn source(e: &OpEvent) -> Result<u32> {
        match e.source {
            Some(u) => Ok(u),
            None => bail!(Internal, "{:?} event without a source", e.kind),
        }
    }

    fn importance_theta(&self, s: usize, v: u32, u: u32, h: usize) -> Result<f64> {
        let sg = self.sem(s)?;
        let (st, dt) = (sg.src_type(), sg.vertex_type());
        let slope = self.params.leaky_slope;
        match self.flow {
            Flow::Staged => {
                let a = self.params.attention(self.layer, s, h)?;
                edge_coefficient_direct_wide(
                    &a.a_src,
                    &a.a_dst,
                    self.projected(s, st, u, h)?,
                    self.projected(s, dt, v, h)?,
                    slope,
                )
            }
            Flow::Fused => Ok(leaky_relu_wide(
                self.theta(true, s, st, u, h)? + self.theta(false, s, dt, v, h)?,
                slope,
            )),
        }
    }

    fn self_theta(&self, s: usize, v: u32, h: usize) -> Result<f64> {
        let dt = self.sem(s)?.vertex_type();
        match self.flow {
            Flow::Staged => {
                let a = self.params.attention(self.layer, s, h)?;
                let hv = self.projected(s, dt, v, h)?;
                edge_coefficient_direct_wide(&a.a_src, &a.a_dst, hv, hv, self.params.leaky_slope)
            }
            Flow::Fused => Ok(leaky_relu_wide(
                self.theta(true, s, dt, v, h)? + self.theta(false, s, dt, v, h)?,
                self.params.leaky_slope,
            )),
        }
    }

    /// Retained neighbors of a domain, sorted by vertex id.
    fn retained_of(&self, s: usize, v: u32, h: usize) -> Option<Vec<u32>> {
        let d = self.domains.get(&self.domain_key(s, v, Some(h as u16)))?;
        if let Some(f) = &d.frozen {
            return Some(f.clone());
        }
        let mut v: Vec<u32> = d.rd.entries().map(|e| e.vertex).collect();
        v.sort_unstable();
        Some(v)
    }

    fn apply(&mut self, e: &OpEvent) -> Result<Option<Offer>> {
        self.advance_to(e.layer as usize)?;
        let s = e.semantic as usize;
        let t = e.vtype as usize;
        match e.kind {
            OpKind::Fp => {
                let w = self.params.projection(self.layer, s, t)?;
                let input = &self.input[t];
                let plane = Self::plane_mut(&mut self.proj, s, t)?;
                for v in e.target..e.target + e.width {
                    if v as usize >= input.rows {
                        bail!(Internal, "FP row {v} out of range");
                    }
                    let out = project(w, input.row(v as usize))?;
                    plane.put(v as usize, &out)?;
                }
            }
            OpKind::CoefSrc | OpKind::CoefDst => {
                let h = Self::head(e)?;
                let src = e.kind == OpKind::CoefSrc;
                let a = self.params.attention(self.layer, s, h)?;
                let half = if src { &a.a_src } else { &a.a_dst };
                let x = theta_half_wide(half, self.projected(s, t, e.target, h)?)?;
                self.set_theta(src, s, t, e.target, h, x)?;
            }
            OpKind::PruneCheck => {
                let u = Self::source(e)?;
                let Some(k) = self.k else {
                    bail!(Internal, "PRUNE_CHECK in an unpruned trace");
                };
                let st = self.sem(s)?.src_type();
                let key = match (self.prune_mode, e.head) {
                    (PruneMode::PerHead, Some(h)) => self.theta(true, s, st, u, h as usize)? as f32,
                    (PruneMode::SharedSum, None) => {
                        let mut acc = 0.0f64;
                        for h in 0..self.params.heads {
                            acc += self.theta(true, s, st, u, h)?;
                        }
                        acc as f32
                    }
                    _ => bail!(Internal, "PRUNE_CHECK head does not match the prune mode"),
                };
                let dk = self.domain_key(s, e.target, e.head);
                let dom = match self.domains.entry(dk) {
                    alloc::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
                    alloc::collections::btree_map::Entry::Vacant(slot) => slot.insert(Domain {
                        rd: RetentionDomain::new(k as usize)?,
                        heapify_owed: 0,
                        frozen: None,
                    }),
                };
                if dom.frozen.is_some() || dom.heapify_owed > 0 {
                    bail!(Internal, "PRUNE_CHECK on a domain that is closed or mid-heapify");
                }
                let outcome = dom.rd.offer(RetentionEntry::new(key, u))?;
                let tag = match outcome {
                    Offer::Pushed { .. } => Tag::Pushed,
                    Offer::Replaced { .. } => Tag::Replaced,
                    Offer::Discarded => Tag::Discarded,
                };
                if tag != Tag::Discarded {
                    dom.heapify_owed += 1;
                }
                if !self.live && tag != e.tag {
                    bail!(Internal, "PRUNE_CHECK outcome {tag:?} differs from the trace ({:?})", e.tag);
                }
                return Ok(Some(outcome));
            }
            OpKind::Heapify => {
                let dk = self.domain_key(s, e.target, e.head);
                match self.domains.get_mut(&dk) {
                    Some(d) if d.heapify_owed > 0 => d.heapify_owed -= 1,
                    _ => bail!(Internal, "HEAPIFY without a preceding insertion"),
                }
            }
            OpKind::Importance => {
                let h = Self::head(e)?;
                let u = Self::source(e)?;
                let dk = self.domain_key(s, e.target, e.head);
                if let Some(d) = self.domains.get(&dk) {
                    let kept = match &d.frozen {
                        Some(f) => f.binary_search(&u).is_ok(),
                        None => d.rd.entries().any(|x| x.vertex == u),
                    };
                    if !kept {
                        bail!(Internal, "IMPORTANCE for vertex {u} which is not retained");
                    }
                }
                let theta = self.importance_theta(s, e.target, u, h)?;
                let st = self.na.entry((s as u16, e.target, h as u16)).or_default();
                if st.candidates.insert(u, theta).is_some() {
                    bail!(Internal, "IMPORTANCE for edge ({u}, {}) computed twice", e.target);
                }
            }
            OpKind::AggAccum => {
                let h = Self::head(e)?;
                let u = Self::source(e)?;
                let dk = self.domain_key(s, e.target, e.head);
                let mut frozen_now = None;
                if let Some(d) = self.domains.get_mut(&dk) {
                    if d.heapify_owed > 0 {
                        bail!(Internal, "aggregation before the retention domain settled");
                    }
                    if d.frozen.is_none() {
                        let mut v: Vec<u32> = d.rd.entries().map(|x| x.vertex).collect();
                        v.sort_unstable();
                        d.frozen = Some(v.clone());
                        frozen_now = Some(v);
                    }
                    if d.frozen.as_ref().is_some_and(|f| f.binary_search(&u).is_err()) {
                        bail!(Internal, "aggregation over pruned neighbor {u}");
                    }
                }
                if let Some(vertices) = frozen_now {
                    self.retained.push(Retained {
                        layer: e.layer,
                        semantic: e.semantic,
                        target: e.target,
                        head: (dk.2 != SHARED).then_some(dk.2),
                        vertices,
                    });
                }
                let st_t = self.sem(s)?.src_type();
                let d = self.params.dim_out;
                let hu: Vec<f32> = self.projected(s, st_t, u, h)?.to_vec();
                let st = self.na.entry((s as u16, e.target, h as u16)).or_default();
                let Some(theta) = st.candidates.remove(&u) else {
                    bail!(Internal, "aggregation of edge ({u}, {}) before IMPORTANCE", e.target);
                };
                match e.tag {
                    Tag::Online => st
                        .online
                        .get_or_insert_with(|| OnlineSoftmax::new(d))
                        .push(theta, &hu)?,
                    _ => {
                        st.thetas.push(theta);
                        st.sources.push(u);
                    }
                }
                st.count += 1;
            }
            OpKind::AggFinalize => {
                let h = Self::head(e)?;
                let v = e.target;
                let sg = self.sem(s)?;
                let dt = sg.vertex_type();
                let expected = match self.domains.get(&self.domain_key(s, v, e.head)) {
                    Some(d) => d.rd.len(),
                    None => sg.aggregation_degree(v),
                };
                let st = self.na.remove(&(s as u16, v, h as u16)).unwrap_or_default();
                if st.count != expected {
                    bail!(
                        Internal,
                        "target {v} head {h} finalized after {} of {expected} aggregations",
                        st.count
                    );
                }
                let self_theta = self.self_theta(s, v, h)?;
                let hv = self.projected(s, dt, v, h)?;
                let out = match st.online {
                    Some(mut o) => {
                        o.push(self_theta, hv)?;
                        o.finish()?
                    }
                    None => {
                        let st_t = sg.src_type();
                        let refs = st
                            .sources
                            .iter()
                            .map(|&u| self.projected(s, st_t, u, h))
                            .collect::<Result<Vec<&[f32]>>>()?;
                        aggregate_softmax(&st.thetas, &refs, self_theta, hv)?
                    }
                };
                let d = self.params.dim_out;
                self.agg[s].row_mut(v as usize)[h * d..(h + 1) * d].copy_from_slice(&out);
                self.agg_done[s] += 1;
            }
            OpKind::Sf => {
                if self.next[t].is_some() {
                    bail!(Internal, "semantic fusion of type {t} ran twice");
                }
                let heads = self.params.heads;
                let mut parts = Vec::new();
                for (s, sg) in self.sem.iter().enumerate() {
                    if sg.vertex_type() == t {
                        if self.agg_done[s] != sg.num_vertices() * heads {
                            bail!(Internal, "semantic fusion of type {t} before aggregation finished");
                        }
                        parts.push(&self.agg[s]);
                    }
                }
                if parts.is_empty() {
                    bail!(Internal, "semantic fusion of type {t} which no semantic graph targets");
                }
                if e.width as usize != parts[0].rows {
                    bail!(Internal, "semantic fusion of type {t} over {} rows", e.width);
                }
                let fusion = &self.params.layers[self.layer].fusion;
                self.next[t] = Some(semantic_fusion(&parts, fusion, self.params.fusion_mode)?);
            }
        }
        Ok(None)
    }
}

// ---------------------------------------------------------------------------
// Scheduling

struct Builder<'a> {
    meta: TraceMeta,
    events: Vec<OpEvent>,
    fences: Vec<u32>,
    interp: Interp<'a>,
    sem: &'a [SemanticGraph],
    params: &'a ModelParams,
    opts: ScheduleOptions,
    flow: Flow,
}

impl<'a> Builder<'a> {
    fn new(
        g: &HetGraph,
        sem: &'a [SemanticGraph],
        params: &'a ModelParams,
        opts: &ScheduleOptions,
        flow: Flow,
    ) -> Result<Self> {
        params.validate(g, sem)?;
        if opts.k == Some(0) {
            bail!(Contract, "pruning threshold K must be at least 1");
        }
        if opts.fp_batch == 0 {
            bail!(Contract, "FP batch size must be at least 1");
        }
        if sem.len() > u16::MAX as usize || g.vertex_types().len() > u16::MAX as usize {
            bail!(Contract, "too many semantic graphs or vertex types");
        }
        Ok(Self {
            meta: TraceMeta::build(g, sem, params, flow),
            events: Vec::new(),
            fences: Vec::new(),
            interp: Interp::new(g, sem, params, flow, opts, true),
            sem,
            params,
            opts: *opts,
            flow,
        })
    }

    fn emit(&mut self, mut e: OpEvent) -> Result<(u32, Option<Offer>)> {
        let id = self.events.len() as u32;
        if e.kind == OpKind::PruneCheck || e.kind == OpKind::Heapify {
            e.width = self.opts.k.unwrap_or(0);
        }
        let outcome = self.interp.apply(&e)?;
        if let Some(o) = outcome {
            e.tag = match o {
                Offer::Pushed { .. } => Tag::Pushed,
                Offer::Replaced { .. } => Tag::Replaced,
                Offer::Discarded => Tag::Discarded,
            };
        }
        e.flops = event_flops(&e, &self.meta);
        for a in event_accesses(&e, &self.meta) {
            let slot = if a.write { &mut e.writes } else { &mut e.reads };
            slot[a.class.index()] += a.bytes;
        }
        e.deps.sort_unstable();
        e.deps.dedup();
        self.events.push(e);
        Ok((id, outcome))
    }

    fn fence(&mut self) {
        let id = self.events.len() as u32;
        if id > 0 && self.fences.last() != Some(&id) {
            self.fences.push(id);
        }
    }

    fn targeted_types(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.sem.iter().map(|s| s.vertex_type()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn semantic_fusion_stage(&mut self, l: usize) -> Result<()> {
        self.fence();
        for t in self.targeted_types() {
            let rows = self.interp.input[t].rows as u32;
            self.emit(OpEvent::new(OpKind::Sf, l, 0, t, 0).width(rows))?;
        }
        self.fence();
        Ok(())
    }

    fn is_pruned(&self, deg: usize) -> bool {
        self.opts.k.is_some_and(|k| deg > k as usize)
    }

    /// Heads covered by one PRUNE_CHECK in the current prune mode.
    fn prune_heads(&self) -> Vec<Option<u16>> {
        match self.opts.prune_mode {
            PruneMode::PerHead => (0..self.params.heads).map(|h| Some(h as u16)).collect(),
            PruneMode::SharedSum => vec![None],
        }
    }

    fn finish(self) -> Result<Trace> {
        let Builder {
            meta,
            events,
            fences,
            interp,
            opts,
            flow,
            params,
            ..
        } = self;
        let retained = interp.retained.clone();
        interp.finish()?;
        let summary = summarize(&events, opts.prune_mode, params.heads as u64, &retained);
        Ok(Trace {
            flow,
            k: opts.k,
            prune_mode: opts.prune_mode,
            meta,
            events,
            fences,
            retained,
            summary,
        })
    }
}

fn summarize(events: &[OpEvent], mode: PruneMode, heads: u64, retained: &[Retained]) -> TraceSummary {
    let mut s = TraceSummary {
        events: events.len() as u64,
        pruned_domains: retained.len() as u64,
        ..TraceSummary::default()
    };
    let per_check = match mode {
        PruneMode::PerHead => 1,
        PruneMode::SharedSum => heads,
    };
    for e in events {
        s.events_by_kind[e.kind.index()] += 1;
        s.flops += e.flops;
        for i in 0..5 {
            s.bytes_read[i] += e.reads[i] as u64;
            s.bytes_written[i] += e.writes[i] as u64;
        }
        match (e.kind, e.tag) {
            (OpKind::AggAccum, _) => s.aggregated_pairs += 1,
            (OpKind::PruneCheck, Tag::Discarded | Tag::Replaced) => s.discarded_pairs += per_check,
            _ => {}
        }
    }
    s
}

/// Staged FP → NA → SF schedule. Every stage is separated by a fence; when
/// pruning is enabled a target's pruning runs serially after all
/// coefficients exist, and importance and aggregation follow it.
pub fn staged_schedule(
    g: &HetGraph,
    semantics: &[SemanticGraph],
    params: &ModelParams,
    opts: &ScheduleOptions,
) -> Result<Trace> {
    let mut b = Builder::new(g, semantics, params, opts, Flow::Staged)?;
    let heads = params.heads;
    for l in 0..params.layers.len() {
        for (s, sg) in semantics.iter().enumerate() {
            let mut types = vec![sg.src_type()];
            if sg.is_bipartite() {
                types.push(sg.vertex_type());
            }
            for t in types {
                let rows = b.interp.input[t].rows as u32;
                let mut start = 0;
                while start < rows {
                    let n = opts.fp_batch.min(rows - start);
                    b.emit(OpEvent::new(OpKind::Fp, l, s, t, start).width(n))?;
                    start += n;
                }
            }
        }
        b.fence();
        for (s, sg) in semantics.iter().enumerate() {
            let (st, dt) = (sg.src_type(), sg.vertex_type());
            for u in 0..sg.num_src() as u32 {
                for h in 0..heads {
                    b.emit(OpEvent::new(OpKind::CoefSrc, l, s, st, u).head(h))?;
                }
            }
            for v in 0..sg.num_vertices() as u32 {
                let words = sg.neighbors(v).len() as u32 + 2;
                for h in 0..heads {
                    let w = if h == 0 { words } else { 0 };
                    b.emit(OpEvent::new(OpKind::CoefDst, l, s, dt, v).head(h).width(w))?;
                    if sg.is_bipartite() {
                        b.emit(OpEvent::new(OpKind::CoefSrc, l, s, dt, v).head(h))?;
                    }
                }
            }
        }
        b.fence();
        for (s, sg) in semantics.iter().enumerate() {
            let dt = sg.vertex_type();
            for v in 0..sg.num_vertices() as u32 {
                let nbrs: Vec<u32> = sg.aggregation_neighbors(v).collect();
                let pruned = b.is_pruned(nbrs.len());
                let mut after_prune: BTreeMap<u16, u32> = BTreeMap::new();
                if pruned {
                    for ph in b.prune_heads() {
                        let mut last = None;
                        for &u in &nbrs {
                            let mut e = OpEvent::new(OpKind::PruneCheck, l, s, dt, v).source(u).deps([last]);
                            e.head = ph;
                            let (pc, out) = b.emit(e)?;
                            last = Some(pc);
                            if !matches!(out, Some(Offer::Discarded)) {
                                let mut e = OpEvent::new(OpKind::Heapify, l, s, dt, v).source(u).deps([last]);
                                e.head = ph;
                                last = Some(b.emit(e)?.0);
                            }
                        }
                        if let Some(x) = last {
                            after_prune.insert(ph.unwrap_or(SHARED), x);
                        }
                    }
                }
                for h in 0..heads {
                    let (members, gate) = if pruned {
                        let key = match opts.prune_mode {
                            PruneMode::PerHead => h as u16,
                            PruneMode::SharedSum => SHARED,
                        };
                        let r = b.interp.retained_of(s, v, h).unwrap_or_default();
                        (r, after_prune.get(&key).copied())
                    } else {
                        (nbrs.clone(), None)
                    };
                    let mut imps = Vec::with_capacity(members.len());
                    for &u in &members {
                        let e = OpEvent::new(OpKind::Importance, l, s, dt, v).head(h).source(u).deps([gate]);
                        imps.push(b.emit(e)?.0);
                    }
                    let mut last = None;
                    for (i, &u) in members.iter().enumerate() {
                        let mut e = OpEvent::new(OpKind::AggAccum, l, s, dt, v)
                            .head(h)
                            .source(u)
                            .width(i as u32)
                            .deps([last, Some(imps[i])]);
                        if i == 0 {
                            e = e.deps(imps.iter().map(|&x| Some(x)));
                        }
                        last = Some(b.emit(e)?.0);
                    }
                    let e = OpEvent::new(OpKind::AggFinalize, l, s, dt, v)
                        .head(h)
                        .width(members.len() as u32)
                        .deps([last]);
                    b.emit(e)?;
                }
            }
        }
        b.semantic_fusion_stage(l)?;
    }
    b.finish()
}

/// Operation-fused schedule: targets in ascending order, neighbors in CSC
/// order, with projections and half-coefficients produced on first use.
/// Targets with `deg ≤ K` aggregate online per edge; larger targets stream
/// every coefficient through their retention domain and aggregate the
/// retained set once the stream ends.
pub fn fused_schedule(
    g: &HetGraph,
    semantics: &[SemanticGraph],
    params: &ModelParams,
    opts: &ScheduleOptions,
) -> Result<Trace> {
    let mut b = Builder::new(g, semantics, params, opts, Flow::Fused)?;
    let heads = params.heads;
    for l in 0..params.layers.len() {
        let mut bm = DispatchBitmap::new(&b.meta.type_counts, semantics.len(), heads);
        for (s, sg) in semantics.iter().enumerate() {
            let (st, dt) = (sg.src_type(), sg.vertex_type());
            for v in 0..sg.num_vertices() as u32 {
                let nbrs: Vec<u32> = sg.aggregation_neighbors(v).collect();
                let fp_v = ensure_fp(&mut b, &mut bm, l, s, dt, v)?;
                let mut coef_dst = Vec::with_capacity(heads);
                let words = sg.neighbors(v).len() as u32 + 2;
                for h in 0..heads {
                    let w = if h == 0 { words } else { 0 };
                    let e = OpEvent::new(OpKind::CoefDst, l, s, dt, v).head(h).width(w).deps([Some(fp_v)]);
                    let id = b.emit(e)?.0;
                    bm.set_theta_dst(s, dt, v, h, id)?;
                    coef_dst.push(id);
                }
                let self_src = (0..heads)
                    .map(|h| ensure_coef_src(&mut b, &mut bm, l, s, dt, v, h, fp_v))
                    .collect::<Result<Vec<u32>>>()?;

                let pruned = b.is_pruned(nbrs.len());
                let mut last_agg: Vec<Option<u32>> = vec![None; heads];
                let mut last_prune: BTreeMap<u16, u32> = BTreeMap::new();
                let mut imp_ids: Vec<BTreeMap<u32, u32>> = vec![BTreeMap::new(); heads];
                for &u in &nbrs {
                    let fp_u = ensure_fp(&mut b, &mut bm, l, s, st, u)?;
                    let src = (0..heads)
                        .map(|h| ensure_coef_src(&mut b, &mut bm, l, s, st, u, h, fp_u))
                        .collect::<Result<Vec<u32>>>()?;
                    if !pruned {
                        for h in 0..heads {
                            let e = OpEvent::new(OpKind::Importance, l, s, dt, v)
                                .head(h)
                                .source(u)
                                .deps([Some(src[h]), Some(coef_dst[h])]);
                            let imp = b.emit(e)?.0;
                            let pos = b.interp.na.get(&(s as u16, v, h as u16)).map_or(0, |x| x.count);
                            let e = OpEvent::new(OpKind::AggAccum, l, s, dt, v)
                                .head(h)
                                .source(u)
                                .tag(Tag::Online)
                                .width(pos as u32)
                                .deps([Some(imp), last_agg[h]]);
                            last_agg[h] = Some(b.emit(e)?.0);
                        }
                        continue;
                    }
                    for ph in b.prune_heads() {
                        let key = ph.unwrap_or(SHARED);
                        let covered: Vec<usize> = match ph {
                            Some(h) => vec![h as usize],
                            None => (0..heads).collect(),
                        };
                        let mut e = OpEvent::new(OpKind::PruneCheck, l, s, dt, v)
                            .source(u)
                            .deps(covered.iter().flat_map(|&h| [Some(src[h]), Some(coef_dst[h])]))
                            .deps([last_prune.get(&key).copied()]);
                        e.head = ph;
                        let (pc, out) = b.emit(e)?;
                        last_prune.insert(key, pc);
                        if matches!(out, Some(Offer::Discarded)) {
                            continue;
                        }
                        let mut e = OpEvent::new(OpKind::Heapify, l, s, dt, v).source(u).deps([Some(pc)]);
                        e.head = ph;
                        let hp = b.emit(e)?.0;
                        last_prune.insert(key, hp);
                        for &h in &covered {
                            let e = OpEvent::new(OpKind::Importance, l, s, dt, v)
                                .head(h)
                                .source(u)
                                .deps([Some(pc)]);
                            imp_ids[h].insert(u, b.emit(e)?.0);
                        }
                    }
                }
                if pruned {
                    for h in 0..heads {
                        let key = match opts.prune_mode {
                            PruneMode::PerHead => h as u16,
                            PruneMode::SharedSum => SHARED,
                        };
                        let members = b.interp.retained_of(s, v, h).unwrap_or_default();
                        for (i, &u) in members.iter().enumerate() {
                            let Some(&imp) = imp_ids[h].get(&u) else {
                                bail!(Internal, "retained vertex {u} has no IMPORTANCE event");
                            };
                            let mut e = OpEvent::new(OpKind::AggAccum, l, s, dt, v)
                                .head(h)
                                .source(u)
                                .tag(Tag::Deferred)
                                .width(i as u32)
                                .deps([Some(imp), last_agg[h]]);
                            if i == 0 {
                                e = e
                                    .deps(members.iter().map(|x| imp_ids[h].get(x).copied()))
                                    .deps([last_prune.get(&key).copied()]);
                            }
                            last_agg[h] = Some(b.emit(e)?.0);
                        }
                    }
                }
                for h in 0..heads {
                    let count = b.interp.na.get(&(s as u16, v, h as u16)).map_or(0, |x| x.count);
                    let e = OpEvent::new(OpKind::AggFinalize, l, s, dt, v)
                        .head(h)
                        .width(count as u32)
                        .deps([last_agg[h], Some(coef_dst[h]), Some(self_src[h])]);
                    b.emit(e)?;
                }
            }
        }
        b.semantic_fusion_stage(l)?;
    }
    b.finish()
}

fn ensure_fp(b: &mut Builder, bm: &mut DispatchBitmap, l: usize, s: usize, t: usize, v: u32) -> Result<u32> {
    if let Some(id) = bm.fp(s, t, v) {
        return Ok(id);
    }
    let id = b.emit(OpEvent::new(OpKind::Fp, l, s, t, v).width(1))?.0;
    bm.set_fp(s, t, v, id)?;
    Ok(id)
}

#[allow(clippy::too_many_arguments)]
fn ensure_coef_src(
    b: &mut Builder,
    bm: &mut DispatchBitmap,
    l: usize,
    s: usize,
    t: usize,
    v: u32,
    h: usize,
    fp: u32,
) -> Result<u32> {
    if let Some(id) = bm.theta_src(s, t, v, h) {
        return Ok(id);
    }
    let e = OpEvent::new(OpKind::CoefSrc, l, s, t, v).head(h).deps([Some(fp)]);
    let id = b.emit(e)?.0;
    bm.set_theta_src(s, t, v, h, id)?;
    Ok(id)
}

/// Builds the trace for `flow`.
pub fn schedule(
    flow: Flow,
    g: &HetGraph,
    semantics: &[SemanticGraph],
    params: &ModelParams,
    opts: &ScheduleOptions,
) -> Result<Trace> {
    match flow {
        Flow::Staged => staged_schedule(g, semantics, params, opts),
        Flow::Fused => fused_schedule(g, semantics, params, opts),
    }
}

/// Replays `trace` from scratch and returns the final embeddings. Every event
/// must find its inputs already produced by earlier events, reference only
/// earlier events as dependencies, and reproduce its recorded pruning
/// outcome.
pub fn functional_execute(
    trace: &Trace,
    g: &HetGraph,
    semantics: &[SemanticGraph],
    params: &ModelParams,
) -> Result<EmbeddingSet> {
    params.validate(g, semantics)?;
    if trace.meta.heads as usize != params.heads
        || trace.meta.layers as usize != params.layers.len()
        || trace.meta.semantics.len() != semantics.len()
    {
        bail!(Contract, "trace was built for a different model or semantic set");
    }
    let opts = ScheduleOptions {
        k: trace.k,
        prune_mode: trace.prune_mode,
        fp_batch: 1,
    };
    let mut it = Interp::new(g, semantics, params, trace.flow, &opts, false);
    for (id, e) in trace.events.iter().enumerate() {
        if let Some(&d) = e.deps.iter().find(|&&d| d as usize >= id) {
            bail!(Internal, "event {id} depends on later event {d}");
        }
        if matches!(e.kind, OpKind::PruneCheck | OpKind::Heapify) && e.width != trace.k.unwrap_or(0) {
            bail!(Internal, "event {id} records capacity {} but the trace uses {:?}", e.width, trace.k);
        }
        it.apply(e)?;
    }
    it.finish()
}

/// Worst-case sift-down levels charged to a HEAPIFY of capacity `k`.
pub fn heapify_levels(k: u32) -> u32 {
    swap_bound(k as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::{build_relation_graphs, EdgeType, VertexType};
    use crate::model::{reference_forward, softmax_importance};
    use crate::testutil::*;
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn count(t: &Trace, k: OpKind) -> usize {
        t.events.iter().filter(|e| e.kind == k).count()
    }

    fn is_na(k: OpKind) -> bool {
        matches!(
            k,
            OpKind::PruneCheck | OpKind::Heapify | OpKind::Importance | OpKind::AggAccum | OpKind::AggFinalize
        )
    }

    fn opts(k: Option<u32>) -> ScheduleOptions {
        ScheduleOptions::with_k(k)
    }

    #[test]
    fn staged_toy_projects_everything_first() {
        let g = toy_graph();
        let sem = build_relation_graphs(&g);
        let p = toy_params(&g, &sem);
        let t = staged_schedule(&g, &sem, &p, &opts(None)).unwrap();
        let fp: Vec<usize> = (0..t.events.len()).filter(|&i| t.events[i].kind == OpKind::Fp).collect();
        let rows: u32 = fp.iter().map(|&i| t.events[i].width).sum();
        assert_eq!(rows, 10);
        let first_na = t.events.iter().position(|e| is_na(e.kind)).unwrap();
        assert!(fp.iter().all(|&i| i < first_na));
        assert_eq!(count(&t, OpKind::PruneCheck), 0);
    }

    #[test]
    fn staged_empty_graph_is_only_fusion() {
        let g = HetGraph::new(
            vec![VertexType {
                name: "v".to_string(),
                count: 0,
                dim: 3,
            }],
            vec![vec![]],
            vec![EdgeType {
                name: "v-v".to_string(),
                src: 0,
                dst: 0,
            }],
            vec![vec![]],
        )
        .unwrap();
        let sem = build_relation_graphs(&g);
        let p = crate::model::init_params(
            0,
            &crate::model::ModelShape::new(&g, &sem, crate::model::ShapeConfig::default()).unwrap(),
        );
        let t = staged_schedule(&g, &sem, &p, &opts(None)).unwrap();
        assert_eq!(t.events.len(), 1);
        assert_eq!((t.events[0].kind, t.events[0].width), (OpKind::Sf, 0));
        let out = functional_execute(&t, &g, &sem, &p).unwrap();
        assert_eq!(out.per_type[0].rows, 0);
    }

    fn single_edge() -> (HetGraph, Vec<SemanticGraph>, ModelParams) {
        let vt = |n: &str| VertexType {
            name: n.to_string(),
            count: 1,
            dim: 2,
        };
        let g = HetGraph::new(
            vec![vt("a"), vt("b")],
            vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
            vec![EdgeType {
                name: "a-b".to_string(),
                src: 0,
                dst: 1,
            }],
            vec![vec![(0, 0)]],
        )
        .unwrap();
        let sem = build_relation_graphs(&g);
        let cfg = crate::model::ShapeConfig {
            dim_out: 2,
            heads: 1,
            semantic_dim: 2,
            ..Default::default()
        };
        let p = crate::model::init_params(9, &crate::model::ModelShape::new(&g, &sem, cfg).unwrap());
        (g, sem, p)
    }

    #[test]
    fn staged_single_edge_event_counts() {
        let (g, sem, p) = single_edge();
        let t = staged_schedule(&g, &sem, &p, &opts(None)).unwrap();
        let got: Vec<usize> = OpKind::ALL.iter().map(|&k| count(&t, k)).collect();
        // FP a, FP b; COEF_SRC a and self b; COEF_DST b; no pruning.
        assert_eq!(got, vec![2, 2, 1, 0, 0, 1, 1, 1, 1]);
        let out = functional_execute(&t, &g, &sem, &p).unwrap();
        assert_eq!(out, reference_forward(&g, &sem, &p).unwrap());
    }

    #[test]
    fn fused_toy_prunes_only_z() {
        let g = toy_graph();
        let sem = build_relation_graphs(&g);
        let p = toy_params(&g, &sem);
        let t = fused_schedule(&g, &sem, &p, &opts(Some(3))).unwrap();
        let at = |v: u32, k: OpKind| t.events.iter().filter(|e| e.target == v && e.kind == k).count();
        assert_eq!(at(A, OpKind::PruneCheck), 0);
        assert_eq!(at(A, OpKind::AggAccum), 3);
        assert_eq!(at(Z, OpKind::AggAccum), 3);
        let h_check = t
            .events
            .iter()
            .position(|e| e.kind == OpKind::PruneCheck && e.source == Some(H))
            .unwrap();
        assert_eq!(t.events[h_check].tag, Tag::Discarded);
        assert!(!t.events.iter().any(|e| e.source == Some(H) && e.kind != OpKind::PruneCheck));
        assert_eq!(t.retained.len(), 1);
        assert_eq!(t.retained[0].vertices, vec![E, F, I]);
        let i_check = t.events.iter().find(|e| e.kind == OpKind::PruneCheck && e.source == Some(I));
        assert_eq!(i_check.unwrap().tag, Tag::Replaced);
    }

    #[test]
    fn fused_projects_shared_source_once() {
        let g = toy_graph();
        let edges = vec![(1, 0), (1, 2), (3, 2)];
        let g = HetGraph::new(
            g.vertex_types().to_vec(),
            vec![g.features(0).to_vec()],
            g.edge_types().to_vec(),
            vec![edges],
        )
        .unwrap();
        let sem = build_relation_graphs(&g);
        let p = toy_params(&g, &sem);
        let t = fused_schedule(&g, &sem, &p, &opts(Some(1))).unwrap();
        let fp1 = t.events.iter().filter(|e| e.kind == OpKind::Fp && e.target == 1).count();
        assert_eq!(fp1, 1);
    }

    #[test]
    fn staged_unbounded_matches_reference_exactly() {
        for seed in 0..4 {
            let s = random_setup(seed, vec![30, 45], 6, 2, 4, 2);
            let t = staged_schedule(&s.g, &s.sem, &s.params, &opts(None)).unwrap();
            let got = functional_execute(&t, &s.g, &s.sem, &s.params).unwrap();
            assert_eq!(got, reference_forward(&s.g, &s.sem, &s.params).unwrap());
        }
    }

    #[test]
    fn fused_unpruned_matches_reference() {
        let s = random_setup(7, vec![40, 25], 5, 3, 4, 1);
        let reference = reference_forward(&s.g, &s.sem, &s.params).unwrap();
        let kmax = s.sem.iter().map(|x| x.max_degree()).max().unwrap() as u32;
        for k in [None, Some(kmax)] {
            let t = fused_schedule(&s.g, &s.sem, &s.params, &opts(k)).unwrap();
            assert_eq!(t.summary.count(OpKind::PruneCheck), 0);
            let got = functional_execute(&t, &s.g, &s.sem, &s.params).unwrap();
            for (a, b) in got.per_type.iter().zip(&reference.per_type) {
                assert!(rel_close(a, b, 1e-5));
            }
        }
    }

    #[test]
    fn fused_k1_is_two_point_combination() {
        let s = random_setup(11, vec![60], 4, 1, 3, 1);
        let t = fused_schedule(&s.g, &s.sem, &s.params, &opts(Some(1))).unwrap();
        let sg = &s.sem[0];
        let w = s.params.projection(0, 0, 0).unwrap();
        let a = s.params.attention(0, 0, 0).unwrap();
        let proj = |v: u32| crate::model::project(w, s.g.feature(0, v)).unwrap();
        let dot = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(p, q)| *p as f64 * *q as f64).sum::<f64>() as f32;
        let lrelu = |x: f32| if x >= 0.0 { x } else { 0.2 * x };

        let mut it = Interp::new(&s.g, &s.sem, &s.params, Flow::Fused, &opts(Some(1)), false);
        for e in t.events.iter().filter(|e| e.kind != OpKind::Sf) {
            it.apply(e).unwrap();
        }
        for v in 0..sg.num_vertices() as u32 {
            let nbrs: Vec<u32> = sg.aggregation_neighbors(v).collect();
            let hv = proj(v);
            let theta_dst = dot(&a.a_dst, &hv);
            let self_theta = lrelu(dot(&a.a_src, &hv) + theta_dst);
            let want: Vec<f32> = match nbrs.iter().copied().reduce(|best, u| {
                if dot(&a.a_src, &proj(u)) > dot(&a.a_src, &proj(best)) {
                    u
                } else {
                    best
                }
            }) {
                None => hv.clone(),
                Some(best) => {
                    let hb = proj(best);
                    let alpha = softmax_importance(&[lrelu(dot(&a.a_src, &hb) + theta_dst), self_theta]).unwrap();
                    (0..3).map(|c| alpha[0] * hb[c] + alpha[1] * hv[c]).collect()
                }
            };
            let got = it.agg[0].row(v as usize);
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() <= 1e-5 * (1.0 + want[c].abs()), "v{v}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn replay_rejects_tampering() {
        let g = toy_graph();
        let sem = build_relation_graphs(&g);
        let p = toy_params(&g, &sem);
        let t = fused_schedule(&g, &sem, &p, &opts(Some(3))).unwrap();
        functional_execute(&t, &g, &sem, &p).unwrap();

        let mut bad = t.clone();
        let i = bad.events.iter().position(|e| e.tag == Tag::Discarded).unwrap();
        bad.events[i].tag = Tag::Pushed;
        assert!(matches!(functional_execute(&bad, &g, &sem, &p), Err(crate::Error::Internal(_))));

        let mut bad = t.clone();
        let last = bad.events.len() as u32 - 1;
        bad.events[0].deps.push(last);
        assert!(matches!(functional_execute(&bad, &g, &sem, &p), Err(crate::Error::Internal(_))));

        let mut bad = t.clone();
        let i = bad.events.iter().position(|e| e.kind == OpKind::AggAccum).unwrap();
        let j = bad.events.iter().position(|e| e.kind == OpKind::Importance).unwrap();
        bad.events.swap(i, j);
        assert!(matches!(functional_execute(&bad, &g, &sem, &p), Err(crate::Error::Internal(_))));
    }

    #[test]
    fn shared_prune_keeps_top_sum() {
        let s = random_setup(5, vec![80], 4, 3, 2, 1);
        let o = ScheduleOptions {
            k: Some(2),
            prune_mode: PruneMode::SharedSum,
            fp_batch: 64,
        };
        let t = fused_schedule(&s.g, &s.sem, &s.params, &o).unwrap();
        let st = staged_schedule(&s.g, &s.sem, &s.params, &o).unwrap();
        assert_eq!(t.retained, st.retained);
        assert!(t.retained.iter().all(|r| r.head.is_none() && r.vertices.len() == 2));
        functional_execute(&t, &s.g, &s.sem, &s.params).unwrap();
        functional_execute(&st, &s.g, &s.sem, &s.params).unwrap();
        let sg = &s.sem[0];
        let deg_excess: u64 = (0..sg.num_vertices() as u32)
            .map(|v| sg.aggregation_degree(v).saturating_sub(2) as u64)
            .sum();
        assert_eq!(t.summary.discarded_pairs, deg_excess * 3);
    }

    #[test]
    fn pruned_softmax_is_normalized_over_retained() {
        let s = random_setup(3, vec![120], 4, 2, 3, 1);
        let t = fused_schedule(&s.g, &s.sem, &s.params, &opts(Some(4))).unwrap();
        assert!(!t.retained.is_empty());
        let w = s.params.projection(0, 0, 0).unwrap();
        for r in &t.retained {
            let h = r.head.unwrap() as usize;
            let a = s.params.attention(0, 0, h).unwrap();
            let hp = |v: u32| crate::model::project(w, s.g.feature(0, v)).unwrap()[h * 3..h * 3 + 3].to_vec();
            let td = crate::model::theta_half(&a.a_dst, &hp(r.target)).unwrap();
            let mut thetas: Vec<f32> = r
                .vertices
                .iter()
                .map(|&u| crate::model::edge_coefficient_decomposed(crate::model::theta_half(&a.a_src, &hp(u)).unwrap(), td, 0.2))
                .collect();
            thetas.push(crate::model::edge_coefficient_decomposed(
                crate::model::theta_half(&a.a_src, &hp(r.target)).unwrap(),
                td,
                0.2,
            ));
            let sum: f64 = softmax_importance(&thetas).unwrap().iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    fn deg_sums(sem: &[SemanticGraph], k: u64) -> (u64, u64) {
        let mut kept = 0;
        let mut dropped = 0;
        for sg in sem {
            for v in 0..sg.num_vertices() as u32 {
                let d = sg.aggregation_degree(v) as u64;
                kept += d.min(k);
                dropped += d.saturating_sub(k);
            }
        }
        (kept, dropped)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fused_work_identity_and_dedup(seed in 0u64..1000, k in 1u32..12, heads in 1usize..4) {
            let s = random_setup(seed, vec![50, 70], 3, heads, 2, 1);
            let t = fused_schedule(&s.g, &s.sem, &s.params, &opts(Some(k))).unwrap();
            let (kept, dropped) = deg_sums(&s.sem, k as u64);
            let h = heads as u64;
            prop_assert_eq!(t.summary.count(OpKind::AggAccum), kept * h);
            prop_assert_eq!(t.summary.discarded_pairs, dropped * h);
            prop_assert!(t.retained.iter().all(|r| r.vertices.len() <= k as usize));

            for (si, sg) in s.sem.iter().enumerate() {
                let (st, dt) = (sg.src_type() as u16, sg.vertex_type() as u16);
                let mut touched = alloc::collections::BTreeSet::new();
                for v in 0..sg.num_vertices() as u32 {
                    touched.insert((dt, v));
                    for u in sg.aggregation_neighbors(v) {
                        touched.insert((st, u));
                    }
                }
                let of = |k: OpKind| {
                    t.events.iter().filter(|e| e.kind == k && e.semantic as usize == si).count()
                };
                prop_assert_eq!(of(OpKind::Fp), touched.len());
                prop_assert_eq!(of(OpKind::CoefSrc), touched.len() * heads);
            }
            let got = functional_execute(&t, &s.g, &s.sem, &s.params).unwrap();
            prop_assert!(got.per_type.iter().all(|m| m.is_finite()));
        }

        #[test]
        fn flows_agree_without_pruning(seed in 0u64..1000) {
            let s = random_setup(seed, vec![30, 50], 4, 2, 3, 1);
            let staged = staged_schedule(&s.g, &s.sem, &s.params, &opts(None)).unwrap();
            let fused = fused_schedule(&s.g, &s.sem, &s.params, &opts(None)).unwrap();
            let a = functional_execute(&staged, &s.g, &s.sem, &s.params).unwrap();
            let b = functional_execute(&fused, &s.g, &s.sem, &s.params).unwrap();
            for (x, y) in a.per_type.iter().zip(&b.per_type) {
                prop_assert!(rel_close(x, y, 1e-5));
            }
        }

        #[test]
        fn staged_and_fused_retain_the_same_sets(seed in 0u64..1000, k in 1u32..6) {
            let s = random_setup(seed, vec![40, 60], 3, 2, 2, 1);
            let a = staged_schedule(&s.g, &s.sem, &s.params, &opts(Some(k))).unwrap();
            let b = fused_schedule(&s.g, &s.sem, &s.params, &opts(Some(k))).unwrap();
            let key = |t: &Trace| {
                let mut r = t.retained.clone();
                r.sort_by_key(|x| (x.layer, x.semantic, x.target, x.head));
                r
            };
            prop_assert_eq!(key(&a), key(&b));
            prop_assert_eq!(a.summary.count(OpKind::AggAccum), b.summary.count(OpKind::AggAccum));
        }
    }
}
