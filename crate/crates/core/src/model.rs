//! HGNN arithmetic: feature projection, attention coefficients in direct and
//! decomposed form, softmax importance, weighted aggregation, semantic fusion
//! and the unpruned staged forward pass used as the correctness reference.
//!
//! Storage is `f32`. Dot products and reductions accumulate in `f64` with a
//! fixed left-to-right order so that every evaluation path is reproducible.

use alloc::vec;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::hetgraph::{HetGraph, SemanticGraph};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(Shape, "{} entries for a {rows} x {cols} matrix", data.len());
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Learned semantic attention: `w = mean_v qᵀ tanh(W z_v + b)`, `β = softmax(w)`.
    #[default]
    Attention,
    /// Unweighted mean over semantic graphs.
    Mean,
}

/// User-facing model shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeConfig {
    pub layers: usize,
    /// Per-head hidden width.
    pub dim_out: usize,
    pub heads: usize,
    pub semantic_dim: usize,
    pub leaky_slope: f32,
    pub fusion: FusionMode,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            dim_out: 64,
            heads: 8,
            semantic_dim: 128,
            leaky_slope: 0.2,
            fusion: FusionMode::Attention,
        }
    }
}

/// Shape config resolved against a graph and its semantic graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub input_dims: Vec<usize>,
    /// `(src type, dst type)` per semantic graph.
    pub semantics: Vec<(usize, usize)>,
    pub config: ShapeConfig,
}

impl ModelShape {
    pub fn new(g: &HetGraph, semantics: &[SemanticGraph], config: ShapeConfig) -> Result<Self> {
        if config.layers == 0 || config.dim_out == 0 || config.heads == 0 || config.semantic_dim == 0 {
            bail!(Shape, "layers, dim_out, heads and semantic_dim must all be positive");
        }
        if config.heads > u16::MAX as usize || config.layers > u8::MAX as usize {
            bail!(Shape, "at most {} heads and {} layers", u16::MAX, u8::MAX);
        }
        if !(config.leaky_slope > 0.0 && config.leaky_slope < 1.0) {
            bail!(Shape, "leaky_slope must lie in (0, 1), got {}", config.leaky_slope);
        }
        let ntypes = g.vertex_types().len();
        for s in semantics {
            if s.src_type() >= ntypes || s.vertex_type() >= ntypes {
                bail!(Shape, "semantic graph `{}` references an unknown vertex type", s.name());
            }
        }
        Ok(Self {
            input_dims: g.vertex_types().iter().map(|t| t.dim).collect(),
            semantics: semantics.iter().map(|s| (s.src_type(), s.vertex_type())).collect(),
            config,
        })
    }

    pub fn hidden(&self) -> usize {
        self.config.dim_out * self.config.heads
    }

    /// Input width of every vertex type at each layer. Types that no semantic
    /// graph targets pass their input through unchanged.
    pub fn layer_input_dims(&self) -> Vec<Vec<usize>> {
        let mut dims = self.input_dims.clone();
        let mut out = Vec::with_capacity(self.config.layers);
        for _ in 0..self.config.layers {
            out.push(dims.clone());
            for &(_, dst) in &self.semantics {
                dims[dst] = self.hidden();
            }
        }
        out
    }
}

/// Per-head attention half-vectors; `aᵀ = (a_src ∥ a_dst)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub a_src: Vec<f32>,
    pub a_dst: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticFusion {
    /// `semantic_dim x hidden`
    pub w: Matrix,
    pub b: Vec<f32>,
    pub q: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub input_dims: Vec<usize>,
    /// `[semantic][vertex type]`; present for the endpoint types of each
    /// semantic graph. Shape `(dim_out * heads) x input_dim`, head `h` owning
    /// rows `h*dim_out..(h+1)*dim_out`.
    pub projections: Vec<Vec<Option<Matrix>>>,
    /// `[semantic][head]`
    pub attention: Vec<Vec<AttentionHead>>,
    pub fusion: SemanticFusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub heads: usize,
    pub dim_out: usize,
    pub semantic_dim: usize,
    pub leaky_slope: f32,
    pub fusion_mode: FusionMode,
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn hidden(&self) -> usize {
        self.dim_out * self.heads
    }

    pub fn projection(&self, layer: usize, semantic: usize, vtype: usize) -> Result<&Matrix> {
        match self
            .layers
            .get(layer)
            .and_then(|l| l.projections.get(semantic))
            .and_then(|p| p.get(vtype))
        {
            Some(Some(w)) => Ok(w),
            _ => bail!(
                Shape,
                "no projection for layer {layer}, semantic {semantic}, vertex type {vtype}"
            ),
        }
    }

    pub fn attention(&self, layer: usize, semantic: usize, head: usize) -> Result<&AttentionHead> {
        match self
            .layers
            .get(layer)
            .and_then(|l| l.attention.get(semantic))
            .and_then(|a| a.get(head))
        {
            Some(a) => Ok(a),
            None => bail!(Shape, "no attention head {head} for layer {layer}, semantic {semantic}"),
        }
    }

    /// Checks the parameters against a graph and its semantic graphs.
    pub fn validate(&self, g: &HetGraph, semantics: &[SemanticGraph]) -> Result<()> {
        if self.heads == 0 || self.dim_out == 0 || self.layers.is_empty() {
            bail!(Shape, "heads, dim_out and layer count must be positive");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            bail!(Shape, "leaky_slope must lie in (0, 1), got {}", self.leaky_slope);
        }
        let shape = ModelShape::new(
            g,
            semantics,
            ShapeConfig {
                layers: self.layers.len(),
                dim_out: self.dim_out,
                heads: self.heads,
                semantic_dim: self.semantic_dim,
                leaky_slope: self.leaky_slope,
                fusion: self.fusion_mode,
            },
        )?;
        let hidden = self.hidden();
        for (l, (layer, dims)) in self.layers.iter().zip(shape.layer_input_dims()).enumerate() {
            if layer.input_dims != dims {
                bail!(Shape, "layer {l} input dims {:?}, expected {:?}", layer.input_dims, dims);
            }
            if layer.projections.len() != semantics.len() || layer.attention.len() != semantics.len() {
                bail!(Shape, "layer {l} has parameters for a different number of semantic graphs");
            }
            for (s, sg) in semantics.iter().enumerate() {
                for t in [sg.src_type(), sg.vertex_type()] {
                    let w = self.projection(l, s, t)?;
                    if w.rows != hidden || w.cols != dims[t] {
                        bail!(
                            Shape,
                            "projection ({l}, {s}, {t}) is {} x {}, expected {hidden} x {}",
                            w.rows,
                            w.cols,
                            dims[t]
                        );
                    }
                    if !w.is_finite() {
                        bail!(Shape, "projection ({l}, {s}, {t}) has non-finite entries");
                    }
                }
                if layer.attention[s].len() != self.heads {
                    bail!(Shape, "layer {l} semantic {s} has {} heads", layer.attention[s].len());
                }
                for a in &layer.attention[s] {
                    if a.a_src.len() != self.dim_out || a.a_dst.len() != self.dim_out {
                        bail!(Shape, "attention vectors must have length {}", self.dim_out);
                    }
                    if a.a_src.iter().chain(&a.a_dst).any(|x| !x.is_finite()) {
                        bail!(Shape, "attention vectors have non-finite entries");
                    }
                }
            }
            let f = &layer.fusion;
            if f.w.rows != self.semantic_dim
                || f.w.cols != hidden
                || f.b.len() != self.semantic_dim
                || f.q.len() != self.semantic_dim
            {
                bail!(Shape, "semantic fusion parameters of layer {l} have the wrong shape");
            }
        }
        Ok(())
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f32> {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64) as f32;
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Xavier-uniform initialization, deterministic per seed. Every matrix or
/// vector of shape `rows x cols` draws from `±sqrt(6 / (cols + rows))`
/// (vectors count as `len x 1`); the fusion bias starts at zero.
pub fn init_params(seed: u64, shape: &ModelShape) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = &shape.config;
    let hidden = shape.hidden();
    let ntypes = shape.input_dims.len();
    let layers = shape
        .layer_input_dims()
        .into_iter()
        .map(|dims| {
            let projections = shape
                .semantics
                .iter()
                .map(|&(src, dst)| {
                    let mut per_type: Vec<Option<Matrix>> = vec![None; ntypes];
                    for t in [src, dst] {
                        if per_type[t].is_none() {
                            let data = xavier(&mut rng, dims[t], hidden, hidden * dims[t]);
                            per_type[t] = Some(Matrix {
                                rows: hidden,
                                cols: dims[t],
                                data,
                            });
                        }
                    }
                    per_type
                })
                .collect();
            let attention = shape
                .semantics
                .iter()
                .map(|_| {
                    (0..cfg.heads)
                        .map(|_| AttentionHead {
                            a_src: xavier(&mut rng, cfg.dim_out, 1, cfg.dim_out),
                            a_dst: xavier(&mut rng, cfg.dim_out, 1, cfg.dim_out),
                        })
                        .collect()
                })
                .collect();
            let fusion = SemanticFusion {
                w: Matrix {
                    rows: cfg.semantic_dim,
                    cols: hidden,
                    data: xavier(&mut rng, hidden, cfg.semantic_dim, cfg.semantic_dim * hidden),
                },
                b: vec![0.0; cfg.semantic_dim],
                q: xavier(&mut rng, cfg.semantic_dim, 1, cfg.semantic_dim),
            };
            LayerParams {
                input_dims: dims,
                projections,
                attention,
                fusion,
            }
        })
        .collect();
    ModelParams {
        heads: cfg.heads,
        dim_out: cfg.dim_out,
        semantic_dim: cfg.semantic_dim,
        leaky_slope: cfg.leaky_slope,
        fusion_mode: cfg.fusion,
        layers,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Projected,
    Aggregated,
    Fused,
}

/// One dense matrix per vertex type, tagged with the stage it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub stage: Stage,
    pub per_type: Vec<Matrix>,
}

impl EmbeddingSet {
    pub fn raw(g: &HetGraph) -> Self {
        Self {
            stage: Stage::Raw,
            per_type: g
                .vertex_types()
                .iter()
                .enumerate()
                .map(|(t, vt)| Matrix {
                    rows: vt.count,
                    cols: vt.dim,
                    data: g.features(t).to_vec(),
                })
                .collect(),
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

/// `h′ = W·h`.
pub fn project(w: &Matrix, h: &[f32]) -> Result<Vec<f32>> {
    if w.cols != h.len() {
        bail!(Shape, "projection has {} columns, feature has {}", w.cols, h.len());
    }
    Ok((0..w.rows).map(|r| dot(w.row(r), h) as f32).collect())
}

/// One half of a decomposed coefficient: `a_srcᵀ·h_u′` or `a_dstᵀ·h_v′`.
pub fn theta_half(a_half: &[f32], h: &[f32]) -> Result<f32> {
    theta_half_wide(a_half, h).map(|x| x as f32)
}

/// [`theta_half`] without the final rounding to `f32`.
pub fn theta_half_wide(a_half: &[f32], h: &[f32]) -> Result<f64> {
    if a_half.len() != h.len() {
        bail!(Shape, "attention half has length {}, feature {}", a_half.len(), h.len());
    }
    Ok(dot(a_half, h))
}

#[inline]
pub fn leaky_relu(x: f32, slope: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_relu_wide(x: f64, slope: f32) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope as f64 * x
    }
}

/// `LeakyReLU(θ_u* + θ_*v)`.
#[inline]
pub fn edge_coefficient_decomposed(theta_src: f32, theta_dst: f32, leaky_slope: f32) -> f32 {
    leaky_relu(theta_src + theta_dst, leaky_slope)
}

/// `LeakyReLU(aᵀ·(h_u′ ∥ h_v′))` evaluated as one dot product over the
/// concatenation.
pub fn edge_coefficient_direct(
    a_src: &[f32],
    a_dst: &[f32],
    h_u: &[f32],
    h_v: &[f32],
    leaky_slope: f32,
) -> Result<f32> {
    if a_src.len() != h_u.len() || a_dst.len() != h_v.len() {
        bail!(Shape, "attention vector and projected features disagree in length");
    }
    let a = a_src.iter().chain(a_dst);
    let h = h_u.iter().chain(h_v);
    let s = a.zip(h).fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64);
    Ok(leaky_relu(s as f32, leaky_slope))
}

/// [`edge_coefficient_direct`] evaluated and returned in `f64`.
pub fn edge_coefficient_direct_wide(
    a_src: &[f32],
    a_dst: &[f32],
    h_u: &[f32],
    h_v: &[f32],
    leaky_slope: f32,
) -> Result<f64> {
    if a_src.len() != h_u.len() || a_dst.len() != h_v.len() {
        bail!(Shape, "attention vector and projected features disagree in length");
    }
    let a = a_src.iter().chain(a_dst);
    let h = h_u.iter().chain(h_v);
    let s = a.zip(h).fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64);
    Ok(leaky_relu_wide(s, leaky_slope))
}

fn softmax_f64(thetas: &[f64]) -> Vec<f64> {
    let m = thetas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = thetas.iter().map(|&t| libm::exp(t - m)).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

/// Max-shifted softmax over one target's coefficients.
pub fn softmax_importance(thetas: &[f32]) -> Result<Vec<f32>> {
    if thetas.is_empty() {
        bail!(Contract, "softmax over an empty coefficient list");
    }
    if thetas.iter().any(|t| !t.is_finite()) {
        bail!(Contract, "softmax over non-finite coefficients");
    }
    let wide: Vec<f64> = thetas.iter().map(|&t| t as f64).collect();
    Ok(softmax_f64(&wide).into_iter().map(|a| a as f32).collect())
}

/// `Σ α_u·h_u′ + α_v·h_v′`; the weights must form a convex combination.
pub fn aggregate_neighbors(
    alphas: &[f32],
    neighbor_h: &[&[f32]],
    self_h: &[f32],
    self_alpha: f32,
) -> Result<Vec<f32>> {
    if alphas.len() != neighbor_h.len() {
        bail!(Shape, "{} weights for {} neighbors", alphas.len(), neighbor_h.len());
    }
    let total: f64 = alphas.iter().map(|&a| a as f64).sum::<f64>() + self_alpha as f64;
    if (total - 1.0).abs() > 1e-5 {
        bail!(Contract, "aggregation weights sum to {total}, not 1");
    }
    let mut acc = vec![0.0f64; self_h.len()];
    for (&a, h) in alphas.iter().zip(neighbor_h) {
        if h.len() != acc.len() {
            bail!(Shape, "neighbor feature has length {}, expected {}", h.len(), acc.len());
        }
        for (o, &x) in acc.iter_mut().zip(h.iter()) {
            *o += a as f64 * x as f64;
        }
    }
    for (o, &x) in acc.iter_mut().zip(self_h) {
        *o += self_alpha as f64 * x as f64;
    }
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

/// Two-pass aggregation over `neighbors ∪ {self}`: max-shifted softmax over
/// the listed coefficients with the self term last, then the weighted sum.
/// Weights stay in `f64`; only the result is rounded.
pub fn aggregate_softmax(
    neighbor_thetas: &[f64],
    neighbor_h: &[&[f32]],
    self_theta: f64,
    self_h: &[f32],
) -> Result<Vec<f32>> {
    if neighbor_thetas.len() != neighbor_h.len() {
        bail!(Shape, "{} coefficients for {} neighbors", neighbor_thetas.len(), neighbor_h.len());
    }
    let mut thetas = Vec::with_capacity(neighbor_thetas.len() + 1);
    thetas.extend_from_slice(neighbor_thetas);
    thetas.push(self_theta);
    if thetas.iter().any(|t| !t.is_finite()) {
        bail!(Contract, "softmax over non-finite coefficients");
    }
    let alphas = softmax_f64(&thetas);
    let mut acc = vec![0.0f64; self_h.len()];
    for (&a, h) in alphas.iter().zip(neighbor_h.iter().copied().chain([self_h])) {
        if h.len() != acc.len() {
            bail!(Shape, "neighbor feature has length {}, expected {}", h.len(), acc.len());
        }
        for (o, &x) in acc.iter_mut().zip(h) {
            *o += a * x as f64;
        }
    }
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

/// Single-pass softmax aggregation with a running maximum. When a larger
/// coefficient arrives, both accumulators are rescaled by `exp(m - m′)`.
#[derive(Clone, Debug)]
pub struct OnlineSoftmax {
    max: f64,
    norm: f64,
    acc: Vec<f64>,
    count: usize,
}

impl OnlineSoftmax {
    pub fn new(dim: usize) -> Self {
        Self {
            max: f64::NEG_INFINITY,
            norm: 0.0,
            acc: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn push(&mut self, theta: f64, h: &[f32]) -> Result<()> {
        if !theta.is_finite() {
            bail!(Contract, "non-finite coefficient in online softmax");
        }
        if h.len() != self.acc.len() {
            bail!(Shape, "feature of length {} pushed into width {}", h.len(), self.acc.len());
        }
        if theta > self.max {
            if self.count > 0 {
                let scale = libm::exp(self.max - theta);
                self.norm *= scale;
                self.acc.iter_mut().for_each(|a| *a *= scale);
            }
            self.max = theta;
        }
        let e = libm::exp(theta - self.max);
        self.norm += e;
        for (a, &x) in self.acc.iter_mut().zip(h) {
            *a += e * x as f64;
        }
        self.count += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn finish(self) -> Result<Vec<f32>> {
        if self.count == 0 {
            bail!(Contract, "online softmax finished without inputs");
        }
        Ok(self.acc.into_iter().map(|a| (a / self.norm) as f32).collect())
    }
}

/// Fuses per-semantic aggregates of one vertex type.
///
/// With [`FusionMode::Attention`] each semantic graph `p` gets
/// `w_p = mean_v qᵀ·tanh(W·z_v^p + b)` and the output is `Σ_p softmax(w)_p·z^p`.
pub fn semantic_fusion(
    per_semantic: &[&Matrix],
    fusion: &SemanticFusion,
    mode: FusionMode,
) -> Result<Matrix> {
    let Some(first) = per_semantic.first() else {
        bail!(Contract, "semantic fusion needs at least one semantic graph");
    };
    let (rows, cols) = (first.rows, first.cols);
    if per_semantic.iter().any(|z| z.rows != rows || z.cols != cols) {
        bail!(Shape, "semantic aggregates cover different vertex sets");
    }
    let betas: Vec<f64> = match mode {
        FusionMode::Mean => vec![1.0 / per_semantic.len() as f64; per_semantic.len()],
        FusionMode::Attention => {
            if fusion.w.cols != cols || fusion.b.len() != fusion.w.rows || fusion.q.len() != fusion.w.rows {
                bail!(Shape, "semantic fusion parameters do not match width {cols}");
            }
            let scores: Vec<f64> = per_semantic.iter().map(|z| semantic_score(z, fusion)).collect();
            if per_semantic.len() == 1 {
                vec![1.0]
            } else {
                softmax_f64(&scores)
            }
        }
    };
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let v: f64 = per_semantic
                .iter()
                .zip(&betas)
                .map(|(z, &b)| b * z.data[r * cols + c] as f64)
                .sum();
            out.data[r * cols + c] = v as f32;
        }
    }
    Ok(out)
}

/// `mean_v qᵀ·tanh(W·z_v + b)`
pub fn semantic_score(z: &Matrix, fusion: &SemanticFusion) -> f64 {
    if z.rows == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for r in 0..z.rows {
        let zr = z.row(r);
        for k in 0..fusion.w.rows {
            let pre = dot(fusion.w.row(k), zr) + fusion.b[k] as f64;
            total += fusion.q[k] as f64 * libm::tanh(pre);
        }
    }
    total / z.rows as f64
}

/// Projects every vertex of `vtype` with the semantic's projection.
pub fn project_all(w: &Matrix, input: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(input.rows, w.rows);
    for r in 0..input.rows {
        let p = project(w, input.row(r))?;
        out.row_mut(r).copy_from_slice(&p);
    }
    Ok(out)
}

/// Unpruned staged forward pass: FP for every vertex, coefficients in direct
/// form, softmax over `N_v ∪ {v}`, aggregation per head (heads
/// concatenated), then semantic fusion per target type.
pub fn reference_forward(
    g: &HetGraph,
    semantics: &[SemanticGraph],
    params: &ModelParams,
) -> Result<EmbeddingSet> {
    params.validate(g, semantics)?;
    let mut input = EmbeddingSet::raw(g).per_type;
    let (heads, d) = (params.heads, params.dim_out);
    for (l, layer) in params.layers.iter().enumerate() {
        let mut aggregated: Vec<Matrix> = Vec::with_capacity(semantics.len());
        for (s, sg) in semantics.iter().enumerate() {
            let (src_t, dst_t) = (sg.src_type(), sg.vertex_type());
            let src_proj = project_all(params.projection(l, s, src_t)?, &input[src_t])?;
            let dst_proj = if src_t == dst_t {
                src_proj.clone()
            } else {
                project_all(params.projection(l, s, dst_t)?, &input[dst_t])?
            };
            let mut z = Matrix::zeros(sg.num_vertices(), params.hidden());
            for v in 0..sg.num_vertices() as u32 {
                let nbrs: Vec<u32> = sg.aggregation_neighbors(v).collect();
                for h in 0..heads {
                    let att = &layer.attention[s][h];
                    let slice = |m: &Matrix, x: u32| -> Vec<f32> {
                        m.row(x as usize)[h * d..(h + 1) * d].to_vec()
                    };
                    let hv = slice(&dst_proj, v);
                    let hu: Vec<Vec<f32>> = nbrs.iter().map(|&u| slice(&src_proj, u)).collect();
                    let thetas = hu
                        .iter()
                        .map(|x| edge_coefficient_direct_wide(&att.a_src, &att.a_dst, x, &hv, params.leaky_slope))
                        .collect::<Result<Vec<f64>>>()?;
                    let self_theta =
                        edge_coefficient_direct_wide(&att.a_src, &att.a_dst, &hv, &hv, params.leaky_slope)?;
                    let refs: Vec<&[f32]> = hu.iter().map(Vec::as_slice).collect();
                    let out = aggregate_softmax(&thetas, &refs, self_theta, &hv)?;
                    z.row_mut(v as usize)[h * d..(h + 1) * d].copy_from_slice(&out);
                }
            }
            aggregated.push(z);
        }
        input = fuse_layer(&input, semantics, &aggregated, &layer.fusion, params.fusion_mode)?;
    }
    Ok(EmbeddingSet {
        stage: Stage::Fused,
        per_type: input,
    })
}

/// Semantic fusion for every targeted vertex type; untargeted types pass
/// their input through.
pub(crate) fn fuse_layer(
    input: &[Matrix],
    semantics: &[SemanticGraph],
    aggregated: &[Matrix],
    fusion: &SemanticFusion,
    mode: FusionMode,
) -> Result<Vec<Matrix>> {
    (0..input.len())
        .map(|t| {
            let parts: Vec<&Matrix> = semantics
                .iter()
                .zip(aggregated)
                .filter(|(sg, _)| sg.vertex_type() == t)
                .map(|(_, z)| z)
                .collect();
            if parts.is_empty() {
                Ok(input[t].clone())
            } else {
                semantic_fusion(&parts, fusion, mode)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::{build_relation_graphs, EdgeType, VertexType};
    use alloc::string::ToString;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    fn one_type_graph(count: usize, dim: usize, features: Vec<f32>, edges: Vec<(u32, u32)>) -> HetGraph {
        HetGraph::new(
            vec![VertexType {
                name: "a".to_string(),
                count,
                dim,
            }],
            vec![features],
            vec![EdgeType {
                name: "a-a".to_string(),
                src: 0,
                dst: 0,
            }],
            vec![edges],
        )
        .unwrap()
    }

    fn small_config(dim_out: usize, heads: usize) -> ShapeConfig {
        ShapeConfig {
            layers: 1,
            dim_out,
            heads,
            semantic_dim: 4,
            ..ShapeConfig::default()
        }
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let g = one_type_graph(3, 5, vec![0.0; 15], vec![(0, 1)]);
        let sem = build_relation_graphs(&g);
        let shape = ModelShape::new(&g, &sem, small_config(4, 2)).unwrap();
        let p1 = init_params(1, &shape);
        let again = init_params(1, &shape);
        let p2 = init_params(2, &shape);
        assert_eq!(p1, again);
        assert_ne!(p1, p2);
        assert_eq!(p1.leaky_slope, 0.2);
        let w = p1.projection(0, 0, 0).unwrap();
        let bound = libm::sqrt(6.0 / (5.0 + 8.0)) as f32;
        assert!(w.data.iter().all(|x| x.abs() <= bound));
        let a = p1.attention(0, 0, 1).unwrap();
        let bound = libm::sqrt(6.0 / 5.0) as f32;
        assert!(a.a_src.iter().all(|x| x.abs() <= bound));
        p1.validate(&g, &sem).unwrap();
    }

    #[test]
    fn project_examples() {
        assert_eq!(project(&Matrix::identity(2), &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        let w = Matrix::from_vec(2, 2, vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(project(&w, &[1.0, 1.0]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(project(&Matrix::zeros(3, 2), &[4.0, 5.0]).unwrap(), vec![0.0; 3]);
        assert!(project(&w, &[1.0]).is_err());
    }

    #[test]
    fn theta_half_examples() {
        assert_eq!(theta_half(&[1.0, 0.0], &[5.0, 9.0]).unwrap(), 5.0);
        assert_eq!(theta_half(&[0.5, 0.5], &[2.0, 4.0]).unwrap(), 3.0);
        assert_eq!(theta_half(&[0.0, 0.0], &[2.0, 4.0]).unwrap(), 0.0);
        assert!(theta_half(&[1.0], &[2.0, 4.0]).is_err());
    }

    #[test]
    fn decomposed_examples() {
        assert_eq!(edge_coefficient_decomposed(2.0, 3.0, 0.2), 5.0);
        assert!(close(edge_coefficient_decomposed(-3.0, 1.0, 0.2), -0.4, 1e-7));
        assert_eq!(edge_coefficient_decomposed(1.0, -1.0, 0.2), 0.0);
    }

    #[test]
    fn direct_examples() {
        let z = [0.0f32; 4];
        assert_eq!(edge_coefficient_direct(&z, &z, &z, &z, 0.2).unwrap(), 0.0);
        let e1 = [1.0, 0.0, 0.0];
        let got = edge_coefficient_direct(&e1, &e1, &[1.0, 7.0, 7.0], &[2.0, 7.0, 7.0], 0.2).unwrap();
        assert_eq!(got, 3.0);
        assert!(edge_coefficient_direct(&e1, &e1, &[1.0], &[2.0, 0.0, 0.0], 0.2).is_err());
    }

    #[test]
    fn direct_matches_decomposed_seed_3() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = || (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let (a_src, a_dst, hu, hv) = (v(), v(), v(), v());
        let direct = edge_coefficient_direct(&a_src, &a_dst, &hu, &hv, 0.2).unwrap();
        let dec = edge_coefficient_decomposed(
            theta_half(&a_src, &hu).unwrap(),
            theta_half(&a_dst, &hv).unwrap(),
            0.2,
        );
        assert!((direct - dec).abs() <= 1e-6 * (1.0 + direct.abs()));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_importance(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let a = softmax_importance(&[core::f32::consts::LN_2, 0.0]).unwrap();
        assert!(close(a[0], 2.0 / 3.0, 1e-6) && close(a[1], 1.0 / 3.0, 1e-6));
        assert_eq!(softmax_importance(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        assert!(softmax_importance(&[]).is_err());
        assert!(softmax_importance(&[f32::NAN]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let n = [3.0f32, -2.0];
        assert_eq!(aggregate_neighbors(&[1.0], &[&n], &[9.0, 9.0], 0.0).unwrap(), n.to_vec());
        let (a, b) = ([1.0f32, 0.0], [0.0f32, 1.0]);
        assert_eq!(
            aggregate_neighbors(&[0.5, 0.5], &[&a, &b], &[7.0, 7.0], 0.0).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(aggregate_neighbors(&[], &[], &[4.0, 1.0], 1.0).unwrap(), vec![4.0, 1.0]);
        assert!(matches!(
            aggregate_neighbors(&[0.5], &[&a], &b, 0.2),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn online_softmax_matches_two_pass() {
        let thetas = [0.3f64, -1.0, 2.5, 0.0, 2.4];
        let feats: Vec<Vec<f32>> = (0..5).map(|i| vec![i as f32, 1.0 - i as f32]).collect();
        let mut online = OnlineSoftmax::new(2);
        for (t, f) in thetas.iter().zip(&feats) {
            online.push(*t, f).unwrap();
        }
        let refs: Vec<&[f32]> = feats[..4].iter().map(Vec::as_slice).collect();
        let two = aggregate_softmax(&thetas[..4], &refs, thetas[4], &feats[4]).unwrap();
        for (x, y) in online.finish().unwrap().iter().zip(&two) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(y.abs()).max(1e-6));
        }
        assert!(OnlineSoftmax::new(2).finish().is_err());
    }

    fn fusion_params(dim: usize) -> SemanticFusion {
        SemanticFusion {
            w: Matrix::zeros(1, dim),
            b: vec![0.0],
            q: vec![1.0],
        }
    }

    #[test]
    fn fusion_single_and_identical() {
        let z = Matrix::from_vec(2, 2, vec![1.5, -2.0, 0.25, 3.0]).unwrap();
        let mut f = fusion_params(2);
        f.w.data = vec![0.3, -0.7];
        assert_eq!(semantic_fusion(&[&z], &f, FusionMode::Attention).unwrap(), z);
        assert_eq!(semantic_fusion(&[&z, &z], &f, FusionMode::Attention).unwrap(), z);
        assert_eq!(semantic_fusion(&[&z, &z], &f, FusionMode::Mean).unwrap(), z);
        let other = Matrix::zeros(3, 2);
        assert!(semantic_fusion(&[&z, &other], &f, FusionMode::Attention).is_err());
    }

    #[test]
    fn fusion_hand_weights() {
        // tanh(c) = ln 2 for z¹, zero for z² gives scores [ln 2, 0].
        let c = libm::atanh(core::f64::consts::LN_2) as f32;
        let f = SemanticFusion {
            w: Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            b: vec![0.0],
            q: vec![1.0],
        };
        let z1 = Matrix::from_vec(2, 2, vec![c, 3.0, c, -6.0]).unwrap();
        let z2 = Matrix::from_vec(2, 2, vec![0.0, 9.0, 0.0, 3.0]).unwrap();
        let out = semantic_fusion(&[&z1, &z2], &f, FusionMode::Attention).unwrap();
        for i in 0..4 {
            let want = (2.0 * z1.data[i] + z2.data[i]) / 3.0;
            assert!(close(out.data[i], want, 1e-5), "{i}: {} vs {want}", out.data[i]);
        }
    }

    fn unit_params(g: &HetGraph, sem: &[SemanticGraph], dim: usize) -> ModelParams {
        let shape = ModelShape::new(g, sem, small_config(dim, 1)).unwrap();
        let mut p = init_params(0, &shape);
        for layer in &mut p.layers {
            for per_type in &mut layer.projections {
                for w in per_type.iter_mut().flatten() {
                    *w = Matrix::identity(dim);
                }
            }
            for heads in &mut layer.attention {
                for a in heads.iter_mut() {
                    a.a_src = vec![0.0; dim];
                    a.a_dst = vec![0.0; dim];
                }
            }
        }
        p
    }

    #[test]
    fn forward_without_edges_is_projection() {
        let feats = vec![1.0, 2.0, -3.0, 4.0, 0.5, 0.0];
        let g = one_type_graph(3, 2, feats.clone(), vec![]);
        let sem = build_relation_graphs(&g);
        let shape = ModelShape::new(&g, &sem, small_config(2, 1)).unwrap();
        let p = init_params(5, &shape);
        let out = reference_forward(&g, &sem, &p).unwrap();
        let w = p.projection(0, 0, 0).unwrap();
        for v in 0..3 {
            let want = project(w, &feats[v * 2..v * 2 + 2]).unwrap();
            assert_eq!(out.per_type[0].row(v), want.as_slice());
        }
    }

    #[test]
    fn forward_uniform_attention_is_mean() {
        let feats = vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0, 4.0, -1.0];
        let g = one_type_graph(4, 2, feats.clone(), vec![(1, 0), (2, 0), (3, 0), (0, 1), (1, 1)]);
        let sem = build_relation_graphs(&g);
        let p = unit_params(&g, &sem, 2);
        let out = reference_forward(&g, &sem, &p).unwrap();
        let row = |v: usize| &feats[v * 2..v * 2 + 2];
        for (v, members) in [(0usize, vec![1usize, 2, 3, 0]), (1, vec![0, 1]), (2, vec![2])] {
            for c in 0..2 {
                let want = members.iter().map(|&u| row(u)[c]).sum::<f32>() / members.len() as f32;
                assert!(close(out.per_type[0].row(v)[c], want, 1e-6));
            }
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let g = one_type_graph(2, 3, vec![0.0; 6], vec![(0, 1)]);
        let sem = build_relation_graphs(&g);
        let shape = ModelShape::new(&g, &sem, small_config(2, 1)).unwrap();
        let mut p = init_params(0, &shape);
        p.layers[0].projections[0][0] = Some(Matrix::zeros(2, 2));
        assert!(matches!(reference_forward(&g, &sem, &p), Err(crate::Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn decomposition_equivalence(
            v in proptest::collection::vec(-4.0f32..4.0, 32),
            slope in 0.01f32..0.99,
        ) {
            let (a_src, rest) = v.split_at(8);
            let (a_dst, rest) = rest.split_at(8);
            let (hu, hv) = rest.split_at(8);
            let direct = edge_coefficient_direct(a_src, a_dst, hu, hv, slope).unwrap();
            let dec = edge_coefficient_decomposed(
                theta_half(a_src, hu).unwrap(),
                theta_half(a_dst, hv).unwrap(),
                slope,
            );
            prop_assert!((direct - dec).abs() <= 1e-6 * (1.0 + direct.abs()));
        }

        #[test]
        fn softmax_is_simplex_and_monotone(
            t in proptest::collection::vec(-50.0f32..50.0, 1..40),
            shift in -100.0f32..100.0,
        ) {
            let a = softmax_importance(&t).unwrap();
            prop_assert!(a.iter().all(|&x| x >= 0.0));
            let s: f64 = a.iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            for i in 0..t.len() {
                for j in 0..t.len() {
                    if t[i] > t[j] {
                        prop_assert!(a[i] >= a[j]);
                        if t[i] - t[j] > 1e-3 && a[j] > 1e-30 {
                            prop_assert!(a[i] > a[j]);
                        }
                    }
                }
            }
            let shifted: Vec<f32> = t.iter().map(|x| x + shift).collect();
            let b = softmax_importance(&shifted).unwrap();
            let rank = |w: &[f32]| {
                let mut idx: Vec<usize> = (0..w.len()).collect();
                idx.sort_by(|&x, &y| t[y].partial_cmp(&t[x]).unwrap().then(x.cmp(&y)));
                idx.iter().map(|&i| w[i]).collect::<Vec<_>>()
            };
            let (ra, rb) = (rank(&a), rank(&b));
            prop_assert!(ra.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(rb.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn aggregation_is_convex(
            t in proptest::collection::vec(-5.0f64..5.0, 1..12),
            f in proptest::collection::vec(-10.0f32..10.0, 36),
        ) {
            let n = t.len() - 1;
            let feats: Vec<&[f32]> = (0..n).map(|i| &f[(i % 12) * 3..(i % 12) * 3 + 3]).collect();
            let self_h = &f[33..36];
            let out = aggregate_softmax(&t[..n], &feats, t[n], self_h).unwrap();
            for c in 0..3 {
                let vals = feats.iter().map(|h| h[c]).chain([self_h[c]]);
                let (lo, hi) = vals.fold((f32::MAX, f32::MIN), |(l, h), x| (l.min(x), h.max(x)));
                prop_assert!(out[c] >= lo - 1e-4 && out[c] <= hi + 1e-4);
            }
        }
    }
}
