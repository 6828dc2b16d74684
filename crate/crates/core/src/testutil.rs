//! Fixtures shared by unit tests.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::hetgraph::{build_relation_graphs, generate_synthetic, EdgeType, HetGraph, SemanticGraph, SyntheticSpec, VertexType};
use crate::model::{init_params, Matrix, ModelParams, ModelShape, ShapeConfig};

pub const A: u32 = 0;
pub const E: u32 = 4;
pub const F: u32 = 5;
pub const G: u32 = 6;
pub const H: u32 = 7;
pub const I: u32 = 8;
pub const Z: u32 = 9;

/// Ten vertices A..I, Z of one type; B, C, D → A and E, F, G, H, I → Z.
/// The first feature coordinate of E..I is 5, 4, 2, 1, 3.
pub fn toy_graph() -> HetGraph {
    let first = [0.5, 1.0, -1.0, 2.0, 5.0, 4.0, 2.0, 1.0, 3.0, 0.0];
    let features: Vec<f32> = first.iter().enumerate().flat_map(|(i, &x)| [x, 0.25 * i as f32]).collect();
    let edges = vec![(1, A), (2, A), (3, A), (E, Z), (F, Z), (G, Z), (H, Z), (I, Z)];
    HetGraph::new(
        vec![VertexType {
            name: "v".to_string(),
            count: 10,
            dim: 2,
        }],
        vec![features],
        vec![EdgeType {
            name: "v-v".to_string(),
            src: 0,
            dst: 0,
        }],
        vec![edges],
    )
    .unwrap()
}

/// Identity projections, one head of width 2, `a_src = e₁`, `a_dst = 0`.
pub fn toy_params(g: &HetGraph, sem: &[SemanticGraph]) -> ModelParams {
    let cfg = ShapeConfig {
        layers: 1,
        dim_out: 2,
        heads: 1,
        semantic_dim: 2,
        ..ShapeConfig::default()
    };
    let mut p = init_params(0, &ModelShape::new(g, sem, cfg).unwrap());
    for layer in &mut p.layers {
        for w in layer.projections.iter_mut().flatten().flatten() {
            *w = Matrix::identity(2);
        }
        for a in layer.attention.iter_mut().flatten() {
            a.a_src = vec![1.0, 0.0];
            a.a_dst = vec![0.0, 0.0];
        }
    }
    p
}

pub struct Setup {
    pub g: HetGraph,
    pub sem: Vec<SemanticGraph>,
    pub params: ModelParams,
}

pub fn random_setup(seed: u64, counts: Vec<usize>, dim: usize, heads: usize, dim_out: usize, layers: usize) -> Setup {
    let g = generate_synthetic(&SyntheticSpec {
        num_types: counts.len(),
        counts,
        feature_dim: dim,
        degree_exponent: 2.0,
        seed,
    })
    .unwrap();
    let sem = build_relation_graphs(&g);
    let cfg = ShapeConfig {
        layers,
        dim_out,
        heads,
        semantic_dim: 8,
        ..ShapeConfig::default()
    };
    let params = init_params(seed ^ 0x5eed, &ModelShape::new(&g, &sem, cfg).unwrap());
    Setup { g, sem, params }
}

pub fn rel_close(a: &Matrix, b: &Matrix, tol: f32) -> bool {
    a.rows == b.rows
        && a.cols == b.cols
        && a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1e-30) || x == y)
}
