//! Model parameter files: a JSON manifest with the shape metadata and the
//! location of every tensor inside one little-endian `f32` blob.

use std::fs;
use std::path::Path;

use ade_core::model::{AttentionHead, FusionMode, LayerParams, Matrix, ModelParams, SemanticFusion};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::graph_io::{f32_bytes, read_f32s, sibling, stem, write_file};

pub const PARAMS_VERSION: u32 = 1;

/// A `rows × cols` tensor starting `offset` floats into the blob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadBlocks {
    pub a_src: Block,
    pub a_dst: Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionBlocks {
    pub w: Block,
    pub b: Block,
    pub q: Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerBlocks {
    pub input_dims: Vec<usize>,
    pub projections: Vec<Vec<Option<Block>>>,
    pub attention: Vec<Vec<HeadBlocks>>,
    pub fusion: FusionBlocks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsManifest {
    pub version: u32,
    pub heads: usize,
    pub dim_out: usize,
    pub semantic_dim: usize,
    pub leaky_slope: f32,
    pub fusion_mode: FusionMode,
    pub blob_file: String,
    pub blob_floats: usize,
    pub layers: Vec<LayerBlocks>,
}

struct Packer(Vec<f32>);

impl Packer {
    fn put(&mut self, rows: usize, cols: usize, data: &[f32]) -> Block {
        let b = Block {
            offset: self.0.len(),
            rows,
            cols,
        };
        self.0.extend_from_slice(data);
        b
    }

    fn matrix(&mut self, m: &Matrix) -> Block {
        self.put(m.rows, m.cols, &m.data)
    }

    fn vector(&mut self, v: &[f32]) -> Block {
        self.put(v.len(), 1, v)
    }
}

pub fn save_params(p: &ModelParams, manifest: &Path) -> Result<ParamsManifest> {
    let mut blob = Packer(Vec::new());
    let layers = p
        .layers
        .iter()
        .map(|l| LayerBlocks {
            input_dims: l.input_dims.clone(),
            projections: l
                .projections
                .iter()
                .map(|per_type| per_type.iter().map(|m| m.as_ref().map(|m| blob.matrix(m))).collect())
                .collect(),
            attention: l
                .attention
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|h| HeadBlocks {
                            a_src: blob.vector(&h.a_src),
                            a_dst: blob.vector(&h.a_dst),
                        })
                        .collect()
                })
                .collect(),
            fusion: FusionBlocks {
                w: blob.matrix(&l.fusion.w),
                b: blob.vector(&l.fusion.b),
                q: blob.vector(&l.fusion.q),
            },
        })
        .collect();
    let blob_file = format!("{}.f32", stem(manifest));
    write_file(&sibling(manifest, &blob_file), &f32_bytes(&blob.0))?;
    let m = ParamsManifest {
        version: PARAMS_VERSION,
        heads: p.heads,
        dim_out: p.dim_out,
        semantic_dim: p.semantic_dim,
        leaky_slope: p.leaky_slope,
        fusion_mode: p.fusion_mode,
        blob_file,
        blob_floats: blob.0.len(),
        layers,
    };
    let json = serde_json::to_vec_pretty(&m).map_err(CliError::json(manifest))?;
    write_file(manifest, &json)?;
    Ok(m)
}

/// Reads parameters back. Shapes are only checked against the blob here;
/// [`ModelParams::validate`] checks them against a graph.
pub fn load_params(manifest: &Path) -> Result<ModelParams> {
    let text = fs::read(manifest).map_err(CliError::io(manifest))?;
    let m: ParamsManifest = serde_json::from_slice(&text).map_err(CliError::json(manifest))?;
    if m.version != PARAMS_VERSION {
        return Err(CliError::format(
            manifest,
            format!("unsupported parameter version {} (expected {PARAMS_VERSION})", m.version),
        ));
    }
    let blob = read_f32s(&sibling(manifest, &m.blob_file), m.blob_floats)?;
    let take = |b: &Block| -> Result<Vec<f32>> {
        let end = b
            .rows
            .checked_mul(b.cols)
            .and_then(|n| n.checked_add(b.offset))
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| CliError::format(manifest, format!("tensor at offset {} runs past the blob", b.offset)))?;
        Ok(blob[b.offset..end].to_vec())
    };
    let matrix = |b: &Block| -> Result<Matrix> { Ok(Matrix::from_vec(b.rows, b.cols, take(b)?)?) };
    let mut layers = Vec::with_capacity(m.layers.len());
    for l in &m.layers {
        let projections = l
            .projections
            .iter()
            .map(|per_type| per_type.iter().map(|b| b.as_ref().map(&matrix).transpose()).collect())
            .collect::<Result<Vec<Vec<Option<Matrix>>>>>()?;
        let attention = l
            .attention
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|h| {
                        Ok(AttentionHead {
                            a_src: take(&h.a_src)?,
                            a_dst: take(&h.a_dst)?,
                        })
                    })
                    .collect()
            })
            .collect::<Result<Vec<Vec<AttentionHead>>>>()?;
        layers.push(LayerParams {
            input_dims: l.input_dims.clone(),
            projections,
            attention,
            fusion: SemanticFusion {
                w: matrix(&l.fusion.w)?,
                b: take(&l.fusion.b)?,
                q: take(&l.fusion.q)?,
            },
        });
    }
    Ok(ModelParams {
        heads: m.heads,
        dim_out: m.dim_out,
        semantic_dim: m.semantic_dim,
        leaky_slope: m.leaky_slope,
        fusion_mode: m.fusion_mode,
        layers,
    })
}
