//! Graph manifests: a JSON index plus one raw little-endian file per feature
//! block (`f32`, count × dim) and per edge list (`u32` source, target pairs).
//! File names in the manifest are relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use ade_core::hetgraph::{EdgeType, HetGraph, VertexType};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VertexEntry {
    pub name: String,
    pub count: usize,
    pub dim: usize,
    pub features_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub name: String,
    /// Vertex type names.
    pub src: String,
    pub dst: String,
    pub edges_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphManifest {
    pub version: u32,
    pub vertex_types: Vec<VertexEntry>,
    pub edge_types: Vec<EdgeEntry>,
}

pub(crate) fn sibling(manifest: &Path, file: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new("")).join(file)
}

pub(crate) fn stem(manifest: &Path) -> String {
    manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "graph".into())
}

pub(crate) fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    if bytes.len() != expected * 4 {
        return Err(CliError::format(
            path,
            format!("expected {} bytes ({expected} floats), found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    fs::write(path, bytes).map_err(CliError::io(path))
}

/// Writes `g` as `manifest` plus binary blobs next to it.
pub fn save_hetgraph(g: &HetGraph, manifest: &Path) -> Result<GraphManifest> {
    let stem = stem(manifest);
    let mut m = GraphManifest {
        version: MANIFEST_VERSION,
        vertex_types: Vec::new(),
        edge_types: Vec::new(),
    };
    for (t, vt) in g.vertex_types().iter().enumerate() {
        let file = format!("{stem}.v{t}.f32");
        write_file(&sibling(manifest, &file), &f32_bytes(g.features(t)))?;
        m.vertex_types.push(VertexEntry {
            name: vt.name.clone(),
            count: vt.count,
            dim: vt.dim,
            features_file: file,
        });
    }
    for (e, et) in g.edge_types().iter().enumerate() {
        let file = format!("{stem}.e{e}.u32");
        let bytes: Vec<u8> = g
            .edges(e)
            .iter()
            .flat_map(|&(u, v)| u.to_le_bytes().into_iter().chain(v.to_le_bytes()))
            .collect();
        write_file(&sibling(manifest, &file), &bytes)?;
        m.edge_types.push(EdgeEntry {
            name: et.name.clone(),
            src: g.vertex_types()[et.src].name.clone(),
            dst: g.vertex_types()[et.dst].name.clone(),
            edges_file: file,
        });
    }
    let json = serde_json::to_vec_pretty(&m).map_err(CliError::json(manifest))?;
    write_file(manifest, &json)?;
    Ok(m)
}

/// Reads a graph manifest and its blobs; every structural check of
/// [`HetGraph::new`] applies.
pub fn load_hetgraph(manifest: &Path) -> Result<HetGraph> {
    let text = fs::read(manifest).map_err(CliError::io(manifest))?;
    let m: GraphManifest = serde_json::from_slice(&text).map_err(CliError::json(manifest))?;
    if m.version != MANIFEST_VERSION {
        return Err(CliError::format(
            manifest,
            format!("unsupported manifest version {} (expected {MANIFEST_VERSION})", m.version),
        ));
    }
    let mut types = Vec::with_capacity(m.vertex_types.len());
    let mut features = Vec::with_capacity(m.vertex_types.len());
    for v in &m.vertex_types {
        let n = v
            .count
            .checked_mul(v.dim)
            .ok_or_else(|| CliError::format(manifest, format!("type '{}' is too large", v.name)))?;
        features.push(read_f32s(&sibling(manifest, &v.features_file), n)?);
        types.push(VertexType {
            name: v.name.clone(),
            count: v.count,
            dim: v.dim,
        });
    }
    let type_index = |name: &str| {
        m.vertex_types
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| CliError::format(manifest, format!("unknown vertex type '{name}'")))
    };
    let mut edge_types = Vec::with_capacity(m.edge_types.len());
    let mut edges = Vec::with_capacity(m.edge_types.len());
    for e in &m.edge_types {
        edge_types.push(EdgeType {
            name: e.name.clone(),
            src: type_index(&e.src)?,
            dst: type_index(&e.dst)?,
        });
        let path = sibling(manifest, &e.edges_file);
        let bytes = fs::read(&path).map_err(CliError::io(&path))?;
        if bytes.len() % 8 != 0 {
            return Err(CliError::format(&path, format!("{} bytes is not a whole number of u32 pairs", bytes.len())));
        }
        edges.push(
            bytes
                .chunks_exact(8)
                .map(|c| {
                    let u = u32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
                    let v = u32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
                    (u, v)
                })
                .collect(),
        );
    }
    Ok(HetGraph::new(types, features, edge_types, edges)?)
}
