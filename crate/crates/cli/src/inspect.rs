//! Human-readable summaries of graphs and trace files.

use std::fmt::Write;

use ade_core::execflow::{OpKind, Trace};
use ade_core::hetgraph::{degree_stats, HetGraph, SemanticGraph};

pub fn describe_graph(g: &HetGraph, semantics: &[SemanticGraph]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "vertices: {}  edges: {}", g.num_vertices(), g.num_edges());
    for vt in g.vertex_types() {
        let _ = writeln!(out, "  type {:<12} count {:>9}  dim {:>5}", vt.name, vt.count, vt.dim);
    }
    for (e, et) in g.edge_types().iter().enumerate() {
        let _ = writeln!(
            out,
            "  edge {:<12} {} -> {}  {:>9} edges",
            et.name,
            g.vertex_types()[et.src].name,
            g.vertex_types()[et.dst].name,
            g.edges(e).len()
        );
    }
    let _ = writeln!(out, "semantic graphs: {}", semantics.len());
    for s in semantics {
        let d = degree_stats(s);
        let _ = writeln!(
            out,
            "  {:<14} targets {:>8}  edges {:>9}  in-degree min {} median {} mean {:.2} max {}",
            d.name, d.targets, d.edges, d.min, d.median, d.mean, d.max
        );
    }
    out
}

pub fn describe_trace(t: &Trace) -> String {
    let mut out = String::new();
    let k = t.k.map_or("unbounded".to_string(), |k| k.to_string());
    let _ = writeln!(out, "flow {:?}  K {k}  events {}  fences {}", t.flow, t.events.len(), t.fences.len());
    for kind in OpKind::ALL {
        let n = t.summary.count(kind);
        if n > 0 {
            let _ = writeln!(out, "  {:<12} {n:>10}", format!("{kind:?}"));
        }
    }
    let s = &t.summary;
    let _ = writeln!(
        out,
        "flops {}  aggregated pairs {}  discarded pairs {}  pruned domains {}",
        s.flops, s.aggregated_pairs, s.discarded_pairs, s.pruned_domains
    );
    out
}
