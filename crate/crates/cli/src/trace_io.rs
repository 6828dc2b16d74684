//! Trace dumps: newline-delimited JSON. The first line is a header with
//! everything but the events; each following line is one event.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ade_core::execflow::{Flow, OpEvent, PruneMode, Retained, Trace, TraceMeta, TraceSummary};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    flow: Flow,
    k: Option<u32>,
    prune_mode: PruneMode,
    meta: TraceMeta,
    fences: Vec<u32>,
    retained: Vec<Retained>,
    summary: TraceSummary,
    events: usize,
}

pub fn write_trace(trace: &Trace, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        flow: trace.flow,
        k: trace.k,
        prune_mode: trace.prune_mode,
        meta: trace.meta.clone(),
        fences: trace.fences.clone(),
        retained: trace.retained.clone(),
        summary: trace.summary.clone(),
        events: trace.events.len(),
    };
    serde_json::to_writer(&mut w, &header).map_err(CliError::json(path))?;
    w.write_all(b"\n").map_err(CliError::io(path))?;
    for e in &trace.events {
        serde_json::to_writer(&mut w, e).map_err(CliError::json(path))?;
        w.write_all(b"\n").map_err(CliError::io(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_trace(path: &Path) -> Result<Trace> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| CliError::format(path, "empty trace file"))?
        .map_err(CliError::io(path))?;
    let h: Header = serde_json::from_str(&first).map_err(CliError::json(path))?;
    let mut events = Vec::with_capacity(h.events);
    for line in lines {
        let line = line.map_err(CliError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: OpEvent = serde_json::from_str(&line).map_err(CliError::json(path))?;
        events.push(e);
    }
    if events.len() != h.events {
        return Err(CliError::format(
            path,
            format!("header announces {} events, file holds {}", h.events, events.len()),
        ));
    }
    Ok(Trace {
        flow: h.flow,
        k: h.k,
        prune_mode: h.prune_mode,
        meta: h.meta,
        events,
        fences: h.fences,
        retained: h.retained,
        summary: h.summary,
    })
}
