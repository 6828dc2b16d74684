//! Event-level timing, memory and energy model of the accelerator.
//!
//! Resources: one computing unit that runs in a single mode at a time
//! (independent systolic, combinational systolic or SIMD) and shares its PEs
//! among concurrent events of that mode; an array of pruning units whose
//! retention domains are allocated as contiguous spans; an LFU feature cache;
//! fixed-capacity weight, edge and attention buffers; and a single HBM
//! channel with a bandwidth-limited FIFO and fixed latency. Cache entries
//! can carry a count of their remaining scheduled accesses and are dropped
//! when it reaches zero.
//!
//! Events enter a bounded dispatch window in trace order, issue their reads
//! once their dependencies and fences are satisfied, run when their unit is
//! free, and post their writes on completion. Ties are broken by event id.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{bail, Result};
use crate::execflow::{event_accesses, Access, CacheKey, MemClass, OpEvent, OpKind, Trace, TraceMeta};
use crate::pruner::swap_bound;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    pub hbm_pj_per_bit: f64,
    /// Calibration knob.
    pub sram_pj_per_bit: f64,
    /// Calibration knob.
    pub flop_pj: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            hbm_pj_per_bit: 7.0,
            sram_pj_per_bit: 0.15,
            flop_pj: 1.0,
        }
    }
}

/// Buffer sizes are in bytes with 1 MB = 10⁶ bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareConfig {
    pub num_pes: u32,
    pub freq_ghz: f64,
    pub macs_per_pe_per_cycle: u32,
    pub weight_buffer_bytes: u64,
    pub edge_buffer_bytes: u64,
    pub attention_buffer_bytes: u64,
    pub feature_cache_bytes: u64,
    pub num_prune_units: u32,
    pub prune_unit_base_k: u32,
    pub hbm_bandwidth_gbps: f64,
    pub hbm_latency_cycles: u64,
    pub hbm_transaction_bytes: u32,
    pub mode_switch_penalty: u64,
    /// Events the dispatcher tracks at once.
    pub dispatch_window: u32,
    /// Drop a feature-cache entry, without writing it back, once its last
    /// scheduled access has been issued.
    pub release_dead_entries: bool,
    pub energy: EnergyConfig,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            num_pes: 8192,
            freq_ghz: 1.0,
            macs_per_pe_per_cycle: 1,
            weight_buffer_bytes: 2_440_000,
            edge_buffer_bytes: 1_200_000,
            attention_buffer_bytes: 400_000,
            feature_cache_bytes: 5_000_000,
            num_prune_units: 128,
            prune_unit_base_k: 128,
            hbm_bandwidth_gbps: 512.0,
            hbm_latency_cycles: 100,
            hbm_transaction_bytes: 32,
            mode_switch_penalty: 1,
            dispatch_window: 4096,
            release_dead_entries: true,
            energy: EnergyConfig::default(),
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.num_pes > 0
            && self.freq_ghz > 0.0
            && self.freq_ghz.is_finite()
            && self.macs_per_pe_per_cycle > 0
            && self.num_prune_units > 0
            && self.prune_unit_base_k > 0
            && self.hbm_bandwidth_gbps > 0.0
            && self.hbm_bandwidth_gbps.is_finite()
            && self.hbm_transaction_bytes > 0
            && self.dispatch_window > 0;
        if !positive {
            bail!(Config, "hardware parameters must be positive");
        }
        let e = &self.energy;
        if [e.hbm_pj_per_bit, e.sram_pj_per_bit, e.flop_pj]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            bail!(Config, "energy constants must be finite and non-negative");
        }
        Ok(())
    }

    /// PEs in one row of the array, `⌈√num_pes⌉`.
    pub fn pe_row(&self) -> u32 {
        let r = libm::sqrt(self.num_pes as f64) as u32;
        if r * r >= self.num_pes {
            r
        } else {
            r + 1
        }
    }

    fn flops_per_pe(&self) -> u64 {
        2 * self.macs_per_pe_per_cycle as u64
    }

    pub fn hbm_bytes_per_cycle(&self) -> f64 {
        self.hbm_bandwidth_gbps / self.freq_ghz
    }
}

/// Peak throughput in GFLOP/s.
pub fn peak_flops(hw: &HardwareConfig) -> f64 {
    hw.num_pes as f64 * hw.flops_per_pe() as f64 * hw.freq_ghz
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Independent systolic rows, one matrix-vector product each.
    SystolicI,
    /// The whole array as one matrix-matrix engine.
    SystolicC,
    Simd,
}

impl Mode {
    const ALL: [Mode; 3] = [Mode::SystolicI, Mode::SystolicC, Mode::Simd];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Compute(Mode),
    Pruner,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventCost {
    pub unit: Unit,
    pub cycles: u64,
    /// PEs held while running; zero for pruner events.
    pub pes: u32,
    pub accesses: SmallVec<[Access; 6]>,
}

fn div_ceil(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Unit, duration and memory movements of one event.
pub fn event_cost(e: &OpEvent, meta: &TraceMeta, hw: &HardwareConfig) -> Result<EventCost> {
    let per_pe = hw.flops_per_pe();
    let pe_row = hw.pe_row().min(hw.num_pes);
    let all = hw.num_pes as u64;
    let (unit, cycles, pes) = match e.kind {
        OpKind::Fp | OpKind::CoefSrc | OpKind::CoefDst if e.kind != OpKind::Fp || e.width <= 1 => {
            let c = div_ceil(e.flops, per_pe * pe_row as u64).max(1);
            (Unit::Compute(Mode::SystolicI), c, pe_row)
        }
        OpKind::Fp | OpKind::Sf => {
            let c = div_ceil(e.flops, per_pe * all) + hw.pe_row() as u64;
            (Unit::Compute(Mode::SystolicC), c, hw.num_pes)
        }
        OpKind::Importance | OpKind::AggAccum | OpKind::AggFinalize => {
            let c = div_ceil(e.flops, per_pe * all).max(1);
            let p = div_ceil(e.flops, per_pe * c).clamp(1, all) as u32;
            (Unit::Compute(Mode::Simd), c, p)
        }
        OpKind::PruneCheck | OpKind::Heapify => {
            if e.width == 0 {
                bail!(Contract, "pruning event without a capacity");
            }
            let c = if e.kind == OpKind::PruneCheck {
                1
            } else {
                (swap_bound(e.width as usize) as u64).max(1)
            };
            (Unit::Pruner, c, 0)
        }
        _ => unreachable!(),
    };
    Ok(EventCost {
        unit,
        cycles,
        pes,
        accesses: event_accesses(e, meta),
    })
}

// ---------------------------------------------------------------------------
// Feature cache

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    /// The entry was absent. `evicted` names the entry pushed out to make
    /// room and whether it was dirty.
    Miss { evicted: Option<(CacheKey, bool)> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub writebacks: u64,
    pub invalidations: u64,
}

#[derive(Clone, Copy, Debug)]
struct Line {
    freq: u64,
    last_use: u64,
    dirty: bool,
}

/// Least-frequently-used cache of fixed-size entries; ties among the least
/// frequent entries go to the least recently used.
#[derive(Clone, Debug)]
pub struct LfuCache {
    capacity: usize,
    lines: BTreeMap<CacheKey, Line>,
    order: BTreeSet<(u64, u64, CacheKey)>,
    tick: u64,
    pub stats: CacheStats,
}

impl LfuCache {
    pub fn new(cache_bytes: u64, entry_bytes: u64) -> Result<Self> {
        if entry_bytes == 0 || entry_bytes > cache_bytes {
            bail!(
                Config,
                "cache entries of {entry_bytes} bytes do not fit a {cache_bytes}-byte cache"
            );
        }
        Ok(Self::with_entries((cache_bytes / entry_bytes) as usize))
    }

    pub fn with_entries(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            lines: BTreeMap::new(),
            order: BTreeSet::new(),
            tick: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.lines.contains_key(key)
    }

    /// Touches `key`, inserting it on a miss. A write marks the entry dirty.
    pub fn access(&mut self, key: CacheKey, write: bool) -> CacheOutcome {
        self.tick += 1;
        if let Some(line) = self.lines.get_mut(&key) {
            self.order.remove(&(line.freq, line.last_use, key));
            line.freq += 1;
            line.last_use = self.tick;
            line.dirty |= write;
            self.order.insert((line.freq, line.last_use, key));
            self.stats.hits += 1;
            return CacheOutcome::Hit;
        }
        self.stats.misses += 1;
        let mut evicted = None;
        if self.lines.len() >= self.capacity {
            if let Some(&(f, t, victim)) = self.order.iter().next() {
                self.order.remove(&(f, t, victim));
                let line = self.lines.remove(&victim).expect("ordered entry present");
                self.stats.evictions += 1;
                if line.dirty {
                    self.stats.writebacks += 1;
                }
                evicted = Some((victim, line.dirty));
            }
        }
        let line = Line {
            freq: 1,
            last_use: self.tick,
            dirty: write,
        };
        self.order.insert((1, self.tick, key));
        self.lines.insert(key, line);
        CacheOutcome::Miss { evicted }
    }

    /// Drops `key` without writing it back.
    pub fn invalidate(&mut self, key: &CacheKey) -> bool {
        match self.lines.remove(key) {
            Some(line) => {
                self.order.remove(&(line.freq, line.last_use, *key));
                self.stats.invalidations += 1;
                true
            }
            None => false,
        }
    }
}

// ---------------------------------------------------------------------------
// Pruner array

/// Units one retention domain of capacity `k` occupies.
pub fn pruner_span(k: u32, hw: &HardwareConfig) -> Result<u32> {
    if k == 0 {
        bail!(Config, "pruning threshold must be at least 1");
    }
    let n = k.div_ceil(hw.prune_unit_base_k);
    if n > hw.num_prune_units {
        bail!(
            Config,
            "K = {k} needs {n} pruning units of base {} but only {} exist",
            hw.prune_unit_base_k,
            hw.num_prune_units
        );
    }
    Ok(n)
}

/// First-fit allocator of contiguous unit spans.
#[derive(Clone, Debug)]
pub struct PrunerArray {
    busy: Vec<bool>,
}

impl PrunerArray {
    pub fn new(units: u32) -> Self {
        Self {
            busy: vec![false; units as usize],
        }
    }

    pub fn allocate(&mut self, span: u32) -> Option<u32> {
        let span = span as usize;
        let mut run = 0;
        for i in 0..self.busy.len() {
            if self.busy[i] {
                run = 0;
                continue;
            }
            run += 1;
            if run == span {
                let start = i + 1 - span;
                self.busy[start..=i].iter_mut().for_each(|b| *b = true);
                return Some(start as u32);
            }
        }
        None
    }

    pub fn release(&mut self, start: u32, span: u32) {
        for b in &mut self.busy[start as usize..(start + span) as usize] {
            *b = false;
        }
    }

    pub fn in_use(&self) -> usize {
        self.busy.iter().filter(|&&b| b).count()
    }
}

// ---------------------------------------------------------------------------
// HBM

#[derive(Clone, Debug)]
struct Hbm {
    bytes_per_cycle: f64,
    latency: u64,
    txn: u64,
    free_at: f64,
    busy: f64,
    bytes: u64,
    read_bytes: u64,
    write_bytes: u64,
    transactions: u64,
    /// Σ (latency + transfer) over requests.
    serial: u64,
}

impl Hbm {
    fn new(hw: &HardwareConfig) -> Self {
        Self {
            bytes_per_cycle: hw.hbm_bytes_per_cycle(),
            latency: hw.hbm_latency_cycles,
            txn: hw.hbm_transaction_bytes as u64,
            free_at: 0.0,
            busy: 0.0,
            bytes: 0,
            read_bytes: 0,
            write_bytes: 0,
            transactions: 0,
            serial: 0,
        }
    }

    /// Queues a transfer at `now`; returns the cycle its data is available.
    fn request(&mut self, now: u64, bytes: u64, write: bool) -> u64 {
        if bytes == 0 {
            return now;
        }
        let txns = bytes.div_ceil(self.txn);
        let moved = txns * self.txn;
        let dur = moved as f64 / self.bytes_per_cycle;
        let start = self.free_at.max(now as f64);
        self.free_at = start + dur;
        self.busy += dur;
        self.transactions += txns;
        self.bytes += moved;
        if write {
            self.write_bytes += moved;
        } else {
            self.read_bytes += moved;
        }
        self.serial += self.latency + libm::ceil(dur) as u64;
        libm::ceil(self.free_at) as u64 + self.latency
    }
}

// ---------------------------------------------------------------------------
// Results

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BusyCycles {
    pub systolic_i: u64,
    pub systolic_c: u64,
    pub simd: u64,
    pub pruner: u64,
    pub hbm: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub hbm_j: f64,
    pub sram_j: f64,
    pub compute_j: f64,
    pub total_j: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub total_cycles: u64,
    pub busy: BusyCycles,
    pub dram_bytes: u64,
    pub dram_read_bytes: u64,
    pub dram_write_bytes: u64,
    pub dram_transactions: u64,
    pub cache: CacheStats,
    pub sram_bytes: u64,
    pub energy: EnergyBreakdown,
    pub flops: u64,
    pub achieved_gflops: f64,
    pub mode_switches: u64,
    /// Σ per-event compute cycles.
    pub compute_cycles: u64,
    /// Σ per-event compute and memory cycles plus switch penalties: the
    /// makespan of a machine that overlaps nothing.
    pub serial_cycles: u64,
    /// Events admitted past the dispatch window to keep the machine moving.
    pub window_overflows: u64,
}

pub fn energy_of(dram_bytes: u64, sram_bytes: u64, flops: u64, e: &EnergyConfig) -> EnergyBreakdown {
    let hbm_j = dram_bytes as f64 * 8.0 * e.hbm_pj_per_bit * 1e-12;
    let sram_j = sram_bytes as f64 * 8.0 * e.sram_pj_per_bit * 1e-12;
    let compute_j = flops as f64 * e.flop_pj * 1e-12;
    EnergyBreakdown {
        hbm_j,
        sram_j,
        compute_j,
        total_j: hbm_j + sram_j + compute_j,
    }
}

// ---------------------------------------------------------------------------
// Simulation

const COMPLETE: u8 = 0;
const DATA_READY: u8 = 1;
const WAKE: u8 = 2;

type DomainKey = (u8, u16, u32, u16);

fn domain_of(e: &OpEvent) -> DomainKey {
    (e.layer, e.semantic, e.target, e.head.unwrap_or(u16::MAX))
}

struct Sim<'a> {
    trace: &'a Trace,
    hw: &'a HardwareConfig,
    costs: Vec<EventCost>,
    deps_left: Vec<u32>,
    dep_start: Vec<u32>,
    dependents: Vec<u32>,
    seg: Vec<u32>,
    seg_start: Vec<u32>,
    seg_left: Vec<u32>,
    segs_done: u32,
    admitted: u32,
    completed: u32,
    released: Vec<bool>,
    queue: BinaryHeap<Reverse<(u64, u8, u32)>>,
    start_at: u64,

    mode: Option<Mode>,
    switching_until: u64,
    ready: [BTreeSet<u32>; 3],
    free_pes: u32,
    in_flight: u32,
    busy_since: u64,
    busy_mode: [u64; 3],

    pruner: PrunerArray,
    span: u32,
    pruner_ready: BTreeSet<u32>,
    domains: BTreeMap<DomainKey, (u32, u32)>,
    domain_left: BTreeMap<DomainKey, u32>,
    pruner_active: u32,
    pruner_since: u64,
    pruner_busy: u64,

    hbm: Hbm,
    cache: LfuCache,
    entry_bytes: u64,
    overflow: [bool; 5],
    attention_overflow: Vec<bool>,
    /// Accesses still to come per cache entry.
    uses_left: BTreeMap<CacheKey, u32>,
    sram_bytes: u64,
    flops: u64,
    last_completion: u64,
    switches: u64,
    serial: u64,
    compute_cycles: u64,
    overflows: u64,
}

impl<'a> Sim<'a> {
    fn new(trace: &'a Trace, hw: &'a HardwareConfig) -> Result<Self> {
        hw.validate()?;
        let n = trace.events.len();
        let meta = &trace.meta;
        let mut deps_left = vec![0u32; n];
        let mut counts = vec![0u32; n + 1];
        for (id, e) in trace.events.iter().enumerate() {
            for &d in &e.deps {
                if d as usize >= id {
                    bail!(Contract, "event {id} depends on event {d}: the trace is not topologically ordered");
                }
                counts[d as usize + 1] += 1;
            }
            deps_left[id] = e.deps.len() as u32;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut dependents = vec![0u32; counts[n] as usize];
        for (id, e) in trace.events.iter().enumerate() {
            for &d in &e.deps {
                dependents[fill[d as usize] as usize] = id as u32;
                fill[d as usize] += 1;
            }
        }
        let seg = trace.segments();
        let nseg = seg.last().map_or(0, |&s| s as usize + 1);
        let mut seg_left = vec![0u32; nseg];
        let mut seg_start = vec![n as u32; nseg + 1];
        for (id, &s) in seg.iter().enumerate().rev() {
            seg_left[s as usize] += 1;
            seg_start[s as usize] = id as u32;
        }
        let costs = trace
            .events
            .iter()
            .map(|e| event_cost(e, meta, hw))
            .collect::<Result<Vec<_>>>()?;
        let mut domain_left = BTreeMap::new();
        let mut uses_left = BTreeMap::new();
        for (e, c) in trace.events.iter().zip(&costs) {
            if matches!(e.kind, OpKind::PruneCheck | OpKind::Heapify) {
                *domain_left.entry(domain_of(e)).or_insert(0) += 1;
            }
            if hw.release_dead_entries {
                for k in c.accesses.iter().filter_map(|a| a.key) {
                    *uses_left.entry(k).or_insert(0u32) += 1;
                }
            }
        }
        let span = if domain_left.is_empty() {
            0
        } else {
            pruner_span(trace.k.unwrap_or(0), hw)?
        };
        let entry_bytes = meta.hidden() as u64 * 4;
        let mut overflow = [false; 5];
        overflow[MemClass::WeightBuffer.index()] = meta.weight_bytes > hw.weight_buffer_bytes;
        overflow[MemClass::EdgeBuffer.index()] = meta.edge_bytes > hw.edge_buffer_bytes;
        Ok(Self {
            trace,
            hw,
            costs,
            deps_left,
            dep_start: counts,
            dependents,
            seg,
            seg_start,
            seg_left,
            segs_done: 0,
            admitted: 0,
            completed: 0,
            released: vec![false; n],
            queue: BinaryHeap::new(),
            start_at: 0,
            mode: None,
            switching_until: 0,
            ready: [BTreeSet::new(), BTreeSet::new(), BTreeSet::new()],
            free_pes: hw.num_pes,
            in_flight: 0,
            busy_since: 0,
            busy_mode: [0; 3],
            pruner: PrunerArray::new(hw.num_prune_units),
            span,
            pruner_ready: BTreeSet::new(),
            domains: BTreeMap::new(),
            domain_left,
            pruner_active: 0,
            pruner_since: 0,
            pruner_busy: 0,
            hbm: Hbm::new(hw),
            cache: LfuCache::new(hw.feature_cache_bytes, entry_bytes.max(1))?,
            entry_bytes,
            overflow,
            attention_overflow: meta
                .attention_bytes
                .iter()
                .map(|&b| b > hw.attention_buffer_bytes)
                .collect(),
            uses_left,
            sram_bytes: 0,
            flops: 0,
            last_completion: 0,
            switches: 0,
            serial: 0,
            compute_cycles: 0,
            overflows: 0,
        })
    }

    fn off_chip(&self, e: &OpEvent, a: &Access) -> bool {
        match a.class {
            MemClass::Hbm => true,
            MemClass::FeatureCache => false,
            MemClass::AttentionBuffer => self.attention_overflow.get(e.semantic as usize).copied().unwrap_or(false),
            c => self.overflow[c.index()],
        }
    }

    /// Runs the cache for one access and returns when its data is ready.
    fn cache_access(&mut self, now: u64, key: CacheKey, bytes: u64, write: bool) -> u64 {
        let mut ready = now;
        match self.cache.access(key, write) {
            CacheOutcome::Hit => self.sram_bytes += bytes,
            CacheOutcome::Miss { evicted } => {
                if let Some((_, true)) = evicted {
                    self.hbm.request(now, self.entry_bytes, true);
                }
                if !write {
                    ready = self.hbm.request(now, self.entry_bytes, false);
                }
                self.sram_bytes += if write { bytes } else { self.entry_bytes };
            }
        }
        if let Some(n) = self.uses_left.get_mut(&key) {
            *n -= 1;
            if *n == 0 {
                self.uses_left.remove(&key);
                self.cache.invalidate(&key);
            }
        }
        ready
    }

    fn fence_open(&self, id: u32) -> bool {
        self.seg[id as usize] <= self.segs_done
    }

    fn dep_ready(&mut self, id: u32, now: u64) {
        let now = now.max(self.start_at);
        let e = &self.trace.events[id as usize];
        let accesses = self.costs[id as usize].accesses.clone();
        let before = self.hbm.serial;
        let mut ready = now;
        for a in accesses.iter().filter(|a| !a.write) {
            let t = match (a.class, a.key) {
                (MemClass::FeatureCache, Some(k)) => self.cache_access(now, k, a.bytes as u64, false),
                _ if self.off_chip(e, a) => self.hbm.request(now, a.bytes as u64, false),
                _ => {
                    self.sram_bytes += a.bytes as u64;
                    now
                }
            };
            ready = ready.max(t);
        }
        self.serial += self.hbm.serial - before;
        self.queue.push(Reverse((ready, DATA_READY, id)));
    }

    fn admit(&mut self, now: u64, force: bool) {
        let n = self.trace.events.len() as u32;
        let window = self.hw.dispatch_window;
        while self.admitted < n && (force || self.admitted - self.completed < window) {
            let id = self.admitted;
            self.admitted += 1;
            if self.deps_left[id as usize] == 0 && self.fence_open(id) {
                self.dep_ready(id, now);
            }
            if force {
                self.overflows += 1;
                break;
            }
        }
    }

    fn start(&mut self, id: u32, now: u64) {
        let c = self.costs[id as usize].cycles;
        self.compute_cycles += if matches!(self.costs[id as usize].unit, Unit::Compute(_)) { c } else { 0 };
        self.serial += c;
        self.queue.push(Reverse((now + c, COMPLETE, id)));
    }

    fn dispatch(&mut self, now: u64) {
        // Computing unit.
        loop {
            if self.switching_until > now {
                break;
            }
            let Some(mode) = self.mode else {
                match self.oldest_ready_mode() {
                    Some(m) => {
                        self.mode = Some(m);
                        continue;
                    }
                    None => break,
                }
            };
            if let Some(&id) = self.ready[mode.index()].iter().next() {
                let pes = self.costs[id as usize].pes;
                if pes > self.free_pes {
                    break;
                }
                self.ready[mode.index()].remove(&id);
                self.free_pes -= pes;
                if self.in_flight == 0 {
                    self.busy_since = now;
                }
                self.in_flight += 1;
                self.start(id, now);
                continue;
            }
            if self.in_flight > 0 {
                break;
            }
            match self.oldest_ready_mode() {
                Some(m) => {
                    self.mode = Some(m);
                    self.switches += 1;
                    self.serial += self.hw.mode_switch_penalty;
                    self.switching_until = now + self.hw.mode_switch_penalty;
                    if self.switching_until > now {
                        self.queue.push(Reverse((self.switching_until, WAKE, 0)));
                        break;
                    }
                }
                None => break,
            }
        }
        // Pruner array: events of allocated domains start at once; new
        // domains are allocated in id order and allocation stops at the
        // first one that does not fit.
        let ready: Vec<u32> = self.pruner_ready.iter().copied().collect();
        let mut blocked = false;
        for id in ready {
            let key = domain_of(&self.trace.events[id as usize]);
            if !self.domains.contains_key(&key) {
                if blocked {
                    continue;
                }
                match self.pruner.allocate(self.span) {
                    Some(start) => {
                        self.domains.insert(key, (start, self.span));
                    }
                    None => {
                        blocked = true;
                        continue;
                    }
                }
            }
            self.pruner_ready.remove(&id);
            if self.pruner_active == 0 {
                self.pruner_since = now;
            }
            self.pruner_active += 1;
            self.start(id, now);
        }
    }

    fn oldest_ready_mode(&self) -> Option<Mode> {
        Mode::ALL
            .iter()
            .filter_map(|&m| self.ready[m.index()].iter().next().map(|&id| (id, m)))
            .min()
            .map(|(_, m)| m)
    }

    fn complete(&mut self, id: u32, now: u64) {
        let e = &self.trace.events[id as usize];
        match self.costs[id as usize].unit {
            Unit::Compute(m) => {
                self.free_pes += self.costs[id as usize].pes;
                self.in_flight -= 1;
                if self.in_flight == 0 {
                    self.busy_mode[m.index()] += now - self.busy_since;
                }
            }
            Unit::Pruner => {
                self.pruner_active -= 1;
                if self.pruner_active == 0 {
                    self.pruner_busy += now - self.pruner_since;
                }
                let key = domain_of(e);
                let left = self.domain_left.get_mut(&key).expect("counted domain");
                *left -= 1;
                if *left == 0 {
                    if let Some((start, span)) = self.domains.remove(&key) {
                        self.pruner.release(start, span);
                    }
                }
            }
        }
        let before = self.hbm.serial;
        let accesses = self.costs[id as usize].accesses.clone();
        for a in accesses.iter().filter(|a| a.write) {
            match (a.class, a.key) {
                (MemClass::FeatureCache, Some(k)) => {
                    self.cache_access(now, k, a.bytes as u64, true);
                }
                _ if self.off_chip(e, a) => {
                    self.hbm.request(now, a.bytes as u64, true);
                }
                _ => self.sram_bytes += a.bytes as u64,
            }
        }
        self.serial += self.hbm.serial - before;
        self.flops += e.flops;
        self.completed += 1;
        self.released[id as usize] = true;
        self.last_completion = now;

        let (a, b) = (self.dep_start[id as usize], self.dep_start[id as usize + 1]);
        for i in a..b {
            let d = self.dependents[i as usize];
            self.deps_left[d as usize] -= 1;
            if self.deps_left[d as usize] == 0 && d < self.admitted && self.fence_open(d) {
                self.dep_ready(d, now);
            }
        }
        let s = self.seg[id as usize] as usize;
        self.seg_left[s] -= 1;
        if s as u32 == self.segs_done {
            let nseg = self.seg_left.len() as u32;
            while self.segs_done < nseg && self.seg_left[self.segs_done as usize] == 0 {
                self.segs_done += 1;
                if self.segs_done < nseg {
                    let (lo, hi) = (
                        self.seg_start[self.segs_done as usize],
                        self.seg_start[self.segs_done as usize + 1].min(self.admitted),
                    );
                    for d in lo..hi {
                        if self.deps_left[d as usize] == 0 && !self.released[d as usize] {
                            self.dep_ready(d, now);
                        }
                    }
                }
            }
        }
        self.admit(now, false);
    }

    fn run(mut self) -> Result<SimResult> {
        let n = self.trace.events.len() as u32;
        if n == 0 {
            return Ok(SimResult::default());
        }
        // Weights and adjacency that fit on chip are loaded once up front.
        let meta = &self.trace.meta;
        let mut preload = 0;
        for (bytes, spill) in [
            (meta.weight_bytes, self.overflow[MemClass::WeightBuffer.index()]),
            (meta.edge_bytes, self.overflow[MemClass::EdgeBuffer.index()]),
        ] {
            if !spill && bytes > 0 {
                preload = preload.max(self.hbm.request(0, bytes, false));
            }
        }
        self.serial += self.hbm.serial;
        self.start_at = preload;
        self.admit(0, false);
        loop {
            while let Some(Reverse((t, phase, id))) = self.queue.pop() {
                match phase {
                    COMPLETE => self.complete(id, t),
                    DATA_READY => {
                        match self.costs[id as usize].unit {
                            Unit::Compute(m) => self.ready[m.index()].insert(id),
                            Unit::Pruner => self.pruner_ready.insert(id),
                        };
                    }
                    _ => {}
                }
                let next_same = self.queue.peek().is_some_and(|Reverse((t2, _, _))| *t2 == t);
                if !next_same {
                    self.dispatch(t);
                }
            }
            if self.completed == n {
                break;
            }
            if self.admitted < n {
                let now = self.last_completion;
                self.admit(now, true);
                self.dispatch(now);
                continue;
            }
            bail!(Internal, "simulation stalled with {} of {n} events complete", self.completed);
        }
        let total = self.last_completion.max(libm::ceil(self.hbm.free_at) as u64);
        let dram = self.hbm.bytes;
        let energy = energy_of(dram, self.sram_bytes, self.flops, &self.hw.energy);
        Ok(SimResult {
            total_cycles: total,
            busy: BusyCycles {
                systolic_i: self.busy_mode[0],
                systolic_c: self.busy_mode[1],
                simd: self.busy_mode[2],
                pruner: self.pruner_busy,
                hbm: libm::ceil(self.hbm.busy) as u64,
            },
            dram_bytes: dram,
            dram_read_bytes: self.hbm.read_bytes,
            dram_write_bytes: self.hbm.write_bytes,
            dram_transactions: self.hbm.transactions,
            cache: self.cache.stats,
            sram_bytes: self.sram_bytes,
            energy,
            flops: self.flops,
            achieved_gflops: if total == 0 {
                0.0
            } else {
                self.flops as f64 / total as f64 * self.hw.freq_ghz
            },
            mode_switches: self.switches,
            compute_cycles: self.compute_cycles,
            serial_cycles: self.serial,
            window_overflows: self.overflows,
        })
    }
}

/// Simulates `trace` on `hw`. Deterministic for a given input.
pub fn simulate(trace: &Trace, hw: &HardwareConfig) -> Result<SimResult> {
    Sim::new(trace, hw)?.run()
}

/// Longest dependency chain (fences included) counting compute and pruner
/// cycles only.
pub fn critical_path(trace: &Trace, hw: &HardwareConfig) -> Result<u64> {
    let seg = trace.segments();
    let nseg = seg.last().map_or(0, |&s| s as usize + 1);
    let mut seg_end = vec![0u64; nseg + 1];
    let mut finish = vec![0u64; trace.events.len()];
    for (id, e) in trace.events.iter().enumerate() {
        let s = seg[id] as usize;
        let mut start = if s == 0 { 0 } else { seg_end[s - 1] };
        for &d in &e.deps {
            if d as usize >= id {
                bail!(Contract, "event {id} depends on event {d}: the trace is not topologically ordered");
            }
            start = start.max(finish[d as usize]);
        }
        finish[id] = start + event_cost(e, &trace.meta, hw)?.cycles;
        seg_end[s] = seg_end[s].max(finish[id]);
        if s > 0 {
            seg_end[s] = seg_end[s].max(seg_end[s - 1]);
        }
    }
    Ok(finish.into_iter().max().unwrap_or(0))
}
