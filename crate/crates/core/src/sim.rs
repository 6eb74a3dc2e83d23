//! Discrete-event model of a device with one compute stream and two DMA
//! channels (remote-to-device in, device-to-remote out) backed by a
//! first-fit device allocator and a remote pool.
//!
//! Issue rules, per op in schedule order:
//!
//! * streams are FIFO: an op waits for the previous op on its stream;
//! * every dependency predecessor must have completed;
//! * a DMA op also waits for every compute-stream op placed before it in
//!   the order, so its position in the order decides when it may start.
//!
//! Compute outputs and Prefetch targets are allocated when the op starts.
//! A tensor is released when its last reader completes, or at a Detach.
//! An allocation that fails for lack of a contiguous extent triggers a
//! compaction stall; one that fails for lack of bytes ends the run with an
//! OOM record.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::alloc::{AllocError, DeviceAllocator};
use crate::error::{Error, Result};
use crate::graph::{
    check_schedule, GraphIndex, GraphProgram, OpId, OpKind, Schedule, Stream, TensorId, Tier,
};
use crate::machine::{bytes_over_bandwidth_us, Channel, MachineModel};
use crate::memory::estimate_transfer_us;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub op: OpId,
    pub stream: Stream,
    pub start_us: u64,
    pub end_us: u64,
    /// Requested bytes resident on device right after the op's start-time
    /// allocations.
    pub live_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySample {
    pub time_us: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Device,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OomRecord {
    /// `None` when graph inputs alone do not fit.
    pub op: Option<OpId>,
    pub pool: Pool,
    pub requested_bytes: u64,
    pub free_bytes: u64,
    pub largest_contiguous_bytes: u64,
    pub time_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    pub makespan_us: u64,
    pub peak_device_bytes: u64,
    pub exposed_comm_us: u64,
    pub overlapped_comm_us: u64,
    pub dma_busy_us: u64,
    pub compute_busy_us: u64,
    pub defrag_events: u64,
    pub defrag_time_us: u64,
    pub timeline: Vec<TimelineEntry>,
    pub memory: Vec<MemorySample>,
    pub oom: Option<OomRecord>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Storage bookkeeping shared by every version of an aliased tensor.
#[derive(Debug, Clone)]
pub(crate) struct Storage {
    pub root: TensorId,
    pub bytes: u64,
    pub tier: Tier,
    pub accessed: bool,
    pub remaining_reads: usize,
    pub pending_producers: usize,
    pub pending_stores: usize,
    pub in_remote: bool,
    /// The root tensor is a graph input (no op produces it).
    pub is_input: bool,
}

/// Maps tensors onto storage groups and counts outstanding accesses.
#[derive(Debug, Clone)]
pub(crate) struct StorageMap {
    pub group_of: std::collections::HashMap<TensorId, usize>,
    pub groups: Vec<Storage>,
}

impl StorageMap {
    pub fn new(g: &GraphProgram) -> Self {
        let mut group_of = std::collections::HashMap::new();
        let mut groups: Vec<Storage> = Vec::new();
        let mut root_group = std::collections::HashMap::new();
        for t in &g.tensors {
            let root = g.storage_root(t.id);
            let gi = *root_group.entry(root).or_insert_with(|| {
                let decl = g.tensor(root).expect("validated alias root");
                groups.push(Storage {
                    root,
                    bytes: decl.bytes,
                    tier: decl.initial_tier,
                    accessed: false,
                    remaining_reads: 0,
                    pending_producers: 0,
                    pending_stores: 0,
                    in_remote: decl.initial_tier == Tier::Remote,
                    is_input: true,
                });
                groups.len() - 1
            });
            group_of.insert(t.id, gi);
        }
        for op in &g.ops {
            match op.kind {
                OpKind::Compute { .. } => {
                    for t in distinct(&op.inputs) {
                        let s = &mut groups[group_of[&t]];
                        s.remaining_reads += 1;
                        s.accessed = true;
                    }
                    for t in distinct(&op.outputs) {
                        let s = &mut groups[group_of[&t]];
                        s.pending_producers += 1;
                        s.accessed = true;
                        if s.root == t {
                            s.is_input = false;
                        }
                    }
                }
                OpKind::Store { tensor_id } => groups[group_of[&tensor_id]].pending_stores += 1,
                _ => {}
            }
        }
        StorageMap { group_of, groups }
    }

    pub fn is_dead(&self, gi: usize) -> bool {
        let s = &self.groups[gi];
        s.remaining_reads == 0 && s.pending_producers == 0 && s.pending_stores == 0
    }
}

pub(crate) fn distinct(ts: &[TensorId]) -> BTreeSet<TensorId> {
    ts.iter().copied().collect()
}

/// Device memory plus the statistics every executor reports.
pub(crate) struct DeviceState {
    pub alloc: DeviceAllocator,
    pub memory: Vec<MemorySample>,
    pub peak: u64,
    pub defrag_events: u64,
    pub defrag_time_us: u64,
    pub remote_used: u64,
    compaction_bw: u64,
}

pub(crate) enum Placement {
    /// Allocated after `stall_us` of compaction.
    Placed {
        stall_us: u64,
    },
    Oom(OomRecord),
}

impl DeviceState {
    pub fn new(m: &MachineModel) -> Self {
        DeviceState {
            alloc: DeviceAllocator::new(m.device_capacity_bytes, m.allocator_alignment_bytes),
            memory: Vec::new(),
            peak: 0,
            defrag_events: 0,
            defrag_time_us: 0,
            remote_used: 0,
            compaction_bw: m.compaction_bandwidth_bytes_per_us,
        }
    }

    fn sample(&mut self, now: u64) {
        let bytes = self.alloc.live_bytes();
        self.peak = self.peak.max(bytes);
        self.memory.push(MemorySample {
            time_us: now,
            bytes,
        });
    }

    pub fn place(&mut self, id: TensorId, bytes: u64, now: u64, op: Option<OpId>) -> Placement {
        let stall_us = match self.alloc.allocate(id, bytes) {
            Ok(_) => 0,
            Err(AllocError::Fragmented { .. }) => {
                let moved = self.alloc.compact_for(bytes);
                let stall = bytes_over_bandwidth_us(moved, self.compaction_bw);
                self.defrag_events += 1;
                self.defrag_time_us += stall;
                self.alloc
                    .allocate(id, bytes)
                    .expect("compaction opens a large enough extent");
                stall
            }
            Err(AllocError::OutOfMemory { free, largest }) => {
                return Placement::Oom(OomRecord {
                    op,
                    pool: Pool::Device,
                    requested_bytes: bytes,
                    free_bytes: free,
                    largest_contiguous_bytes: largest,
                    time_us: now,
                })
            }
        };
        self.sample(now + stall_us);
        Placement::Placed { stall_us }
    }

    pub fn release(&mut self, id: TensorId, now: u64) {
        if self.alloc.release(id).is_some() {
            self.sample(now);
        }
    }

    pub fn check(&self) -> Result<()> {
        self.alloc.check_invariants()
    }
}

pub(crate) fn transfer_us(bytes: u64, m: &MachineModel, ch: Channel) -> Result<u64> {
    let t = crate::graph::TensorDecl::new(0, bytes, crate::graph::TensorKind::Workspace);
    estimate_transfer_us(&t, m, ch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpState {
    Waiting,
    Running,
    Done,
}

/// Runs `s` on machine `m`.
pub fn simulate(g: &GraphProgram, s: &Schedule, m: &MachineModel) -> Result<SimReport> {
    m.validate()?;
    check_schedule(g, s)?;
    Sim::new(g, s, m)?.run()
}

struct Sim<'a> {
    g: &'a GraphProgram,
    m: &'a MachineModel,
    idx: GraphIndex,
    /// op indices per stream, in schedule order
    queues: [Vec<usize>; 3],
    heads: [usize; 3],
    running: [Option<usize>; 3],
    /// compute-stream ops before each op's schedule position
    compute_before: Vec<usize>,
    compute_done: usize,
    state: Vec<OpState>,
    done_at: Vec<u64>,
    events: BinaryHeap<Reverse<(u64, usize, OpId, usize)>>,
    storage: StorageMap,
    dev: DeviceState,
    report: SimReport,
    last_compute_end: u64,
}

impl<'a> Sim<'a> {
    fn new(g: &'a GraphProgram, s: &Schedule, m: &'a MachineModel) -> Result<Self> {
        let idx = GraphIndex::new(g);
        let mut queues: [Vec<usize>; 3] = Default::default();
        let mut compute_before = vec![0; g.ops.len()];
        let mut seen_compute = 0;
        for id in &s.order {
            let i = idx.op_index[id];
            let st = g.ops[i].kind.stream();
            compute_before[i] = seen_compute;
            if st == Stream::Compute {
                seen_compute += 1;
            }
            queues[st.index()].push(i);
        }
        Ok(Sim {
            g,
            m,
            storage: StorageMap::new(g),
            queues,
            heads: [0; 3],
            running: [None; 3],
            compute_before,
            compute_done: 0,
            state: vec![OpState::Waiting; g.ops.len()],
            done_at: vec![0; g.ops.len()],
            events: BinaryHeap::new(),
            dev: DeviceState::new(m),
            report: SimReport::default(),
            last_compute_end: 0,
            idx,
        })
    }

    fn run(mut self) -> Result<SimReport> {
        // graph inputs on device are resident from t = 0
        for gi in 0..self.storage.groups.len() {
            let st = &self.storage.groups[gi];
            if st.tier == Tier::Device && st.accessed && st.is_input {
                let (root, bytes) = (st.root, st.bytes);
                if let Placement::Oom(rec) = self.dev.place(root, bytes, 0, None) {
                    return Ok(self.finish(Some(rec), 0));
                }
            }
        }
        self.dev.check()?;

        let mut now = 0;
        loop {
            while let Some(&Reverse((t, _, _, i))) = self.events.peek() {
                if t != now {
                    break;
                }
                self.events.pop();
                self.complete(i, now)?;
            }
            if let Some(rec) = self.start_ready(now)? {
                return Ok(self.finish(Some(rec), now));
            }
            self.dev.check()?;
            match self.events.peek() {
                Some(&Reverse((t, ..))) => now = t,
                None => break,
            }
        }
        if self.state.iter().any(|&s| s != OpState::Done) {
            return Err(Error::InvalidSchedule(
                "simulation stalled with ops still waiting".into(),
            ));
        }
        let end = self.done_at.iter().copied().max().unwrap_or(0);
        Ok(self.finish(None, end))
    }

    fn finish(mut self, oom: Option<OomRecord>, end: u64) -> SimReport {
        let r = &mut self.report;
        r.makespan_us = end;
        r.peak_device_bytes = self.dev.peak;
        r.defrag_events = self.dev.defrag_events;
        r.defrag_time_us = self.dev.defrag_time_us;
        r.overlapped_comm_us = r.dma_busy_us.saturating_sub(r.exposed_comm_us);
        r.memory = std::mem::take(&mut self.dev.memory);
        r.oom = oom;
        self.report
    }

    fn is_ready(&self, i: usize) -> bool {
        let st = self.g.ops[i].kind.stream();
        self.idx.preds[i]
            .iter()
            .all(|&p| self.state[p] == OpState::Done)
            && (st == Stream::Compute || self.compute_done >= self.compute_before[i])
    }

    fn start_ready(&mut self, now: u64) -> Result<Option<OomRecord>> {
        loop {
            let mut progressed = false;
            for st in Stream::ALL {
                let k = st.index();
                if self.running[k].is_some() || self.heads[k] >= self.queues[k].len() {
                    continue;
                }
                let i = self.queues[k][self.heads[k]];
                if !self.is_ready(i) {
                    continue;
                }
                if let Some(rec) = self.start(i, now)? {
                    return Ok(Some(rec));
                }
                progressed = true;
            }
            if !progressed {
                return Ok(None);
            }
        }
    }

    fn start(&mut self, i: usize, now: u64) -> Result<Option<OomRecord>> {
        let op = &self.g.ops[i];
        let st = op.kind.stream();
        let mut stall = 0;
        let duration = match op.kind {
            OpKind::Compute { cost_us } => {
                for t in distinct(&op.inputs) {
                    let gi = self.storage.group_of[&t];
                    if !self.dev.alloc.is_live(self.storage.groups[gi].root) {
                        return Err(Error::NotResident {
                            op: op.id,
                            tensor: t,
                        });
                    }
                }
                for t in distinct(&op.outputs) {
                    let gi = self.storage.group_of[&t];
                    let (root, bytes) =
                        (self.storage.groups[gi].root, self.storage.groups[gi].bytes);
                    if !self.dev.alloc.is_live(root) {
                        match self.dev.place(root, bytes, now + stall, Some(op.id)) {
                            Placement::Placed { stall_us } => stall += stall_us,
                            Placement::Oom(rec) => return Ok(Some(rec)),
                        }
                    }
                }
                cost_us
            }
            OpKind::Prefetch { tensor_id } => {
                let gi = self.storage.group_of[&tensor_id];
                let (root, bytes) = (self.storage.groups[gi].root, self.storage.groups[gi].bytes);
                if !self.dev.alloc.is_live(root) {
                    match self.dev.place(root, bytes, now, Some(op.id)) {
                        Placement::Placed { stall_us } => stall += stall_us,
                        Placement::Oom(rec) => return Ok(Some(rec)),
                    }
                }
                transfer_us(bytes, self.m, Channel::R2D)?
            }
            OpKind::Store { tensor_id } => {
                let gi = self.storage.group_of[&tensor_id];
                let s = &mut self.storage.groups[gi];
                if !self.dev.alloc.is_live(s.root) {
                    return Err(Error::NotResident {
                        op: op.id,
                        tensor: tensor_id,
                    });
                }
                if !s.in_remote {
                    s.in_remote = true;
                    self.dev.remote_used += s.bytes;
                    if self.dev.remote_used > self.m.remote_capacity_bytes {
                        return Ok(Some(OomRecord {
                            op: Some(op.id),
                            pool: Pool::Remote,
                            requested_bytes: s.bytes,
                            free_bytes: self.m.remote_capacity_bytes
                                - (self.dev.remote_used - s.bytes),
                            largest_contiguous_bytes: 0,
                            time_us: now,
                        }));
                    }
                }
                transfer_us(s.bytes, self.m, Channel::D2R)?
            }
            OpKind::Detach { tensor_id } => {
                let gi = self.storage.group_of[&tensor_id];
                let root = self.storage.groups[gi].root;
                self.dev.release(root, now);
                0
            }
        };

        if st == Stream::Compute {
            // idle compute time is exposed when the last thing it waited on
            // was a transfer
            if now > self.last_compute_end {
                let blocker = self.idx.preds[i]
                    .iter()
                    .copied()
                    .max_by_key(|&p| (self.done_at[p], p));
                if let Some(p) = blocker {
                    if self.done_at[p] > self.last_compute_end
                        && self.g.ops[p].kind.stream() != Stream::Compute
                    {
                        self.report.exposed_comm_us += now - self.last_compute_end;
                    }
                }
            }
            self.report.compute_busy_us += duration;
        } else {
            self.report.dma_busy_us += duration;
        }

        let start = now + stall;
        let end = start + duration;
        self.report.timeline.push(TimelineEntry {
            op: op.id,
            stream: st,
            start_us: start,
            end_us: end,
            live_bytes: self.dev.alloc.live_requested_bytes(),
        });
        self.state[i] = OpState::Running;
        self.heads[st.index()] += 1;
        if end == now {
            self.complete(i, now)?;
        } else {
            self.running[st.index()] = Some(i);
            self.events.push(Reverse((end, st.index(), op.id, i)));
        }
        Ok(None)
    }

    fn complete(&mut self, i: usize, now: u64) -> Result<()> {
        let op = &self.g.ops[i];
        let st = op.kind.stream();
        self.state[i] = OpState::Done;
        self.done_at[i] = now;
        if self.running[st.index()] == Some(i) {
            self.running[st.index()] = None;
        }
        let mut touched = BTreeSet::new();
        match op.kind {
            OpKind::Compute { .. } => {
                for t in distinct(&op.inputs) {
                    let gi = self.storage.group_of[&t];
                    self.storage.groups[gi].remaining_reads -= 1;
                    touched.insert(gi);
                }
                for t in distinct(&op.outputs) {
                    let gi = self.storage.group_of[&t];
                    self.storage.groups[gi].pending_producers -= 1;
                    touched.insert(gi);
                }
            }
            OpKind::Store { tensor_id } => {
                let gi = self.storage.group_of[&tensor_id];
                self.storage.groups[gi].pending_stores -= 1;
                touched.insert(gi);
            }
            OpKind::Prefetch { tensor_id } => {
                touched.insert(self.storage.group_of[&tensor_id]);
            }
            OpKind::Detach { .. } => {}
        }
        if st == Stream::Compute {
            self.compute_done += 1;
            self.last_compute_end = now;
        }
        for gi in touched {
            if self.storage.is_dead(gi) {
                let root = self.storage.groups[gi].root;
                self.dev.release(root, now);
            }
        }
        Ok(())
    }
}

/// Peak device bytes with every tensor on device, no cache operators and
/// unbounded capacity.
pub fn peak_memory_no_offload(g: &GraphProgram, s: &Schedule, m: &MachineModel) -> Result<u64> {
    let (base, order) = no_offload_variant(g, s)?;
    Ok(simulate(&base, &order, &m.unbounded())?.peak_device_bytes)
}

/// `g` with cache operators removed and every tensor starting on device;
/// the schedule keeps the remaining ops in their original order.
pub fn no_offload_variant(g: &GraphProgram, s: &Schedule) -> Result<(GraphProgram, Schedule)> {
    let mut base = g.clone();
    let cache: BTreeSet<OpId> = g.cache_ops().map(|o| o.id).collect();
    base.ops.retain(|o| !cache.contains(&o.id));
    base.control_edges
        .retain(|(a, b)| !cache.contains(a) && !cache.contains(b));
    for t in &mut base.tensors {
        t.initial_tier = Tier::Device;
    }
    let order = s
        .order
        .iter()
        .copied()
        .filter(|id| !cache.contains(id))
        .collect();
    let sched = Schedule::from_order(&base, order)?;
    Ok((base, sched))
}
