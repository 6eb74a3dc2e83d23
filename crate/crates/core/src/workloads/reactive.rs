//! On-demand executor: ops run one at a time, missing tensors are loaded
//! synchronously just before use and device pressure is relieved by
//! evicting the least recently used tensors.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::{
    check_schedule, GraphIndex, GraphProgram, OpId, OpKind, Schedule, Stream, Tier,
};
use crate::machine::{Channel, MachineModel};
use crate::sim::{
    distinct, transfer_us, DeviceState, OomRecord, Placement, SimReport, StorageMap, TimelineEntry,
};

struct Reactive<'a> {
    g: &'a GraphProgram,
    m: &'a MachineModel,
    storage: StorageMap,
    dev: DeviceState,
    report: SimReport,
    /// a valid copy of the group exists in the remote pool
    clean_remote: Vec<bool>,
    last_used: Vec<u64>,
    now: u64,
}

pub fn run_reactive_baseline(
    g: &GraphProgram,
    s: &Schedule,
    m: &MachineModel,
) -> Result<SimReport> {
    m.validate()?;
    check_schedule(g, s)?;
    if let Some(op) = g.cache_ops().next() {
        return Err(Error::InvalidSchedule(format!(
            "the reactive baseline runs graphs without cache operators; found {}",
            op.id
        )));
    }
    let storage = StorageMap::new(g);
    let clean_remote = storage
        .groups
        .iter()
        .map(|s| s.tier == Tier::Remote)
        .collect();
    let n = storage.groups.len();
    let mut r = Reactive {
        g,
        m,
        storage,
        dev: DeviceState::new(m),
        report: SimReport::default(),
        clean_remote,
        last_used: vec![0; n],
        now: 0,
    };
    let oom = r.run(s)?;
    Ok(r.finish(oom))
}

impl Reactive<'_> {
    fn run(&mut self, s: &Schedule) -> Result<Option<OomRecord>> {
        // device inputs that do not fit start out in the remote pool
        for gi in 0..self.storage.groups.len() {
            let st = &self.storage.groups[gi];
            if st.tier == Tier::Device && st.accessed && st.is_input {
                let (root, bytes) = (st.root, st.bytes);
                if self.dev.alloc.free_bytes() >= self.dev.alloc.aligned_len(bytes) {
                    if let Placement::Oom(rec) = self.dev.place(root, bytes, 0, None) {
                        return Ok(Some(rec));
                    }
                } else {
                    self.clean_remote[gi] = true;
                }
            }
        }
        self.dev.check()?;

        let idx = GraphIndex::new(self.g);
        for (seq, id) in s.order.iter().enumerate() {
            let i = idx.op_index[id];
            if let Some(rec) = self.execute(i, seq as u64 + 1)? {
                return Ok(Some(rec));
            }
            self.dev.check()?;
        }
        Ok(None)
    }

    fn finish(mut self, oom: Option<OomRecord>) -> SimReport {
        let r = &mut self.report;
        r.makespan_us = self.now;
        r.peak_device_bytes = self.dev.peak;
        r.defrag_events = self.dev.defrag_events;
        r.defrag_time_us = self.dev.defrag_time_us;
        r.overlapped_comm_us = r.dma_busy_us.saturating_sub(r.exposed_comm_us);
        r.memory = std::mem::take(&mut self.dev.memory);
        r.oom = oom;
        self.report
    }

    fn execute(&mut self, i: usize, seq: u64) -> Result<Option<OomRecord>> {
        let op = &self.g.ops[i];
        let OpKind::Compute { cost_us } = op.kind else {
            unreachable!("cache ops rejected up front");
        };
        let inputs: BTreeSet<usize> = distinct(&op.inputs)
            .into_iter()
            .map(|t| self.storage.group_of[&t])
            .collect();
        let outputs: BTreeSet<usize> = distinct(&op.outputs)
            .into_iter()
            .map(|t| self.storage.group_of[&t])
            .collect();
        let in_use: BTreeSet<usize> = inputs.union(&outputs).copied().collect();

        for &gi in &inputs {
            if !self.resident(gi) {
                if !self.clean_remote[gi] {
                    return Err(Error::NotResident {
                        op: op.id,
                        tensor: self.storage.groups[gi].root,
                    });
                }
                if let Some(rec) = self.make_room(gi, &in_use, op.id)? {
                    return Ok(Some(rec));
                }
                let bytes = self.storage.groups[gi].bytes;
                let d = self.m.reactive_orchestration_overhead_us
                    + transfer_us(bytes, self.m, Channel::R2D)?;
                self.transfer(op.id, Stream::DmaIn, d);
            }
        }
        for &gi in &outputs {
            if !self.resident(gi) {
                if let Some(rec) = self.make_room(gi, &in_use, op.id)? {
                    return Ok(Some(rec));
                }
            }
            // written: any remote copy is now stale
            self.clean_remote[gi] = false;
        }
        for &gi in &in_use {
            self.last_used[gi] = seq;
        }

        let start = self.now;
        self.now += cost_us;
        self.report.compute_busy_us += cost_us;
        self.report.timeline.push(TimelineEntry {
            op: op.id,
            stream: Stream::Compute,
            start_us: start,
            end_us: self.now,
            live_bytes: self.dev.alloc.live_requested_bytes(),
        });

        for &gi in &inputs {
            self.storage.groups[gi].remaining_reads -= 1;
        }
        for &gi in &outputs {
            self.storage.groups[gi].pending_producers -= 1;
        }
        for &gi in &in_use {
            if self.storage.is_dead(gi) {
                let root = self.storage.groups[gi].root;
                self.dev.release(root, self.now);
            }
        }
        Ok(None)
    }

    fn resident(&self, gi: usize) -> bool {
        self.dev.alloc.is_live(self.storage.groups[gi].root)
    }

    fn transfer(&mut self, op: OpId, stream: Stream, d: u64) {
        self.report.timeline.push(TimelineEntry {
            op,
            stream,
            start_us: self.now,
            end_us: self.now + d,
            live_bytes: self.dev.alloc.live_requested_bytes(),
        });
        self.now += d;
        self.report.dma_busy_us += d;
        self.report.exposed_comm_us += d;
    }

    /// Evicts least recently used groups until `gi` fits by total free
    /// bytes, then places it (compacting if the free space is scattered).
    fn make_room(
        &mut self,
        gi: usize,
        in_use: &BTreeSet<usize>,
        op: OpId,
    ) -> Result<Option<OomRecord>> {
        let (root, bytes) = (self.storage.groups[gi].root, self.storage.groups[gi].bytes);
        let need = self.dev.alloc.aligned_len(bytes);
        while self.dev.alloc.free_bytes() < need {
            let victim = (0..self.storage.groups.len())
                .filter(|&v| {
                    !in_use.contains(&v)
                        && self.resident(v)
                        && !self
                            .g
                            .tensor(self.storage.groups[v].root)
                            .is_some_and(|t| t.pinned)
                })
                .min_by_key(|&v| (self.last_used[v], self.storage.groups[v].root));
            let Some(v) = victim else {
                return Ok(Some(OomRecord {
                    op: Some(op),
                    pool: crate::sim::Pool::Device,
                    requested_bytes: bytes,
                    free_bytes: self.dev.alloc.free_bytes(),
                    largest_contiguous_bytes: self.dev.alloc.largest_free(),
                    time_us: self.now,
                }));
            };
            if !self.clean_remote[v] {
                let vb = self.storage.groups[v].bytes;
                if let Some(rec) = self.remote_reserve(v, op)? {
                    return Ok(Some(rec));
                }
                let d = self.m.reactive_orchestration_overhead_us
                    + transfer_us(vb, self.m, Channel::D2R)?;
                self.transfer(op, Stream::DmaOut, d);
                self.clean_remote[v] = true;
            }
            let vroot = self.storage.groups[v].root;
            self.dev.release(vroot, self.now);
        }
        match self.dev.place(root, bytes, self.now, Some(op)) {
            Placement::Placed { stall_us } => {
                self.now += stall_us;
                Ok(None)
            }
            Placement::Oom(rec) => Ok(Some(rec)),
        }
    }

    fn remote_reserve(&mut self, v: usize, op: OpId) -> Result<Option<OomRecord>> {
        let st = &mut self.storage.groups[v];
        if st.in_remote {
            return Ok(None);
        }
        st.in_remote = true;
        self.dev.remote_used += st.bytes;
        if self.dev.remote_used > self.m.remote_capacity_bytes {
            return Ok(Some(OomRecord {
                op: Some(op),
                pool: crate::sim::Pool::Remote,
                requested_bytes: st.bytes,
                free_bytes: self.m.remote_capacity_bytes - (self.dev.remote_used - st.bytes),
                largest_contiguous_bytes: 0,
                time_us: self.now,
            }));
        }
        Ok(None)
    }
}

/// Remote-tier inputs of `g` rewritten to start on device, for comparing
/// against a run where everything is resident.
pub fn all_on_device(g: &GraphProgram) -> GraphProgram {
    let mut out = g.clone();
    for t in &mut out.tensors {
        t.initial_tier = Tier::Device;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{topo_order, OpNode, TensorDecl, TensorId, TensorKind};
    use crate::sim::simulate;
    use crate::workloads::decode::{gen_llm_decode, DecodeSpec, KvReload};

    fn machine(capacity: u64, overhead: u64) -> MachineModel {
        MachineModel {
            device_capacity_bytes: capacity,
            r2d_bandwidth_bytes_per_us: 1_000,
            d2r_bandwidth_bytes_per_us: 1_000,
            transfer_fixed_latency_us: 0,
            reactive_orchestration_overhead_us: overhead,
            ..MachineModel::default()
        }
    }

    #[test]
    fn matches_simulate_when_everything_fits() {
        let sp = DecodeSpec {
            layers: 3,
            kv_bytes_per_layer_per_token: 512,
            weight_bytes_per_layer: 1 << 20,
            prefill_tokens: 1000,
            decode_steps: 2,
            prefill_cost_us_per_layer: 300,
            decode_cost_us_per_layer: 20,
            workspace_bytes_per_layer_per_token: 64,
            hidden_bytes: 4096,
            weight_tier: Tier::Device,
            kv_reload: KvReload::PerStep,
            kv_blocks_per_layer: 1,
        };
        let g = gen_llm_decode(&sp).unwrap();
        let s = topo_order(&g).unwrap();
        let m = MachineModel::default();
        assert_eq!(
            run_reactive_baseline(&g, &s, &m).unwrap(),
            simulate(&g, &s, &m).unwrap()
        );
    }

    #[test]
    fn round_trips_are_fully_exposed() {
        // two 100 kB activations, room for one: each goes out and back once
        let g = GraphProgram {
            tensors: vec![
                TensorDecl::new(0, 100_000, TensorKind::Activation),
                TensorDecl::new(1, 100_000, TensorKind::Activation),
            ],
            ops: vec![
                OpNode::compute(0, 10, &[], &[0]),
                OpNode::compute(1, 10, &[], &[1]),
                OpNode::compute(2, 10, &[0], &[]),
                OpNode::compute(3, 10, &[1], &[]),
            ],
            control_edges: vec![],
        };
        let s = topo_order(&g).unwrap();
        let overhead = 7;
        let r = run_reactive_baseline(&g, &s, &machine(120_000, overhead)).unwrap();
        assert!(r.oom.is_none());
        // a0 out, a1 out + a0 in, a1 in: 2 round trips of 100 µs each way
        let round_trips = 2 * (100 + 100);
        assert_eq!(r.exposed_comm_us, round_trips + 4 * overhead);
        assert_eq!(r.makespan_us, 40 + r.exposed_comm_us);
        assert_eq!(r.dma_busy_us, r.exposed_comm_us);
    }

    #[test]
    fn remote_inputs_load_on_demand() {
        let g = GraphProgram {
            tensors: vec![TensorDecl::new(0, 50_000, TensorKind::Weight).remote()],
            ops: vec![OpNode::compute(0, 10, &[0], &[])],
            control_edges: vec![],
        };
        let s = topo_order(&g).unwrap();
        let r = run_reactive_baseline(&g, &s, &machine(1 << 20, 5)).unwrap();
        assert_eq!(r.exposed_comm_us, 55);
        assert_eq!(r.makespan_us, 65);
    }

    #[test]
    fn rejects_cache_ops() {
        let g = GraphProgram {
            tensors: vec![TensorDecl::new(0, 64, TensorKind::Weight).remote()],
            ops: vec![
                OpNode::compute(0, 1, &[0], &[]),
                OpNode::cache(
                    OpId(1),
                    OpKind::Prefetch {
                        tensor_id: TensorId(0),
                    },
                ),
            ],
            control_edges: vec![(OpId(1), OpId(0))],
        };
        let s = topo_order(&g).unwrap();
        assert!(run_reactive_baseline(&g, &s, &MachineModel::default()).is_err());
    }
}
