//! Tensor lifetime analysis and offload candidate selection.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    check_schedule, GraphIndex, GraphProgram, Schedule, TensorDecl, TensorId, TensorKind, Tier,
};
use crate::machine::{bytes_over_bandwidth_us, Channel, MachineModel};

/// Inclusive range of schedule positions during which a tensor is untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdleWindow {
    pub from_pos: usize,
    pub to_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifetime {
    pub tensor_id: TensorId,
    pub def_pos: usize,
    pub last_use_pos: usize,
    pub idle_windows: Vec<IdleWindow>,
    /// Positions of the ops that produce or read the tensor, ascending.
    pub accesses: Vec<usize>,
}

/// Def/last-use positions and idle windows for every tensor under `s`.
///
/// Device-resident graph inputs are live from position 0; a remote input
/// becomes live at its first access. Cache operators are not accesses.
pub fn compute_lifetimes(g: &GraphProgram, s: &Schedule) -> Result<BTreeMap<TensorId, Lifetime>> {
    check_schedule(g, s)?;
    let idx = GraphIndex::new(g);
    let pos = s.positions();
    let mut out = BTreeMap::new();
    for (ti, t) in g.tensors.iter().enumerate() {
        let mut accesses: Vec<usize> = idx.producers[ti]
            .iter()
            .chain(idx.readers[ti].iter())
            .map(|&oi| pos[&g.ops[oi].id])
            .collect();
        accesses.sort_unstable();
        accesses.dedup();

        let is_input = idx.producers[ti].is_empty();
        let mut idle_windows = Vec::new();
        let def_pos = if is_input && t.initial_tier == Tier::Device {
            if let Some(&first) = accesses.first() {
                if first > 0 {
                    idle_windows.push(IdleWindow {
                        from_pos: 0,
                        to_pos: first - 1,
                    });
                }
            }
            0
        } else {
            accesses.first().copied().unwrap_or(0)
        };
        for w in accesses.windows(2) {
            if w[1] > w[0] + 1 {
                idle_windows.push(IdleWindow {
                    from_pos: w[0] + 1,
                    to_pos: w[1] - 1,
                });
            }
        }
        let last_use_pos = accesses.last().copied().unwrap_or(def_pos).max(def_pos);
        out.insert(
            t.id,
            Lifetime {
                tensor_id: t.id,
                def_pos,
                last_use_pos,
                idle_windows,
                accesses,
            },
        );
    }
    Ok(out)
}

/// Bytes the no-offload execution holds on device while the op at `pos`
/// runs. Alias groups are counted once; tensors no op touches are never live.
pub fn live_bytes_at(
    g: &GraphProgram,
    lifetimes: &BTreeMap<TensorId, Lifetime>,
    pos: usize,
) -> u64 {
    let mut groups: BTreeMap<TensorId, (usize, usize)> = BTreeMap::new();
    for t in &g.tensors {
        let lt = &lifetimes[&t.id];
        if lt.accesses.is_empty() {
            continue;
        }
        let root = g.storage_root(t.id);
        let e = groups.entry(root).or_insert((lt.def_pos, lt.last_use_pos));
        e.0 = e.0.min(lt.def_pos);
        e.1 = e.1.max(lt.last_use_pos);
    }
    groups
        .iter()
        .filter(|(_, &(d, l))| d <= pos && pos <= l)
        .map(|(root, _)| g.tensor(*root).map_or(0, |t| t.bytes))
        .sum()
}

/// Fixed latency plus `bytes / bandwidth`, rounded to the nearest µs.
pub fn estimate_transfer_us(t: &TensorDecl, m: &MachineModel, direction: Channel) -> Result<u64> {
    let bw = m.bandwidth(direction);
    if bw == 0 {
        return Err(Error::ZeroBandwidth(direction.as_str()));
    }
    Ok(m.transfer_fixed_latency_us + bytes_over_bandwidth_us(t.bytes, bw))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidatePolicy {
    /// An idle window must last more than this many round trips.
    pub min_gap_ratio: f64,
    pub min_tensor_bytes: u64,
    pub kinds_enabled: BTreeSet<TensorKind>,
}

impl Default for CandidatePolicy {
    fn default() -> Self {
        CandidatePolicy {
            min_gap_ratio: 2.0,
            min_tensor_bytes: 1 << 20,
            kinds_enabled: [
                TensorKind::Activation,
                TensorKind::OptimizerState,
                TensorKind::KvBlock,
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl CandidatePolicy {
    pub fn validate(&self) -> Result<()> {
        if !self.min_gap_ratio.is_finite() || self.min_gap_ratio < 1.0 {
            return Err(Error::InvalidPolicy(format!(
                "min_gap_ratio must be a finite value >= 1, got {}",
                self.min_gap_ratio
            )));
        }
        Ok(())
    }
}

/// One offload/reload cycle. `evict_after_pos` is `None` for a device input
/// that can leave before the first op runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub tensor_id: TensorId,
    pub evict_after_pos: Option<usize>,
    pub reload_before_pos: usize,
}

/// Remote-resident input that must be brought in before its first reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteLoad {
    pub tensor_id: TensorId,
    pub reload_before_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadPlan {
    pub entries: Vec<PlanEntry>,
    #[serde(default)]
    pub remote_loads: Vec<RemoteLoad>,
    pub policy: CandidatePolicy,
}

impl OffloadPlan {
    pub fn empty(policy: CandidatePolicy) -> Self {
        OffloadPlan {
            entries: Vec::new(),
            remote_loads: Vec::new(),
            policy,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialization is infallible")
    }
}

/// Per-position compute cost prefix sums: `prefix[i]` is the cost of ops
/// at positions `< i`.
pub(crate) fn compute_prefix(g: &GraphProgram, order: &[crate::graph::OpId]) -> Vec<u64> {
    let idx = GraphIndex::new(g);
    let mut prefix = Vec::with_capacity(order.len() + 1);
    prefix.push(0);
    let mut acc = 0;
    for id in order {
        acc += g.ops[idx.op_index[id]].kind.compute_cost();
        prefix.push(acc);
    }
    prefix
}

/// Picks the tensors whose largest idle window is long enough to hide a
/// full round trip `min_gap_ratio` times over.
pub fn select_candidates(
    g: &GraphProgram,
    s: &Schedule,
    lifetimes: &BTreeMap<TensorId, Lifetime>,
    m: &MachineModel,
    p: &CandidatePolicy,
) -> Result<OffloadPlan> {
    p.validate()?;
    let prefix = compute_prefix(g, &s.order);
    let aliased: BTreeSet<TensorId> = g.tensors.iter().filter_map(|t| t.alias_of).collect();
    let mut plan = OffloadPlan::empty(p.clone());

    for t in &g.tensors {
        let lt = lifetimes.get(&t.id).ok_or(Error::UnknownTensor(t.id))?;
        if t.initial_tier == Tier::Remote {
            if let Some(&first) = lt.accesses.first() {
                plan.remote_loads.push(RemoteLoad {
                    tensor_id: t.id,
                    reload_before_pos: first,
                });
            }
            continue;
        }
        if t.pinned
            || t.alias_of.is_some()
            || !p.kinds_enabled.contains(&t.kind)
            || t.bytes < p.min_tensor_bytes
        {
            continue;
        }
        let wall = |w: &IdleWindow| prefix[w.to_pos + 1] - prefix[w.from_pos];
        // largest window by static wall time; earliest wins ties
        let Some(best) = lt
            .idle_windows
            .iter()
            .max_by(|a, b| wall(a).cmp(&wall(b)).then(b.from_pos.cmp(&a.from_pos)))
        else {
            continue;
        };
        let round_trip =
            estimate_transfer_us(t, m, Channel::D2R)? + estimate_transfer_us(t, m, Channel::R2D)?;
        if (wall(best) as f64) <= p.min_gap_ratio * round_trip as f64 {
            continue;
        }
        let evict_after_pos = if lt
            .accesses
            .binary_search(&(best.from_pos.wrapping_sub(1)))
            .is_ok()
        {
            Some(best.from_pos - 1)
        } else {
            None
        };
        // aliases share storage; a group whose other version is touched
        // inside the window cannot leave the device
        if aliased.contains(&t.id) {
            let clash = g.tensors.iter().any(|o| {
                o.id != t.id
                    && g.storage_root(o.id) == t.id
                    && lifetimes[&o.id]
                        .accesses
                        .iter()
                        .any(|&a| a >= best.from_pos && a <= best.to_pos)
            });
            if clash {
                continue;
            }
        }
        plan.entries.push(PlanEntry {
            tensor_id: t.id,
            evict_after_pos,
            reload_before_pos: best.to_pos + 1,
        });
    }
    Ok(plan)
}
