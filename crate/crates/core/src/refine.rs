//! Greedy repositioning of cache operators inside a fixed compute order.
//!
//! Positions are insertion indices into the order with the cache op taken
//! out: position `p` places the op immediately before the op currently at
//! index `p` of that reduced order (or at the end when `p` equals its
//! length).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{check_schedule, GraphIndex, GraphProgram, OpId, OpKind, Schedule};
use crate::machine::{Channel, MachineModel};
use crate::sim::transfer_us;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// Cost per µs of exposed transfer latency.
    pub alpha: f64,
    /// Cost per byte·µs of device residency ahead of use.
    pub beta: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            alpha: 1.0,
            beta: 1e-9,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.is_finite()
            && self.beta.is_finite()
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha + self.beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidPolicy(format!(
                "cost weights must be non-negative and not both zero (alpha {}, beta {})",
                self.alpha, self.beta
            )))
        }
    }

    pub fn cost(&self, exposed_us: u64, residency_byte_us: u128) -> f64 {
        self.alpha * exposed_us as f64 + self.beta * residency_byte_us as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionEvaluation {
    pub cache_op_id: OpId,
    pub position: usize,
    pub transfer_completion_us: u64,
    pub overlap_us: u64,
    pub exposed_us: u64,
    pub residency_byte_us: u128,
    pub cost: f64,
}

/// One line of the refinement log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub op: OpId,
    pub from_position: usize,
    pub to_position: usize,
    pub feasible_lo: usize,
    pub feasible_hi: usize,
    pub original_cost: f64,
    pub chosen: PositionEvaluation,
}

enum Timing {
    /// Prefetch or Store: estimated transfer time.
    Transfer(u64),
    /// Detach: compute time at which its Store was issued, and how long
    /// the copy-out needs.
    Release { since: u64, needed: u64 },
}

struct Context {
    bytes: u64,
    timing: Timing,
}

/// An order with its position map and compute-cost prefix sums.
struct Placement {
    /// op indices in order
    order: Vec<usize>,
    /// position of each op index in `order`
    pos: Vec<usize>,
    /// `prefix[k]` is the compute cost of `order[..k]`
    prefix: Vec<u64>,
}

impl Placement {
    fn new(g: &GraphProgram, idx: &GraphIndex, order: &[OpId]) -> Result<Self> {
        let order = order
            .iter()
            .map(|o| idx.op_index.get(o).copied().ok_or(Error::UnknownOp(*o)))
            .collect::<Result<Vec<_>>>()?;
        let mut p = Placement {
            order,
            pos: vec![usize::MAX; g.ops.len()],
            prefix: Vec::new(),
        };
        p.reindex(g);
        Ok(p)
    }

    fn reindex(&mut self, g: &GraphProgram) {
        self.prefix.clear();
        self.prefix.push(0);
        let mut acc = 0;
        for (k, &i) in self.order.iter().enumerate() {
            self.pos[i] = k;
            acc += g.ops[i].kind.compute_cost();
            self.prefix.push(acc);
        }
    }

    /// Moves the op at `from` so it lands at `to` once removed and
    /// re-inserted; only the positions in between are renumbered.
    fn shift(&mut self, g: &GraphProgram, from: usize, to: usize) {
        let (a, b) = if to >= from {
            self.order[from..=to].rotate_left(1);
            (from, to)
        } else {
            self.order[to..=from].rotate_right(1);
            (to, from)
        };
        for k in a..=b {
            let i = self.order[k];
            self.pos[i] = k;
            self.prefix[k + 1] = self.prefix[k] + g.ops[i].kind.compute_cost();
        }
    }

    /// View of the order with cache op `c` taken out.
    fn without(&self, g: &GraphProgram, idx: &GraphIndex, c: OpId) -> Result<Reduced<'_>> {
        let ci = *idx.op_index.get(&c).ok_or(Error::UnknownOp(c))?;
        if !g.ops[ci].kind.is_cache() {
            return Err(Error::NotCacheOp(c));
        }
        let original = self.pos[ci];
        if original == usize::MAX {
            return Err(Error::InvalidSchedule(format!("{c} is not in the order")));
        }
        let mut r = Reduced {
            c: ci,
            place: self,
            lo: 0,
            hi: self.order.len() - 1,
            original,
        };
        r.lo = idx.preds[ci]
            .iter()
            .map(|&p| r.pos(p) + 1)
            .max()
            .unwrap_or(0);
        r.hi = idx.succs[ci]
            .iter()
            .map(|&s| r.pos(s))
            .min()
            .unwrap_or(r.hi);
        Ok(r)
    }

    fn ids(&self, g: &GraphProgram) -> Vec<OpId> {
        self.order.iter().map(|&i| g.ops[i].id).collect()
    }
}

/// Per-op view of the order with `c` taken out. Cache ops cost nothing on
/// the compute prefix, so the view is index arithmetic over the full order.
struct Reduced<'a> {
    c: usize,
    place: &'a Placement,
    lo: usize,
    hi: usize,
    /// position of `c` in the full order
    original: usize,
}

impl Reduced<'_> {
    /// Position of op index `i` once `c` is removed.
    fn pos(&self, i: usize) -> usize {
        let k = self.place.pos[i];
        if k > self.original {
            k - 1
        } else {
            k
        }
    }

    /// Compute cost of the first `k` ops of the reduced order.
    fn prefix(&self, k: usize) -> u64 {
        self.place.prefix[if k > self.original { k + 1 } else { k }]
    }

    /// Full order with `c` moved to reduced position `p`.
    fn moved(&self, p: usize) -> Vec<usize> {
        let mut out = self.place.order.clone();
        let c = out.remove(self.original);
        out.insert(p, c);
        out
    }

    /// Per-op quantities that do not depend on the candidate position.
    fn context(&self, g: &GraphProgram, idx: &GraphIndex, m: &MachineModel) -> Result<Context> {
        let op = &g.ops[self.c];
        let t = op.kind.cache_tensor().expect("cache op");
        let bytes = g
            .tensor(g.storage_root(t))
            .ok_or(Error::UnknownTensor(t))?
            .bytes;
        let timing = match op.kind {
            OpKind::Prefetch { .. } => Timing::Transfer(transfer_us(bytes, m, Channel::R2D)?),
            OpKind::Store { .. } => Timing::Transfer(transfer_us(bytes, m, Channel::D2R)?),
            OpKind::Detach { .. } => {
                let store = idx.preds[self.c]
                    .iter()
                    .copied()
                    .find(|&s| g.ops[s].kind == OpKind::Store { tensor_id: t });
                match store {
                    Some(s) => Timing::Release {
                        since: self.prefix(self.pos(s)),
                        needed: transfer_us(bytes, m, Channel::D2R)?,
                    },
                    None => Timing::Release {
                        since: self.prefix(self.lo),
                        needed: 0,
                    },
                }
            }
            OpKind::Compute { .. } => unreachable!(),
        };
        Ok(Context { bytes, timing })
    }

    fn evaluate(
        &self,
        g: &GraphProgram,
        idx: &GraphIndex,
        p: usize,
        m: &MachineModel,
        w: &CostWeights,
    ) -> Result<PositionEvaluation> {
        let ctx = self.context(g, idx, m)?;
        self.evaluate_with(g, &ctx, p, w)
    }

    fn evaluate_with(
        &self,
        g: &GraphProgram,
        ctx: &Context,
        p: usize,
        w: &CostWeights,
    ) -> Result<PositionEvaluation> {
        let op = &g.ops[self.c];
        if p < self.lo || p > self.hi {
            return Err(Error::InfeasiblePosition {
                op: op.id,
                position: p,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let bytes = ctx.bytes as u128;
        let (transfer_completion_us, overlap_us, exposed_us, residency_byte_us) = match ctx.timing {
            Timing::Transfer(transfer) => {
                let overlap = self.prefix(self.hi) - self.prefix(p);
                (
                    self.prefix(p) + transfer,
                    overlap,
                    transfer.saturating_sub(overlap),
                    bytes * overlap.saturating_sub(transfer) as u128,
                )
            }
            // Detach sits on the compute stream and waits for its Store:
            // too early stalls compute, too late holds the device copy
            Timing::Release { since, needed } => {
                let elapsed = self.prefix(p) - since;
                (
                    since + needed,
                    elapsed,
                    needed.saturating_sub(elapsed),
                    bytes * elapsed.saturating_sub(needed) as u128,
                )
            }
        };
        Ok(PositionEvaluation {
            cache_op_id: op.id,
            position: p,
            transfer_completion_us,
            overlap_us,
            exposed_us,
            residency_byte_us,
            cost: w.cost(exposed_us, residency_byte_us),
        })
    }
}

/// Inclusive range of positions at which `c` keeps `order` topological.
pub fn feasible_positions(
    g: &GraphProgram,
    order: &Schedule,
    c: OpId,
) -> Result<std::ops::RangeInclusive<usize>> {
    let idx = GraphIndex::new(g);
    let place = Placement::new(g, &idx, &order.order)?;
    let r = place.without(g, &idx, c)?;
    Ok(r.lo..=r.hi)
}

/// Static estimate of placing `c` at position `p`.
pub fn evaluate_position(
    g: &GraphProgram,
    order: &Schedule,
    c: OpId,
    p: usize,
    m: &MachineModel,
    w: &CostWeights,
) -> Result<PositionEvaluation> {
    let idx = GraphIndex::new(g);
    let place = Placement::new(g, &idx, &order.order)?;
    place.without(g, &idx, c)?.evaluate(g, &idx, p, m, w)
}

/// Moves `c` to position `p`.
pub fn apply_position(g: &GraphProgram, order: &Schedule, c: OpId, p: usize) -> Result<Schedule> {
    let idx = GraphIndex::new(g);
    let place = Placement::new(g, &idx, &order.order)?;
    let r = place.without(g, &idx, c)?;
    if p >= place.order.len() {
        return Err(Error::InfeasiblePosition {
            op: c,
            position: p,
            lo: r.lo,
            hi: r.hi,
        });
    }
    let moved = Placement {
        order: r.moved(p),
        pos: Vec::new(),
        prefix: Vec::new(),
    };
    Schedule::from_order(g, moved.ids(g))
}

pub fn refine_order(
    g: &GraphProgram,
    order: &Schedule,
    m: &MachineModel,
    w: &CostWeights,
) -> Result<Schedule> {
    refine_order_logged(g, order, m, w).map(|(s, _)| s)
}

/// Lower cost first, then less residency.
fn rank(a: &PositionEvaluation, b: &PositionEvaluation) -> Ordering {
    a.cost
        .total_cmp(&b.cost)
        .then(a.residency_byte_us.cmp(&b.residency_byte_us))
}

/// Refines every cache op with more than one feasible position, in
/// ascending op id, and records a log line for each of them.
pub fn refine_order_logged(
    g: &GraphProgram,
    order: &Schedule,
    m: &MachineModel,
    w: &CostWeights,
) -> Result<(Schedule, Vec<RefinementRecord>)> {
    m.validate()?;
    w.validate()?;
    check_schedule(g, order)?;
    let idx = GraphIndex::new(g);
    let mut cache: Vec<OpId> = g.cache_ops().map(|o| o.id).collect();
    cache.sort();
    let mut place = Placement::new(g, &idx, &order.order)?;
    let mut log = Vec::new();
    for c in cache {
        let r = place.without(g, &idx, c)?;
        if r.hi <= r.lo {
            continue;
        }
        let ctx = r.context(g, &idx, m)?;
        let original = r.evaluate_with(g, &ctx, r.original, w)?;
        // cost is valley-shaped in p and residency is monotone across a
        // flat stretch, so scanning down from the latest position can stop
        // at the first rise; equal keys keep the later position
        let mut best = r.evaluate_with(g, &ctx, r.hi, w)?;
        for p in (r.lo..r.hi).rev() {
            let e = r.evaluate_with(g, &ctx, p, w)?;
            match rank(&e, &best) {
                Ordering::Less => best = e,
                Ordering::Equal => {}
                Ordering::Greater => break,
            }
        }
        debug_assert!(best.cost <= original.cost);
        log.push(RefinementRecord {
            op: c,
            from_position: r.original,
            to_position: best.position,
            feasible_lo: r.lo,
            feasible_hi: r.hi,
            original_cost: original.cost,
            chosen: best,
        });
        if best.position != r.original {
            let (from, to) = (r.original, best.position);
            place.shift(g, from, to);
        }
    }
    let out = Schedule::from_order(g, place.ids(g))?;
    debug_assert!(check_schedule(g, &out).is_ok());
    Ok((out, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{topo_order, OpNode, TensorDecl, TensorId, TensorKind};
    use crate::workloads::toy::toy_graph;

    #[test]
    fn toy_positions() {
        let (g, s, m) = toy_graph();
        let w = CostWeights::default();
        assert_eq!(feasible_positions(&g, &s, OpId(5)).unwrap(), 0..=4);
        let ev: Vec<_> = (0..=4)
            .map(|p| evaluate_position(&g, &s, OpId(5), p, &m, &w).unwrap())
            .collect();
        let overlaps: Vec<u64> = ev.iter().map(|e| e.overlap_us).collect();
        assert_eq!(overlaps, [8000, 6000, 4000, 2000, 0]);
        assert_eq!(ev[0].exposed_us, 0);
        assert_eq!(ev[1].exposed_us, 0);
        assert_eq!(ev[2].exposed_us, 1000);
        assert!(ev[0].residency_byte_us > ev[1].residency_byte_us);
        assert_eq!(ev[1].transfer_completion_us, 2000 + 5000);

        let (r, log) = refine_order_logged(&g, &s, &m, &w).unwrap();
        assert_eq!(r.order, [0, 5, 1, 2, 3, 4].map(OpId));
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].to_position, 1);
        assert!(log[0].chosen.cost <= log[0].original_cost);
    }

    #[test]
    fn free_residency_releases_as_early_as_it_can() {
        let mut g = GraphProgram::default();
        g.tensors
            .push(TensorDecl::new(0, 100_000_000, TensorKind::Activation));
        g.ops.push(OpNode::compute(0, 100, &[], &[0]));
        for k in 1..=3u32 {
            g.ops.push(OpNode::compute(k, 3000, &[], &[]));
        }
        g.ops.push(OpNode::compute(4, 100, &[0], &[]));
        let t = TensorId(0);
        g.ops
            .push(OpNode::cache(OpId(5), OpKind::Store { tensor_id: t }));
        g.ops
            .push(OpNode::cache(OpId(6), OpKind::Detach { tensor_id: t }));
        g.ops
            .push(OpNode::cache(OpId(7), OpKind::Prefetch { tensor_id: t }));
        g.control_edges
            .extend([(0, 5), (5, 6), (6, 7), (7, 4)].map(|(a, b)| (OpId(a), OpId(b))));
        let s = Schedule::from_order(&g, [0, 5, 6, 1, 2, 3, 7, 4].map(OpId).to_vec()).unwrap();
        let m = MachineModel {
            d2r_bandwidth_bytes_per_us: 40_000,
            r2d_bandwidth_bytes_per_us: 40_000,
            transfer_fixed_latency_us: 0,
            ..MachineModel::default()
        };
        let w = CostWeights {
            alpha: 1.0,
            beta: 0.0,
        };
        let r = refine_order(&g, &s, &m, &w).unwrap();
        // the release could wait until just before the reload at no cost,
        // but that would leave the reload nowhere to hide
        assert_eq!(r.order, [0, 5, 1, 6, 2, 7, 3, 4].map(OpId));
    }

    #[test]
    fn bounded_range_and_errors() {
        // pred at reduced index 1, consumer at reduced index 9
        let mut g = GraphProgram::default();
        g.tensors
            .push(TensorDecl::new(0, 1 << 20, TensorKind::Weight).remote());
        for k in 0..10u32 {
            g.ops.push(OpNode::compute(k, 10, &[], &[]));
            if k > 0 {
                g.control_edges.push((OpId(k - 1), OpId(k)));
            }
        }
        g.ops[9].inputs.push(TensorId(0));
        g.ops.push(OpNode::cache(
            OpId(10),
            OpKind::Prefetch {
                tensor_id: TensorId(0),
            },
        ));
        g.control_edges.push((OpId(1), OpId(10)));
        g.control_edges.push((OpId(10), OpId(9)));
        let s = topo_order(&g).unwrap();
        assert_eq!(feasible_positions(&g, &s, OpId(10)).unwrap(), 2..=9);
        let m = MachineModel::default();
        let w = CostWeights::default();
        assert!(matches!(
            evaluate_position(&g, &s, OpId(10), 1, &m, &w),
            Err(Error::InfeasiblePosition { lo: 2, hi: 9, .. })
        ));
        assert!(matches!(
            feasible_positions(&g, &s, OpId(3)),
            Err(Error::NotCacheOp(_))
        ));
        assert!(matches!(
            feasible_positions(&g, &s, OpId(99)),
            Err(Error::UnknownOp(_))
        ));
    }

    #[test]
    fn exposure_examples() {
        let (g, s, m) = toy_graph();
        let w = CostWeights::default();
        // 5000 µs transfer against 8000 and 2000 µs of compute
        assert_eq!(
            evaluate_position(&g, &s, OpId(5), 0, &m, &w)
                .unwrap()
                .exposed_us,
            0
        );
        assert_eq!(
            evaluate_position(&g, &s, OpId(5), 3, &m, &w)
                .unwrap()
                .exposed_us,
            3000
        );
    }

    #[test]
    fn no_cache_ops_is_identity() {
        let g = GraphProgram {
            tensors: vec![TensorDecl::new(0, 8, TensorKind::Activation)],
            ops: vec![
                OpNode::compute(1, 1, &[], &[0]),
                OpNode::compute(0, 1, &[0], &[]),
            ],
            control_edges: vec![],
        };
        let s = topo_order(&g).unwrap();
        let r = refine_order(&g, &s, &MachineModel::default(), &CostWeights::default()).unwrap();
        assert_eq!(r, s);
    }

    #[test]
    fn weights_are_validated() {
        assert!(CostWeights {
            alpha: 0.0,
            beta: 0.0
        }
        .validate()
        .is_err());
        assert!(CostWeights {
            alpha: -1.0,
            beta: 1.0
        }
        .validate()
        .is_err());
        assert!(CostWeights {
            alpha: 0.0,
            beta: 1.0
        }
        .validate()
        .is_ok());
    }
}
