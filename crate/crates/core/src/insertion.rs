//! Materializes an [`OffloadPlan`] as explicit Store, Detach and Prefetch
//! nodes.
//!
//! Each plan entry on tensor `t` becomes
//!
//! ```text
//! op@evict -> Store(t) -> Detach(t) -> Prefetch(t) -> op@reload
//! ```
//!
//! Store is a copy-out, Detach releases the device copy, Prefetch brings it
//! back. Remote-resident inputs only get the trailing `Prefetch -> reader`
//! edge. Accesses to `t` outside the two anchor ops that the existing
//! dependency relation leaves unordered against the new nodes are pinned
//! with extra control edges so that no topological order can read `t` while
//! it is released.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::{
    check_schedule, validate, GraphIndex, GraphProgram, OpId, OpKind, OpNode, Schedule, TensorId,
    Tier, ValidationReport, Violation,
};
use crate::memory::OffloadPlan;

/// Rewritten graph plus the input schedule with the new nodes spliced in:
/// Store and Detach right after the evicting op, Prefetch right before the
/// reloading op. Compute ops keep their relative order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rewrite {
    pub graph: GraphProgram,
    pub schedule: Schedule,
}

pub fn insert_cache_ops(
    g: &GraphProgram,
    s: &Schedule,
    plan: &OffloadPlan,
) -> Result<GraphProgram> {
    insert_cache_ops_with_schedule(g, s, plan).map(|r| r.graph)
}

pub fn insert_cache_ops_with_schedule(
    g: &GraphProgram,
    s: &Schedule,
    plan: &OffloadPlan,
) -> Result<Rewrite> {
    check_schedule(g, s)?;
    let idx = GraphIndex::new(g);
    let n = s.order.len();
    let pos = s.positions();
    let op_at = |p: usize| s.order[p];

    // (position, tensor) accesses of each tensor under s
    let accesses = |t: TensorId| -> Result<Vec<(usize, usize)>> {
        let &ti = idx.tensor_index.get(&t).ok_or(Error::UnknownTensor(t))?;
        let mut v: Vec<(usize, usize)> = idx.producers[ti]
            .iter()
            .chain(idx.readers[ti].iter())
            .map(|&oi| (pos[&g.ops[oi].id], oi))
            .collect();
        v.sort_unstable();
        v.dedup();
        Ok(v)
    };

    // validate entries
    let mut spans: BTreeMap<TensorId, Vec<(usize, usize)>> = BTreeMap::new();
    for e in &plan.entries {
        let t = g
            .tensor(e.tensor_id)
            .ok_or(Error::UnknownTensor(e.tensor_id))?;
        if t.initial_tier == Tier::Remote {
            return Err(Error::InvalidPlan(format!(
                "{} starts remote; use a remote load instead of an eviction",
                t.id
            )));
        }
        if e.reload_before_pos >= n || e.evict_after_pos.is_some_and(|p| p >= n) {
            return Err(Error::InvalidPlan(format!(
                "entry for {} references a position outside the {n}-op schedule",
                t.id
            )));
        }
        let start = e.evict_after_pos.map_or(0, |p| p + 1);
        if e.evict_after_pos.is_some_and(|p| p >= e.reload_before_pos) {
            return Err(Error::InvalidPlan(format!(
                "entry for {} evicts at or after its reload position",
                t.id
            )));
        }
        if accesses(t.id)?
            .iter()
            .any(|&(p, _)| p >= start && p < e.reload_before_pos)
        {
            return Err(Error::InvalidPlan(format!(
                "{} is accessed inside its eviction window",
                t.id
            )));
        }
        let span = (start, e.reload_before_pos);
        let list = spans.entry(t.id).or_default();
        if list.iter().any(|&(a, b)| span.0 <= b && a <= span.1) {
            return Err(Error::InvalidPlan(format!(
                "overlapping entries for {}",
                t.id
            )));
        }
        list.push(span);
    }
    let mut loaded = BTreeSet::new();
    for l in &plan.remote_loads {
        let t = g
            .tensor(l.tensor_id)
            .ok_or(Error::UnknownTensor(l.tensor_id))?;
        if t.initial_tier != Tier::Remote {
            return Err(Error::InvalidPlan(format!(
                "{} is not remote-resident",
                t.id
            )));
        }
        if !loaded.insert(t.id) {
            return Err(Error::InvalidPlan(format!(
                "duplicate remote load for {}",
                t.id
            )));
        }
        if l.reload_before_pos >= n {
            return Err(Error::InvalidPlan(format!(
                "remote load for {} is outside the schedule",
                t.id
            )));
        }
        if accesses(t.id)?
            .first()
            .is_some_and(|&(p, _)| p < l.reload_before_pos)
        {
            return Err(Error::InvalidPlan(format!(
                "{} is read before its remote load position",
                t.id
            )));
        }
    }

    let mut out = g.clone();
    let mut next_id = g.next_op_id();
    let mut fresh = || {
        let id = OpId(next_id);
        next_id += 1;
        id
    };
    let mut after: BTreeMap<Option<usize>, Vec<OpId>> = BTreeMap::new();
    let mut before: BTreeMap<usize, Vec<OpId>> = BTreeMap::new();
    let mut edges: Vec<(OpId, OpId)> = Vec::new();

    // ancestors(x) / descendants(x) over the original dependency relation
    let reach = |from: usize, forward: bool| -> Vec<bool> {
        let mut seen = vec![false; g.ops.len()];
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            let next = if forward {
                &idx.succs[v]
            } else {
                &idx.preds[v]
            };
            for &w in next {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen
    };

    for e in &plan.entries {
        let t = e.tensor_id;
        let store = fresh();
        let detach = fresh();
        let prefetch = fresh();
        out.ops
            .push(OpNode::cache(store, OpKind::Store { tensor_id: t }));
        out.ops
            .push(OpNode::cache(detach, OpKind::Detach { tensor_id: t }));
        out.ops
            .push(OpNode::cache(prefetch, OpKind::Prefetch { tensor_id: t }));
        after
            .entry(e.evict_after_pos)
            .or_default()
            .extend([store, detach]);
        before
            .entry(e.reload_before_pos)
            .or_default()
            .push(prefetch);

        let reload_op = op_at(e.reload_before_pos);
        if let Some(p) = e.evict_after_pos {
            edges.push((op_at(p), store));
        }
        edges.push((store, detach));
        edges.push((detach, prefetch));
        edges.push((prefetch, reload_op));

        let acc = accesses(t)?;
        if let Some(p) = e.evict_after_pos {
            let anchor = idx.op_index[&op_at(p)];
            let anc = reach(anchor, false);
            for &(ap, oi) in &acc {
                if ap < p && !anc[oi] {
                    edges.push((g.ops[oi].id, detach));
                }
            }
        }
        pin_later_readers(g, &acc, e.reload_before_pos, &reach, prefetch, &mut edges);
    }

    for l in &plan.remote_loads {
        let prefetch = fresh();
        out.ops.push(OpNode::cache(
            prefetch,
            OpKind::Prefetch {
                tensor_id: l.tensor_id,
            },
        ));
        before
            .entry(l.reload_before_pos)
            .or_default()
            .push(prefetch);
        edges.push((prefetch, op_at(l.reload_before_pos)));
        let acc = accesses(l.tensor_id)?;
        pin_later_readers(g, &acc, l.reload_before_pos, &reach, prefetch, &mut edges);
    }
    out.control_edges.extend(edges);

    let mut order = Vec::with_capacity(out.ops.len());
    if let Some(ops) = after.get(&None) {
        order.extend(ops.iter().copied());
    }
    for (p, &id) in s.order.iter().enumerate() {
        if let Some(ops) = before.get(&p) {
            order.extend(ops.iter().copied());
        }
        order.push(id);
        if let Some(ops) = after.get(&Some(p)) {
            order.extend(ops.iter().copied());
        }
    }
    let schedule = Schedule::from_order(&out, order)?;
    debug_assert!(validate(&out).is_empty());
    Ok(Rewrite {
        graph: out,
        schedule,
    })
}

/// Readers after the reload point that do not already depend on the
/// reloading op get a direct edge from the Prefetch.
fn pin_later_readers(
    g: &GraphProgram,
    acc: &[(usize, usize)],
    reload_pos: usize,
    reach: &dyn Fn(usize, bool) -> Vec<bool>,
    prefetch: OpId,
    edges: &mut Vec<(OpId, OpId)>,
) {
    let Some(&(_, anchor)) = acc.iter().find(|&&(p, _)| p == reload_pos) else {
        return;
    };
    let desc = reach(anchor, true);
    for &(ap, oi) in acc {
        if ap > reload_pos && !desc[oi] {
            edges.push((prefetch, g.ops[oi].id));
        }
    }
}

/// Reports every consumer that some topological order of `g` could run
/// while its tensor is released: either reachable from a `Detach(t)` along
/// a path with no `Prefetch(t)`, or unordered with respect to the Detach.
/// Readers of remote-resident tensors must follow a `Prefetch(t)`.
pub fn check_residency_safety(g: &GraphProgram) -> ValidationReport {
    let idx = GraphIndex::new(g);
    let mut out = Vec::new();
    for (di, d) in g.ops.iter().enumerate() {
        let OpKind::Detach { tensor_id: t } = d.kind else {
            continue;
        };
        let Some(&ti) = idx.tensor_index.get(&t) else {
            continue;
        };
        let is_prefetch_of_t =
            |i: usize| matches!(g.ops[i].kind, OpKind::Prefetch { tensor_id } if tensor_id == t);

        // forward reach that stops at Prefetch(t)
        let mut unguarded = vec![false; g.ops.len()];
        let mut any = vec![false; g.ops.len()];
        let mut stack: Vec<(usize, bool)> = idx.succs[di].iter().map(|&s| (s, true)).collect();
        while let Some((v, open)) = stack.pop() {
            let open = open && !is_prefetch_of_t(v);
            if (open && unguarded[v]) || (!open && any[v]) {
                continue;
            }
            any[v] = true;
            if open {
                unguarded[v] = true;
            }
            for &s in &idx.succs[v] {
                stack.push((s, open));
            }
        }
        let ancestors = {
            let mut seen = vec![false; g.ops.len()];
            let mut stack = idx.preds[di].clone();
            while let Some(v) = stack.pop() {
                if !seen[v] {
                    seen[v] = true;
                    stack.extend(idx.preds[v].iter().copied());
                }
            }
            seen
        };
        let mut flagged: Vec<OpId> = idx.readers[ti]
            .iter()
            .copied()
            .filter(|&r| unguarded[r] || (!any[r] && !ancestors[r]))
            .map(|r| g.ops[r].id)
            .collect();
        flagged.sort();
        out.extend(
            flagged
                .into_iter()
                .map(|consumer| Violation::ResidencyHazard {
                    tensor: t,
                    detach: d.id,
                    consumer,
                }),
        );
    }

    for (ti, t) in g.tensors.iter().enumerate() {
        if t.initial_tier != Tier::Remote {
            continue;
        }
        let mut covered = vec![false; g.ops.len()];
        for (pi, p) in g.ops.iter().enumerate() {
            if matches!(p.kind, OpKind::Prefetch { tensor_id } if tensor_id == t.id) {
                for (i, c) in idx.reachable_from(pi).into_iter().enumerate() {
                    covered[i] |= c;
                }
            }
        }
        let mut flagged: Vec<OpId> = idx.readers[ti]
            .iter()
            .chain(idx.producers[ti].iter())
            .filter(|&&r| !covered[r])
            .map(|&r| g.ops[r].id)
            .collect();
        flagged.sort();
        flagged.dedup();
        out.extend(
            flagged
                .into_iter()
                .map(|consumer| Violation::UnloadedRemote {
                    tensor: t.id,
                    consumer,
                }),
        );
    }
    ValidationReport(out)
}
