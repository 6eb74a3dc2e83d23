//! Brute-force search over every topological order of a small graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{validate, GraphIndex, GraphProgram, OpId, Schedule};
use crate::machine::MachineModel;
use crate::sim::simulate;

pub const ORACLE_OP_LIMIT: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub makespan_us: u64,
    pub peak_device_bytes: u64,
    pub order: Vec<OpId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleResult {
    pub orders_enumerated: usize,
    /// Orders that ran to completion without running out of memory.
    pub orders_feasible: usize,
    pub best_makespan_us: Option<u64>,
    pub best_makespan_order: Option<Schedule>,
    pub best_peak_bytes: Option<u64>,
    pub best_peak_order: Option<Schedule>,
    /// Non-dominated (makespan, peak) pairs, sorted by makespan.
    pub pareto_front: Vec<ParetoPoint>,
}

/// All topological orders, in lexicographic order of op-list index.
pub fn linear_extensions(g: &GraphProgram) -> Result<Vec<Vec<OpId>>> {
    let report = validate(g);
    if !report.is_empty() {
        return Err(Error::InvalidGraph(report));
    }
    let idx = GraphIndex::new(g);
    let mut by_id: Vec<usize> = (0..g.ops.len()).collect();
    by_id.sort_by_key(|&i| g.ops[i].id);
    let mut indeg: Vec<usize> = idx.preds.iter().map(Vec::len).collect();
    let mut prefix = Vec::with_capacity(g.ops.len());
    let mut out = Vec::new();
    extend(g, &idx, &by_id, &mut indeg, &mut prefix, &mut out);
    Ok(out)
}

fn extend(
    g: &GraphProgram,
    idx: &GraphIndex,
    by_id: &[usize],
    indeg: &mut [usize],
    prefix: &mut Vec<usize>,
    out: &mut Vec<Vec<OpId>>,
) {
    if prefix.len() == by_id.len() {
        out.push(prefix.iter().map(|&i| g.ops[i].id).collect());
        return;
    }
    for &i in by_id {
        if indeg[i] != 0 || prefix.contains(&i) {
            continue;
        }
        prefix.push(i);
        for &s in &idx.succs[i] {
            indeg[s] -= 1;
        }
        extend(g, idx, by_id, indeg, prefix, out);
        for &s in &idx.succs[i] {
            indeg[s] += 1;
        }
        prefix.pop();
    }
}

pub fn exhaustive_oracle(g: &GraphProgram, m: &MachineModel) -> Result<OracleResult> {
    if g.ops.len() > ORACLE_OP_LIMIT {
        return Err(Error::GraphTooLarge {
            ops: g.ops.len(),
            limit: ORACLE_OP_LIMIT,
        });
    }
    let orders = linear_extensions(g)?;
    let mut res = OracleResult {
        orders_enumerated: orders.len(),
        orders_feasible: 0,
        best_makespan_us: None,
        best_makespan_order: None,
        best_peak_bytes: None,
        best_peak_order: None,
        pareto_front: Vec::new(),
    };
    let mut points = Vec::new();
    for order in orders {
        let s = Schedule::from_order(g, order)?;
        let r = match simulate(g, &s, m) {
            Ok(r) if r.oom.is_none() => r,
            Ok(_) | Err(Error::NotResident { .. }) => continue,
            Err(e) => return Err(e),
        };
        res.orders_feasible += 1;
        if res.best_makespan_us.is_none_or(|b| r.makespan_us < b) {
            res.best_makespan_us = Some(r.makespan_us);
            res.best_makespan_order = Some(s.clone());
        }
        if res.best_peak_bytes.is_none_or(|b| r.peak_device_bytes < b) {
            res.best_peak_bytes = Some(r.peak_device_bytes);
            res.best_peak_order = Some(s.clone());
        }
        points.push(ParetoPoint {
            makespan_us: r.makespan_us,
            peak_device_bytes: r.peak_device_bytes,
            order: s.order,
        });
    }
    points.sort_by_key(|p| (p.makespan_us, p.peak_device_bytes));
    let mut best_peak = u64::MAX;
    for p in points {
        if p.peak_device_bytes < best_peak {
            best_peak = p.peak_device_bytes;
            res.pareto_front.push(p);
        }
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{OpNode, TensorDecl, TensorKind};

    #[test]
    fn chain_has_one_order() {
        let g = GraphProgram {
            tensors: vec![TensorDecl::new(0, 8, TensorKind::Activation)],
            ops: vec![
                OpNode::compute(0, 1, &[], &[0]),
                OpNode::compute(1, 1, &[0], &[]),
            ],
            control_edges: vec![],
        };
        let r = exhaustive_oracle(&g, &MachineModel::default()).unwrap();
        assert_eq!(r.orders_enumerated, 1);
        assert_eq!(r.best_makespan_us, Some(2));
        assert_eq!(r.pareto_front.len(), 1);
    }

    #[test]
    fn fork_has_two_orders() {
        let g = GraphProgram {
            tensors: vec![TensorDecl::new(0, 8, TensorKind::Activation)],
            ops: vec![
                OpNode::compute(0, 1, &[], &[0]),
                OpNode::compute(1, 1, &[0], &[]),
                OpNode::compute(2, 1, &[0], &[]),
            ],
            control_edges: vec![],
        };
        assert_eq!(linear_extensions(&g).unwrap().len(), 2);
    }

    #[test]
    fn too_large_is_rejected() {
        let g = GraphProgram {
            tensors: vec![],
            ops: (0..11).map(|i| OpNode::compute(i, 1, &[], &[])).collect(),
            control_edges: vec![],
        };
        assert!(matches!(
            exhaustive_oracle(&g, &MachineModel::default()),
            Err(Error::GraphTooLarge { ops: 11, limit: 10 })
        ));
    }
}
