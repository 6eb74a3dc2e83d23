//! A six-op example with one remote weight, small enough to check by hand.

use crate::graph::{
    GraphProgram, OpId, OpKind, OpNode, Schedule, TensorDecl, TensorId, TensorKind,
};
use crate::machine::MachineModel;

/// Four 2 ms compute ops C0..C3 chained through 1 MiB activations, then a
/// 1 ms op C4 that also reads a remote 200 MB weight `w` (tensor 0).
///
/// Op 5 prefetches `w` and starts just before C4, so the 5 ms transfer at
/// 40 GB/s is fully exposed. The remote link has no fixed latency.
pub fn toy_graph() -> (GraphProgram, Schedule, MachineModel) {
    let mut g = GraphProgram::default();
    g.tensors
        .push(TensorDecl::new(0, 200_000_000, TensorKind::Weight).remote());
    for k in 1..=4u32 {
        g.tensors
            .push(TensorDecl::new(k, 1 << 20, TensorKind::Activation));
    }
    g.ops.push(OpNode::compute(0, 2000, &[], &[1]));
    g.ops.push(OpNode::compute(1, 2000, &[1], &[2]));
    g.ops.push(OpNode::compute(2, 2000, &[2], &[3]));
    g.ops.push(OpNode::compute(3, 2000, &[3], &[4]));
    g.ops.push(OpNode::compute(4, 1000, &[4, 0], &[]));
    g.ops.push(OpNode::cache(
        OpId(5),
        OpKind::Prefetch {
            tensor_id: TensorId(0),
        },
    ));
    g.control_edges.push((OpId(5), OpId(4)));
    let s = Schedule::from_order(&g, [0, 1, 2, 3, 5, 4].map(OpId).to_vec())
        .expect("toy order is topological");
    let m = MachineModel {
        r2d_bandwidth_bytes_per_us: 40_000,
        d2r_bandwidth_bytes_per_us: 40_000,
        transfer_fixed_latency_us: 0,
        ..MachineModel::default()
    };
    (g, s, m)
}
