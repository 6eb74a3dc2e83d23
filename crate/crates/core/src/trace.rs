//! Chrome trace-event export of a simulation report.

use serde_json::{json, Value};

use crate::graph::{GraphProgram, OpKind};
use crate::sim::SimReport;

const PID: u32 = 1;

fn label(g: &GraphProgram, op: crate::graph::OpId) -> String {
    match g.op(op).map(|o| o.kind) {
        Some(OpKind::Compute { .. }) | None => format!("compute {op}"),
        Some(OpKind::Prefetch { tensor_id }) => format!("prefetch {tensor_id}"),
        Some(OpKind::Store { tensor_id }) => format!("store {tensor_id}"),
        Some(OpKind::Detach { tensor_id }) => format!("detach {tensor_id}"),
    }
}

/// Builds a JSON document loadable by chrome://tracing or Perfetto: one
/// complete ("X") event per timeline entry on a thread per stream, and a
/// counter ("C") track for device bytes.
pub fn emit_trace(g: &GraphProgram, report: &SimReport) -> Value {
    let mut events = Vec::with_capacity(report.timeline.len() + report.memory.len() + 3);
    for st in crate::graph::Stream::ALL {
        events.push(json!({
            "ph": "M",
            "name": "thread_name",
            "pid": PID,
            "tid": st.index() + 1,
            "args": { "name": st.as_str() },
        }));
    }
    for e in &report.timeline {
        events.push(json!({
            "ph": "X",
            "name": label(g, e.op),
            "cat": e.stream.as_str(),
            "pid": PID,
            "tid": e.stream.index() + 1,
            "ts": e.start_us,
            "dur": e.end_us - e.start_us,
            "args": { "op": e.op.0, "live_bytes": e.live_bytes },
        }));
    }
    for s in &report.memory {
        events.push(json!({
            "ph": "C",
            "name": "device_bytes",
            "pid": PID,
            "ts": s.time_us,
            "args": { "bytes": s.bytes },
        }));
    }
    json!({ "traceEvents": events, "displayTimeUnit": "ms" })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{topo_order, OpNode, TensorDecl, TensorKind};
    use crate::machine::MachineModel;
    use crate::sim::simulate;

    #[test]
    fn one_event_per_op_and_counters() {
        let g = GraphProgram {
            tensors: vec![TensorDecl::new(0, 64, TensorKind::Activation)],
            ops: vec![
                OpNode::compute(0, 7, &[], &[0]),
                OpNode::compute(1, 3, &[0], &[]),
            ],
            control_edges: vec![],
        };
        let r = simulate(&g, &topo_order(&g).unwrap(), &MachineModel::default()).unwrap();
        let v = emit_trace(&g, &r);
        let ev = v["traceEvents"].as_array().unwrap();
        let xs: Vec<_> = ev.iter().filter(|e| e["ph"] == "X").collect();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1]["ts"], 7);
        assert_eq!(xs[1]["dur"], 3);
        assert_eq!(xs[0]["tid"], 1);
        assert!(ev.iter().filter(|e| e["ph"] == "C").count() >= 2);
    }
}
