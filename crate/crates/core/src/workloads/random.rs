//! Seeded random DAGs with offload cycles already inserted.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{topo_order, GraphProgram, OpNode, Schedule, TensorDecl, TensorKind};
use crate::insertion::insert_cache_ops_with_schedule;
use crate::memory::{compute_lifetimes, CandidatePolicy, OffloadPlan, PlanEntry, RemoteLoad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomDagSpec {
    /// Total op budget, cache ops included.
    pub max_ops: usize,
    pub max_cache_ops: usize,
    /// Upper bound on tensors read by one compute op.
    pub max_fan_in: usize,
    pub min_bytes: u64,
    pub max_bytes: u64,
    pub min_cost_us: u64,
    pub max_cost_us: u64,
    /// Chance that a graph input lives in the remote tier.
    pub remote_input_prob: f64,
    /// Chance that an extra control edge joins two compute ops.
    pub control_edge_prob: f64,
}

impl Default for RandomDagSpec {
    fn default() -> Self {
        RandomDagSpec {
            max_ops: 50,
            max_cache_ops: 12,
            max_fan_in: 3,
            min_bytes: 1 << 20,
            max_bytes: 256 << 20,
            min_cost_us: 10,
            max_cost_us: 5_000,
            remote_input_prob: 0.2,
            control_edge_prob: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomInstance {
    pub graph: GraphProgram,
    /// Smallest-id topological order of the compute graph with the cache
    /// ops spliced next to their anchors.
    pub schedule: Schedule,
}

/// Builds a random compute DAG, then offloads randomly chosen idle windows
/// until the cache-op budget is spent.
pub fn gen_random_dag(spec: &RandomDagSpec, seed: u64) -> Result<RandomInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cache_budget = spec.max_cache_ops.min(spec.max_ops.saturating_sub(1));
    let compute = rng.gen_range(1..=(spec.max_ops - cache_budget).max(1));
    let inputs = rng.gen_range(0..=compute.div_ceil(3));
    let kinds = [
        TensorKind::Activation,
        TensorKind::KvBlock,
        TensorKind::OptimizerState,
    ];

    let mut g = GraphProgram::default();
    let mut remote_inputs = 0;
    for i in 0..inputs {
        let mut t = TensorDecl::new(
            i as u32,
            rng.gen_range(spec.min_bytes..=spec.max_bytes),
            *kinds.choose(&mut rng).expect("non-empty"),
        );
        if remote_inputs < cache_budget && rng.gen_bool(spec.remote_input_prob) {
            t = t.remote();
            remote_inputs += 1;
        }
        g.tensors.push(t);
    }
    // op k produces tensor inputs + k and reads earlier tensors
    for k in 0..compute {
        let out = (inputs + k) as u32;
        g.tensors.push(TensorDecl::new(
            out,
            rng.gen_range(spec.min_bytes..=spec.max_bytes),
            *kinds.choose(&mut rng).expect("non-empty"),
        ));
        let fan_in = rng.gen_range(0..=spec.max_fan_in.min(inputs + k));
        let mut reads: Vec<u32> = (0..(inputs + k) as u32).collect();
        reads.shuffle(&mut rng);
        reads.truncate(fan_in);
        reads.sort_unstable();
        let cost = rng.gen_range(spec.min_cost_us..=spec.max_cost_us);
        g.ops.push(OpNode::compute(k as u32, cost, &reads, &[out]));
    }
    // remote inputs nobody reads would need no load; give each a reader
    for i in 0..inputs {
        let id = crate::graph::TensorId(i as u32);
        if !g.ops.iter().any(|o| o.inputs.contains(&id)) {
            let k = rng.gen_range(0..compute);
            g.ops[k].inputs.push(id);
        }
    }
    for a in 0..compute {
        for b in a + 1..compute {
            if rng.gen_bool(spec.control_edge_prob) {
                g.control_edges
                    .push((crate::graph::OpId(a as u32), crate::graph::OpId(b as u32)));
            }
        }
    }

    let s = topo_order(&g)?;
    let lifetimes = compute_lifetimes(&g, &s)?;
    let mut plan = OffloadPlan::empty(CandidatePolicy::default());
    let mut budget = cache_budget;
    for t in g
        .tensors
        .iter()
        .filter(|t| t.initial_tier == crate::graph::Tier::Remote)
    {
        if let Some(&first) = lifetimes[&t.id].accesses.first() {
            plan.remote_loads.push(RemoteLoad {
                tensor_id: t.id,
                reload_before_pos: first,
            });
            budget -= 1;
        }
    }
    let mut windows: Vec<(crate::graph::TensorId, crate::memory::IdleWindow)> = g
        .tensors
        .iter()
        .filter(|t| t.initial_tier == crate::graph::Tier::Device)
        .flat_map(|t| {
            lifetimes[&t.id]
                .idle_windows
                .iter()
                .map(move |w| (t.id, *w))
        })
        .collect();
    windows.shuffle(&mut rng);
    for (t, w) in windows {
        if budget < 3 {
            break;
        }
        let accesses = &lifetimes[&t].accesses;
        let evict_after_pos = (w.from_pos > 0 && accesses.binary_search(&(w.from_pos - 1)).is_ok())
            .then(|| w.from_pos - 1);
        plan.entries.push(PlanEntry {
            tensor_id: t,
            evict_after_pos,
            reload_before_pos: w.to_pos + 1,
        });
        budget -= 3;
    }
    let rw = insert_cache_ops_with_schedule(&g, &s, &plan)?;
    Ok(RandomInstance {
        graph: rw.graph,
        schedule: rw.schedule,
    })
}
