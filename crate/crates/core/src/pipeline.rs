//! analyze → select → insert → refine, and the three-way comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{topo_order, validate, GraphProgram, Schedule};
use crate::insertion::insert_cache_ops_with_schedule;
use crate::machine::MachineModel;
use crate::memory::{compute_lifetimes, select_candidates, CandidatePolicy, OffloadPlan};
use crate::refine::{refine_order_logged, CostWeights, RefinementRecord};
use crate::sim::{no_offload_variant, simulate, SimReport};
use crate::workloads::reactive::run_reactive_baseline;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub policy: CandidatePolicy,
    pub weights: CostWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planned {
    pub plan: OffloadPlan,
    pub graph: GraphProgram,
    /// Schedule before refinement.
    pub initial: Schedule,
    pub schedule: Schedule,
    pub log: Vec<RefinementRecord>,
}

pub fn plan(g: &GraphProgram, m: &MachineModel, cfg: &PipelineConfig) -> Result<Planned> {
    let report = validate(g);
    if !report.is_empty() {
        return Err(Error::InvalidGraph(report));
    }
    let s0 = topo_order(g)?;
    let lifetimes = compute_lifetimes(g, &s0)?;
    let offload = select_candidates(g, &s0, &lifetimes, m, &cfg.policy)?;
    let rw = insert_cache_ops_with_schedule(g, &s0, &offload)?;
    let (schedule, log) = refine_order_logged(&rw.graph, &rw.schedule, m, &cfg.weights)?;
    Ok(Planned {
        plan: offload,
        graph: rw.graph,
        initial: rw.schedule,
        schedule,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub no_offload: SimReport,
    pub reactive: SimReport,
    pub graph_driven: SimReport,
}

/// Runs `g` three ways on `m`: everything device-resident with no cache
/// ops, the reactive baseline, and the planned graph.
pub fn compare(g: &GraphProgram, m: &MachineModel, cfg: &PipelineConfig) -> Result<Comparison> {
    let s0 = topo_order(g)?;
    let (base, base_order) = no_offload_variant(g, &s0)?;
    let tiered = strip_cache_ops(g);
    let tiered_order = Schedule::from_order(&tiered, base_order.order.clone())?;
    let planned = plan(g, m, cfg)?;
    Ok(Comparison {
        no_offload: simulate(&base, &base_order, m)?,
        reactive: run_reactive_baseline(&tiered, &tiered_order, m)?,
        graph_driven: simulate(&planned.graph, &planned.schedule, m)?,
    })
}

/// Drops cache ops and their control edges; tiers are left as declared,
/// which is what the reactive baseline runs on.
pub fn strip_cache_ops(g: &GraphProgram) -> GraphProgram {
    let mut out = g.clone();
    let cache: std::collections::BTreeSet<_> = g.cache_ops().map(|o| o.id).collect();
    out.ops.retain(|o| !cache.contains(&o.id));
    out.control_edges
        .retain(|(a, b)| !cache.contains(a) && !cache.contains(b));
    out
}

/// Which executor a capacity search runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NoOffload,
    Reactive,
    GraphDriven,
}

/// Simulates `g` under `mode` and returns the graph that actually ran
/// with its report.
pub fn run_mode(
    g: &GraphProgram,
    m: &MachineModel,
    mode: Mode,
    cfg: &PipelineConfig,
) -> Result<(GraphProgram, SimReport)> {
    let s0 = topo_order(g)?;
    match mode {
        Mode::NoOffload => {
            let (base, order) = no_offload_variant(g, &s0)?;
            let r = simulate(&base, &order, m)?;
            Ok((base, r))
        }
        Mode::Reactive => {
            let tiered = strip_cache_ops(g);
            let order = Schedule::from_order(
                &tiered,
                s0.order
                    .iter()
                    .copied()
                    .filter(|id| tiered.op(*id).is_some())
                    .collect(),
            )?;
            let r = run_reactive_baseline(&tiered, &order, m)?;
            Ok((tiered, r))
        }
        Mode::GraphDriven => {
            let p = plan(g, m, cfg)?;
            let r = simulate(&p.graph, &p.schedule, m)?;
            Ok((p.graph, r))
        }
    }
}

/// Whether the graph runs to completion on `m` without running out of
/// memory.
pub fn fits(g: &GraphProgram, m: &MachineModel, mode: Mode, cfg: &PipelineConfig) -> Result<bool> {
    Ok(run_mode(g, m, mode, cfg)?.1.oom.is_none())
}

/// Largest `n` in `lo..=hi` for which `make(n)` fits, assuming fit is
/// monotone in `n`. `None` when even `lo` does not fit.
pub fn max_fitting(
    lo: u64,
    hi: u64,
    mut make: impl FnMut(u64) -> Result<GraphProgram>,
    m: &MachineModel,
    mode: Mode,
    cfg: &PipelineConfig,
) -> Result<Option<u64>> {
    if !fits(&make(lo)?, m, mode, cfg)? {
        return Ok(None);
    }
    let (mut ok, mut bad) = (lo, hi + 1);
    while bad - ok > 1 {
        let mid = ok + (bad - ok) / 2;
        if fits(&make(mid)?, m, mode, cfg)? {
            ok = mid;
        } else {
            bad = mid;
        }
    }
    Ok(Some(ok))
}
