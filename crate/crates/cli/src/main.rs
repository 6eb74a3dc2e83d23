use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use tiered_offload::graph::{topo_order, validate, GraphProgram, Schedule, TensorKind};
use tiered_offload::machine::{gbps_to_bytes_per_us, MachineModel};
use tiered_offload::memory::CandidatePolicy;
use tiered_offload::pipeline::{self, Mode, PipelineConfig};
use tiered_offload::refine::CostWeights;
use tiered_offload::sim::{simulate, SimReport};
use tiered_offload::trace::emit_trace;
use tiered_offload::workloads::presets::{preset, WorkloadSpec, PRESET_NAMES};
use tiered_offload::workloads::random::{gen_random_dag, RandomDagSpec};

const PRECEDENCE: &str = "Settings are resolved as: command-line flags, then \
--spec / --machine files, then the --preset defaults. Bandwidths on the command \
line are GB/s decimals (1 GB = 10^9 bytes); files hold integer bytes and \
microseconds.";

#[derive(Parser)]
#[command(name = "offload", version, about = "Graph-level tiered-memory offload planner and simulator", after_help = PRECEDENCE)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a graph from a preset, a workload spec, or a random seed.
    Gen(GenArgs),
    /// Select, insert and refine cache ops; write graph, schedule, plan and log.
    Plan(PlanArgs),
    /// Simulate one configuration and print the report as JSON.
    Sim(SimArgs),
    /// Run no-offload, reactive and graph-driven side by side.
    Compare(CompareArgs),
    /// Plan once, then simulate across remote-link bandwidths; CSV output.
    Sweep(SweepArgs),
    /// Simulate and emit a Chrome trace-event file.
    Trace(SimArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Workload spec JSON (train or decode shape).
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    /// Generate a random DAG with this seed instead.
    #[arg(long, conflicts_with_all = ["preset", "spec"])]
    seed: Option<u64>,
    #[arg(long, short, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// Where the input graph comes from.
#[derive(Args, Clone)]
struct Source {
    /// Graph JSON file.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["preset", "spec"])]
    graph: Option<PathBuf>,
    /// Named preset; supplies both workload and machine defaults.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Workload spec JSON; overrides the preset's workload.
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct MachineArgs {
    /// Machine model JSON; overrides the preset's machine.
    #[arg(long, value_name = "FILE")]
    machine: Option<PathBuf>,
    /// R2D and D2R bandwidth in GB/s.
    #[arg(long, value_name = "GBPS")]
    bandwidth: Option<f64>,
    #[arg(long, value_name = "BYTES")]
    capacity: Option<u64>,
    /// Compaction (device-local copy) rate in GB/s.
    #[arg(long, value_name = "GBPS")]
    compaction: Option<f64>,
    /// Per-transfer control-path overhead of the reactive baseline.
    #[arg(long, value_name = "US")]
    reactive_overhead: Option<u64>,
}

#[derive(Args, Clone)]
struct PolicyArgs {
    /// Minimum idle-window / round-trip ratio.
    #[arg(long, value_name = "RATIO")]
    k: Option<f64>,
    #[arg(long, value_name = "BYTES")]
    min_bytes: Option<u64>,
    /// Comma-separated tensor kinds eligible for offload.
    #[arg(long, value_delimiter = ',', value_name = "KINDS")]
    kinds: Option<Vec<String>>,
    /// Cost per µs of exposed transfer.
    #[arg(long)]
    alpha: Option<f64>,
    /// Cost per byte·µs of early residency.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    src: Source,
    #[command(flatten)]
    machine: MachineArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Directory receiving graph.json, schedule.json, plan.json, refine.jsonl.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Also print the offload plan to standard output.
    #[arg(long)]
    emit_plan: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    NoOffload,
    Reactive,
    GraphDriven,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::NoOffload => Mode::NoOffload,
            ModeArg::Reactive => Mode::Reactive,
            ModeArg::GraphDriven => Mode::GraphDriven,
        }
    }
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    src: Source,
    #[command(flatten)]
    machine: MachineArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Run the graph as given in this order instead of planning it.
    #[arg(long, value_name = "FILE", requires = "graph", conflicts_with = "mode")]
    schedule: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, short, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    src: Source,
    #[command(flatten)]
    machine: MachineArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Print the three reports as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    src: Source,
    #[command(flatten)]
    machine: MachineArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Sweep an already planned graph in this order instead of planning it.
    #[arg(long, value_name = "FILE", requires = "graph")]
    schedule: Option<PathBuf>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "33.6,40,50,60,70",
        value_name = "GBPS,..."
    )]
    bandwidths: Vec<f64>,
    #[arg(long, short, value_name = "FILE")]
    out: Option<PathBuf>,
}

/// A failure that maps to a specific exit status.
#[derive(Debug)]
struct Oom(String);

impl std::fmt::Display for Oom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Oom {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Sim(a) => cmd_sim(a, false),
        Cmd::Trace(a) => cmd_sim(a, true),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Sweep(a) => cmd_sweep(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Oom>() => {
            println!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn with_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn workload(
    preset_name: Option<&str>,
    spec: Option<&Path>,
) -> Result<Option<(WorkloadSpec, MachineModel)>> {
    let base = preset_name.map(preset).transpose()?;
    let machine = base.as_ref().map(|p| p.machine.clone()).unwrap_or_default();
    let spec = match spec {
        Some(path) => Some(WorkloadSpec::from_json(&read(path)?)?),
        None => base.map(|p| p.workload),
    };
    Ok(spec.map(|s| (s, machine)))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let g = if let Some(seed) = a.seed {
        gen_random_dag(&RandomDagSpec::default(), seed)?.graph
    } else {
        match workload(a.preset.as_deref(), a.spec.as_deref())? {
            Some((spec, _)) => spec.generate()?,
            None => bail!(
                "one of --preset, --spec or --seed is required (presets: {})",
                PRESET_NAMES.join(", ")
            ),
        }
    };
    write_out(a.out.as_deref(), &with_newline(g.to_json()))
}

/// Loads the graph and the machine it should run on.
fn load(src: &Source, ma: &MachineArgs) -> Result<(GraphProgram, MachineModel)> {
    let (g, mut m) = if let Some(path) = &src.graph {
        let g = GraphProgram::from_json(&read(path)?)?;
        (g, MachineModel::default())
    } else {
        match workload(src.preset.as_deref(), src.spec.as_deref())? {
            Some((spec, m)) => (spec.generate()?, m),
            None => bail!("one of --graph, --preset or --spec is required"),
        }
    };
    let report = validate(&g);
    if !report.is_empty() {
        bail!("graph failed validation:\n{report}");
    }
    if let Some(path) = &ma.machine {
        m = MachineModel::from_json(&read(path)?)?;
    }
    if let Some(gbps) = ma.bandwidth {
        check_gbps("--bandwidth", gbps)?;
        m = m.with_bandwidth_gbps(gbps);
    }
    if let Some(c) = ma.capacity {
        m.device_capacity_bytes = c;
    }
    if let Some(gbps) = ma.compaction {
        check_gbps("--compaction", gbps)?;
        m.compaction_bandwidth_bytes_per_us = gbps_to_bytes_per_us(gbps);
    }
    if let Some(o) = ma.reactive_overhead {
        m.reactive_orchestration_overhead_us = o;
    }
    m.validate()?;
    Ok((g, m))
}

fn check_gbps(flag: &str, gbps: f64) -> Result<()> {
    if !(gbps.is_finite() && gbps > 0.0) {
        bail!("{flag} must be a positive number of GB/s, got {gbps}");
    }
    Ok(())
}

fn config(p: &PolicyArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(k) = p.k {
        cfg.policy.min_gap_ratio = k;
    }
    if let Some(b) = p.min_bytes {
        cfg.policy.min_tensor_bytes = b;
    }
    if let Some(kinds) = &p.kinds {
        cfg.policy.kinds_enabled = kinds
            .iter()
            .map(|k| k.trim().parse::<TensorKind>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(a) = p.alpha {
        cfg.weights.alpha = a;
    }
    if let Some(b) = p.beta {
        cfg.weights.beta = b;
    }
    CandidatePolicy::validate(&cfg.policy)?;
    CostWeights::validate(&cfg.weights)?;
    Ok(cfg)
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let (g, m) = load(&a.src, &a.machine)?;
    let cfg = config(&a.policy)?;
    let p = pipeline::plan(&g, &m, &cfg)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let dir = &a.out_dir;
    fs::write(dir.join("graph.json"), with_newline(p.graph.to_json()))?;
    fs::write(
        dir.join("schedule.json"),
        with_newline(p.schedule.to_json()),
    )?;
    fs::write(dir.join("plan.json"), with_newline(p.plan.to_json()))?;
    let mut log = String::new();
    for rec in &p.log {
        log.push_str(&serde_json::to_string(rec)?);
        log.push('\n');
    }
    fs::write(dir.join("refine.jsonl"), log)?;
    if a.emit_plan {
        write_out(None, &with_newline(p.plan.to_json()))?;
    }
    Ok(())
}

fn cmd_sim(a: SimArgs, trace: bool) -> Result<()> {
    let (g, m) = load(&a.src, &a.machine)?;
    let (ran, report) = if let Some(path) = &a.schedule {
        let s = Schedule::from_json(&read(path)?)?;
        let r = simulate(&g, &s, &m)?;
        (g, r)
    } else if a.mode.is_none() && a.src.graph.is_some() {
        let s = topo_order(&g)?;
        let r = simulate(&g, &s, &m)?;
        (g, r)
    } else {
        let mode = a.mode.map_or(Mode::GraphDriven, Mode::from);
        pipeline::run_mode(&g, &m, mode, &config(&a.policy)?)?
    };
    let text = if trace {
        serde_json::to_string_pretty(&emit_trace(&ran, &report))?
    } else {
        report.to_json()
    };
    if let Some(oom) = &report.oom {
        if a.out.is_some() {
            write_out(a.out.as_deref(), &with_newline(text))?;
        }
        return Err(Oom(serde_json::to_string_pretty(oom)?).into());
    }
    write_out(a.out.as_deref(), &with_newline(text))
}

fn cell(r: &SimReport, v: u64) -> String {
    if r.oom.is_some() {
        "oom".into()
    } else {
        v.to_string()
    }
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let (g, m) = load(&a.src, &a.machine)?;
    let c = pipeline::compare(&g, &m, &config(&a.policy)?)?;
    if a.json {
        write_out(None, &with_newline(serde_json::to_string_pretty(&c)?))?;
    } else {
        let mut t = format!(
            "{:<13} {:>16} {:>14} {:>14} {:>14} {:>7}\n",
            "run", "peak_bytes", "makespan_us", "exposed_us", "overlapped_us", "defrag"
        );
        for (name, r) in [
            ("no-offload", &c.no_offload),
            ("reactive", &c.reactive),
            ("graph-driven", &c.graph_driven),
        ] {
            t.push_str(&format!(
                "{:<13} {:>16} {:>14} {:>14} {:>14} {:>7}\n",
                name,
                r.peak_device_bytes,
                cell(r, r.makespan_us),
                cell(r, r.exposed_comm_us),
                cell(r, r.overlapped_comm_us),
                r.defrag_events
            ));
        }
        write_out(None, &t)?;
    }
    // the no-offload run may exceed capacity by design; the exit status
    // reflects the two offloading runs
    for (name, r) in [("reactive", &c.reactive), ("graph-driven", &c.graph_driven)] {
        if let Some(oom) = &r.oom {
            return Err(Oom(format!("{name}: {}", serde_json::to_string_pretty(oom)?)).into());
        }
    }
    Ok(())
}

struct SweepRow {
    gbps: f64,
    report: SimReport,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    if a.bandwidths.is_empty() {
        bail!("--bandwidths needs at least one value");
    }
    for &b in &a.bandwidths {
        check_gbps("--bandwidths", b)?;
    }
    let (g, m) = load(&a.src, &a.machine)?;
    // the program is fixed up front so only the link speed varies
    let (pg, ps) = match &a.schedule {
        Some(path) => {
            let s = Schedule::from_json(&read(path)?)?;
            (g, s)
        }
        None => {
            let p = pipeline::plan(&g, &m, &config(&a.policy)?)?;
            (p.graph, p.schedule)
        }
    };
    // par_iter + collect keeps input order
    let rows: Vec<SweepRow> = a
        .bandwidths
        .par_iter()
        .map(|&gbps| {
            let report = simulate(&pg, &ps, &m.with_bandwidth_gbps(gbps))?;
            Ok(SweepRow { gbps, report })
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from(
        "bandwidth_gbps,makespan_us,exposed_us,overlapped_us,peak_bytes,defrag_events\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.gbps,
            r.report.makespan_us,
            r.report.exposed_comm_us,
            r.report.overlapped_comm_us,
            r.report.peak_device_bytes,
            r.report.defrag_events
        ));
    }
    write_out(a.out.as_deref(), &csv)?;
    if let Some(r) = rows.iter().find(|r| r.report.oom.is_some()) {
        let oom = r.report.oom.as_ref().expect("checked");
        return Err(Oom(format!(
            "{} GB/s: {}",
            r.gbps,
            serde_json::to_string_pretty(oom)?
        ))
        .into());
    }
    sweep_self_check(&rows)
}

/// Exposed time must not grow as bandwidth grows.
fn sweep_self_check(rows: &[SweepRow]) -> Result<()> {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.gbps.total_cmp(&b.gbps));
    for w in sorted.windows(2) {
        if w[0].gbps < w[1].gbps && w[1].report.exposed_comm_us > w[0].report.exposed_comm_us {
            bail!(
                "sweep self-check failed: exposed_us rose from {} at {} GB/s to {} at {} GB/s",
                w[0].report.exposed_comm_us,
                w[0].gbps,
                w[1].report.exposed_comm_us,
                w[1].gbps
            );
        }
    }
    Ok(())
}
