//! Computation-graph representation with remote-cache operators as
//! first-class nodes.
//!
//! A [`GraphProgram`] is a set of tensor declarations, operator nodes and
//! explicit control edges. Data edges are implicit: every op reading a tensor
//! depends on the (single) op writing it. Cache operators (`Prefetch`,
//! `Store`, `Detach`) reference exactly one tensor and only participate in
//! the dependency relation through control edges.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TensorId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OpId(pub u32);

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Activation,
    Gradient,
    OptimizerState,
    KvBlock,
    Workspace,
}

impl TensorKind {
    pub const ALL: [TensorKind; 6] = [
        TensorKind::Weight,
        TensorKind::Activation,
        TensorKind::Gradient,
        TensorKind::OptimizerState,
        TensorKind::KvBlock,
        TensorKind::Workspace,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TensorKind::Weight => "weight",
            TensorKind::Activation => "activation",
            TensorKind::Gradient => "gradient",
            TensorKind::OptimizerState => "optimizer_state",
            TensorKind::KvBlock => "kv_block",
            TensorKind::Workspace => "workspace",
        }
    }
}

impl std::str::FromStr for TensorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TensorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown tensor kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Device,
    Remote,
}

/// A tensor whose residency cache operators manage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDecl {
    pub id: TensorId,
    pub bytes: u64,
    pub kind: TensorKind,
    pub initial_tier: Tier,
    #[serde(default)]
    pub pinned: bool,
    /// New version of an existing tensor that reuses its storage. An alias
    /// costs no extra device memory; the storage stays live while any
    /// version of it is live.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias_of: Option<TensorId>,
}

impl TensorDecl {
    pub fn new(id: u32, bytes: u64, kind: TensorKind) -> Self {
        TensorDecl {
            id: TensorId(id),
            bytes,
            kind,
            initial_tier: Tier::Device,
            pinned: false,
            alias_of: None,
        }
    }

    pub fn remote(mut self) -> Self {
        self.initial_tier = Tier::Remote;
        self
    }

    pub fn pinned(mut self) -> Self {
        self.pinned = true;
        self
    }

    pub fn alias_of(mut self, root: TensorId) -> Self {
        self.alias_of = Some(root);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Compute { cost_us: u64 },
    Prefetch { tensor_id: TensorId },
    Store { tensor_id: TensorId },
    Detach { tensor_id: TensorId },
}

impl OpKind {
    pub fn is_cache(&self) -> bool {
        !matches!(self, OpKind::Compute { .. })
    }

    /// Tensor managed by a cache operator.
    pub fn cache_tensor(&self) -> Option<TensorId> {
        match *self {
            OpKind::Compute { .. } => None,
            OpKind::Prefetch { tensor_id }
            | OpKind::Store { tensor_id }
            | OpKind::Detach { tensor_id } => Some(tensor_id),
        }
    }

    pub fn compute_cost(&self) -> u64 {
        match *self {
            OpKind::Compute { cost_us } => cost_us,
            _ => 0,
        }
    }

    pub fn stream(&self) -> Stream {
        match self {
            OpKind::Compute { .. } | OpKind::Detach { .. } => Stream::Compute,
            OpKind::Prefetch { .. } => Stream::DmaIn,
            OpKind::Store { .. } => Stream::DmaOut,
        }
    }

    fn tag(&self) -> OpTag {
        match self {
            OpKind::Compute { .. } => OpTag::Compute,
            OpKind::Prefetch { .. } => OpTag::Prefetch,
            OpKind::Store { .. } => OpTag::Store,
            OpKind::Detach { .. } => OpTag::Detach,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawOp", into = "RawOp")]
pub struct OpNode {
    pub id: OpId,
    pub kind: OpKind,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
}

impl OpNode {
    pub fn compute(id: u32, cost_us: u64, inputs: &[u32], outputs: &[u32]) -> Self {
        OpNode {
            id: OpId(id),
            kind: OpKind::Compute { cost_us },
            inputs: inputs.iter().map(|&t| TensorId(t)).collect(),
            outputs: outputs.iter().map(|&t| TensorId(t)).collect(),
        }
    }

    pub fn cache(id: OpId, kind: OpKind) -> Self {
        debug_assert!(kind.is_cache());
        OpNode {
            id,
            kind,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Every tensor the node references, cache target included.
    pub fn referenced_tensors(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.inputs
            .iter()
            .chain(self.outputs.iter())
            .copied()
            .chain(self.kind.cache_tensor())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum OpTag {
    Compute,
    Prefetch,
    Store,
    Detach,
}

/// Wire shape of an op: one flat object, strict about unknown keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOp {
    id: OpId,
    kind: OpTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cost_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tensor_id: Option<TensorId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<TensorId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    outputs: Vec<TensorId>,
}

impl TryFrom<RawOp> for OpNode {
    type Error = String;

    fn try_from(raw: RawOp) -> std::result::Result<Self, String> {
        let kind = match raw.kind {
            OpTag::Compute => {
                if raw.tensor_id.is_some() {
                    return Err(format!("compute op {} must not carry tensor_id", raw.id));
                }
                OpKind::Compute {
                    cost_us: raw
                        .cost_us
                        .ok_or_else(|| format!("compute op {} is missing cost_us", raw.id))?,
                }
            }
            tag => {
                if raw.cost_us.is_some() {
                    return Err(format!("cache op {} must not carry cost_us", raw.id));
                }
                let tensor_id = raw
                    .tensor_id
                    .ok_or_else(|| format!("cache op {} is missing tensor_id", raw.id))?;
                match tag {
                    OpTag::Prefetch => OpKind::Prefetch { tensor_id },
                    OpTag::Store => OpKind::Store { tensor_id },
                    OpTag::Detach => OpKind::Detach { tensor_id },
                    OpTag::Compute => unreachable!(),
                }
            }
        };
        Ok(OpNode {
            id: raw.id,
            kind,
            inputs: raw.inputs,
            outputs: raw.outputs,
        })
    }
}

impl From<OpNode> for RawOp {
    fn from(op: OpNode) -> Self {
        let cost_us = match op.kind {
            OpKind::Compute { cost_us } => Some(cost_us),
            _ => None,
        };
        RawOp {
            id: op.id,
            kind: op.kind.tag(),
            cost_us,
            tensor_id: op.kind.cache_tensor(),
            inputs: op.inputs,
            outputs: op.outputs,
        }
    }
}

/// The operator DAG.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphProgram {
    pub tensors: Vec<TensorDecl>,
    pub ops: Vec<OpNode>,
    #[serde(default)]
    pub control_edges: Vec<(OpId, OpId)>,
}

impl GraphProgram {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization is infallible")
    }

    pub fn tensor(&self, id: TensorId) -> Option<&TensorDecl> {
        // ids are usually dense, so try the index first
        match self.tensors.get(id.0 as usize) {
            Some(t) if t.id == id => Some(t),
            _ => self.tensors.iter().find(|t| t.id == id),
        }
    }

    pub fn op(&self, id: OpId) -> Option<&OpNode> {
        match self.ops.get(id.0 as usize) {
            Some(o) if o.id == id => Some(o),
            _ => self.ops.iter().find(|o| o.id == id),
        }
    }

    pub fn next_op_id(&self) -> u32 {
        self.ops.iter().map(|o| o.id.0 + 1).max().unwrap_or(0)
    }

    pub fn cache_ops(&self) -> impl Iterator<Item = &OpNode> {
        self.ops.iter().filter(|o| o.kind.is_cache())
    }

    /// Storage root of a tensor, following alias links.
    pub fn storage_root(&self, id: TensorId) -> TensorId {
        let mut cur = id;
        // bounded walk: a malformed alias cycle must not hang
        for _ in 0..=self.tensors.len() {
            match self.tensor(cur).and_then(|t| t.alias_of) {
                Some(next) => cur = next,
                None => return cur,
            }
        }
        cur
    }
}

/// Execution stream an op is issued on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stream {
    #[serde(rename = "COMPUTE")]
    Compute,
    #[serde(rename = "DMA_IN")]
    DmaIn,
    #[serde(rename = "DMA_OUT")]
    DmaOut,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Compute, Stream::DmaIn, Stream::DmaOut];

    pub fn index(self) -> usize {
        match self {
            Stream::Compute => 0,
            Stream::DmaIn => 1,
            Stream::DmaOut => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Compute => "COMPUTE",
            Stream::DmaIn => "DMA_IN",
            Stream::DmaOut => "DMA_OUT",
        }
    }
}

/// A total order over op ids plus the stream each op runs on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub order: Vec<OpId>,
    pub stream_of: BTreeMap<OpId, Stream>,
}

impl Schedule {
    /// Builds a schedule from an order, deriving streams from op kinds.
    pub fn from_order(g: &GraphProgram, order: Vec<OpId>) -> Result<Self> {
        let mut stream_of = BTreeMap::new();
        for id in &order {
            let op = g.op(*id).ok_or(Error::UnknownOp(*id))?;
            stream_of.insert(*id, op.kind.stream());
        }
        Ok(Schedule { order, stream_of })
    }

    pub fn positions(&self) -> HashMap<OpId, usize> {
        self.order
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serialization is infallible")
    }
}

/// A single well-formedness problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    DuplicateTensorId {
        tensor: TensorId,
    },
    DuplicateOpId {
        op: OpId,
    },
    ZeroBytes {
        tensor: TensorId,
    },
    PinnedRemote {
        tensor: TensorId,
    },
    DanglingTensor {
        op: OpId,
        tensor: TensorId,
    },
    DanglingControlEdge {
        before: OpId,
        after: OpId,
    },
    BadAlias {
        tensor: TensorId,
    },
    CacheOpShape {
        op: OpId,
    },
    MultiProducer {
        tensor: TensorId,
        producers: Vec<OpId>,
    },
    Cycle {
        ops: Vec<OpId>,
    },
    /// Consumer that may read a tensor after a Detach released it.
    ResidencyHazard {
        tensor: TensorId,
        detach: OpId,
        consumer: OpId,
    },
    /// Consumer of a remote-resident tensor not ordered after any Prefetch.
    UnloadedRemote {
        tensor: TensorId,
        consumer: OpId,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateTensorId { tensor } => write!(f, "duplicate tensor id {tensor}"),
            Violation::DuplicateOpId { op } => write!(f, "duplicate op id {op}"),
            Violation::ZeroBytes { tensor } => write!(f, "tensor {tensor} has zero bytes"),
            Violation::PinnedRemote { tensor } => {
                write!(f, "pinned tensor {tensor} must start on device")
            }
            Violation::DanglingTensor { op, tensor } => {
                write!(f, "{op} references unknown tensor {tensor}")
            }
            Violation::DanglingControlEdge { before, after } => {
                write!(f, "control edge {before} -> {after} names an unknown op")
            }
            Violation::BadAlias { tensor } => {
                write!(
                    f,
                    "tensor {tensor} aliases a missing tensor or forms an alias cycle"
                )
            }
            Violation::CacheOpShape { op } => {
                write!(f, "cache op {op} must have no inputs or outputs")
            }
            Violation::MultiProducer { tensor, producers } => {
                write!(
                    f,
                    "tensor {tensor} has {} producers: {producers:?}",
                    producers.len()
                )
            }
            Violation::Cycle { ops } => write!(f, "dependency cycle through {ops:?}"),
            Violation::ResidencyHazard {
                tensor,
                detach,
                consumer,
            } => write!(
                f,
                "{consumer} may read {tensor} after {detach} released it without a prefetch"
            ),
            Violation::UnloadedRemote { tensor, consumer } => write!(
                f,
                "{consumer} reads remote tensor {tensor} without a preceding prefetch"
            ),
        }
    }
}

/// List of violations; empty means well-formed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidationReport(pub Vec<Violation>);

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Violation> {
        self.0.iter()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Dense adjacency view of a graph, indexed by position in `g.ops`.
///
/// Built once per query batch. Duplicate ids are tolerated (first wins) so
/// that validation can run on malformed input.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    pub op_index: HashMap<OpId, usize>,
    pub tensor_index: HashMap<TensorId, usize>,
    /// Compute producer(s) of each tensor, by tensor index.
    pub producers: Vec<Vec<usize>>,
    /// Compute readers of each tensor, by tensor index, sorted by op id.
    pub readers: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
    pub succs: Vec<Vec<usize>>,
}

impl GraphIndex {
    pub fn new(g: &GraphProgram) -> Self {
        let mut op_index = HashMap::with_capacity(g.ops.len());
        for (i, op) in g.ops.iter().enumerate() {
            op_index.entry(op.id).or_insert(i);
        }
        let mut tensor_index = HashMap::with_capacity(g.tensors.len());
        for (i, t) in g.tensors.iter().enumerate() {
            tensor_index.entry(t.id).or_insert(i);
        }
        let mut producers = vec![Vec::new(); g.tensors.len()];
        let mut readers = vec![Vec::new(); g.tensors.len()];
        for (i, op) in g.ops.iter().enumerate() {
            if op.kind.is_cache() {
                continue;
            }
            for t in &op.outputs {
                if let Some(&ti) = tensor_index.get(t) {
                    if !producers[ti].contains(&i) {
                        producers[ti].push(i);
                    }
                }
            }
            for t in &op.inputs {
                if let Some(&ti) = tensor_index.get(t) {
                    if !readers[ti].contains(&i) {
                        readers[ti].push(i);
                    }
                }
            }
        }
        for r in &mut readers {
            r.sort_by_key(|&i| g.ops[i].id);
        }

        let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
        for (ti, prods) in producers.iter().enumerate() {
            for &p in prods {
                for &r in &readers[ti] {
                    edges.insert((p, r));
                }
            }
        }
        for (a, b) in &g.control_edges {
            if let (Some(&ia), Some(&ib)) = (op_index.get(a), op_index.get(b)) {
                edges.insert((ia, ib));
            }
        }
        let mut preds = vec![Vec::new(); g.ops.len()];
        let mut succs = vec![Vec::new(); g.ops.len()];
        for (a, b) in edges {
            succs[a].push(b);
            preds[b].push(a);
        }
        GraphIndex {
            op_index,
            tensor_index,
            producers,
            readers,
            preds,
            succs,
        }
    }

    /// All dependency edges as (before, after) op-index pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.succs
            .iter()
            .enumerate()
            .flat_map(|(a, ss)| ss.iter().map(move |&b| (a, b)))
    }

    /// Ops reachable from `start` (exclusive), as a bitmap over op indices.
    pub fn reachable_from(&self, start: usize) -> Vec<bool> {
        let mut seen = vec![false; self.succs.len()];
        let mut stack: Vec<usize> = self.succs[start].clone();
        while let Some(n) = stack.pop() {
            if !seen[n] {
                seen[n] = true;
                stack.extend(self.succs[n].iter().copied());
            }
        }
        seen
    }
}

/// Checks structural well-formedness. Violations are data, not errors.
pub fn validate(g: &GraphProgram) -> ValidationReport {
    let mut out = Vec::new();

    let mut seen_t = BTreeSet::new();
    for t in &g.tensors {
        if !seen_t.insert(t.id) {
            out.push(Violation::DuplicateTensorId { tensor: t.id });
        }
        if t.bytes == 0 {
            out.push(Violation::ZeroBytes { tensor: t.id });
        }
        if t.pinned && t.initial_tier == Tier::Remote {
            out.push(Violation::PinnedRemote { tensor: t.id });
        }
    }
    for t in &g.tensors {
        if let Some(root) = t.alias_of {
            let mut cur = root;
            let mut ok = false;
            for _ in 0..=g.tensors.len() {
                if cur == t.id || !seen_t.contains(&cur) {
                    break;
                }
                match g.tensor(cur).and_then(|d| d.alias_of) {
                    Some(next) => cur = next,
                    None => {
                        ok = true;
                        break;
                    }
                }
            }
            if !ok {
                out.push(Violation::BadAlias { tensor: t.id });
            }
        }
    }

    let mut seen_o = BTreeSet::new();
    for op in &g.ops {
        if !seen_o.insert(op.id) {
            out.push(Violation::DuplicateOpId { op: op.id });
        }
        if op.kind.is_cache() && (!op.inputs.is_empty() || !op.outputs.is_empty()) {
            out.push(Violation::CacheOpShape { op: op.id });
        }
        let mut dangling = BTreeSet::new();
        for t in op.referenced_tensors() {
            if !seen_t.contains(&t) {
                dangling.insert(t);
            }
        }
        out.extend(
            dangling
                .into_iter()
                .map(|tensor| Violation::DanglingTensor { op: op.id, tensor }),
        );
    }
    for &(before, after) in &g.control_edges {
        if !seen_o.contains(&before) || !seen_o.contains(&after) {
            out.push(Violation::DanglingControlEdge { before, after });
        }
    }

    let idx = GraphIndex::new(g);
    for (ti, prods) in idx.producers.iter().enumerate() {
        if prods.len() > 1 {
            let mut producers: Vec<OpId> = prods.iter().map(|&i| g.ops[i].id).collect();
            producers.sort();
            out.push(Violation::MultiProducer {
                tensor: g.tensors[ti].id,
                producers,
            });
        }
    }
    // Self-loop: op reading a tensor it also writes.
    for (i, op) in g.ops.iter().enumerate() {
        if idx.succs[i].contains(&i) {
            out.push(Violation::Cycle { ops: vec![op.id] });
        }
    }
    for cycle in find_cycles(g, &idx) {
        out.push(Violation::Cycle { ops: cycle });
    }
    ValidationReport(out)
}

/// One representative cycle per non-trivial strongly connected component.
fn find_cycles(g: &GraphProgram, idx: &GraphIndex) -> Vec<Vec<OpId>> {
    let n = g.ops.len();
    // Kahn: whatever is never released sits on or behind a cycle.
    let mut indeg: Vec<usize> = (0..n)
        .map(|i| idx.preds[i].iter().filter(|&&p| p != i).count())
        .collect();
    let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut done = vec![false; n];
    while let Some(v) = stack.pop() {
        done[v] = true;
        for &s in &idx.succs[v] {
            if s != v {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    stack.push(s);
                }
            }
        }
    }
    if done.iter().all(|&d| d) {
        return Vec::new();
    }

    // Restrict to the stuck subgraph and peel off its nodes that cannot
    // reach a cycle (no stuck successors), leaving the cycle cores.
    let stuck: Vec<bool> = done.iter().map(|d| !d).collect();
    let mut alive = stuck.clone();
    loop {
        let mut changed = false;
        for v in 0..n {
            if alive[v] && !idx.succs[v].iter().any(|&s| s != v && alive[s]) {
                alive[v] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut cycles = Vec::new();
    let mut claimed = vec![false; n];
    for start in 0..n {
        if !alive[start] || claimed[start] {
            continue;
        }
        // Walk successors inside the core until a node repeats.
        let mut path = vec![start];
        let mut on_path = HashMap::new();
        on_path.insert(start, 0usize);
        let mut cur = start;
        let cycle = loop {
            let next = idx.succs[cur]
                .iter()
                .copied()
                .filter(|&s| s != cur && alive[s])
                .min_by_key(|&s| g.ops[s].id)
                .expect("core nodes keep a core successor");
            if let Some(&at) = on_path.get(&next) {
                break path[at..].to_vec();
            }
            on_path.insert(next, path.len());
            path.push(next);
            cur = next;
        };
        // Claim the whole component so each SCC is reported once.
        let comp = scc_members(idx, &alive, cycle[0]);
        for &c in &comp {
            claimed[c] = true;
        }
        for &p in &path {
            if comp.contains(&p) {
                claimed[p] = true;
            }
        }
        let mut ids: Vec<OpId> = cycle.iter().map(|&i| g.ops[i].id).collect();
        let min_at = ids
            .iter()
            .enumerate()
            .min_by_key(|(_, id)| **id)
            .map(|(i, _)| i)
            .unwrap_or(0);
        ids.rotate_left(min_at);
        cycles.push(ids);
    }
    cycles
}

fn scc_members(idx: &GraphIndex, alive: &[bool], root: usize) -> BTreeSet<usize> {
    let reach = |forward: bool| {
        let mut seen = BTreeSet::new();
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            if !seen.insert(v) {
                continue;
            }
            let next = if forward {
                &idx.succs[v]
            } else {
                &idx.preds[v]
            };
            stack.extend(next.iter().copied().filter(|&s| alive[s]));
        }
        seen
    };
    let fwd = reach(true);
    let bwd = reach(false);
    fwd.intersection(&bwd).copied().collect()
}

/// Deterministic topological order: among ready ops, smallest id first.
pub fn topo_order(g: &GraphProgram) -> Result<Schedule> {
    let report = validate(g);
    if !report.is_empty() {
        return Err(Error::InvalidGraph(report));
    }
    let idx = GraphIndex::new(g);
    let n = g.ops.len();
    let mut indeg: Vec<usize> = idx.preds.iter().map(Vec::len).collect();
    let mut ready: BTreeSet<(OpId, usize)> = (0..n)
        .filter(|&i| indeg[i] == 0)
        .map(|i| (g.ops[i].id, i))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some((id, i)) = ready.pop_first() {
        order.push(id);
        for &s in &idx.succs[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.insert((g.ops[s].id, s));
            }
        }
    }
    if order.len() != n {
        return Err(Error::InvalidSchedule("graph contains a cycle".into()));
    }
    Schedule::from_order(g, order)
}

/// Ops reading tensor `t`, in op-id order.
pub fn consumers(g: &GraphProgram, t: TensorId) -> Result<Vec<OpId>> {
    if g.tensor(t).is_none() {
        return Err(Error::UnknownTensor(t));
    }
    let mut ids: Vec<OpId> = g
        .ops
        .iter()
        .filter(|op| !op.kind.is_cache() && op.inputs.contains(&t))
        .map(|op| op.id)
        .collect();
    ids.sort();
    ids.dedup();
    Ok(ids)
}

/// Checks that `order` is a permutation of g's ops respecting every
/// dependency edge, and that streams match op kinds.
pub fn check_schedule(g: &GraphProgram, s: &Schedule) -> Result<()> {
    let idx = GraphIndex::new(g);
    check_order(g, &idx, &s.order)?;
    for op in &g.ops {
        match s.stream_of.get(&op.id) {
            Some(&st) if st == op.kind.stream() => {}
            Some(st) => {
                return Err(Error::InvalidSchedule(format!(
                    "{} is on {} but its kind requires {}",
                    op.id,
                    st.as_str(),
                    op.kind.stream().as_str()
                )))
            }
            None => {
                return Err(Error::InvalidSchedule(format!("{} has no stream", op.id)));
            }
        }
    }
    if s.stream_of.len() != g.ops.len() {
        return Err(Error::InvalidSchedule(
            "stream map names ops outside the graph".into(),
        ));
    }
    Ok(())
}

/// Order-only part of [`check_schedule`].
pub fn check_order(g: &GraphProgram, idx: &GraphIndex, order: &[OpId]) -> Result<()> {
    if order.len() != g.ops.len() {
        return Err(Error::InvalidSchedule(format!(
            "order has {} entries for {} ops",
            order.len(),
            g.ops.len()
        )));
    }
    let mut pos = vec![usize::MAX; g.ops.len()];
    for (p, id) in order.iter().enumerate() {
        let &i = idx.op_index.get(id).ok_or(Error::UnknownOp(*id))?;
        if pos[i] != usize::MAX {
            return Err(Error::InvalidSchedule(format!("{id} appears twice")));
        }
        pos[i] = p;
    }
    for (a, b) in idx.edges() {
        if pos[a] >= pos[b] {
            return Err(Error::InvalidSchedule(format!(
                "{} must precede {}",
                g.ops[a].id, g.ops[b].id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> GraphProgram {
        GraphProgram {
            tensors: vec![
                TensorDecl::new(0, 8, TensorKind::Activation),
                TensorDecl::new(1, 8, TensorKind::Activation),
            ],
            ops: vec![
                OpNode::compute(0, 1, &[], &[0]),
                OpNode::compute(1, 1, &[0], &[1]),
                OpNode::compute(2, 1, &[1], &[]),
            ],
            control_edges: vec![],
        }
    }

    #[test]
    fn empty_graph_is_valid() {
        let g = GraphProgram::default();
        assert!(validate(&g).is_empty());
        assert!(topo_order(&g).unwrap().order.is_empty());
    }

    #[test]
    fn two_producers_is_one_violation() {
        let g = GraphProgram {
            tensors: vec![TensorDecl::new(0, 8, TensorKind::Activation)],
            ops: vec![
                OpNode::compute(0, 1, &[], &[0]),
                OpNode::compute(1, 1, &[], &[0]),
            ],
            control_edges: vec![],
        };
        let r = validate(&g);
        assert_eq!(
            r.0,
            vec![Violation::MultiProducer {
                tensor: TensorId(0),
                producers: vec![OpId(0), OpId(1)]
            }]
        );
    }

    #[test]
    fn control_edge_cycle_is_named() {
        let g = GraphProgram {
            tensors: vec![],
            ops: (0..4).map(|i| OpNode::compute(i, 1, &[], &[])).collect(),
            control_edges: vec![(OpId(1), OpId(2)), (OpId(2), OpId(3)), (OpId(3), OpId(1))],
        };
        let r = validate(&g);
        assert_eq!(
            r.0,
            vec![Violation::Cycle {
                ops: vec![OpId(1), OpId(2), OpId(3)]
            }]
        );
        assert!(topo_order(&g).is_err());
    }

    #[test]
    fn dangling_and_shape_violations() {
        let g = GraphProgram {
            tensors: vec![TensorDecl::new(0, 0, TensorKind::Weight).remote().pinned()],
            ops: vec![
                OpNode::compute(0, 1, &[5], &[]),
                OpNode {
                    id: OpId(1),
                    kind: OpKind::Prefetch {
                        tensor_id: TensorId(0),
                    },
                    inputs: vec![TensorId(0)],
                    outputs: vec![],
                },
            ],
            control_edges: vec![(OpId(0), OpId(9))],
        };
        let r = validate(&g);
        assert!(r.0.contains(&Violation::ZeroBytes {
            tensor: TensorId(0)
        }));
        assert!(r.0.contains(&Violation::PinnedRemote {
            tensor: TensorId(0)
        }));
        assert!(r.0.contains(&Violation::DanglingTensor {
            op: OpId(0),
            tensor: TensorId(5)
        }));
        assert!(r.0.contains(&Violation::CacheOpShape { op: OpId(1) }));
        assert!(r.0.contains(&Violation::DanglingControlEdge {
            before: OpId(0),
            after: OpId(9)
        }));
    }

    #[test]
    fn chain_and_diamond_orders() {
        let s = topo_order(&chain()).unwrap();
        assert_eq!(s.order, vec![OpId(0), OpId(1), OpId(2)]);

        let g = GraphProgram {
            tensors: vec![],
            ops: vec![
                OpNode::compute(3, 1, &[], &[]),
                OpNode::compute(2, 1, &[], &[]),
                OpNode::compute(1, 1, &[], &[]),
                OpNode::compute(0, 1, &[], &[]),
            ],
            control_edges: vec![
                (OpId(0), OpId(1)),
                (OpId(0), OpId(2)),
                (OpId(1), OpId(3)),
                (OpId(2), OpId(3)),
            ],
        };
        let s = topo_order(&g).unwrap();
        assert_eq!(s.order, vec![OpId(0), OpId(1), OpId(2), OpId(3)]);
        check_schedule(&g, &s).unwrap();
    }

    #[test]
    fn consumers_sorted_and_checked() {
        let g = GraphProgram {
            tensors: vec![
                TensorDecl::new(0, 8, TensorKind::Weight),
                TensorDecl::new(1, 8, TensorKind::Weight),
            ],
            ops: vec![
                OpNode::compute(7, 1, &[0], &[]),
                OpNode::compute(3, 1, &[0], &[]),
            ],
            control_edges: vec![],
        };
        assert_eq!(consumers(&g, TensorId(0)).unwrap(), vec![OpId(3), OpId(7)]);
        assert!(consumers(&g, TensorId(1)).unwrap().is_empty());
        assert!(matches!(
            consumers(&g, TensorId(4)),
            Err(Error::UnknownTensor(_))
        ));
    }

    #[test]
    fn json_is_strict_and_tagged() {
        let text = r#"{"tensors":[{"id":0,"bytes":4,"kind":"kv_block","initial_tier":"remote","pinned":false}],
            "ops":[{"id":0,"kind":"prefetch","tensor_id":0},{"id":1,"kind":"compute","cost_us":5,"inputs":[0]}],
            "control_edges":[[0,1]]}"#;
        let g = GraphProgram::from_json(text).unwrap();
        assert_eq!(
            g.ops[0].kind,
            OpKind::Prefetch {
                tensor_id: TensorId(0)
            }
        );
        assert_eq!(GraphProgram::from_json(&g.to_json()).unwrap(), g);

        let extra = text.replacen("\"pinned\":false", "\"pinned\":false,\"color\":1", 1);
        assert!(GraphProgram::from_json(&extra).is_err());
        let bad_op = text.replacen("\"tensor_id\":0}", "\"tensor_id\":0,\"cost_us\":3}", 1);
        assert!(GraphProgram::from_json(&bad_op).is_err());
    }

    #[test]
    fn schedule_streams_are_checked() {
        let g = chain();
        let mut s = topo_order(&g).unwrap();
        s.stream_of.insert(OpId(1), Stream::DmaIn);
        assert!(check_schedule(&g, &s).is_err());
        let s = Schedule::from_order(&g, vec![OpId(1), OpId(0), OpId(2)]).unwrap();
        assert!(check_schedule(&g, &s).is_err());
    }
}
