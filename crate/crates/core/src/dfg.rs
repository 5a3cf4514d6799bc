//! Dataflow-graph data model and the line-oriented interchange format.
//!
//! A document looks like:
//!
//! ```text
//! dfg v1 latency=12
//! node 0 alloca memory-op width=32 words=64
//! node 1 load memory-op width=32
//! node 2 add binary-op width=32
//! edge 0 1 var=p width=32
//! edge 1 2 var=x width=32
//! ```
//!
//! Node lines may carry `mem=<words>` (buffer nodes only), `words=<n>` (the
//! declared size of an `alloca`) and `share=<key>` (resource-sharing hint
//! consumed by datapath merging). Edge lines may end with `back` to tag a
//! control back-edge, which is excluded from every datapath analysis.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use thiserror::Error;

pub const DFG_SCHEMA: &str = "dfg v1";

/// Widest value the interpreter and trace format can carry.
pub const MAX_BITWIDTH: u32 = 128;

pub type NodeId = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DfgError {
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("line {line}: unknown opcode `{name}`")]
    UnknownOpcode { line: usize, name: String },
    #[error("line {line}: edge references nonexistent node {node}")]
    DanglingEdge { line: usize, node: NodeId },
    #[error("line {line}: duplicate node id {id}")]
    DuplicateNode { line: usize, id: NodeId },
    #[error("line {line}: self-loop on node {node}")]
    SelfLoop { line: usize, node: NodeId },
    #[error("line {line}: duplicate edge {src}->{snk} var={var}")]
    DuplicateEdge {
        line: usize,
        src: NodeId,
        snk: NodeId,
        var: String,
    },
    #[error("node {id}: {msg}")]
    Annotation { id: NodeId, msg: String },
    #[error("cyclic datapath through node {node}")]
    Cycle { node: NodeId },
}

/// Categorical IR operation type, one-hot encoded as a node feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpType {
    BinaryOp,
    MemoryOp,
    CastOp,
    ControlOp,
    BufferOp,
}

impl OpType {
    pub const ALL: [OpType; 5] = [
        OpType::BinaryOp,
        OpType::MemoryOp,
        OpType::CastOp,
        OpType::ControlOp,
        OpType::BufferOp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpType::BinaryOp => "binary-op",
            OpType::MemoryOp => "memory-op",
            OpType::CastOp => "cast-op",
            OpType::ControlOp => "control-op",
            OpType::BufferOp => "buffer-op",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for OpType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpType::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown op_type `{s}`"))
    }
}

impl fmt::Display for OpType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Opcode registered through a [`Vocabulary`] extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExtOpcode {
    pub index: u16,
    pub arithmetic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Add,
    Sub,
    Mul,
    Div,
    FAdd,
    FSub,
    FMul,
    FDiv,
    ICmp,
    FCmp,
    Alloca,
    GetElementPtr,
    Load,
    Store,
    Trunc,
    SExt,
    ZExt,
    BitCast,
    Phi,
    Select,
    Br,
    Ret,
    Buffer,
    Ext(ExtOpcode),
}

impl Opcode {
    pub const BUILTIN: [Opcode; 23] = [
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::Div,
        Opcode::FAdd,
        Opcode::FSub,
        Opcode::FMul,
        Opcode::FDiv,
        Opcode::ICmp,
        Opcode::FCmp,
        Opcode::Alloca,
        Opcode::GetElementPtr,
        Opcode::Load,
        Opcode::Store,
        Opcode::Trunc,
        Opcode::SExt,
        Opcode::ZExt,
        Opcode::BitCast,
        Opcode::Phi,
        Opcode::Select,
        Opcode::Br,
        Opcode::Ret,
        Opcode::Buffer,
    ];

    /// Name for built-in opcodes; extension names live in the vocabulary.
    pub fn builtin_name(self) -> Option<&'static str> {
        Some(match self {
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Mul => "mul",
            Opcode::Div => "div",
            Opcode::FAdd => "fadd",
            Opcode::FSub => "fsub",
            Opcode::FMul => "fmul",
            Opcode::FDiv => "fdiv",
            Opcode::ICmp => "icmp",
            Opcode::FCmp => "fcmp",
            Opcode::Alloca => "alloca",
            Opcode::GetElementPtr => "getelementptr",
            Opcode::Load => "load",
            Opcode::Store => "store",
            Opcode::Trunc => "trunc",
            Opcode::SExt => "sext",
            Opcode::ZExt => "zext",
            Opcode::BitCast => "bitcast",
            Opcode::Phi => "phi",
            Opcode::Select => "select",
            Opcode::Br => "br",
            Opcode::Ret => "ret",
            Opcode::Buffer => "buffer",
            Opcode::Ext(_) => return None,
        })
    }

    pub fn is_arithmetic(self) -> bool {
        match self {
            Opcode::Add
            | Opcode::Sub
            | Opcode::Mul
            | Opcode::Div
            | Opcode::FAdd
            | Opcode::FSub
            | Opcode::FMul
            | Opcode::FDiv
            | Opcode::ICmp
            | Opcode::FCmp => true,
            Opcode::Ext(ext) => ext.arithmetic,
            _ => false,
        }
    }

    pub fn is_cast(self) -> bool {
        matches!(
            self,
            Opcode::Trunc | Opcode::SExt | Opcode::ZExt | Opcode::BitCast
        )
    }

    /// The op_type this opcode naturally belongs to.
    pub fn default_op_type(self) -> OpType {
        match self {
            Opcode::Alloca | Opcode::GetElementPtr | Opcode::Load | Opcode::Store => {
                OpType::MemoryOp
            }
            Opcode::Trunc | Opcode::SExt | Opcode::ZExt | Opcode::BitCast => OpType::CastOp,
            Opcode::Phi | Opcode::Select | Opcode::Br | Opcode::Ret => OpType::ControlOp,
            Opcode::Buffer => OpType::BufferOp,
            Opcode::Ext(ext) if !ext.arithmetic => OpType::ControlOp,
            _ => OpType::BinaryOp,
        }
    }
}

/// Arithmetic (A) or non-arithmetic (N) node class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeClass {
    A,
    N,
}

/// A node is arithmetic iff its opcode belongs to the arithmetic group.
pub fn classify_node(node: &DfgNode) -> NodeClass {
    if node.opcode.is_arithmetic() {
        NodeClass::A
    } else {
        NodeClass::N
    }
}

/// The opcode vocabulary: the fixed built-in set plus optional extensions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    extensions: Vec<(String, bool)>,
}

impl Vocabulary {
    pub fn builtin() -> Arc<Vocabulary> {
        static BUILTIN: OnceLock<Arc<Vocabulary>> = OnceLock::new();
        BUILTIN
            .get_or_init(|| Arc::new(Vocabulary::default()))
            .clone()
    }

    /// Registers an extra opcode name; returns the opcode it maps to.
    pub fn extend(&mut self, name: &str, arithmetic: bool) -> Result<Opcode, String> {
        if self.lookup(name).is_some() {
            return Err(format!("opcode `{name}` already in vocabulary"));
        }
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(format!("invalid opcode name `{name}`"));
        }
        let index = u16::try_from(self.extensions.len()).map_err(|_| "vocabulary full")?;
        self.extensions.push((name.to_string(), arithmetic));
        Ok(Opcode::Ext(ExtOpcode { index, arithmetic }))
    }

    pub fn lookup(&self, name: &str) -> Option<Opcode> {
        Opcode::BUILTIN
            .into_iter()
            .find(|op| op.builtin_name() == Some(name))
            .or_else(|| {
                self.extensions
                    .iter()
                    .position(|(n, _)| n == name)
                    .map(|i| {
                        Opcode::Ext(ExtOpcode {
                            index: i as u16,
                            arithmetic: self.extensions[i].1,
                        })
                    })
            })
    }

    pub fn name(&self, op: Opcode) -> &str {
        match op {
            Opcode::Ext(ext) => &self.extensions[ext.index as usize].0,
            other => other.builtin_name().unwrap_or("?"),
        }
    }

    /// Total number of opcodes, i.e. the width of the opcode one-hot block.
    pub fn len(&self) -> usize {
        Opcode::BUILTIN.len() + self.extensions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn one_hot_index(&self, op: Opcode) -> usize {
        match op {
            Opcode::Ext(ext) => Opcode::BUILTIN.len() + ext.index as usize,
            other => Opcode::BUILTIN
                .iter()
                .position(|b| *b == other)
                .expect("builtin opcode"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DfgNode {
    pub id: NodeId,
    pub opcode: Opcode,
    pub op_type: OpType,
    pub bitwidth: u32,
    /// Memory words of a buffer node; present iff the opcode is `buffer`.
    pub resource_annotation: Option<u64>,
    /// Declared array size of an `alloca`.
    pub declared_words: Option<u64>,
    /// Nodes with equal keys are bound to the same hardware resource.
    pub share_key: Option<String>,
}

impl DfgNode {
    pub fn new(id: NodeId, opcode: Opcode, bitwidth: u32) -> Self {
        DfgNode {
            id,
            opcode,
            op_type: opcode.default_op_type(),
            bitwidth,
            resource_annotation: None,
            declared_words: None,
            share_key: None,
        }
    }

    pub fn buffer(id: NodeId, bitwidth: u32, words: u64) -> Self {
        DfgNode {
            resource_annotation: Some(words),
            ..DfgNode::new(id, Opcode::Buffer, bitwidth)
        }
    }

    pub fn with_words(mut self, words: u64) -> Self {
        self.declared_words = Some(words);
        self
    }

    pub fn with_share(mut self, key: impl Into<String>) -> Self {
        self.share_key = Some(key.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DfgEdge {
    pub src: NodeId,
    pub snk: NodeId,
    pub var: String,
    pub bitwidth: u32,
    /// Control back-edge (loop-carried); ignored by datapath analyses.
    pub back: bool,
}

impl DfgEdge {
    pub fn new(src: NodeId, snk: NodeId, var: impl Into<String>, bitwidth: u32) -> Self {
        DfgEdge {
            src,
            snk,
            var: var.into(),
            bitwidth,
            back: false,
        }
    }

    pub fn back_edge(src: NodeId, snk: NodeId, var: impl Into<String>, bitwidth: u32) -> Self {
        DfgEdge {
            back: true,
            ..DfgEdge::new(src, snk, var, bitwidth)
        }
    }

    pub fn key(&self) -> EdgeKey {
        EdgeKey {
            src: self.src,
            snk: self.snk,
            var: self.var.clone(),
        }
    }
}

/// Identity of an edge: the (src, snk, var) triple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeKey {
    pub src: NodeId,
    pub snk: NodeId,
    pub var: String,
}

impl fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{} var={}", self.src, self.snk, self.var)
    }
}

/// A validated dataflow graph. Nodes are kept sorted by id and edges by
/// (src, snk, var), so equality and serialization are order-independent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dfg {
    latency: u64,
    nodes: Vec<DfgNode>,
    edges: Vec<DfgEdge>,
    vocab: Arc<Vocabulary>,
}

impl Dfg {
    pub fn new(latency: u64, nodes: Vec<DfgNode>, edges: Vec<DfgEdge>) -> Result<Dfg, DfgError> {
        Dfg::with_vocabulary(latency, nodes, edges, Vocabulary::builtin())
    }

    pub fn with_vocabulary(
        latency: u64,
        mut nodes: Vec<DfgNode>,
        mut edges: Vec<DfgEdge>,
        vocab: Arc<Vocabulary>,
    ) -> Result<Dfg, DfgError> {
        if latency == 0 {
            return Err(DfgError::Schema {
                line: 0,
                msg: "latency must be positive".into(),
            });
        }
        nodes.sort_by_key(|n| n.id);
        edges.sort_by(|a, b| (a.src, a.snk, &a.var).cmp(&(b.src, b.snk, &b.var)));
        let g = Dfg {
            latency,
            nodes,
            edges,
            vocab,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<(), DfgError> {
        for pair in self.nodes.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(DfgError::DuplicateNode {
                    line: 0,
                    id: pair[1].id,
                });
            }
        }
        for n in &self.nodes {
            check_node(n).map_err(|msg| DfgError::Annotation { id: n.id, msg })?;
        }
        for (i, e) in self.edges.iter().enumerate() {
            for end in [e.src, e.snk] {
                if self.node(end).is_none() {
                    return Err(DfgError::DanglingEdge { line: 0, node: end });
                }
            }
            if e.src == e.snk {
                return Err(DfgError::SelfLoop {
                    line: 0,
                    node: e.src,
                });
            }
            if e.bitwidth == 0 || e.bitwidth > MAX_BITWIDTH {
                return Err(DfgError::Schema {
                    line: 0,
                    msg: format!("edge {} has invalid width {}", e.key(), e.bitwidth),
                });
            }
            if i > 0 {
                let p = &self.edges[i - 1];
                if p.src == e.src && p.snk == e.snk && p.var == e.var {
                    return Err(DfgError::DuplicateEdge {
                        line: 0,
                        src: e.src,
                        snk: e.snk,
                        var: e.var.clone(),
                    });
                }
            }
        }
        self.topo_order().map(|_| ())
    }

    pub fn latency(&self) -> u64 {
        self.latency
    }

    pub fn nodes(&self) -> &[DfgNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[DfgEdge] {
        &self.edges
    }

    pub fn vocabulary(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn node(&self, id: NodeId) -> Option<&DfgNode> {
        self.nodes
            .binary_search_by_key(&id, |n| n.id)
            .ok()
            .map(|i| &self.nodes[i])
    }

    /// Dense position of a node id in [`Dfg::nodes`].
    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    pub fn datapath_edges(&self) -> impl Iterator<Item = &DfgEdge> {
        self.edges.iter().filter(|e| !e.back)
    }

    /// Nodes without incoming datapath edges.
    pub fn entries(&self) -> Vec<NodeId> {
        let has_in: BTreeSet<NodeId> = self.datapath_edges().map(|e| e.snk).collect();
        self.nodes
            .iter()
            .map(|n| n.id)
            .filter(|id| !has_in.contains(id))
            .collect()
    }

    /// Nodes without outgoing datapath edges.
    pub fn exits(&self) -> Vec<NodeId> {
        let has_out: BTreeSet<NodeId> = self.datapath_edges().map(|e| e.src).collect();
        self.nodes
            .iter()
            .map(|n| n.id)
            .filter(|id| !has_out.contains(id))
            .collect()
    }

    /// Kahn order over datapath edges, smallest id first among ready nodes.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, DfgError> {
        let mut indeg: BTreeMap<NodeId, usize> = self.nodes.iter().map(|n| (n.id, 0)).collect();
        let mut succ: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for e in self.datapath_edges() {
            *indeg.get_mut(&e.snk).expect("validated") += 1;
            succ.entry(e.src).or_default().push(e.snk);
        }
        let mut ready: BTreeSet<NodeId> = indeg
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| *id)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for s in succ.get(&id).into_iter().flatten() {
                let d = indeg.get_mut(s).expect("validated");
                *d -= 1;
                if *d == 0 {
                    ready.insert(*s);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = indeg
                .iter()
                .find(|(_, d)| **d > 0)
                .map(|(id, _)| *id)
                .unwrap_or_default();
            return Err(DfgError::Cycle { node: stuck });
        }
        Ok(order)
    }

    /// Longest-path level of each node over datapath edges (entries at 0).
    pub fn levels(&self) -> BTreeMap<NodeId, u64> {
        let order = self.topo_order().expect("validated graph is acyclic");
        let mut level: BTreeMap<NodeId, u64> = self.nodes.iter().map(|n| (n.id, 0)).collect();
        let mut succ: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for e in self.datapath_edges() {
            succ.entry(e.src).or_default().push(e.snk);
        }
        for id in order {
            let l = level[&id];
            for s in succ.get(&id).into_iter().flatten() {
                let entry = level.get_mut(s).expect("node");
                *entry = (*entry).max(l + 1);
            }
        }
        level
    }

    /// Transitive closure over datapath edges: for each node, the set of
    /// nodes reachable from it (excluding itself).
    pub fn reachability(&self) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
        let mut succ: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for e in self.datapath_edges() {
            succ.entry(e.src).or_default().push(e.snk);
        }
        self.nodes
            .iter()
            .map(|n| {
                let mut seen = BTreeSet::new();
                let mut queue: VecDeque<NodeId> =
                    succ.get(&n.id).cloned().unwrap_or_default().into();
                while let Some(v) = queue.pop_front() {
                    if seen.insert(v) {
                        queue.extend(succ.get(&v).into_iter().flatten().copied());
                    }
                }
                (n.id, seen)
            })
            .collect()
    }
}

fn check_node(n: &DfgNode) -> Result<(), String> {
    if n.bitwidth == 0 || n.bitwidth > MAX_BITWIDTH {
        return Err(format!("invalid width {}", n.bitwidth));
    }
    let is_buffer = n.opcode == Opcode::Buffer;
    if is_buffer != n.resource_annotation.is_some() {
        return Err("mem= must be present exactly on buffer nodes".into());
    }
    if n.declared_words.is_some() && n.opcode != Opcode::Alloca {
        return Err("words= is only valid on alloca nodes".into());
    }
    if let Some(key) = &n.share_key {
        if key.is_empty() || key.chars().any(char::is_whitespace) {
            return Err(format!("invalid share key `{key}`"));
        }
    }
    Ok(())
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

/// Parses a document using the built-in opcode vocabulary.
pub fn parse_dfg(text: &str) -> Result<Dfg, DfgError> {
    parse_dfg_with(text, Vocabulary::builtin())
}

pub fn parse_dfg_with(text: &str, vocab: Arc<Vocabulary>) -> Result<Dfg, DfgError> {
    let mut latency = None;
    let mut nodes: Vec<DfgNode> = Vec::new();
    let mut node_lines: HashMap<NodeId, usize> = HashMap::new();
    let mut edges: Vec<(usize, DfgEdge)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let schema = |msg: String| DfgError::Schema { line, msg };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_ascii_whitespace().collect();
        if latency.is_none() {
            match toks.as_slice() {
                ["dfg", "v1", lat] => {
                    let l = kv(lat, "latency")
                        .and_then(|v| v.parse::<u64>().ok())
                        .filter(|l| *l > 0)
                        .ok_or_else(|| schema(format!("bad latency `{lat}`")))?;
                    latency = Some(l);
                    continue;
                }
                _ => {
                    return Err(schema(format!(
                        "expected `{DFG_SCHEMA} latency=<L>` header"
                    )))
                }
            }
        }
        match toks[0] {
            "node" => {
                if toks.len() < 5 {
                    return Err(schema("node line needs id, opcode, op_type, width".into()));
                }
                let id: NodeId = toks[1]
                    .parse()
                    .map_err(|_| schema(format!("bad node id `{}`", toks[1])))?;
                let opcode = vocab
                    .lookup(toks[2])
                    .ok_or_else(|| DfgError::UnknownOpcode {
                        line,
                        name: toks[2].to_string(),
                    })?;
                let op_type: OpType = toks[3].parse().map_err(schema)?;
                let bitwidth = parse_width(toks[4]).map_err(schema)?;
                let mut node = DfgNode {
                    op_type,
                    ..DfgNode::new(id, opcode, bitwidth)
                };
                for tok in &toks[5..] {
                    if let Some(v) = kv(tok, "mem") {
                        node.resource_annotation =
                            Some(v.parse().map_err(|_| schema(format!("bad mem `{v}`")))?);
                    } else if let Some(v) = kv(tok, "words") {
                        node.declared_words =
                            Some(v.parse().map_err(|_| schema(format!("bad words `{v}`")))?);
                    } else if let Some(v) = kv(tok, "share") {
                        node.share_key = Some(v.to_string());
                    } else {
                        return Err(schema(format!("unexpected token `{tok}`")));
                    }
                }
                check_node(&node).map_err(schema)?;
                if node_lines.insert(id, line).is_some() {
                    return Err(DfgError::DuplicateNode { line, id });
                }
                nodes.push(node);
            }
            "edge" => {
                if toks.len() < 5 || toks.len() > 6 {
                    return Err(schema("edge line needs src, snk, var, width".into()));
                }
                let src: NodeId = toks[1]
                    .parse()
                    .map_err(|_| schema(format!("bad src `{}`", toks[1])))?;
                let snk: NodeId = toks[2]
                    .parse()
                    .map_err(|_| schema(format!("bad snk `{}`", toks[2])))?;
                let var = kv(toks[3], "var")
                    .filter(|v| is_ident(v))
                    .ok_or_else(|| schema(format!("bad var `{}`", toks[3])))?;
                let bitwidth = parse_width(toks[4]).map_err(schema)?;
                let back = match toks.get(5) {
                    None => false,
                    Some(&"back") => true,
                    Some(t) => return Err(schema(format!("unexpected token `{t}`"))),
                };
                edges.push((
                    line,
                    DfgEdge {
                        src,
                        snk,
                        var: var.to_string(),
                        bitwidth,
                        back,
                    },
                ));
            }
            other => return Err(schema(format!("unknown record `{other}`"))),
        }
    }
    let latency = latency.ok_or(DfgError::Schema {
        line: 0,
        msg: "empty document".into(),
    })?;

    let mut seen = BTreeSet::new();
    for (line, e) in &edges {
        for end in [e.src, e.snk] {
            if !node_lines.contains_key(&end) {
                return Err(DfgError::DanglingEdge {
                    line: *line,
                    node: end,
                });
            }
        }
        if e.src == e.snk {
            return Err(DfgError::SelfLoop {
                line: *line,
                node: e.src,
            });
        }
        if !seen.insert(e.key()) {
            return Err(DfgError::DuplicateEdge {
                line: *line,
                src: e.src,
                snk: e.snk,
                var: e.var.clone(),
            });
        }
    }
    Dfg::with_vocabulary(
        latency,
        nodes,
        edges.into_iter().map(|(_, e)| e).collect(),
        vocab,
    )
}

fn kv<'a>(tok: &'a str, key: &str) -> Option<&'a str> {
    tok.strip_prefix(key)?.strip_prefix('=')
}

fn parse_width(tok: &str) -> Result<u32, String> {
    kv(tok, "width")
        .and_then(|v| v.parse::<u32>().ok())
        .filter(|w| (1..=MAX_BITWIDTH).contains(w))
        .ok_or_else(|| format!("bad width `{tok}` (expected width=1..={MAX_BITWIDTH})"))
}

/// Deterministic rendering: nodes by id, edges by (src, snk, var).
pub fn serialize_dfg(g: &Dfg) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{DFG_SCHEMA} latency={}", g.latency);
    for n in &g.nodes {
        let _ = write!(
            out,
            "node {} {} {} width={}",
            n.id,
            g.vocab.name(n.opcode),
            n.op_type,
            n.bitwidth
        );
        if let Some(m) = n.resource_annotation {
            let _ = write!(out, " mem={m}");
        }
        if let Some(w) = n.declared_words {
            let _ = write!(out, " words={w}");
        }
        if let Some(k) = &n.share_key {
            let _ = write!(out, " share={k}");
        }
        out.push('\n');
    }
    for e in &g.edges {
        let _ = write!(
            out,
            "edge {} {} var={} width={}",
            e.src, e.snk, e.var, e.bitwidth
        );
        if e.back {
            out.push_str(" back");
        }
        out.push('\n');
    }
    out
}
