//! A cycle-level DFG interpreter that produces value traces.
//!
//! Every node has unit latency and fires once per iteration at
//! `iteration * depth + level`, where `level` is its longest-path distance
//! from an entry and `depth` the number of levels. A datapath edge logs a
//! `src` event when its producer fires and a `snk` event when its consumer
//! fires. Back-edges deliver the producer's value from the previous
//! iteration.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::activity::{mask, Dir, TraceSet, ValueTrace};
use crate::dfg::{Dfg, DfgEdge, NodeId, Opcode};

pub const STIMULI_SCHEMA: &str = "stim v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InterpError {
    #[error("no stimulus for entry node {0}")]
    MissingStimulus(NodeId),
    #[error("stimulus for node {0} is empty")]
    EmptyStimulus(NodeId),
    #[error("stimulus references unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node}: opcode `{opcode}` has no interpreter semantics")]
    NoSemantics { node: NodeId, opcode: String },
    #[error("iterations must be positive")]
    ZeroIterations,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Input value sequences for entry nodes; iteration `i` reads element
/// `i % len`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stimuli {
    pub inputs: BTreeMap<NodeId, Vec<u128>>,
}

impl Stimuli {
    pub fn value(&self, node: NodeId, iteration: u64) -> Option<u128> {
        let seq = self.inputs.get(&node)?;
        seq.get((iteration % seq.len() as u64) as usize).copied()
    }

    /// Drops sequences for nodes that `g` does not contain, e.g. after
    /// construction passes removed them.
    pub fn restricted_to(&self, g: &Dfg) -> Stimuli {
        Stimuli {
            inputs: self
                .inputs
                .iter()
                .filter(|(id, _)| g.node(**id).is_some())
                .map(|(id, seq)| (*id, seq.clone()))
                .collect(),
        }
    }
}

pub fn serialize_stimuli(s: &Stimuli) -> String {
    let mut out = format!("{STIMULI_SCHEMA}\n");
    for (node, seq) in &s.inputs {
        let _ = write!(out, "in {node}");
        for v in seq {
            let _ = write!(out, " {v:#x}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_stimuli(text: &str) -> Result<Stimuli, InterpError> {
    let mut header = false;
    let mut stimuli = Stimuli::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| InterpError::Parse { line, msg };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !header {
            if trimmed != STIMULI_SCHEMA {
                return Err(err(format!("expected `{STIMULI_SCHEMA}` header")));
            }
            header = true;
            continue;
        }
        let mut toks = trimmed.split_ascii_whitespace();
        if toks.next() != Some("in") {
            return Err(err(format!("unrecognized record `{trimmed}`")));
        }
        let node: NodeId = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| err("bad node id".into()))?;
        let seq = toks
            .map(|t| match t.strip_prefix("0x") {
                Some(h) => u128::from_str_radix(h, 16),
                None => t.parse::<u128>(),
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(format!("bad value: {e}")))?;
        if seq.is_empty() {
            return Err(InterpError::EmptyStimulus(node));
        }
        if stimuli.inputs.insert(node, seq).is_some() {
            return Err(err(format!("duplicate stimulus for node {node}")));
        }
    }
    if !header {
        return Err(InterpError::Parse {
            line: 0,
            msg: "empty document".into(),
        });
    }
    Ok(stimuli)
}

/// Runs `iterations` passes over the graph and returns change-event traces
/// for every edge, with latency `iterations * depth`.
pub fn interpret_dfg(g: &Dfg, stimuli: &Stimuli, iterations: u64) -> Result<TraceSet, InterpError> {
    if iterations == 0 {
        return Err(InterpError::ZeroIterations);
    }
    for (&node, seq) in &stimuli.inputs {
        if g.node(node).is_none() {
            return Err(InterpError::UnknownNode(node));
        }
        if seq.is_empty() {
            return Err(InterpError::EmptyStimulus(node));
        }
    }
    for id in g.entries() {
        if !stimuli.inputs.contains_key(&id) {
            return Err(InterpError::MissingStimulus(id));
        }
    }
    for n in g.nodes() {
        if let Opcode::Ext(_) = n.opcode {
            return Err(InterpError::NoSemantics {
                node: n.id,
                opcode: g.vocabulary().name(n.opcode).to_string(),
            });
        }
    }

    let order = g.topo_order().expect("validated graph");
    let levels = g.levels();
    let depth = levels.values().copied().max().unwrap_or(0) + 1;

    // Edges are stored sorted by (src, snk, var); per-sink lists keep that order.
    let mut fwd_in: HashMap<NodeId, Vec<usize>> = HashMap::new();
    let mut back_in: HashMap<NodeId, Vec<usize>> = HashMap::new();
    let mut outgoing: HashMap<NodeId, Vec<usize>> = HashMap::new();
    for (i, e) in g.edges().iter().enumerate() {
        outgoing.entry(e.src).or_default().push(i);
        let list = if e.back { &mut back_in } else { &mut fwd_in };
        list.entry(e.snk).or_default().push(i);
    }

    let mut traces: Vec<ValueTrace> = g
        .edges()
        .iter()
        .map(|e| ValueTrace::new(e.key(), e.bitwidth))
        .collect();
    let mut value: HashMap<NodeId, u128> = HashMap::new();
    let mut prev: HashMap<NodeId, u128> = HashMap::new();

    for it in 0..iterations {
        let base = it * depth;
        for &id in &order {
            let node = g.node(id).expect("node");
            let fire = base + levels[&id];
            let operands: Vec<(u128, u32)> = fwd_in
                .get(&id)
                .into_iter()
                .flatten()
                .map(|&i| {
                    let e = &g.edges()[i];
                    (value[&e.src] & mask(e.bitwidth), e.bitwidth)
                })
                .collect();
            let back_operands: Vec<u128> = if it == 0 {
                Vec::new()
            } else {
                back_in
                    .get(&id)
                    .into_iter()
                    .flatten()
                    .map(|&i| {
                        let e = &g.edges()[i];
                        prev[&e.src] & mask(e.bitwidth)
                    })
                    .collect()
            };
            for (&i, &v) in back_in.get(&id).into_iter().flatten().zip(&back_operands) {
                traces[i].observe(Dir::Snk, fire, v);
            }

            let raw = if operands.is_empty() {
                stimuli.value(id, it).expect("checked above")
            } else {
                evaluate(node.opcode, &operands, &back_operands, node.bitwidth)
            };
            let v = raw & mask(node.bitwidth);
            value.insert(id, v);

            for &i in outgoing.get(&id).into_iter().flatten() {
                traces[i].observe(Dir::Src, fire, v & mask(g.edges()[i].bitwidth));
            }
            for &i in fwd_in.get(&id).into_iter().flatten() {
                let e: &DfgEdge = &g.edges()[i];
                traces[i].observe(Dir::Snk, fire, value[&e.src] & mask(e.bitwidth));
            }
        }
        prev.clone_from(&value);
    }

    let mut set = TraceSet::new(iterations * depth);
    for t in traces {
        set.insert(t);
    }
    Ok(set)
}

fn evaluate(op: Opcode, operands: &[(u128, u32)], back: &[u128], width: u32) -> u128 {
    let arg = |i: usize| operands.get(i).map_or(0, |o| o.0);
    match op {
        Opcode::Add | Opcode::FAdd | Opcode::GetElementPtr => {
            operands.iter().fold(0u128, |acc, o| acc.wrapping_add(o.0))
        }
        Opcode::Sub | Opcode::FSub => operands[1..]
            .iter()
            .fold(arg(0), |acc, o| acc.wrapping_sub(o.0)),
        Opcode::Mul | Opcode::FMul => operands.iter().fold(1u128, |acc, o| acc.wrapping_mul(o.0)),
        Opcode::Div | Opcode::FDiv => match operands.get(1) {
            None => arg(0),
            Some(&(0, _)) => mask(width),
            Some(&(d, _)) => arg(0) / d,
        },
        Opcode::ICmp | Opcode::FCmp => u128::from(arg(0) < arg(1)),
        Opcode::SExt => {
            let (v, from) = operands[0];
            if from < 128 && (v >> (from - 1)) & 1 == 1 {
                v | !mask(from)
            } else {
                v
            }
        }
        Opcode::Phi => back.first().copied().unwrap_or_else(|| arg(0)),
        Opcode::Select => {
            if arg(0) != 0 {
                arg(1)
            } else {
                arg(2)
            }
        }
        Opcode::Trunc
        | Opcode::ZExt
        | Opcode::BitCast
        | Opcode::Alloca
        | Opcode::Load
        | Opcode::Store
        | Opcode::Buffer
        | Opcode::Br
        | Opcode::Ret => arg(0),
        Opcode::Ext(_) => unreachable!("rejected before execution"),
    }
}
