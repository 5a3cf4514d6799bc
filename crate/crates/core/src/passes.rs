//! Graph construction passes: buffer insertion, datapath merging and graph
//! trimming. Each pass is a pure `Dfg -> Dfg` function that reports
//! non-fatal findings as [`Diagnostic`]s.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::dfg::{Dfg, DfgEdge, DfgNode, EdgeKey, NodeId, OpType, Opcode, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Diagnostic {
    pub pass: &'static str,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.pass, self.message)
    }
}

fn note(diags: &mut Vec<Diagnostic>, pass: &'static str, message: String) {
    log::debug!("{pass}: {message}");
    diags.push(Diagnostic { pass, message });
}

/// Mutable scratch form of a graph used inside the passes.
struct Work {
    latency: u64,
    vocab: Arc<Vocabulary>,
    nodes: BTreeMap<NodeId, DfgNode>,
    edges: BTreeMap<EdgeKey, DfgEdge>,
}

impl Work {
    fn from(g: &Dfg) -> Work {
        Work {
            latency: g.latency(),
            vocab: g.vocabulary().clone(),
            nodes: g.nodes().iter().map(|n| (n.id, n.clone())).collect(),
            edges: g.edges().iter().map(|e| (e.key(), e.clone())).collect(),
        }
    }

    fn finish(self) -> Dfg {
        Dfg::with_vocabulary(
            self.latency,
            self.nodes.into_values().collect(),
            self.edges.into_values().collect(),
            self.vocab,
        )
        .expect("construction passes preserve graph invariants")
    }

    fn next_id(&self) -> NodeId {
        self.nodes.keys().next_back().map_or(0, |id| id + 1)
    }

    fn in_edges(&self, id: NodeId) -> Vec<DfgEdge> {
        self.edges
            .values()
            .filter(|e| e.snk == id)
            .cloned()
            .collect()
    }

    fn out_edges(&self, id: NodeId) -> Vec<DfgEdge> {
        self.edges
            .values()
            .filter(|e| e.src == id)
            .cloned()
            .collect()
    }

    fn remove_node(&mut self, id: NodeId) {
        self.nodes.remove(&id);
        self.edges.retain(|k, _| k.src != id && k.snk != id);
    }

    /// Inserts an edge, renaming its variable if the triple is taken.
    fn add_edge(&mut self, mut e: DfgEdge) {
        let base = e.var.clone();
        let mut n = 1;
        while self.edges.contains_key(&e.key()) {
            e.var = format!("{base}.{n}");
            n += 1;
        }
        self.edges.insert(e.key(), e);
    }

    fn succ_map(&self) -> HashMap<NodeId, Vec<NodeId>> {
        let mut succ: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for e in self.edges.values().filter(|e| !e.back) {
            succ.entry(e.src).or_default().push(e.snk);
        }
        succ
    }

    fn reaches(&self, from: NodeId, to: NodeId) -> bool {
        let succ = self.succ_map();
        let mut stack = vec![from];
        let mut seen = BTreeSet::new();
        while let Some(v) = stack.pop() {
            if v == to {
                return true;
            }
            if seen.insert(v) {
                stack.extend(succ.get(&v).into_iter().flatten().copied());
            }
        }
        false
    }

    fn is_acyclic(&self) -> bool {
        let mut indeg: BTreeMap<NodeId, usize> = self.nodes.keys().map(|&id| (id, 0)).collect();
        for e in self.edges.values().filter(|e| !e.back) {
            *indeg.get_mut(&e.snk).expect("node") += 1;
        }
        let succ = self.succ_map();
        let mut ready: Vec<NodeId> = indeg
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(i, _)| *i)
            .collect();
        let mut visited = 0;
        while let Some(v) = ready.pop() {
            visited += 1;
            for s in succ.get(&v).into_iter().flatten() {
                let d = indeg.get_mut(s).expect("node");
                *d -= 1;
                if *d == 0 {
                    ready.push(*s);
                }
            }
        }
        visited == self.nodes.len()
    }
}

/// Makes buffers explicit. Every load/store reached from an `alloca`
/// (directly or through `getelementptr` nodes) feeds one buffer per
/// allocation; the buffer takes over the accesses' outgoing edges. Accesses
/// with no allocation source get their own size-0 I/O buffer. An access edge
/// into a buffer that would close a datapath cycle is tagged as a back-edge
/// (loop-carried memory dependence).
pub fn insert_buffers(g: &Dfg, diags: &mut Vec<Diagnostic>) -> Dfg {
    const PASS: &str = "insert_buffers";
    if g.nodes().iter().any(|n| n.opcode == Opcode::Buffer) {
        note(
            diags,
            PASS,
            "graph already contains buffer nodes; skipped".into(),
        );
        return g.clone();
    }
    let mut w = Work::from(g);

    let mut preds: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for e in g.datapath_edges() {
        preds.entry(e.snk).or_default().push(e.src);
    }
    let memory_root = |access: NodeId| -> Option<NodeId> {
        let mut roots = BTreeSet::new();
        let mut seen = BTreeSet::new();
        let mut stack: Vec<NodeId> = preds.get(&access).cloned().unwrap_or_default();
        while let Some(p) = stack.pop() {
            if !seen.insert(p) {
                continue;
            }
            match g.node(p).map(|n| n.opcode) {
                Some(Opcode::Alloca) => {
                    roots.insert(p);
                }
                Some(Opcode::GetElementPtr) => {
                    stack.extend(preds.get(&p).into_iter().flatten().copied());
                }
                _ => {}
            }
        }
        roots.first().copied()
    };

    let mut groups: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut unmatched: Vec<NodeId> = Vec::new();
    for n in g.nodes() {
        if matches!(n.opcode, Opcode::Load | Opcode::Store) {
            match memory_root(n.id) {
                Some(root) => groups.entry(root).or_default().push(n.id),
                None => {
                    note(
                        diags,
                        PASS,
                        format!("node {}: no allocation source; using I/O buffer", n.id),
                    );
                    unmatched.push(n.id);
                }
            }
        }
    }

    let mut plan: Vec<(u64, Vec<NodeId>)> = groups
        .into_iter()
        .map(|(root, accesses)| {
            let words = g
                .node(root)
                .and_then(|n| n.declared_words)
                .unwrap_or_else(|| {
                    note(
                        diags,
                        PASS,
                        format!("alloca {root} declares no size; using 0 words"),
                    );
                    0
                });
            (words, accesses)
        })
        .collect();
    plan.extend(unmatched.into_iter().map(|a| (0, vec![a])));

    for (words, accesses) in plan {
        let id = w.next_id();
        let width = accesses
            .iter()
            .map(|a| w.nodes[a].bitwidth)
            .max()
            .unwrap_or(1);
        w.nodes.insert(id, DfgNode::buffer(id, width, words));
        for &a in &accesses {
            for e in w.out_edges(a).into_iter().filter(|e| !e.back) {
                w.edges.remove(&e.key());
                w.add_edge(DfgEdge { src: id, ..e });
            }
        }
        for &a in &accesses {
            let width = w.nodes[&a].bitwidth;
            let back = w.reaches(id, a);
            let edge = DfgEdge {
                back,
                ..DfgEdge::new(a, id, format!("mem{a}"), width)
            };
            w.add_edge(edge);
        }
    }
    w.finish()
}

/// Chain identity: per-node (opcode, op_type, bitwidth).
type ChainKey = Vec<(Opcode, OpType, u32)>;

/// Fuses datapaths. Nodes sharing a `share` key are merged into the lowest
/// id (unless that would create a self-loop or cycle), then among maximal
/// chains between the same pair of nodes, all but one of each identical
/// group are removed. Both steps repeat until nothing changes.
pub fn merge_datapaths(g: &Dfg, diags: &mut Vec<Diagnostic>) -> Dfg {
    const PASS: &str = "merge_datapaths";
    let mut w = Work::from(g);
    let mut skipped: BTreeSet<String> = BTreeSet::new();
    loop {
        let mut changed = merge_shared(&mut w, &mut skipped);
        changed |= merge_chains(&mut w);
        if !changed {
            break;
        }
    }
    for msg in skipped {
        note(diags, PASS, msg);
    }
    w.finish()
}

fn merge_shared(w: &mut Work, skipped: &mut BTreeSet<String>) -> bool {
    let mut groups: BTreeMap<String, Vec<NodeId>> = BTreeMap::new();
    for n in w.nodes.values() {
        if let Some(k) = &n.share_key {
            groups.entry(k.clone()).or_default().push(n.id);
        }
    }
    let mut changed = false;
    for (key, members) in groups {
        let rep = members[0];
        for &m in &members[1..] {
            let adjacent = w
                .edges
                .keys()
                .any(|k| (k.src == rep && k.snk == m) || (k.src == m && k.snk == rep));
            if adjacent {
                skipped.insert(format!(
                    "share={key}: merging {m} into {rep} would create a self-loop; skipped"
                ));
                continue;
            }
            let mut trial = Work {
                latency: w.latency,
                vocab: w.vocab.clone(),
                nodes: w.nodes.clone(),
                edges: BTreeMap::new(),
            };
            trial.nodes.remove(&m);
            for e in w.edges.values() {
                let mut e = e.clone();
                if e.src == m {
                    e.src = rep;
                }
                if e.snk == m {
                    e.snk = rep;
                }
                trial.edges.entry(e.key()).or_insert(e);
            }
            if !trial.is_acyclic() {
                skipped.insert(format!(
                    "share={key}: merging {m} into {rep} would create a cycle; skipped"
                ));
                continue;
            }
            w.nodes = trial.nodes;
            w.edges = trial.edges;
            changed = true;
        }
    }
    changed
}

struct Chain {
    src: NodeId,
    snk: NodeId,
    nodes: Vec<NodeId>,
}

/// Enumerates maximal chains: paths whose interior nodes have exactly one
/// datapath input, one datapath output and no back-edges.
fn maximal_chains(w: &Work) -> Vec<Chain> {
    let mut indeg: HashMap<NodeId, usize> = HashMap::new();
    let mut outdeg: HashMap<NodeId, usize> = HashMap::new();
    let mut on_back: BTreeSet<NodeId> = BTreeSet::new();
    let mut next: HashMap<NodeId, NodeId> = HashMap::new();
    for e in w.edges.values() {
        if e.back {
            on_back.insert(e.src);
            on_back.insert(e.snk);
            continue;
        }
        *outdeg.entry(e.src).or_default() += 1;
        *indeg.entry(e.snk).or_default() += 1;
        next.insert(e.src, e.snk);
    }
    let interior = |id: NodeId| {
        indeg.get(&id) == Some(&1) && outdeg.get(&id) == Some(&1) && !on_back.contains(&id)
    };
    let mut chains = Vec::new();
    for e in w.edges.values().filter(|e| !e.back) {
        if interior(e.src) || !interior(e.snk) {
            continue;
        }
        let mut nodes = vec![e.snk];
        let mut cur = e.snk;
        loop {
            let n = next[&cur];
            if interior(n) {
                nodes.push(n);
                cur = n;
            } else {
                chains.push(Chain {
                    src: e.src,
                    snk: n,
                    nodes,
                });
                break;
            }
        }
    }
    chains
}

fn merge_chains(w: &mut Work) -> bool {
    let mut groups: BTreeMap<(NodeId, NodeId, ChainKey), Vec<Vec<NodeId>>> = BTreeMap::new();
    for c in maximal_chains(w) {
        let key: ChainKey = c
            .nodes
            .iter()
            .map(|id| {
                let n = &w.nodes[id];
                (n.opcode, n.op_type, n.bitwidth)
            })
            .collect();
        groups.entry((c.src, c.snk, key)).or_default().push(c.nodes);
    }
    let mut doomed = Vec::new();
    for (_, mut chains) in groups {
        chains.sort();
        doomed.extend(chains.into_iter().skip(1).flatten());
    }
    for id in &doomed {
        w.remove_node(*id);
    }
    !doomed.is_empty()
}

/// Bypasses cast nodes (trunc/sext/zext/bitcast): each pred -> cast -> succ
/// path becomes pred -> succ carrying the pred-side variable and the
/// succ-side width. Casts without a predecessor or successor, or touching a
/// back-edge, are kept.
pub fn trim_graph(g: &Dfg, diags: &mut Vec<Diagnostic>) -> Dfg {
    const PASS: &str = "trim_graph";
    let mut w = Work::from(g);
    let casts: Vec<NodeId> = g
        .nodes()
        .iter()
        .filter(|n| n.opcode.is_cast())
        .map(|n| n.id)
        .collect();
    for c in casts {
        let ins = w.in_edges(c);
        let outs = w.out_edges(c);
        if ins.iter().chain(&outs).any(|e| e.back) {
            note(diags, PASS, format!("cast {c} touches a back-edge; kept"));
            continue;
        }
        if ins.is_empty() || outs.is_empty() {
            note(diags, PASS, format!("cast {c} is a graph entry/exit; kept"));
            continue;
        }
        w.remove_node(c);
        for i in &ins {
            for o in &outs {
                let e = DfgEdge::new(i.src, o.snk, i.var.clone(), o.bitwidth);
                w.edges.entry(e.key()).or_insert(e);
            }
        }
    }
    w.finish()
}

/// The structural part of construction: insert, merge, trim.
pub fn construct_graph(g: &Dfg, diags: &mut Vec<Diagnostic>) -> Dfg {
    let g = insert_buffers(g, diags);
    let g = merge_datapaths(&g, diags);
    trim_graph(&g, diags)
}
