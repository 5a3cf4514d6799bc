//! Power-annotated graph samples: feature annotation over a constructed
//! graph and the `sample v1` text format.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::activity::{activation_rate, switching_activity, Dir, TraceError, TraceSet};
use crate::dfg::{classify_node, Dfg, NodeClass, OpType, Vocabulary};

pub const SAMPLE_SCHEMA: &str = "sample v1";

/// Trailing numeric node features: overall activation rate, input SA,
/// output SA, overall SA.
pub const NODE_NUMERIC_FEATURES: usize = 4;
pub const EDGE_FEATURES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("no trace for edge {0}")]
    MissingTrace(String),
    #[error("trace references unknown edge {0}")]
    UnknownTrace(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid sample: {0}")]
    Invalid(String),
}

/// Source-to-sink relation by arithmetic class of the endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationType {
    AToN,
    AToA,
    NToA,
    NToN,
}

impl RelationType {
    pub const ALL: [RelationType; 4] = [
        RelationType::AToN,
        RelationType::AToA,
        RelationType::NToA,
        RelationType::NToN,
    ];

    pub fn between(src: NodeClass, snk: NodeClass) -> Self {
        match (src, snk) {
            (NodeClass::A, NodeClass::N) => RelationType::AToN,
            (NodeClass::A, NodeClass::A) => RelationType::AToA,
            (NodeClass::N, NodeClass::A) => RelationType::NToA,
            (NodeClass::N, NodeClass::N) => RelationType::NToN,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::AToN => "A->N",
            RelationType::AToA => "A->A",
            RelationType::NToA => "N->A",
            RelationType::NToN => "N->N",
        }
    }
}

impl FromStr for RelationType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelationType::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown relation `{s}`"))
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `[SA_src, SA_snk, AR_src, AR_snk]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EdgeFeatures(pub [f64; EDGE_FEATURES]);

impl EdgeFeatures {
    pub fn sa_src(&self) -> f64 {
        self.0[0]
    }
    pub fn sa_snk(&self) -> f64 {
        self.0[1]
    }
    pub fn ar_src(&self) -> f64 {
        self.0[2]
    }
    pub fn ar_snk(&self) -> f64 {
        self.0[3]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEdge {
    pub src: usize,
    pub snk: usize,
    pub relation: RelationType,
    pub features: EdgeFeatures,
}

/// Global HLS-report features: absolute metrics followed by their ratios
/// over the unoptimized baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetadataVector {
    pub lut: f64,
    pub dsp: f64,
    pub bram: f64,
    pub latency: f64,
    pub clock_ns: f64,
    pub scale: [f64; 5],
}

impl MetadataVector {
    pub const LEN: usize = 10;
    pub const KEYS: [&'static str; 10] = [
        "lut",
        "dsp",
        "bram",
        "latency",
        "clock_ns",
        "scale_lut",
        "scale_dsp",
        "scale_bram",
        "scale_latency",
        "scale_clock",
    ];

    pub fn absolute(&self) -> [f64; 5] {
        [self.lut, self.dsp, self.bram, self.latency, self.clock_ns]
    }

    pub fn to_array(&self) -> [f64; 10] {
        let mut out = [0.0; 10];
        out[..5].copy_from_slice(&self.absolute());
        out[5..].copy_from_slice(&self.scale);
        out
    }

    pub fn from_array(a: [f64; 10]) -> Self {
        MetadataVector {
            lut: a[0],
            dsp: a[1],
            bram: a[2],
            latency: a[3],
            clock_ns: a[4],
            scale: [a[5], a[6], a[7], a[8], a[9]],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self
            .absolute()
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err("metadata metrics must be finite and non-negative".into());
        }
        if self.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err("metadata scaling factors must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PowerKind {
    Total,
    Dynamic,
}

impl PowerKind {
    pub fn name(self) -> &'static str {
        match self {
            PowerKind::Total => "total",
            PowerKind::Dynamic => "dynamic",
        }
    }
}

impl FromStr for PowerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "total" => Ok(PowerKind::Total),
            "dynamic" => Ok(PowerKind::Dynamic),
            _ => Err(format!("unknown power kind `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLabel {
    pub watts: f64,
    pub kind: PowerKind,
}

/// One learning sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub name: String,
    /// Row-major `num_nodes x feature_dim`.
    pub node_features: Vec<f64>,
    pub feature_dim: usize,
    pub edges: Vec<SampleEdge>,
    pub metadata: Option<MetadataVector>,
    pub label: Option<PowerLabel>,
}

impl GraphSample {
    pub fn num_nodes(&self) -> usize {
        if self.feature_dim == 0 {
            0
        } else {
            self.node_features.len() / self.feature_dim
        }
    }

    pub fn node_row(&self, i: usize) -> &[f64] {
        &self.node_features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn validate(&self) -> Result<(), SampleError> {
        let n = self.num_nodes();
        if self.feature_dim > 0 && self.node_features.len() % self.feature_dim != 0 {
            return Err(SampleError::Invalid("ragged node feature matrix".into()));
        }
        for e in &self.edges {
            if e.src >= n || e.snk >= n {
                return Err(SampleError::Invalid(format!(
                    "edge {}->{} out of range for {n} nodes",
                    e.src, e.snk
                )));
            }
            if e.features.0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(SampleError::Invalid("edge features must be >= 0".into()));
            }
        }
        if let Some(label) = &self.label {
            if !(label.watts > 0.0) {
                return Err(SampleError::Invalid("label must be positive".into()));
            }
        }
        if let Some(meta) = &self.metadata {
            meta.validate().map_err(SampleError::Invalid)?;
        }
        Ok(())
    }

    /// Label value, if present.
    pub fn watts(&self) -> Option<f64> {
        self.label.map(|l| l.watts)
    }
}

/// Node feature width for a vocabulary: one-hot op_type, one-hot opcode,
/// then the numeric activity features.
pub fn node_feature_dim(vocab: &Vocabulary) -> usize {
    OpType::ALL.len() + vocab.len() + NODE_NUMERIC_FEATURES
}

/// Attaches activity features from `traces` to every edge and node of a
/// constructed graph.
pub fn annotate_features(g: &Dfg, traces: &TraceSet) -> Result<GraphSample, SampleError> {
    let latency = traces.latency;
    let known: BTreeSet<_> = g.edges().iter().map(|e| e.key()).collect();
    if let Some(stray) = traces.traces.keys().find(|k| !known.contains(k)) {
        return Err(SampleError::UnknownTrace(stray.to_string()));
    }

    let vocab = g.vocabulary();
    let dim = node_feature_dim(vocab);
    let n = g.nodes().len();
    let mut input_sa = vec![0.0; n];
    let mut output_sa = vec![0.0; n];
    let mut ar_sum = vec![0.0; n];
    let mut ar_count = vec![0usize; n];

    let mut edges = Vec::with_capacity(g.edges().len());
    for e in g.edges() {
        let key = e.key();
        let t = traces
            .get(&key)
            .ok_or_else(|| SampleError::MissingTrace(key.to_string()))?;
        let f = [
            switching_activity(t, Dir::Src, latency)?,
            switching_activity(t, Dir::Snk, latency)?,
            activation_rate(t, Dir::Src, latency)?,
            activation_rate(t, Dir::Snk, latency)?,
        ];
        let src = g.index_of(e.src).expect("validated");
        let snk = g.index_of(e.snk).expect("validated");
        output_sa[src] += f[0];
        input_sa[snk] += f[1];
        ar_sum[src] += f[2];
        ar_count[src] += 1;
        ar_sum[snk] += f[3];
        ar_count[snk] += 1;
        let relation = RelationType::between(
            classify_node(&g.nodes()[src]),
            classify_node(&g.nodes()[snk]),
        );
        edges.push(SampleEdge {
            src,
            snk,
            relation,
            features: EdgeFeatures(f),
        });
    }

    let mut node_features = Vec::with_capacity(n * dim);
    for (i, node) in g.nodes().iter().enumerate() {
        let mut row = vec![0.0; dim];
        row[node.op_type.index()] = 1.0;
        row[OpType::ALL.len() + vocab.one_hot_index(node.opcode)] = 1.0;
        let numeric = &mut row[dim - NODE_NUMERIC_FEATURES..];
        numeric[0] = if ar_count[i] == 0 {
            0.0
        } else {
            ar_sum[i] / ar_count[i] as f64
        };
        numeric[1] = input_sa[i];
        numeric[2] = output_sa[i];
        numeric[3] = input_sa[i] + output_sa[i];
        node_features.extend(row);
    }

    Ok(GraphSample {
        name: String::new(),
        node_features,
        feature_dim: dim,
        edges,
        metadata: None,
        label: None,
    })
}

/// Renders node and edge features. Metadata and labels live in the
/// companion `meta` file.
pub fn serialize_sample(s: &GraphSample) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{SAMPLE_SCHEMA} nodes={} dim={}",
        s.num_nodes(),
        s.feature_dim
    );
    for i in 0..s.num_nodes() {
        let _ = write!(out, "nodefeat {i}");
        for v in s.node_row(i) {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
    for e in &s.edges {
        let _ = write!(out, "edgefeat {} {} {}", e.src, e.snk, e.relation);
        for v in e.features.0 {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_sample(text: &str) -> Result<GraphSample, SampleError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (line, header) = lines.next().ok_or(SampleError::Parse {
        line: 0,
        msg: "empty document".into(),
    })?;
    let err = |line: usize, msg: String| SampleError::Parse { line, msg };
    let toks: Vec<&str> = header.split_ascii_whitespace().collect();
    let (nodes, dim) = match toks.as_slice() {
        ["sample", "v1", n, d] => {
            let n = n
                .strip_prefix("nodes=")
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| err(line, format!("bad node count `{n}`")))?;
            let d = d
                .strip_prefix("dim=")
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| err(line, format!("bad dim `{d}`")))?;
            (n, d)
        }
        _ => {
            return Err(err(
                line,
                format!("expected `{SAMPLE_SCHEMA} nodes=<n> dim=<d>`"),
            ))
        }
    };
    let mut node_features = Vec::with_capacity(nodes * dim);
    let mut edges = Vec::new();
    let mut next_node = 0;
    for (line, l) in lines {
        let toks: Vec<&str> = l.split_ascii_whitespace().collect();
        let floats = |vals: &[&str]| -> Result<Vec<f64>, SampleError> {
            vals.iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| err(line, format!("bad number `{v}`")))
                })
                .collect()
        };
        match toks.first().copied() {
            Some("nodefeat") => {
                let idx: usize = toks
                    .get(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err(line, "bad node index".into()))?;
                if idx != next_node {
                    return Err(err(line, format!("expected node {next_node}, got {idx}")));
                }
                let vals = floats(&toks[2..])?;
                if vals.len() != dim {
                    return Err(err(
                        line,
                        format!("expected {dim} features, got {}", vals.len()),
                    ));
                }
                node_features.extend(vals);
                next_node += 1;
            }
            Some("edgefeat") => {
                if toks.len() != 4 + EDGE_FEATURES {
                    return Err(err(
                        line,
                        "edgefeat needs src snk rel and 4 features".into(),
                    ));
                }
                let src: usize = toks[1].parse().map_err(|_| err(line, "bad src".into()))?;
                let snk: usize = toks[2].parse().map_err(|_| err(line, "bad snk".into()))?;
                let relation: RelationType = toks[3].parse().map_err(|m| err(line, m))?;
                let vals = floats(&toks[4..])?;
                edges.push(SampleEdge {
                    src,
                    snk,
                    relation,
                    features: EdgeFeatures([vals[0], vals[1], vals[2], vals[3]]),
                });
            }
            _ => return Err(err(line, format!("unrecognized record `{l}`"))),
        }
    }
    if next_node != nodes {
        return Err(err(0, format!("expected {nodes} nodes, got {next_node}")));
    }
    let sample = GraphSample {
        name: String::new(),
        node_features,
        feature_dim: dim,
        edges,
        metadata: None,
        label: None,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activity::{Event, ValueTrace};
    use crate::dfg::{DfgEdge, DfgNode, Opcode};

    fn two_edge_graph() -> Dfg {
        Dfg::new(
            1,
            vec![
                DfgNode::new(0, Opcode::Load, 4),
                DfgNode::new(1, Opcode::Mul, 4),
                DfgNode::new(2, Opcode::Store, 4),
            ],
            vec![DfgEdge::new(0, 1, "a", 4), DfgEdge::new(1, 2, "b", 4)],
        )
        .unwrap()
    }

    fn events(v: &[(u64, u128)]) -> Vec<Event> {
        v.iter()
            .map(|&(cycle, value)| Event { cycle, value })
            .collect()
    }

    #[test]
    fn node_sums_and_relations() {
        let g = two_edge_graph();
        let mut set = TraceSet::new(4);
        // in-edge of node 1: SA_snk = 2/4 = 0.5
        let mut t = ValueTrace::new(g.edges()[0].key(), 4);
        t.snk = events(&[(0, 0b00), (1, 0b11)]);
        set.insert(t);
        // out-edge of node 1: SA_src = 4/4 = 1.0
        let mut t = ValueTrace::new(g.edges()[1].key(), 4);
        t.src = events(&[(0, 0b0000), (2, 0b1111)]);
        set.insert(t);
        let s = annotate_features(&g, &set).unwrap();
        let row = s.node_row(1);
        let numeric = &row[row.len() - 4..];
        assert_eq!(numeric[1], 0.5);
        assert_eq!(numeric[2], 1.0);
        assert_eq!(numeric[3], 1.5);
        // AR: in-edge snk 1/4, out-edge src 1/4
        assert_eq!(numeric[0], 0.25);
        assert_eq!(s.edges[0].relation, RelationType::NToA);
        assert_eq!(s.edges[1].relation, RelationType::AToN);
        assert_eq!(row.iter().filter(|v| **v == 1.0).count(), 3);
        assert_eq!(row[OpType::BinaryOp.index()], 1.0);
    }

    #[test]
    fn constant_trace_gives_zero_features() {
        let g = two_edge_graph();
        let mut set = TraceSet::new(10);
        for e in g.edges() {
            let mut t = ValueTrace::new(e.key(), 4);
            t.src = events(&[(0, 5)]);
            t.snk = events(&[(1, 5)]);
            set.insert(t);
        }
        let s = annotate_features(&g, &set).unwrap();
        for e in &s.edges {
            assert_eq!(e.features, EdgeFeatures([0.0; 4]));
        }
    }

    #[test]
    fn missing_and_unknown_traces() {
        let g = two_edge_graph();
        let mut set = TraceSet::new(4);
        set.insert(ValueTrace::new(g.edges()[0].key(), 4));
        assert!(matches!(
            annotate_features(&g, &set),
            Err(SampleError::MissingTrace(k)) if k == "1->2 var=b"
        ));
        set.insert(ValueTrace::new(g.edges()[1].key(), 4));
        let mut stray = ValueTrace::new(g.edges()[1].key(), 4);
        stray.key.var = "zz".into();
        set.insert(stray);
        assert!(matches!(
            annotate_features(&g, &set),
            Err(SampleError::UnknownTrace(_))
        ));
    }

    #[test]
    fn sample_roundtrip() {
        let s = GraphSample {
            name: String::new(),
            node_features: vec![1.0, 0.0, 0.1, 0.0, 1.0, 1e-300],
            feature_dim: 3,
            edges: vec![SampleEdge {
                src: 0,
                snk: 1,
                relation: RelationType::AToN,
                features: EdgeFeatures([0.3, 1.0 / 3.0, 0.25, 0.0]),
            }],
            metadata: None,
            label: None,
        };
        let doc = serialize_sample(&s);
        assert!(doc.starts_with("sample v1 nodes=2 dim=3\n"));
        assert_eq!(parse_sample(&doc).unwrap(), s);
        assert!(parse_sample("sample v1 nodes=1 dim=2\nnodefeat 0 1.0\n").is_err());
        assert!(parse_sample(
            "sample v1 nodes=1 dim=1\nnodefeat 0 1.0\nedgefeat 0 3 A->N 0 0 0 0\n"
        )
        .is_err());
    }
}
