//! Random instance generators and brute-force reference implementations
//! shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;

use hlspower::activity::{Dir, ValueTrace};
use hlspower::dfg::{EdgeKey, NodeId};
use hlspower::dse::Objectives;
use hlspower::sample::{PowerLabel, SampleEdge};
use hlspower::{
    Dfg, DfgEdge, DfgNode, EdgeFeatures, GraphSample, MetadataVector, Opcode, PowerKind,
    RelationType,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const WIDTHS: [u32; 6] = [1, 8, 16, 32, 64, 128];

/// A valid DFG with 1..=max_nodes nodes drawn from the whole built-in
/// vocabulary, random fan-in, shared resources, reused variable names and
/// occasional back-edges.
pub fn random_dfg(seed: u64, max_nodes: usize) -> Dfg {
    let mut r = rng(seed);
    let n = r.gen_range(1..=max_nodes);
    let ids: Vec<NodeId> = (0..n as NodeId)
        .map(|i| i * 2 + r.gen_range(0..2))
        .collect();
    let mut nodes = Vec::with_capacity(n);
    for &id in &ids {
        let op = Opcode::BUILTIN[r.gen_range(0..Opcode::BUILTIN.len())];
        let width = WIDTHS[r.gen_range(0..4)];
        let mut node = if op == Opcode::Buffer {
            DfgNode::buffer(id, width, r.gen_range(1..256))
        } else {
            DfgNode::new(id, op, width)
        };
        if op == Opcode::Alloca && r.gen_bool(0.5) {
            node = node.with_words(r.gen_range(1..128));
        }
        if r.gen_bool(0.2) {
            node = node.with_share(format!("res{}", r.gen_range(0..3)));
        }
        nodes.push(node);
    }
    let mut edges = Vec::new();
    for j in 1..n {
        let fan_in = r.gen_range(0..=2.min(j));
        let mut preds: Vec<usize> = (0..j).collect();
        preds.shuffle(&mut r);
        for &i in &preds[..fan_in] {
            let var = if r.gen_bool(0.8) {
                format!("v{}", ids[i])
            } else {
                format!("t{}", r.gen_range(0..3))
            };
            edges.push(DfgEdge::new(ids[i], ids[j], var, WIDTHS[r.gen_range(0..5)]));
        }
        if r.gen_bool(0.08) {
            let i = r.gen_range(0..j);
            edges.push(DfgEdge::back_edge(
                ids[j],
                ids[i],
                format!("b{}", ids[j]),
                WIDTHS[r.gen_range(0..4)],
            ));
        }
    }
    Dfg::new(r.gen_range(1..200), nodes, edges).expect("generator builds valid graphs")
}

/// A value held for `latency` cycles, changing at random cycles.
pub fn random_waveform(r: &mut ChaCha8Rng, width: u32, latency: u64) -> Vec<u128> {
    let mask = if width >= 128 {
        u128::MAX
    } else {
        (1u128 << width) - 1
    };
    let p_change = r.gen_range(0.0..1.0);
    let mut v = r.gen::<u128>() & mask;
    (0..latency)
        .map(|_| {
            if r.gen_bool(p_change) {
                v = r.gen::<u128>() & mask;
            }
            v
        })
        .collect()
}

/// A trace whose streams are the change points of two random waveforms.
pub fn random_trace(seed: u64) -> (ValueTrace, [Vec<u128>; 2], u64) {
    let mut r = rng(seed);
    let width = r.gen_range(1..=128);
    let latency = r.gen_range(1..300);
    let waves = [
        random_waveform(&mut r, width, latency),
        random_waveform(&mut r, width, latency),
    ];
    let key = EdgeKey {
        src: r.gen_range(0..10),
        snk: r.gen_range(10..20),
        var: "x".into(),
    };
    let mut t = ValueTrace::new(key, width);
    for (dir, wave) in [Dir::Src, Dir::Snk].into_iter().zip(&waves) {
        // Observations start at a random cycle offset.
        let start = r.gen_range(0..5);
        for (c, &v) in wave.iter().enumerate() {
            t.observe(dir, start + c as u64, v);
        }
    }
    (t, waves, latency)
}

/// Bit flips between consecutive cycles, counted bit by bit, per cycle.
pub fn brute_sa(wave: &[u128], width: u32, latency: u64) -> f64 {
    let mut flips = 0u64;
    for c in 1..wave.len() {
        for b in 0..width {
            if (wave[c] >> b) & 1 != (wave[c - 1] >> b) & 1 {
                flips += 1;
            }
        }
    }
    flips as f64 / latency as f64
}

/// Cycles on which the value differs from the previous cycle, per cycle.
pub fn brute_ar(wave: &[u128], latency: u64) -> f64 {
    let changes = (1..wave.len()).filter(|&c| wave[c] != wave[c - 1]).count();
    changes as f64 / latency as f64
}

/// A sample with random features, edges over all relation types and
/// random metadata.
pub fn random_sample(r: &mut ChaCha8Rng, n: usize, dim: usize) -> GraphSample {
    let node_features = (0..n * dim).map(|_| r.gen_range(0.0..1.0)).collect();
    let mut edges = Vec::new();
    for _ in 0..n * 2 {
        let src = r.gen_range(0..n);
        let snk = r.gen_range(0..n);
        if src != snk {
            edges.push(SampleEdge {
                src,
                snk,
                relation: RelationType::ALL[r.gen_range(0..4)],
                features: EdgeFeatures([(); 4].map(|_| r.gen_range(0.0..1.0))),
            });
        }
    }
    GraphSample {
        name: "random".into(),
        node_features,
        feature_dim: dim,
        edges,
        metadata: Some(MetadataVector::from_array(
            [(); 10].map(|_| r.gen_range(0.1..2.0)),
        )),
        label: Some(PowerLabel {
            watts: r.gen_range(0.5..2.0),
            kind: PowerKind::Dynamic,
        }),
    }
}

/// Relabels nodes by `perm` (old index -> new index) and reverses the edge
/// list.
pub fn permuted(s: &GraphSample, perm: &[usize]) -> GraphSample {
    let mut out = s.clone();
    let d = s.feature_dim;
    for (old, &new) in perm.iter().enumerate() {
        out.node_features[new * d..(new + 1) * d].copy_from_slice(s.node_row(old));
    }
    for e in &mut out.edges {
        e.src = perm[e.src];
        e.snk = perm[e.snk];
    }
    out.edges.reverse();
    out
}

/// Positions of the non-dominated points by pairwise comparison; among
/// identical points only the first counts.
pub fn brute_front(points: &[Objectives]) -> BTreeSet<usize> {
    let dominates = |a: &Objectives, b: &Objectives| {
        a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1])
    };
    (0..points.len())
        .filter(|&i| {
            !(0..points.len())
                .any(|j| dominates(&points[j], &points[i]) || (j < i && points[j] == points[i]))
        })
        .collect()
}

/// A random objective space; small integer grids produce ties and
/// duplicates.
pub fn random_space(seed: u64, max_n: usize) -> Vec<Objectives> {
    let mut r = rng(seed);
    let n = r.gen_range(1..=max_n);
    let grid = r.gen_bool(0.5);
    (0..n)
        .map(|_| {
            if grid {
                [r.gen_range(1..20) as f64, r.gen_range(1..20) as f64]
            } else {
                [r.gen_range(0.1..100.0), r.gen_range(0.1..10.0)]
            }
        })
        .collect()
}
