//! Synthetic design generator and an analytic power oracle.
//!
//! Designs are loop bodies made of parallel lanes. Each lane is a chain of
//! operations fed by a load and drained into a shared `ret`. Lanes may read
//! from declared arrays (exercising buffer insertion), be unrolled into
//! identical copies (exercising datapath merging) and carry casts between
//! operations (exercising trimming).
//!
//! The oracle prices every edge of the constructed graph by the mean of its
//! two directional switching activities, a per-relation capacitance, the
//! squared supply voltage and the clock frequency.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::activity::{mask, TraceSet};
use crate::dfg::{Dfg, DfgEdge, DfgError, DfgNode, Opcode, MAX_BITWIDTH};
use crate::interp::{interpret_dfg, InterpError, Stimuli};
use crate::passes::{construct_graph, Diagnostic};
use crate::sample::{
    annotate_features, GraphSample, MetadataVector, PowerKind, PowerLabel, SampleError,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid design spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Dfg(#[from] DfgError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    /// Operations per lane.
    pub depth: usize,
    /// Distinct lanes.
    pub width: usize,
    /// Identical copies of every lane.
    pub unroll: usize,
    /// Word counts of declared arrays. Lane `i < buffers.len()` reads array `i`.
    pub buffers: Vec<u64>,
    pub bitwidth: u32,
    /// Probability of a cast between two consecutive lane operations.
    pub cast_prob: f64,
    /// Per-bit toggle probability of the input streams.
    pub activity: f64,
    /// Simulated loop iterations.
    pub iterations: u64,
    /// Loop trip count used for the latency estimate.
    pub trip_count: u64,
    pub seed: u64,
}

impl Default for DesignSpec {
    fn default() -> Self {
        DesignSpec {
            depth: 1,
            width: 1,
            unroll: 1,
            buffers: Vec::new(),
            bitwidth: 16,
            cast_prob: 0.0,
            activity: 0.3,
            iterations: 32,
            trip_count: 256,
            seed: 0,
        }
    }
}

impl DesignSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.depth == 0 || self.width == 0 || self.unroll == 0 {
            return Err(SynthError::Spec(
                "depth, width and unroll must be positive".into(),
            ));
        }
        if self.bitwidth == 0 || self.bitwidth > MAX_BITWIDTH {
            return Err(SynthError::Spec(format!(
                "bitwidth must be in 1..={MAX_BITWIDTH}"
            )));
        }
        if !(self.activity > 0.0 && self.activity <= 1.0) {
            return Err(SynthError::Spec("activity must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.cast_prob) {
            return Err(SynthError::Spec("cast_prob must be in [0, 1]".into()));
        }
        if self.iterations == 0 || self.trip_count == 0 {
            return Err(SynthError::Spec(
                "iterations and trip_count must be positive".into(),
            ));
        }
        if self.buffers.iter().any(|w| *w == 0) {
            return Err(SynthError::Spec("array sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthDesign {
    pub dfg: Dfg,
    pub stimuli: Stimuli,
    pub iterations: u64,
    pub metadata: MetadataVector,
}

const LANE_OPS: [Opcode; 8] = [
    Opcode::Add,
    Opcode::Sub,
    Opcode::Mul,
    Opcode::FAdd,
    Opcode::FMul,
    Opcode::Div,
    Opcode::Select,
    Opcode::Phi,
];
const CASTS: [Opcode; 4] = [Opcode::ZExt, Opcode::SExt, Opcode::Trunc, Opcode::BitCast];

#[derive(Debug, Clone)]
struct Step {
    op: Opcode,
    width: u32,
    second_operand: bool,
    cast: Option<(Opcode, u32)>,
}

fn lane_template(rng: &mut ChaCha8Rng, spec: &DesignSpec, memory: bool) -> Vec<Step> {
    let mut width = spec.bitwidth;
    let mut steps = Vec::with_capacity(spec.depth);
    for i in 0..spec.depth {
        let pool = if i == 0 {
            &LANE_OPS[..6]
        } else {
            &LANE_OPS[..]
        };
        let op = *pool.choose(rng).expect("nonempty");
        let cast = (i + 1 < spec.depth && rng.gen_bool(spec.cast_prob)).then(|| {
            let c = *CASTS.choose(rng).expect("nonempty");
            let out = match c {
                Opcode::ZExt | Opcode::SExt => (width * 2).min(MAX_BITWIDTH),
                Opcode::Trunc => (width / 2).max(1),
                _ => width,
            };
            (c, out)
        });
        steps.push(Step {
            op,
            width,
            second_operand: i > 0 && !memory && rng.gen_bool(0.5),
            cast,
        });
        if let Some((_, w)) = cast {
            width = w;
        }
    }
    steps
}

struct Builder {
    nodes: Vec<DfgNode>,
    edges: Vec<DfgEdge>,
    entries: Vec<(u32, u32)>,
}

impl Builder {
    fn node(&mut self, op: Opcode, width: u32) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(DfgNode::new(id, op, width));
        id
    }

    fn entry(&mut self, op: Opcode, width: u32) -> u32 {
        let id = self.node(op, width);
        self.entries.push((id, width));
        id
    }

    fn edge(&mut self, src: u32, snk: u32, width: u32) {
        let var = format!("v{}", self.edges.len());
        self.edges.push(DfgEdge::new(src, snk, var, width));
    }
}

/// Seeded random-walk input stream: every bit flips with probability
/// `activity` between consecutive values. At least one change is guaranteed.
fn stream(rng: &mut ChaCha8Rng, width: u32, len: u64, activity: f64) -> Vec<u128> {
    let m = mask(width);
    let mut v = rng.gen::<u128>() & m;
    let mut out = Vec::with_capacity(len as usize);
    out.push(v);
    for _ in 1..len {
        let mut flips = 0u128;
        for b in 0..width {
            if rng.gen_bool(activity) {
                flips |= 1 << b;
            }
        }
        v ^= flips;
        out.push(v);
    }
    if out.len() > 1 && out.windows(2).all(|w| w[0] == w[1]) {
        out[1] ^= 1;
    }
    out
}

struct Proxy {
    lut: f64,
    dsp: f64,
    bram: f64,
    latency: f64,
    clock_ns: f64,
}

fn proxy_metrics(dfg: &Dfg, spec: &DesignSpec) -> Proxy {
    let mut lut = 0.0;
    let mut dsp = 0.0;
    for n in dfg.nodes() {
        let w = f64::from(n.bitwidth);
        let (l, d) = match n.opcode {
            Opcode::Mul | Opcode::FMul => (0.5 * w, (w / 18.0).ceil()),
            Opcode::Div | Opcode::FDiv => (8.0 * w, 0.0),
            Opcode::FAdd | Opcode::FSub => (2.0 * w, 0.0),
            Opcode::Add | Opcode::Sub | Opcode::ICmp | Opcode::FCmp => (w, 0.0),
            Opcode::Select | Opcode::Phi => (0.5 * w, 0.0),
            _ => (0.1 * w, 0.0),
        };
        lut += l;
        dsp += d;
    }
    let bram = spec
        .buffers
        .iter()
        .map(|words| ((*words * u64::from(spec.bitwidth)) as f64 / 18432.0).ceil())
        .sum();
    let per_pass = spec.trip_count.div_ceil(spec.unroll as u64);
    let latency = (per_pass * (spec.depth as u64 + 2) + spec.unroll as u64) as f64;
    let clock_ns = 4.0 + 0.15 * spec.depth as f64 + 0.02 * f64::from(spec.bitwidth);
    Proxy {
        lut,
        dsp,
        bram,
        latency,
        clock_ns,
    }
}

fn build(spec: &DesignSpec) -> Result<(Dfg, Stimuli), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates: Vec<Vec<Step>> = (0..spec.width)
        .map(|l| lane_template(&mut rng, spec, l < spec.buffers.len()))
        .collect();
    let lane_activity: Vec<f64> = (0..spec.width)
        .map(|_| (spec.activity * rng.gen_range(0.5..1.5)).min(1.0))
        .collect();

    let mut b = Builder {
        nodes: Vec::new(),
        edges: Vec::new(),
        entries: Vec::new(),
    };
    let arrays: Vec<u32> = spec
        .buffers
        .iter()
        .map(|words| {
            let id = b.entry(Opcode::Alloca, spec.bitwidth);
            b.nodes[id as usize] = b.nodes[id as usize].clone().with_words(*words);
            id
        })
        .collect();
    let mut tails = Vec::new();
    for (l, steps) in templates.iter().enumerate() {
        for _ in 0..spec.unroll {
            let head = if let Some(&array) = arrays.get(l) {
                let gep = b.node(Opcode::GetElementPtr, spec.bitwidth);
                b.edge(array, gep, spec.bitwidth);
                let load = b.node(Opcode::Load, spec.bitwidth);
                b.edge(gep, load, spec.bitwidth);
                load
            } else {
                b.entry(Opcode::Load, spec.bitwidth)
            };
            let mut prev = head;
            let mut prev_width = spec.bitwidth;
            for s in steps {
                let op = b.node(s.op, s.width);
                b.edge(prev, op, prev_width);
                if s.second_operand {
                    let extra = b.entry(Opcode::Load, s.width);
                    b.edge(extra, op, s.width);
                }
                prev = op;
                prev_width = s.width;
                if let Some((cast, w)) = s.cast {
                    let c = b.node(cast, w);
                    b.edge(prev, c, prev_width);
                    prev = c;
                    prev_width = w;
                }
            }
            tails.push((prev, prev_width));
        }
    }
    let ret_width = tails.iter().map(|t| t.1).max().unwrap_or(spec.bitwidth);
    let ret = b.node(Opcode::Ret, ret_width);
    for (t, w) in tails {
        b.edge(t, ret, w);
    }

    let mut stimuli = Stimuli::default();
    for &(id, width) in &b.entries {
        let activity = lane_activity[rng.gen_range(0..spec.width)];
        stimuli
            .inputs
            .insert(id, stream(&mut rng, width, spec.iterations, activity));
    }
    let depth_levels = (spec.depth * 2 + 3) as u64;
    let dfg = Dfg::new(depth_levels, b.nodes, b.edges)?;
    Ok((dfg, stimuli))
}

/// Generates a design, its input stimuli and a metadata estimate.
pub fn gen_design(spec: &DesignSpec) -> Result<SynthDesign, SynthError> {
    let (dfg, stimuli) = build(spec)?;
    let m = proxy_metrics(&dfg, spec);
    let baseline_spec = DesignSpec {
        unroll: 1,
        ..spec.clone()
    };
    let (baseline_dfg, _) = build(&baseline_spec)?;
    let base = proxy_metrics(&baseline_dfg, &baseline_spec);
    let ratio = |a: f64, b: f64| if a > 0.0 && b > 0.0 { a / b } else { 1.0 };
    let metadata = MetadataVector {
        lut: m.lut,
        dsp: m.dsp,
        bram: m.bram,
        latency: m.latency,
        clock_ns: m.clock_ns,
        scale: [
            ratio(m.lut, base.lut),
            ratio(m.dsp, base.dsp),
            ratio(m.bram, base.bram),
            ratio(m.latency, base.latency),
            ratio(m.clock_ns, base.clock_ns),
        ],
    };
    Ok(SynthDesign {
        dfg,
        stimuli,
        iterations: spec.iterations,
        metadata,
    })
}

/// Coefficients of the analytic power oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerCoefficients {
    /// Effective capacitance per relation, indexed like `RelationType::ALL`.
    pub capacitance: [f64; 4],
    pub voltage: f64,
    pub frequency: f64,
    /// Constant part of the static power.
    pub static_base: f64,
    /// Static power per LUT of the metadata estimate.
    pub static_per_lut: f64,
}

impl Default for PowerCoefficients {
    fn default() -> Self {
        PowerCoefficients {
            capacitance: [3e-10, 5e-10, 2e-10, 1e-10],
            voltage: 0.85,
            frequency: 1e8,
            static_base: 0.1,
            static_per_lut: 2e-5,
        }
    }
}

/// Dynamic power implied by the edge activities of `sample`.
pub fn oracle_power(sample: &GraphSample, coeffs: &PowerCoefficients) -> f64 {
    let scale = coeffs.voltage * coeffs.voltage * coeffs.frequency;
    sample
        .edges
        .iter()
        .map(|e| {
            let alpha = (e.features.sa_src() + e.features.sa_snk()) / 2.0;
            alpha * coeffs.capacitance[e.relation.index()] * scale
        })
        .sum()
}

/// Dynamic plus a static estimate from the metadata.
pub fn oracle_total_power(sample: &GraphSample, coeffs: &PowerCoefficients) -> f64 {
    let lut = sample.metadata.as_ref().map_or(0.0, |m| m.lut);
    oracle_power(sample, coeffs) + coeffs.static_base + coeffs.static_per_lut * lut
}

/// A design taken through construction, simulation and feature annotation.
#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub app: String,
    pub id: String,
    pub design: SynthDesign,
    pub constructed: Dfg,
    pub traces: TraceSet,
    /// Annotated sample with metadata and the requested label kind.
    pub sample: GraphSample,
    pub power_dynamic: f64,
    pub power_total: f64,
}

/// Runs the construction passes, simulates and labels a design.
pub fn realize(
    app: &str,
    id: &str,
    design: SynthDesign,
    coeffs: &PowerCoefficients,
    kind: PowerKind,
) -> Result<SynthRecord, SynthError> {
    let mut diags: Vec<Diagnostic> = Vec::new();
    let constructed = construct_graph(&design.dfg, &mut diags);
    let stimuli = design.stimuli.restricted_to(&constructed);
    let traces = interpret_dfg(&constructed, &stimuli, design.iterations)?;
    let mut sample = annotate_features(&constructed, &traces)?;
    sample.name = format!("{app}/{id}");
    sample.metadata = Some(design.metadata.clone());
    let power_dynamic = oracle_power(&sample, coeffs);
    let power_total = oracle_total_power(&sample, coeffs);
    sample.label = Some(PowerLabel {
        watts: match kind {
            PowerKind::Dynamic => power_dynamic,
            PowerKind::Total => power_total,
        },
        kind,
    });
    Ok(SynthRecord {
        app: app.to_string(),
        id: id.to_string(),
        design,
        constructed,
        traces,
        sample,
        power_dynamic,
        power_total,
    })
}

/// Application families of the synthetic corpus.
pub const FAMILIES: [&str; 6] = ["stream", "memory", "cast", "wide", "deep", "unrolled"];

/// Draws a spec for one member of a family.
pub fn family_spec(family: &str, rng: &mut ChaCha8Rng) -> DesignSpec {
    let widths = [8, 16, 24, 32];
    let mut spec = DesignSpec {
        depth: rng.gen_range(2..=5),
        width: rng.gen_range(1..=3),
        unroll: 1,
        buffers: Vec::new(),
        bitwidth: *widths.choose(rng).expect("nonempty"),
        cast_prob: 0.15,
        activity: rng.gen_range(0.05..0.6),
        iterations: 32,
        trip_count: *[64u64, 128, 256, 512].choose(rng).expect("nonempty"),
        seed: rng.gen(),
    };
    match family {
        "memory" => {
            let arrays = rng.gen_range(1..=2);
            spec.buffers = (0..arrays).map(|_| rng.gen_range(16..=1024)).collect();
            spec.width = arrays + rng.gen_range(0..=1);
            spec.unroll = rng.gen_range(1..=3);
        }
        "cast" => spec.cast_prob = rng.gen_range(0.4..0.8),
        "wide" => spec.width = rng.gen_range(3..=5),
        "deep" => spec.depth = rng.gen_range(5..=8),
        "unrolled" => {
            spec.width = 1;
            spec.unroll = rng.gen_range(2..=8);
            spec.bitwidth = 8 * rng.gen_range(1..=8);
        }
        _ => {}
    }
    spec
}

/// Generates `count` labelled designs spread round-robin over
/// [`FAMILIES`].
pub fn gen_dataset(
    count: usize,
    seed: u64,
    kind: PowerKind,
) -> Result<Vec<SynthRecord>, SynthError> {
    let coeffs = PowerCoefficients::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let family = FAMILIES[i % FAMILIES.len()];
        let spec = family_spec(family, &mut rng);
        let design = gen_design(&spec)?;
        out.push(realize(family, &format!("s{i:04}"), design, &coeffs, kind)?);
    }
    Ok(out)
}

/// One point of a design space: a labelled design and its latency.
#[derive(Debug, Clone)]
pub struct SpacePoint {
    pub id: usize,
    pub latency: f64,
    pub record: SynthRecord,
}

/// A design space of one kernel: unroll factor 1..=8 x data packing
/// {1,2,4,8,16} x five structural variants, 200 points in total. Unrolling and
/// packing both trade latency for power.
pub fn gen_space(seed: u64) -> Result<Vec<SpacePoint>, SynthError> {
    let coeffs = PowerCoefficients::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variants: Vec<(usize, u64, f64)> = (0..5)
        .map(|_| (rng.gen_range(2..=5), rng.gen(), rng.gen_range(0.1..0.5)))
        .collect();
    let mut out = Vec::with_capacity(200);
    for unroll in 1..=8usize {
        for packing in [1u32, 2, 4, 8, 16] {
            for (v, &(depth, vseed, activity)) in variants.iter().enumerate() {
                let spec = DesignSpec {
                    depth,
                    width: 1,
                    unroll,
                    buffers: Vec::new(),
                    bitwidth: 8 * packing,
                    cast_prob: 0.0,
                    activity,
                    iterations: 32,
                    trip_count: 1024 / u64::from(packing),
                    seed: vseed,
                };
                let design = gen_design(&spec)?;
                let latency = design.metadata.latency;
                let id = out.len();
                let record = realize(
                    "space",
                    &format!("u{unroll}_p{packing}_v{v}"),
                    design,
                    &coeffs,
                    PowerKind::Dynamic,
                )?;
                out.push(SpacePoint {
                    id,
                    latency,
                    record,
                });
            }
        }
    }
    Ok(out)
}
