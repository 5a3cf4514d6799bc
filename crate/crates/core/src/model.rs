//! Heterogeneous edge-centric graph network for power regression.
//!
//! Each convolution layer updates a node as
//! `relu(W_V h_v + b_V + sum_r sum_{u -> v in r} (W_r (W_E e_uv + b_E) + b_r))`.
//! The message is affine in the edge features, so the inner sums are taken
//! over raw features first: per sink and relation the model sees the summed
//! edge features and the edge count, and multiplies them by the composed
//! `W_E W_r` transform. This is exact and keeps the cost of a layer at one
//! `|V| x d x d` product.
//!
//! Graph embeddings are the sum over layers 1..K and nodes of the node
//! embeddings. They are concatenated with an embedding of the metadata
//! vector and fed to a two-layer head.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sample::{GraphSample, MetadataVector, PowerKind, EDGE_FEATURES};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_SCHEMA: &str = "hecgnn v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sample `{0}` has no metadata but the model uses metadata")]
    MissingMetadata(String),
    #[error("sample `{name}` has feature dim {got}, model expects {expected}")]
    FeatureDim {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("sample `{0}` has no label")]
    MissingLabel(String),
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HecGnnConfig {
    /// Node feature width of the input samples.
    pub input_dim: usize,
    pub num_layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub metadata_dim: usize,
    pub head_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub use_edge_features: bool,
    pub directed: bool,
    pub heterogeneous: bool,
    pub use_metadata: bool,
    pub use_bias: bool,
}

impl Default for HecGnnConfig {
    fn default() -> Self {
        HecGnnConfig {
            input_dim: 32,
            num_layers: 3,
            hidden: 128,
            dropout: 0.2,
            metadata_dim: 64,
            head_hidden: 64,
            epochs: 1200,
            batch_size: 128,
            lr: 0.0005,
            patience: 200,
            use_edge_features: true,
            directed: true,
            heterogeneous: true,
            use_metadata: true,
            use_bias: true,
        }
    }
}

impl HecGnnConfig {
    /// Defaults with the epoch budget for the given label kind.
    pub fn for_power(kind: PowerKind) -> Self {
        HecGnnConfig {
            epochs: match kind {
                PowerKind::Total => 1200,
                PowerKind::Dynamic => 2400,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("input_dim", self.input_dim),
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("metadata_dim", self.metadata_dim),
            ("head_hidden", self.head_hidden),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be >= 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must be in [0, 1)".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(ModelError::Config("lr must be positive".into()));
        }
        Ok(())
    }

    /// Number of distinct relation transforms.
    pub fn relation_slots(&self) -> usize {
        if self.heterogeneous {
            4
        } else {
            1
        }
    }

    fn head_input(&self) -> usize {
        self.hidden
            + if self.use_metadata {
                self.metadata_dim
            } else {
                0
            }
    }

    /// Columns of the per-relation aggregate: summed features, then the edge
    /// count twice (for the edge bias and the relation bias).
    fn aggregate_width(&self) -> usize {
        EDGE_FEATURES + if self.use_bias { 2 } else { 0 }
    }

    const KEYS: [&'static str; 15] = [
        "input_dim",
        "num_layers",
        "hidden",
        "dropout",
        "metadata_dim",
        "head_hidden",
        "epochs",
        "batch_size",
        "lr",
        "patience",
        "use_edge_features",
        "directed",
        "heterogeneous",
        "use_metadata",
        "use_bias",
    ];

    /// `key=value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.input_dim.to_string(),
            self.num_layers.to_string(),
            self.hidden.to_string(),
            format!("{:?}", self.dropout),
            self.metadata_dim.to_string(),
            self.head_hidden.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.lr),
            self.patience.to_string(),
            self.use_edge_features.to_string(),
            self.directed.to_string(),
            self.heterogeneous.to_string(),
            self.use_metadata.to_string(),
            self.use_bias.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse()
                .map_err(|_| format!("bad value `{v}` for `{key}`"))
        }
        match key {
            "input_dim" => self.input_dim = num(key, value)?,
            "num_layers" => self.num_layers = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "metadata_dim" => self.metadata_dim = num(key, value)?,
            "head_hidden" => self.head_hidden = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "use_edge_features" => self.use_edge_features = num(key, value)?,
            "directed" => self.directed = num(key, value)?,
            "heterogeneous" => self.heterogeneous = num(key, value)?,
            "use_metadata" => self.use_metadata = num(key, value)?,
            "use_bias" => self.use_bias = num(key, value)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }
}

/// Ablation variants of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Proposed,
    WithoutOptimizations,
    WithoutEdgeFeatures,
    WithoutDirection,
    WithoutHeterogeneity,
    WithoutMetadata,
    /// Full model trained as a single member instead of an ensemble.
    Single,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Proposed,
        Variant::WithoutOptimizations,
        Variant::WithoutEdgeFeatures,
        Variant::WithoutDirection,
        Variant::WithoutHeterogeneity,
        Variant::WithoutMetadata,
        Variant::Single,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "prop",
            Variant::WithoutOptimizations => "wo-opt",
            Variant::WithoutEdgeFeatures => "wo-ef",
            Variant::WithoutDirection => "wo-dir",
            Variant::WithoutHeterogeneity => "wo-hetr",
            Variant::WithoutMetadata => "wo-md",
            Variant::Single => "sgl",
        }
    }

    pub fn apply(self, base: &HecGnnConfig) -> HecGnnConfig {
        let mut c = base.clone();
        match self {
            Variant::Proposed | Variant::Single => {}
            Variant::WithoutOptimizations => {
                c.use_edge_features = false;
                c.directed = false;
                c.heterogeneous = false;
                c.use_metadata = false;
            }
            Variant::WithoutEdgeFeatures => c.use_edge_features = false,
            Variant::WithoutDirection => c.directed = false,
            Variant::WithoutHeterogeneity => c.heterogeneous = false,
            Variant::WithoutMetadata => c.use_metadata = false,
        }
        c
    }

    pub fn is_ensemble(self) -> bool {
        matches!(self, Variant::Proposed)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

/// Named parameter matrices, all stored `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    fn shapes(config: &HecGnnConfig) -> Vec<(String, usize, usize)> {
        let d = config.hidden;
        let mut out = Vec::new();
        for k in 0..config.num_layers {
            let d_in = if k == 0 { config.input_dim } else { d };
            out.push((format!("layer{k}.node_w"), d_in, d));
            out.push((format!("layer{k}.node_b"), 1, d));
            out.push((format!("layer{k}.edge_w"), EDGE_FEATURES, d));
            out.push((format!("layer{k}.edge_b"), 1, d));
            for r in 0..config.relation_slots() {
                out.push((format!("layer{k}.rel{r}_w"), d, d));
                out.push((format!("layer{k}.rel{r}_b"), 1, d));
            }
        }
        if config.use_metadata {
            out.push(("meta_w".into(), MetadataVector::LEN, config.metadata_dim));
            out.push(("meta_b".into(), 1, config.metadata_dim));
        }
        out.push(("head1_w".into(), config.head_input(), config.head_hidden));
        out.push(("head1_b".into(), 1, config.head_hidden));
        out.push(("head2_w".into(), config.head_hidden, 1));
        out.push(("head2_b".into(), 1, 1));
        out
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
    pub fn init(config: &HecGnnConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, rows, cols) in Self::shapes(config) {
            let t = if name.ends_with("_b") {
                Tensor::zeros(rows, cols)
            } else {
                let bound = 1.0 / (rows as f64).sqrt();
                let data = (0..rows * cols)
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect();
                Tensor::matrix(rows, cols, data).expect("shape")
            };
            names.push(name);
            tensors.push(t);
        }
        ModelParams { names, tensors }
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &HecGnnConfig) -> ModelParams {
        let (names, tensors) = Self::shapes(config)
            .into_iter()
            .map(|(n, r, c)| (n, Tensor::zeros(r, c)))
            .unzip();
        ModelParams { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// A sample turned into the dense inputs the network consumes.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub name: String,
    num_nodes: usize,
    features: Vec<f64>,
    /// `num_nodes x (slots * aggregate_width)`.
    aggregate: Vec<f64>,
    meta: Option<[f64; MetadataVector::LEN]>,
    pub label: Option<f64>,
}

impl PreparedSample {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }
}

/// A block-diagonal union of prepared samples.
struct Batch {
    features: Tensor,
    aggregate: Tensor,
    graph_index: Vec<usize>,
    meta: Option<Tensor>,
    graphs: usize,
}

/// Model parameters with the config and metadata normalization they were
/// trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct HecGnn {
    pub config: HecGnnConfig,
    pub params: ModelParams,
    /// Divisors for the five absolute metadata metrics.
    pub meta_scale: [f64; 5],
}

/// Per-metric training-set maxima used to normalize absolute metadata.
pub fn metadata_scale<'a>(samples: impl IntoIterator<Item = &'a GraphSample>) -> [f64; 5] {
    let mut max = [0.0f64; 5];
    for s in samples {
        if let Some(m) = &s.metadata {
            for (slot, v) in max.iter_mut().zip(m.absolute()) {
                *slot = slot.max(v);
            }
        }
    }
    max.map(|m| if m > 0.0 { m } else { 1.0 })
}

impl HecGnn {
    pub fn new(config: HecGnnConfig, seed: u64) -> Result<HecGnn, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(HecGnn {
            config,
            params,
            meta_scale: [1.0; 5],
        })
    }

    pub fn from_params(config: HecGnnConfig, params: ModelParams) -> Result<HecGnn, ModelError> {
        config.validate()?;
        let expected = ModelParams::shapes(&config);
        let ok = expected.len() == params.names.len()
            && expected
                .iter()
                .zip(params.names.iter().zip(&params.tensors))
                .all(|((n, r, c), (pn, t))| n == pn && t.shape() == [*r, *c]);
        if !ok {
            return Err(ModelError::Config("parameters do not match config".into()));
        }
        Ok(HecGnn {
            config,
            params,
            meta_scale: [1.0; 5],
        })
    }

    /// Converts a sample into aggregated dense inputs under this model's
    /// flags. Preparation is independent of parameters and can be reused
    /// across epochs.
    pub fn prepare(&self, s: &GraphSample) -> Result<PreparedSample, ModelError> {
        let c = &self.config;
        let n = s.num_nodes();
        if n > 0 && s.feature_dim != c.input_dim {
            return Err(ModelError::FeatureDim {
                name: s.name.clone(),
                expected: c.input_dim,
                got: s.feature_dim,
            });
        }
        let width = c.aggregate_width();
        let cols = c.relation_slots() * width;
        let mut aggregate = vec![0.0; n * cols];
        let mut add = |snk: usize, relation: usize, f: &[f64; EDGE_FEATURES]| {
            let slot = if c.heterogeneous { relation } else { 0 };
            let base = snk * cols + slot * width;
            let row = &mut aggregate[base..base + width];
            if c.use_edge_features {
                for (a, v) in row.iter_mut().zip(f) {
                    *a += v;
                }
            } else {
                for a in &mut row[..EDGE_FEATURES] {
                    *a += 1.0;
                }
            }
            for a in &mut row[EDGE_FEATURES..] {
                *a += 1.0;
            }
        };
        for e in &s.edges {
            if e.src >= n || e.snk >= n {
                return Err(ModelError::Config(format!(
                    "sample `{}` has an edge outside its node range",
                    s.name
                )));
            }
            add(e.snk, e.relation.index(), &e.features.0);
            if !c.directed {
                add(e.src, e.relation.index(), &e.features.0);
            }
        }
        let meta = if c.use_metadata {
            let m = s
                .metadata
                .as_ref()
                .ok_or_else(|| ModelError::MissingMetadata(s.name.clone()))?;
            Some(self.normalize_metadata(m))
        } else {
            None
        };
        Ok(PreparedSample {
            name: s.name.clone(),
            num_nodes: n,
            features: s.node_features.clone(),
            aggregate,
            meta,
            label: s.watts(),
        })
    }

    fn normalize_metadata(&self, m: &MetadataVector) -> [f64; MetadataVector::LEN] {
        let mut v = m.to_array();
        for (x, s) in v.iter_mut().zip(self.meta_scale) {
            *x /= s;
        }
        v
    }

    fn batch(&self, samples: &[&PreparedSample]) -> Batch {
        let c = &self.config;
        let cols = c.relation_slots() * c.aggregate_width();
        let total: usize = samples.iter().map(|s| s.num_nodes).sum();
        let mut features = Vec::with_capacity(total * c.input_dim);
        let mut aggregate = Vec::with_capacity(total * cols);
        let mut graph_index = Vec::with_capacity(total);
        let mut meta = Vec::new();
        for (g, s) in samples.iter().enumerate() {
            features.extend_from_slice(&s.features);
            aggregate.extend_from_slice(&s.aggregate);
            graph_index.extend(std::iter::repeat(g).take(s.num_nodes));
            if let Some(m) = &s.meta {
                meta.extend_from_slice(m);
            }
        }
        Batch {
            features: Tensor::matrix(total, c.input_dim, features).expect("shape"),
            aggregate: Tensor::matrix(total, cols, aggregate).expect("shape"),
            graph_index,
            meta: c
                .use_metadata
                .then(|| Tensor::matrix(samples.len(), MetadataVector::LEN, meta).expect("shape")),
            graphs: samples.len(),
        }
    }

    /// Records the forward pass on `tape`. Returns the parameter leaves and
    /// the `graphs x 1` prediction. Dropout is active iff `rng` is given.
    fn forward(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mut rng: Option<&mut ChaCha8Rng>,
        mut pre_activations: Option<&mut Vec<Tensor>>,
    ) -> Result<(Vec<Var>, Var), ModelError> {
        let c = &self.config;
        let p: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        let per_layer = 4 + 2 * c.relation_slots();
        let x = tape.leaf(batch.features.clone());
        let agg = tape.leaf(batch.aggregate.clone());

        let mut h = x;
        let mut pooled: Option<Var> = None;
        for k in 0..c.num_layers {
            let base = k * per_layer;
            let (node_w, node_b, edge_w, edge_b) = (p[base], p[base + 1], p[base + 2], p[base + 3]);
            let edge_in = if c.use_bias {
                tape.vstack(&[edge_w, edge_b])?
            } else {
                edge_w
            };
            let mut blocks = Vec::with_capacity(c.relation_slots());
            for r in 0..c.relation_slots() {
                let rel_w = p[base + 4 + 2 * r];
                let rel_b = p[base + 5 + 2 * r];
                let composed = tape.matmul(edge_in, rel_w)?;
                blocks.push(composed);
                if c.use_bias {
                    blocks.push(rel_b);
                }
            }
            let transform = tape.vstack(&blocks)?;
            let messages = tape.matmul(agg, transform)?;
            let mut pre = tape.matmul(h, node_w)?;
            if c.use_bias {
                pre = tape.add_row(pre, node_b)?;
            }
            pre = tape.add(pre, messages)?;
            if let Some(out) = pre_activations.as_deref_mut() {
                out.push(tape.value(pre).clone());
            }
            let mut out = tape.relu(pre);
            if let Some(rng) = rng.as_deref_mut() {
                out = tape.dropout(out, c.dropout, rng);
            }
            pooled = Some(match pooled {
                None => out,
                Some(acc) => tape.add(acc, out)?,
            });
            h = out;
        }
        let pooled = pooled.expect("num_layers >= 1");
        let mut emb = tape.scatter_sum(pooled, &batch.graph_index, batch.graphs)?;

        let mut next = c.num_layers * per_layer;
        if c.use_metadata {
            let meta = tape.leaf(batch.meta.clone().expect("metadata batch"));
            let (w, b) = (p[next], p[next + 1]);
            next += 2;
            let mut m = tape.matmul(meta, w)?;
            if c.use_bias {
                m = tape.add_row(m, b)?;
            }
            let m = tape.relu(m);
            emb = tape.concat(emb, m)?;
        }
        let (w1, b1, w2, b2) = (p[next], p[next + 1], p[next + 2], p[next + 3]);
        let mut hidden = tape.matmul(emb, w1)?;
        if c.use_bias {
            hidden = tape.add_row(hidden, b1)?;
        }
        let mut hidden = tape.relu(hidden);
        if let Some(rng) = rng.as_deref_mut() {
            hidden = tape.dropout(hidden, c.dropout, rng);
        }
        let mut out = tape.matmul(hidden, w2)?;
        if c.use_bias {
            out = tape.add_row(out, b2)?;
        }
        Ok((p, out))
    }

    /// One training step's loss and parameter gradients on a batch. Missing
    /// gradients (unused biases) come back as zeros.
    pub fn loss_and_grads(
        &self,
        samples: &[&PreparedSample],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        let truth = samples
            .iter()
            .map(|s| {
                s.label
                    .ok_or_else(|| ModelError::MissingLabel(s.name.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let batch = self.batch(samples);
        let mut tape = Tape::new();
        let (params, out) = self.forward(&mut tape, &batch, rng, None)?;
        let loss = tape.mape_loss(out, &truth)?;
        tape.backward(loss)?;
        let grads = params
            .iter()
            .zip(&self.params.tensors)
            .map(|(v, t)| {
                tape.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect();
        Ok((tape.value(loss).data()[0], grads))
    }

    /// Eval-mode predictions for prepared samples.
    pub fn predict_prepared(&self, samples: &[&PreparedSample]) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.batch_size.max(1)) {
            let batch = self.batch(chunk);
            let mut tape = Tape::new();
            let (_, pred) = self.forward(&mut tape, &batch, None, None)?;
            out.extend_from_slice(tape.value(pred).data());
        }
        Ok(out)
    }

    /// Eval-mode power prediction in watts.
    pub fn predict(&self, sample: &GraphSample) -> Result<f64, ModelError> {
        let p = self.prepare(sample)?;
        Ok(self.predict_prepared(&[&p])?[0])
    }

    pub fn predict_many(&self, samples: &[GraphSample]) -> Result<Vec<f64>, ModelError> {
        let prepared = samples
            .iter()
            .map(|s| self.prepare(s))
            .collect::<Result<Vec<_>, _>>()?;
        self.predict_prepared(&prepared.iter().collect::<Vec<_>>())
    }

    /// Training-mode prediction with dropout masks drawn from `rng`.
    pub fn predict_train(
        &self,
        sample: &GraphSample,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, ModelError> {
        let p = self.prepare(sample)?;
        let batch = self.batch(&[&p]);
        let mut tape = Tape::new();
        let (_, pred) = self.forward(&mut tape, &batch, Some(rng), None)?;
        Ok(tape.value(pred).data()[0])
    }

    /// Pre-activation node states of every convolution layer, eval mode.
    pub fn layer_preactivations(&self, sample: &GraphSample) -> Result<Vec<Tensor>, ModelError> {
        let p = self.prepare(sample)?;
        let batch = self.batch(&[&p]);
        let mut tape = Tape::new();
        let mut pre = Vec::new();
        self.forward(&mut tape, &batch, None, Some(&mut pre))?;
        Ok(pre)
    }

    /// Node embeddings of layer `layer` given the previous layer's output,
    /// eval mode.
    pub fn conv_layer(
        &self,
        layer: usize,
        h_prev: &Tensor,
        sample: &GraphSample,
    ) -> Result<Tensor, ModelError> {
        let c = &self.config;
        if layer >= c.num_layers {
            return Err(ModelError::Config(format!("no layer {layer}")));
        }
        let p = self.prepare_graph_only(sample)?;
        let per_layer = 4 + 2 * c.relation_slots();
        let base = layer * per_layer;
        let t = &self.params.tensors;
        let mut tape = Tape::new();
        let h = tape.leaf(h_prev.clone());
        let agg = tape.leaf(Tensor::matrix(
            p.num_nodes,
            c.relation_slots() * c.aggregate_width(),
            p.aggregate,
        )?);
        let node_w = tape.leaf(t[base].clone());
        let node_b = tape.leaf(t[base + 1].clone());
        let mut edge_in = tape.leaf(t[base + 2].clone());
        if c.use_bias {
            let edge_b = tape.leaf(t[base + 3].clone());
            edge_in = tape.vstack(&[edge_in, edge_b])?;
        }
        let mut blocks = Vec::new();
        for r in 0..c.relation_slots() {
            let rel_w = tape.leaf(t[base + 4 + 2 * r].clone());
            blocks.push(tape.matmul(edge_in, rel_w)?);
            if c.use_bias {
                blocks.push(tape.leaf(t[base + 5 + 2 * r].clone()));
            }
        }
        let transform = tape.vstack(&blocks)?;
        let messages = tape.matmul(agg, transform)?;
        let mut pre = tape.matmul(h, node_w)?;
        if c.use_bias {
            pre = tape.add_row(pre, node_b)?;
        }
        let pre = tape.add(pre, messages)?;
        let out = tape.relu(pre);
        Ok(tape.value(out).clone())
    }

    fn prepare_graph_only(&self, s: &GraphSample) -> Result<PreparedSample, ModelError> {
        let mut c = self.clone();
        c.config.use_metadata = false;
        c.config.input_dim = s.feature_dim;
        c.prepare(s)
    }

    /// Renders the model as a text checkpoint.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_SCHEMA}");
        for (k, v) in self.config.to_pairs() {
            let _ = writeln!(out, "config {k} {v}");
        }
        let scale: Vec<String> = self.meta_scale.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "meta_scale {}", scale.join(" "));
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            let values: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "param {name} {} {}", t.rows(), t.cols());
            let _ = writeln!(out, "{}", values.join(" "));
        }
        let _ = writeln!(out, "end");
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<HecGnn, ModelError> {
        let err = |line: usize, msg: String| ModelError::Checkpoint { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l.trim() == CHECKPOINT_SCHEMA => {}
            _ => return Err(err(1, format!("expected `{CHECKPOINT_SCHEMA}` header"))),
        }
        let mut config = HecGnnConfig::default();
        let mut meta_scale = [1.0; 5];
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut ended = false;
        while let Some((no, line)) = lines.next() {
            let mut tok = line.split_whitespace();
            match tok.next() {
                None => continue,
                Some("config") => {
                    let (Some(k), Some(v)) = (tok.next(), tok.next()) else {
                        return Err(err(no, "config needs key and value".into()));
                    };
                    config.set(k, v).map_err(|m| err(no, m))?;
                }
                Some("meta_scale") => {
                    let vals: Vec<f64> = tok
                        .map(|v| v.parse().map_err(|_| err(no, format!("bad number `{v}`"))))
                        .collect::<Result<_, _>>()?;
                    meta_scale = vals
                        .try_into()
                        .map_err(|_| err(no, "meta_scale needs 5 values".into()))?;
                }
                Some("param") => {
                    let (Some(name), Some(r), Some(c)) = (tok.next(), tok.next(), tok.next())
                    else {
                        return Err(err(no, "param needs name rows cols".into()));
                    };
                    let r: usize = r.parse().map_err(|_| err(no, "bad rows".into()))?;
                    let c: usize = c.parse().map_err(|_| err(no, "bad cols".into()))?;
                    let (vno, values) = lines
                        .next()
                        .ok_or_else(|| err(no, "missing values line".into()))?;
                    let data: Vec<f64> = values
                        .split_whitespace()
                        .map(|v| v.parse().map_err(|_| err(vno, format!("bad number `{v}`"))))
                        .collect::<Result<_, _>>()?;
                    let t = Tensor::matrix(r, c, data).map_err(|e| err(vno, e.to_string()))?;
                    names.push(name.to_string());
                    tensors.push(t);
                }
                Some("end") => {
                    ended = true;
                    break;
                }
                Some(other) => return Err(err(no, format!("unexpected `{other}`"))),
            }
        }
        if !ended {
            return Err(err(text.lines().count(), "missing `end`".into()));
        }
        let mut model = HecGnn::from_params(config, ModelParams { names, tensors })?;
        model.meta_scale = meta_scale;
        Ok(model)
    }
}

/// Mean of eval-mode member predictions.
pub fn ensemble_predict(sample: &GraphSample, members: &[HecGnn]) -> Result<f64, ModelError> {
    if members.is_empty() {
        return Err(ModelError::EmptyEnsemble);
    }
    let mut sum = 0.0;
    for m in members {
        sum += m.predict(sample)?;
    }
    Ok(sum / members.len() as f64)
}

/// Ensemble predictions for many samples at once.
pub fn ensemble_predict_many(
    samples: &[GraphSample],
    members: &[HecGnn],
) -> Result<Vec<f64>, ModelError> {
    if members.is_empty() {
        return Err(ModelError::EmptyEnsemble);
    }
    let mut sums = vec![0.0; samples.len()];
    for m in members {
        for (s, p) in sums.iter_mut().zip(m.predict_many(samples)?) {
            *s += p;
        }
    }
    Ok(sums.into_iter().map(|s| s / members.len() as f64).collect())
}

/// Graph embedding as the sum over layers and nodes of the given node
/// embeddings.
pub fn pool(layer_embeddings: &[Tensor]) -> Result<Vec<f64>, ModelError> {
    let first = layer_embeddings
        .first()
        .ok_or_else(|| ModelError::Config("pooling needs at least one layer".into()))?;
    let d = first.cols();
    let mut out = vec![0.0; d];
    for t in layer_embeddings {
        if t.cols() != d || t.rows() != first.rows() {
            return Err(TensorError::Shape {
                op: "pool",
                lhs: first.shape().to_vec(),
                rhs: t.shape().to_vec(),
            }
            .into());
        }
        for row in t.data().chunks(d.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::{EdgeFeatures, PowerLabel, RelationType, SampleEdge};

    fn tiny_config() -> HecGnnConfig {
        HecGnnConfig {
            input_dim: 1,
            num_layers: 1,
            hidden: 1,
            use_metadata: false,
            ..Default::default()
        }
    }

    fn two_node() -> GraphSample {
        GraphSample {
            name: "pair".into(),
            node_features: vec![1.0, 1.0],
            feature_dim: 1,
            edges: vec![SampleEdge {
                src: 0,
                snk: 1,
                relation: RelationType::AToN,
                features: EdgeFeatures([0.5, 0.3, 0.2, 0.1]),
            }],
            metadata: None,
            label: None,
        }
    }

    pub(crate) fn random_sample(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> GraphSample {
        let node_features = (0..n * dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut edges = Vec::new();
        for _ in 0..n * 2 {
            let src = rng.gen_range(0..n);
            let snk = rng.gen_range(0..n);
            if src == snk {
                continue;
            }
            edges.push(SampleEdge {
                src,
                snk,
                relation: RelationType::ALL[rng.gen_range(0..4)],
                features: EdgeFeatures([(); 4].map(|_| rng.gen_range(0.0..1.0))),
            });
        }
        GraphSample {
            name: "rand".into(),
            node_features,
            feature_dim: dim,
            edges,
            metadata: Some(MetadataVector::from_array(
                [(); 10].map(|_| rng.gen_range(0.1..2.0)),
            )),
            label: Some(PowerLabel {
                watts: rng.gen_range(0.5..2.0),
                kind: PowerKind::Dynamic,
            }),
        }
    }

    fn permuted(s: &GraphSample, perm: &[usize]) -> GraphSample {
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

    fn small(dim: usize) -> HecGnnConfig {
        HecGnnConfig {
            input_dim: dim,
            hidden: 8,
            metadata_dim: 4,
            head_hidden: 5,
            ..Default::default()
        }
    }

    #[test]
    fn hand_set_two_node_layer() {
        let cfg = tiny_config();
        let mut m = HecGnn::from_params(cfg.clone(), ModelParams::zeros(&cfg)).unwrap();
        m.params.get_mut("layer0.node_w").unwrap().data_mut()[0] = 1.0;
        m.params.get_mut("layer0.edge_w").unwrap().data_mut()[0] = 1.0;
        let rel = format!("layer0.rel{}_w", RelationType::AToN.index());
        m.params.get_mut(&rel).unwrap().data_mut()[0] = 2.0;
        let h = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let out = m.conv_layer(0, &h, &two_node()).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn edgeless_identity_layer_is_relu() {
        let cfg = HecGnnConfig {
            input_dim: 3,
            hidden: 3,
            ..tiny_config()
        };
        let mut m = HecGnn::from_params(cfg.clone(), ModelParams::zeros(&cfg)).unwrap();
        *m.params.get_mut("layer0.node_w").unwrap() = Tensor::identity(3);
        let s = GraphSample {
            name: "iso".into(),
            node_features: vec![0.0; 6],
            feature_dim: 3,
            edges: vec![],
            metadata: None,
            label: None,
        };
        let h = Tensor::matrix(2, 3, vec![-1.0, 2.0, 0.5, 3.0, -0.1, 0.0]).unwrap();
        let out = m.conv_layer(0, &h, &s).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 0.5, 3.0, 0.0, 0.0]);
        let zero = HecGnn::from_params(cfg.clone(), ModelParams::zeros(&cfg)).unwrap();
        assert!(zero
            .conv_layer(0, &h, &s)
            .unwrap()
            .data()
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn zero_params_predict_final_bias() {
        let cfg = small(1);
        let mut m = HecGnn::from_params(cfg.clone(), ModelParams::zeros(&cfg)).unwrap();
        m.params.get_mut("head2_b").unwrap().data_mut()[0] = 0.7;
        let mut s = two_node();
        s.metadata = Some(MetadataVector::from_array([1.0; 10]));
        assert_eq!(m.predict(&s).unwrap(), 0.7);
        s.metadata = None;
        assert!(matches!(m.predict(&s), Err(ModelError::MissingMetadata(_))));
    }

    #[test]
    fn pool_sums_layers_and_nodes() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(pool(&[a]).unwrap(), vec![4.0, 6.0]);
        let one = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(pool(&[one.clone(), one]).unwrap(), vec![4.0]);
        assert_eq!(pool(&[Tensor::zeros(0, 3)]).unwrap(), vec![0.0; 3]);
        assert!(pool(&[]).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = small(6);
        let a = ModelParams::init(&cfg, 5);
        assert_eq!(a, ModelParams::init(&cfg, 5));
        assert_ne!(a, ModelParams::init(&cfg, 6));
        for (name, t) in a.names().iter().zip(a.tensors()) {
            let bound = 1.0 / (t.rows() as f64).sqrt();
            if name.ends_with("_b") {
                assert!(t.data().iter().all(|v| *v == 0.0));
            } else {
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = HecGnn::new(small(6), 3).unwrap();
        for _ in 0..5 {
            let s = random_sample(&mut rng, 7, 6);
            let mut perm: Vec<usize> = (0..7).collect();
            for i in (1..7).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let a = m.predict(&s).unwrap();
            let b = m.predict(&permuted(&s, &perm)).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn undirected_matches_presymmetrized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_sample(&mut rng, 6, 4);
        let mut sym = s.clone();
        for e in &s.edges {
            sym.edges.push(SampleEdge {
                src: e.snk,
                snk: e.src,
                ..e.clone()
            });
        }
        let directed = HecGnn::new(small(4), 9).unwrap();
        let mut undirected = directed.clone();
        undirected.config.directed = false;
        let a = undirected.predict(&s).unwrap();
        let b = directed.predict(&sym).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn duplicate_edge_adds_its_message() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = HecGnnConfig {
            num_layers: 1,
            ..small(4)
        };
        let mut m = HecGnn::new(cfg, 1).unwrap();
        for t in m.params.tensors_mut() {
            for v in t.data_mut() {
                *v += 0.01;
            }
        }
        let s = random_sample(&mut rng, 5, 4);
        let mut dup = s.clone();
        dup.edges.push(s.edges[0].clone());
        let mut single = s.clone();
        single.edges = vec![s.edges[0].clone()];
        single.node_features = vec![0.0; s.node_features.len()];
        let mut empty = single.clone();
        empty.edges.clear();
        let base = &m.layer_preactivations(&s).unwrap()[0];
        let with = &m.layer_preactivations(&dup).unwrap()[0];
        let msg_plus_bias = &m.layer_preactivations(&single).unwrap()[0];
        let bias = &m.layer_preactivations(&empty).unwrap()[0];
        for i in 0..base.len() {
            let msg = msg_plus_bias.data()[i] - bias.data()[i];
            assert!((with.data()[i] - base.data()[i] - msg).abs() < 1e-12);
        }
    }

    #[test]
    fn relation_swap_changes_message_by_transform_difference() {
        let cfg = HecGnnConfig {
            input_dim: 2,
            num_layers: 1,
            hidden: 3,
            use_bias: false,
            use_metadata: false,
            ..Default::default()
        };
        let m = HecGnn::new(cfg, 8).unwrap();
        let mut s = GraphSample {
            name: "swap".into(),
            node_features: vec![0.2, 0.4, 0.6, 0.8],
            feature_dim: 2,
            edges: vec![SampleEdge {
                src: 0,
                snk: 1,
                relation: RelationType::AToA,
                features: EdgeFeatures([0.3, 0.7, 0.1, 0.9]),
            }],
            metadata: None,
            label: None,
        };
        let a = m.layer_preactivations(&s).unwrap().remove(0);
        s.edges[0].relation = RelationType::NToN;
        let b = m.layer_preactivations(&s).unwrap().remove(0);
        let e = Tensor::matrix(1, 4, vec![0.3, 0.7, 0.1, 0.9]).unwrap();
        let mut tape = Tape::new();
        let ev = tape.leaf(e);
        let we = tape.leaf(m.params.get("layer0.edge_w").unwrap().clone());
        let r1 = tape.leaf(m.params.get("layer0.rel1_w").unwrap().clone());
        let r2 = tape.leaf(m.params.get("layer0.rel3_w").unwrap().clone());
        let emb = tape.matmul(ev, we).unwrap();
        let m1 = tape.matmul(emb, r1).unwrap();
        let m2 = tape.matmul(emb, r2).unwrap();
        for j in 0..3 {
            let expected = tape.value(m1).data()[j] - tape.value(m2).data()[j];
            let got = a.get(1, j) - b.get(1, j);
            assert!((expected - got).abs() < 1e-12);
            assert_eq!(a.get(0, j), b.get(0, j));
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = HecGnnConfig {
            num_layers: 2,
            ..small(3)
        };
        let mut m = HecGnn::new(cfg, 4).unwrap();
        for t in m.params.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        let s = random_sample(&mut rng, 5, 3);
        let p = m.prepare(&s).unwrap();
        let (_, grads) = m.loss_and_grads(&[&p], None).unwrap();
        let eps = 1e-5;
        let mut checked = 0;
        for ti in 0..m.params.tensors.len() {
            for k in (0..m.params.tensors[ti].len()).step_by(7) {
                let orig = m.params.tensors[ti].data()[k];
                m.params.tensors[ti].data_mut()[k] = orig + eps;
                let fp = m.loss_and_grads(&[&p], None).unwrap().0;
                m.params.tensors[ti].data_mut()[k] = orig - eps;
                let fm = m.loss_and_grads(&[&p], None).unwrap().0;
                m.params.tensors[ti].data_mut()[k] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let analytic = grads[ti].data()[k];
                let scale = numeric.abs().max(analytic.abs());
                if scale < 1e-7 {
                    continue;
                }
                assert!(
                    (numeric - analytic).abs() / scale < 1e-4,
                    "{} [{k}]: {numeric} vs {analytic}",
                    m.params.names[ti]
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn eval_is_deterministic_and_train_mode_drops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_sample(&mut rng, 6, 4);
        let m = HecGnn::new(small(4), 1).unwrap();
        assert_eq!(m.predict(&s).unwrap(), m.predict(&s).unwrap());
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            m.predict_train(&s, &mut r1).unwrap(),
            m.predict_train(&s, &mut r2).unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_sample(&mut rng, 6, 4);
        let mut m = HecGnn::new(Variant::WithoutHeterogeneity.apply(&small(4)), 13).unwrap();
        m.meta_scale = [1.5, 2.0, 0.1, 300.0, 1.0 / 3.0];
        let text = m.to_checkpoint();
        let back = HecGnn::from_checkpoint(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint(), text);
        assert_eq!(
            back.predict(&s).unwrap().to_bits(),
            m.predict(&s).unwrap().to_bits()
        );
        assert!(HecGnn::from_checkpoint(&text.replace("end\n", "")).is_err());
        assert!(HecGnn::from_checkpoint("hecgnn v0\n").is_err());
    }

    #[test]
    fn ensemble_is_member_mean() {
        let cfg = small(1);
        let mut s = two_node();
        s.metadata = Some(MetadataVector::from_array([1.0; 10]));
        let member = |v: f64| {
            let mut m = HecGnn::from_params(cfg.clone(), ModelParams::zeros(&cfg)).unwrap();
            m.params.get_mut("head2_b").unwrap().data_mut()[0] = v;
            m
        };
        assert_eq!(ensemble_predict(&s, &[member(1.0)]).unwrap(), 1.0);
        assert_eq!(
            ensemble_predict(&s, &[member(1.0), member(3.0)]).unwrap(),
            2.0
        );
        assert!(matches!(
            ensemble_predict(&s, &[]),
            Err(ModelError::EmptyEnsemble)
        ));
    }

    #[test]
    fn variants_toggle_flags() {
        let base = HecGnnConfig::default();
        let none = Variant::WithoutOptimizations.apply(&base);
        assert!(
            !none.use_edge_features && !none.directed && !none.heterogeneous && !none.use_metadata
        );
        assert!(!Variant::WithoutEdgeFeatures.apply(&base).use_edge_features);
        assert_eq!(Variant::Single.apply(&base), base);
        assert_eq!("wo-dir".parse::<Variant>(), Ok(Variant::WithoutDirection));
        assert_eq!(HecGnnConfig::for_power(PowerKind::Dynamic).epochs, 2400);
    }
}
