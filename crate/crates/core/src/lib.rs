//! Power modeling for HLS designs with edge-centric heterogeneous GNNs.
//!
//! The crate covers the whole flow: a dataflow-graph model ([`dfg`]), an
//! interpreter producing value traces ([`interp`]), switching-activity
//! metrics ([`activity`]), graph construction passes ([`passes`]) and
//! feature annotation ([`sample`]), a small reverse-mode autodiff engine
//! ([`tensor`]), the HEC-GNN model ([`model`]), ensemble training
//! ([`train`]), synthetic design generation ([`synth`]) and Pareto design
//! space exploration ([`dse`]).

pub mod activity;
pub mod dataset;
pub mod dfg;
pub mod dse;
pub mod interp;
pub mod model;
pub mod passes;
pub mod sample;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use activity::{
    activation_rate, hamming, switching_activity, BitVector, Dir, TraceSet, ValueTrace,
};
pub use dataset::{load_dataset, split_leave_one_out, Dataset};
pub use dfg::{
    classify_node, parse_dfg, serialize_dfg, Dfg, DfgEdge, DfgNode, NodeClass, OpType, Opcode,
};
pub use dse::{adrs, explore, pareto_front, DesignPoint, ExploreConfig, ParetoSet};
pub use interp::{interpret_dfg, Stimuli};
pub use model::{ensemble_predict, HecGnn, HecGnnConfig, ModelParams, Variant};
pub use passes::{construct_graph, insert_buffers, merge_datapaths, trim_graph, Diagnostic};
pub use sample::{
    annotate_features, EdgeFeatures, GraphSample, MetadataVector, PowerKind, RelationType,
};
pub use seed::derive_seed;
pub use synth::{gen_design, oracle_power, DesignSpec, PowerCoefficients};
pub use tensor::{Adam, Tape, Tensor, TensorError, Var};
pub use train::{evaluate, train_ensemble, train_single, Member, TrainReport};
