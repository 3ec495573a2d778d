//! Multi-view subgraph learning for node classification with scarce labels.
//!
//! The pipeline couples two graph views of the same node set: the observed
//! adjacency and a latent adjacency recovered from node features by Isomap.
//! A shared-weight two-layer GCN embeds both views, per-node subgraph masks
//! are tuned to keep the members that preserve each node's own distribution,
//! and the masked subgraph summaries are fused with the node embeddings into
//! a classifier trained with cross-entropy plus a prototype-alignment term.

pub mod graph;
pub mod manifold;
pub mod model;
pub mod subgraph;
pub mod synth;
pub mod tensor;
pub mod training;

pub use graph::{GraphDataset, GraphError, PropagationPair, Split, SplitSpec};
pub use manifold::{IsomapParams, IsomapSummary, LatentGraph, ManifoldError};
pub use model::{Activation, FusionActivation, ModelError, MuseParams, Propagation};
pub use subgraph::{EligibilitySet, MaskVector, SubgraphConfig, SubgraphError, View};
pub use synth::{generate_sbm, label_assortativity, SbmParams};
pub use training::{
    baseline_gcn, evaluate, run_trials, train, train_variant, TrainConfig, TrainError,
    TrainedModel, TrialReport, Variant,
};
pub use tensor::{
    AdamConfig, DenseMatrix, NodeId, ParamId, ParamStore, Parameter, Rng, SparseMatrix, Tape,
    TensorError,
};
