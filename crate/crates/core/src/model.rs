//! Shared-weight two-layer GCN over two graph views, the fusion layer, and
//! the prediction head.
//!
//! Both branches run `act2(P · dropout(act1(P · dropout(X) · W1)) · W2)`
//! with the same `W1`/`W2`; only the propagation matrix `P` differs — the
//! observed view passes the sparse symmetric-normalized operator, the
//! latent view the dense row-normalized one. Matrix products associate
//! right-to-left (`P · (X·W)`), which is cheaper when feature width exceeds
//! the hidden width and fixes the floating-point evaluation order.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{read_f32_matrix, write_f32_matrix, GraphError};
use crate::tensor::{
    row_softmax_values, DenseMatrix, NodeId, ParamId, ParamStore, Rng, SparseMatrix, Tape,
    TensorError,
};

#[derive(Error, Debug)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] GraphError),
}

/// Branch output activation; relu keeps embeddings nonnegative, which the
/// subgraph objective's normalization relies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Activation applied after the fusion layer's linear map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionActivation {
    Relu,
    Sigmoid,
}

/// A propagation operator; applied on the left of the layer input.
#[derive(Clone, Debug)]
pub enum Propagation {
    Sparse(Arc<SparseMatrix>),
    Dense(Arc<DenseMatrix>),
}

impl Propagation {
    pub fn rows(&self) -> usize {
        match self {
            Propagation::Sparse(s) => s.rows(),
            Propagation::Dense(d) => d.rows(),
        }
    }

    /// Records `self · x` on the tape; the operator itself is constant and
    /// receives no gradient.
    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, TensorError> {
        match self {
            Propagation::Sparse(s) => tape.spmm(s.clone(), x),
            Propagation::Dense(d) => tape.dense_left(d.clone(), x),
        }
    }
}

/// Handles to the trainable parameters plus the dimensions they were built
/// for. The fusion layer is absent for plain-GCN baselines.
#[derive(Clone, Debug)]
pub struct MuseParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub fc_w: Option<ParamId>,
    pub fc_b: Option<ParamId>,
    pub feature_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// How many K-wide blocks the fusion layer concatenates (0 = no fusion).
    pub fusion_parts: usize,
}

fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = DenseMatrix::zeros(rows, cols);
    for v in m.values_mut() {
        *v = rng.uniform(-bound, bound);
    }
    m
}

/// Allocates Glorot-uniform weights (`±√(6/(fan_in+fan_out))`) and a zero
/// fusion bias. Draws happen in declaration order — W1, W2, FC — row-major,
/// so a given rng state fixes the parameters bit-for-bit.
pub fn init_params(
    store: &mut ParamStore,
    feature_dim: usize,
    hidden: usize,
    num_classes: usize,
    fusion_parts: usize,
    rng: &mut Rng,
) -> Result<MuseParams, ModelError> {
    if feature_dim == 0 || hidden == 0 || num_classes == 0 {
        return Err(ModelError::Checkpoint(format!(
            "dimensions must be positive, got d={feature_dim} h={hidden} K={num_classes}"
        )));
    }
    let w1 = store.add_param(glorot(feature_dim, hidden, rng));
    let w2 = store.add_param(glorot(hidden, num_classes, rng));
    let (fc_w, fc_b) = if fusion_parts > 0 {
        let w = store.add_param(glorot(fusion_parts * num_classes, num_classes, rng));
        let b = store.add_param(DenseMatrix::zeros(1, num_classes));
        (Some(w), Some(b))
    } else {
        (None, None)
    };
    Ok(MuseParams {
        w1,
        w2,
        fc_w,
        fc_b,
        feature_dim,
        hidden,
        num_classes,
        fusion_parts,
    })
}

/// Records one branch forward on the tape:
/// `act2(P · dropout(act1(P · dropout(X) · W1)) · W2)`. Dropout draws from
/// `rng` only while `training` with a nonzero rate.
#[allow(clippy::too_many_arguments)]
pub fn gcn_branch(
    tape: &mut Tape,
    store: &ParamStore,
    params: &MuseParams,
    prop: &Propagation,
    x: NodeId,
    dropout_p: f64,
    act2: Activation,
    rng: &mut Rng,
    training: bool,
) -> Result<NodeId, ModelError> {
    let w1 = tape.param(store, params.w1);
    let w2 = tape.param(store, params.w2);
    let dx = tape.dropout(x, dropout_p, rng, training)?;
    let xw = tape.matmul(dx, w1)?;
    let layer1 = prop.apply(tape, xw)?;
    let act1 = tape.relu(layer1);
    let da = tape.dropout(act1, dropout_p, rng, training)?;
    let aw = tape.matmul(da, w2)?;
    let layer2 = prop.apply(tape, aw)?;
    Ok(match act2 {
        Activation::Relu => tape.relu(layer2),
        Activation::Identity => layer2,
    })
}

/// Inference-mode branch forward on a scratch tape (no dropout).
pub fn gcn_forward(
    prop: &Propagation,
    x: &DenseMatrix,
    store: &ParamStore,
    params: &MuseParams,
    act2: Activation,
) -> Result<DenseMatrix, ModelError> {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let mut rng = Rng::new(0); // untouched: inference draws nothing
    let out = gcn_branch(
        &mut tape, store, params, prop, xn, 0.0, act2, &mut rng, false,
    )?;
    Ok(tape.value(out).clone())
}

/// Fusion layer over row-aligned blocks: concatenates the given parts
/// column-wise in order, applies the fully connected map plus bias, then
/// the fusion activation. Works on any row count; per-node fusion is the
/// single-row case.
pub fn fuse(
    tape: &mut Tape,
    store: &ParamStore,
    params: &MuseParams,
    parts: &[NodeId],
    activation: FusionActivation,
) -> Result<NodeId, ModelError> {
    let (fc_w, fc_b) = match (params.fc_w, params.fc_b) {
        (Some(w), Some(b)) => (w, b),
        _ => {
            return Err(ModelError::Checkpoint(
                "this parameter set has no fusion layer".into(),
            ))
        }
    };
    if parts.len() != params.fusion_parts {
        return Err(ModelError::Checkpoint(format!(
            "fusion expects {} parts, got {}",
            params.fusion_parts,
            parts.len()
        )));
    }
    let cat = tape.concat_cols(parts)?;
    let w = tape.param(store, fc_w);
    let b = tape.param(store, fc_b);
    let lin = tape.matmul(cat, w)?;
    let biased = tape.add_row_broadcast(lin, b)?;
    Ok(match activation {
        FusionActivation::Relu => tape.relu(biased),
        FusionActivation::Sigmoid => tape.sigmoid(biased),
    })
}

/// Row-softmax class probabilities.
pub fn predict(logits: &DenseMatrix) -> DenseMatrix {
    row_softmax_values(logits)
}

/// Per-row argmax; ties resolve to the smallest class id.
pub fn argmax_rows(scores: &DenseMatrix) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

// ===== checkpoints ======================================================

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    schema: u32,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    feature_dim: usize,
    hidden: usize,
    num_classes: usize,
    fusion_parts: usize,
    seed: u64,
    config_hash: String,
}

fn param_list(params: &MuseParams) -> Vec<(&'static str, ParamId)> {
    let mut list = vec![("w1", params.w1), ("w2", params.w2)];
    if let (Some(w), Some(b)) = (params.fc_w, params.fc_b) {
        list.push(("fc_w", w));
        list.push(("fc_b", b));
    }
    list
}

/// Writes all parameter matrices, concatenated flat in declaration order,
/// to the binary container at `weights_path`, and a JSON manifest with
/// shapes, seed, and configuration hash beside it. Values pass through f32.
pub fn save_checkpoint(
    weights_path: &Path,
    manifest_path: &Path,
    store: &ParamStore,
    params: &MuseParams,
    seed: u64,
    config_hash: &str,
) -> Result<(), ModelError> {
    let list = param_list(params);
    let mut flat = Vec::new();
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    for (name, id) in &list {
        let value = &store.get(*id).value;
        names.push(name.to_string());
        shapes.push(value.shape());
        flat.extend_from_slice(value.values());
    }
    let row = DenseMatrix::from_vec(1, flat.len(), flat)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    write_f32_matrix(weights_path, &row)?;
    let manifest = CheckpointManifest {
        schema: 1,
        names,
        shapes,
        feature_dim: params.feature_dim,
        hidden: params.hidden,
        num_classes: params.num_classes,
        fusion_parts: params.fusion_parts,
        seed,
        config_hash: config_hash.to_string(),
    };
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(manifest_path, body).map_err(|source| {
        ModelError::Io(GraphError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })
    })
}

/// Restores a checkpoint into a fresh parameter store. Returns the rebuilt
/// handles plus the stored seed and config hash for the caller to verify.
pub fn load_checkpoint(
    weights_path: &Path,
    manifest_path: &Path,
) -> Result<(ParamStore, MuseParams, u64, String), ModelError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|source| {
        ModelError::Io(GraphError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })
    })?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| ModelError::Checkpoint(format!("manifest: {e}")))?;
    if manifest.schema != 1 {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint schema {}",
            manifest.schema
        )));
    }
    if manifest.names.len() != manifest.shapes.len() {
        return Err(ModelError::Checkpoint(
            "manifest names and shapes disagree".into(),
        ));
    }
    let flat = read_f32_matrix(weights_path)?;
    let total: usize = manifest.shapes.iter().map(|&(r, c)| r * c).sum();
    if flat.values().len() != total {
        return Err(ModelError::Checkpoint(format!(
            "weights hold {} values but manifest shapes need {total}",
            flat.values().len()
        )));
    }
    let mut store = ParamStore::new();
    let mut ids = Vec::new();
    let mut offset = 0;
    for &(r, c) in &manifest.shapes {
        let slice = flat.values()[offset..offset + r * c].to_vec();
        offset += r * c;
        let m = DenseMatrix::from_vec(r, c, slice)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        ids.push(store.add_param(m));
    }
    let expected_names: Vec<&str> = if manifest.fusion_parts > 0 {
        vec!["w1", "w2", "fc_w", "fc_b"]
    } else {
        vec!["w1", "w2"]
    };
    if manifest.names != expected_names {
        return Err(ModelError::Checkpoint(format!(
            "unexpected parameter list {:?}",
            manifest.names
        )));
    }
    let params = MuseParams {
        w1: ids[0],
        w2: ids[1],
        fc_w: ids.get(2).copied(),
        fc_b: ids.get(3).copied(),
        feature_dim: manifest.feature_dim,
        hidden: manifest.hidden,
        num_classes: manifest.num_classes,
        fusion_parts: manifest.fusion_parts,
    };
    Ok((store, params, manifest.seed, manifest.config_hash))
}
