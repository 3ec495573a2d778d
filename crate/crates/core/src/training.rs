//! Losses, the per-epoch training step, early stopping, inference, and the
//! multi-trial experiment harness.
//!
//! One epoch: forward both branches (shared weights), freeze the branch
//! outputs and run the per-node mask optimizer for every labeled node,
//! aggregate the masked subgraph embeddings, fuse, and take one Adam step
//! on cross-entropy plus the weighted prototype-alignment loss. Stopping
//! monitors validation accuracy when a validation split exists and the
//! training loss otherwise, with best-epoch restoration.
//!
//! Ablation variants reuse the same harness: they choose which of the four
//! embedding families (subgraph-over-observed, subgraph-over-latent,
//! latent branch, observed branch) feed the fusion layer, whether masks
//! are optimized or frozen, and whether the prototype loss contributes.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{
    row_normalized_latent, sample_labels, symmetric_normalized, GraphDataset, GraphError, Split,
};
use crate::manifold::{build_latent_graph, IsomapParams, LatentGraph, ManifoldError};
use crate::model::{
    argmax_rows, fuse, gcn_branch, init_params, Activation, FusionActivation, ModelError,
    MuseParams, Propagation,
};
use crate::subgraph::{
    eligibility, mask_weight_matrix, optimize_mask, subgraph_embedding, MaskVector,
    SubgraphConfig, SubgraphError, View,
};
use crate::tensor::{
    adam_step, matmul, AdamConfig, DenseMatrix, NodeId, ParamStore, Rng,
    SparseMatrix, Tape, TensorError,
};

const LOG_FLOOR: f64 = 1e-12;
/// Activation applied after the fusion layer.
const FUSION_ACTIVATION: FusionActivation = FusionActivation::Relu;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("numeric failure at epoch {epoch}: loss is not finite")]
    Overflow { epoch: usize },
    #[error("training: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Subgraph(#[from] SubgraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Every knob of one training run. `Default` matches the trained
/// configuration: lr 0.01, weight decay 5e-4, dropout 0.5, hidden 17,
/// prototype weight 4, 3-hop / τ=0.5 subgraphs, 20 mask steps at 0.1,
/// Isomap k=10 into 64 dims, up to 1000 epochs with patience 100.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub hidden: usize,
    pub lambda_p: f64,
    pub k_hop: usize,
    pub tau: f64,
    pub mask_steps: usize,
    pub mask_lr: f64,
    pub isomap_k: usize,
    pub d_prime: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub seed: u64,
    pub trials: usize,
    pub per_class: usize,
    pub final_activation: Activation,
    pub warm_start_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            weight_decay: 5e-4,
            dropout: 0.5,
            hidden: 17,
            lambda_p: 4.0,
            k_hop: 3,
            tau: 0.5,
            mask_steps: 20,
            mask_lr: 0.1,
            isomap_k: 10,
            d_prime: 64,
            epochs_max: 1000,
            patience: 100,
            seed: 42,
            trials: 10,
            per_class: 1,
            final_activation: Activation::Relu,
            warm_start_masks: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Invalid(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be >= 0", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be >= 0", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive".into());
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return bad(format!("lambda_p {} must be >= 0", self.lambda_p));
        }
        if self.k_hop == 0 {
            return bad("k-hop radius must be positive".into());
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite".into());
        }
        if !(self.mask_lr > 0.0 && self.mask_lr.is_finite()) {
            return bad(format!("mask learning rate {} must be > 0", self.mask_lr));
        }
        if self.isomap_k == 0 || self.d_prime == 0 {
            return bad("isomap_k and d_prime must be positive".into());
        }
        if self.epochs_max == 0 {
            return bad("epochs_max must be positive".into());
        }
        if self.trials == 0 {
            return bad("trials must be positive".into());
        }
        if self.per_class == 0 {
            return bad("per-class label count must be positive".into());
        }
        Ok(())
    }

    fn subgraph_config(&self) -> SubgraphConfig {
        SubgraphConfig {
            k_hop: self.k_hop,
            tau: self.tau,
            steps: self.mask_steps,
            lr: self.mask_lr,
            ..SubgraphConfig::default()
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Stable 16-hex-digit digest of a config plus variant, stamped into
/// trained models and reports.
pub fn config_hash(cfg: &TrainConfig, variant: Variant) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hasher.update(b"|");
    hasher.update(variant.cli_name().as_bytes());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Which slice of the architecture a run trains. `Full` is the complete
/// model; the others reproduce the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Plain GCN on the observed graph; no latent branch, masks, or
    /// prototype loss.
    #[serde(rename = "gcn-raw")]
    GcnRaw,
    /// Plain GCN on the latent graph.
    #[serde(rename = "gcn-latent")]
    GcnLatent,
    /// Observed-branch embeddings only.
    #[serde(rename = "H")]
    OnlyH,
    /// Latent-branch embeddings only.
    #[serde(rename = "U")]
    OnlyU,
    /// Masked subgraph embeddings over the observed view only.
    #[serde(rename = "SH")]
    OnlySh,
    /// Masked subgraph embeddings over the latent view only.
    #[serde(rename = "SU")]
    OnlySu,
    /// Observed subgraph + observed branch.
    #[serde(rename = "SH+H")]
    ShPlusH,
    /// Latent subgraph + latent branch.
    #[serde(rename = "SU+U")]
    SuPlusU,
    /// Full model with the prototype loss switched off.
    #[serde(rename = "no-Lp")]
    NoLp,
    /// Full model with masks frozen at initialization.
    #[serde(rename = "no-MI")]
    NoMi,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::GcnRaw,
        Variant::GcnLatent,
        Variant::OnlyH,
        Variant::OnlyU,
        Variant::OnlySh,
        Variant::OnlySu,
        Variant::ShPlusH,
        Variant::SuPlusU,
        Variant::NoLp,
        Variant::NoMi,
        Variant::Full,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::GcnRaw => "gcn-raw",
            Variant::GcnLatent => "gcn-latent",
            Variant::OnlyH => "H",
            Variant::OnlyU => "U",
            Variant::OnlySh => "SH",
            Variant::OnlySu => "SU",
            Variant::ShPlusH => "SH+H",
            Variant::SuPlusU => "SU+U",
            Variant::NoLp => "no-Lp",
            Variant::NoMi => "no-MI",
            Variant::Full => "full",
        }
    }

    pub fn from_cli(name: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.cli_name() == name)
    }

    fn plan(self) -> Plan {
        use Fam::*;
        let (parts, bare, optimize_masks, lambda_scale) = match self {
            Variant::Full => (vec![Sh, Su, U, H], None, true, 1.0),
            Variant::NoLp => (vec![Sh, Su, U, H], None, true, 0.0),
            Variant::NoMi => (vec![Sh, Su, U, H], None, false, 1.0),
            Variant::GcnRaw => (vec![], Some(H), false, 1.0),
            Variant::GcnLatent => (vec![], Some(U), false, 1.0),
            Variant::OnlyH => (vec![H], None, false, 1.0),
            Variant::OnlyU => (vec![U], None, false, 1.0),
            Variant::OnlySh => (vec![Sh], None, true, 1.0),
            Variant::OnlySu => (vec![Su], None, true, 1.0),
            Variant::ShPlusH => (vec![Sh, H], None, true, 1.0),
            Variant::SuPlusU => (vec![Su, U], None, true, 1.0),
        };
        Plan {
            parts,
            bare,
            optimize_masks,
            lambda_scale,
        }
    }
}

/// The four embedding families that can feed the fusion layer, in their
/// concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fam {
    Sh,
    Su,
    U,
    H,
}

/// What a variant actually computes.
#[derive(Clone, Debug)]
struct Plan {
    /// Fusion inputs in concatenation order; empty means a bare branch head.
    parts: Vec<Fam>,
    bare: Option<Fam>,
    optimize_masks: bool,
    /// 0 disables the prototype term without removing it from the graph.
    lambda_scale: f64,
}

impl Plan {
    fn has(&self, f: Fam) -> bool {
        self.parts.contains(&f) || self.bare == Some(f)
    }

    fn needs_naive_branch(&self) -> bool {
        self.has(Fam::H) || self.has(Fam::Sh)
    }

    fn needs_latent_branch(&self) -> bool {
        self.has(Fam::U) || self.has(Fam::Su)
    }

    fn needs_view(&self, view: View) -> bool {
        match view {
            View::Naive => self.has(Fam::Sh),
            View::Latent => self.has(Fam::Su),
        }
    }

    /// Prototype pairs whose families are both available: observed
    /// subgraph vs observed branch, latent subgraph vs latent branch, and
    /// the two branches against each other.
    fn lp_pairs(&self) -> Vec<(Fam, Fam)> {
        [(Fam::Sh, Fam::H), (Fam::Su, Fam::U), (Fam::H, Fam::U)]
            .into_iter()
            .filter(|(a, b)| self.parts.contains(a) && self.parts.contains(b))
            .collect()
    }
}

// ---- losses --------------------------------------------------------------

/// Class prototypes: row k is the mean embedding over labeled nodes of
/// class k.
pub fn prototypes(
    emb: &DenseMatrix,
    labels: &[usize],
    v_l: &[usize],
    num_classes: usize,
) -> Result<DenseMatrix, TrainError> {
    let mut out = DenseMatrix::zeros(num_classes, emb.cols());
    let mut counts = vec![0usize; num_classes];
    for &i in v_l {
        counts[labels[i]] += 1;
        for (o, &v) in out.row_mut(labels[i]).iter_mut().zip(emb.row(i)) {
            *o += v;
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(TrainError::Invalid(format!(
                "class {k} has no labeled members; prototypes undefined"
            )));
        }
        for o in out.row_mut(k) {
            *o /= c as f64;
        }
    }
    Ok(out)
}

/// Averaging matrix: row k holds 1/|V_l^{(k)}| on that class's labeled
/// nodes, so `selector · emb` is the prototype matrix.
fn prototype_selector(
    labels: &[usize],
    v_l: &[usize],
    num_classes: usize,
    n: usize,
) -> Result<DenseMatrix, TrainError> {
    let mut counts = vec![0usize; num_classes];
    for &i in v_l {
        counts[labels[i]] += 1;
    }
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(TrainError::Invalid(format!(
                "class {k} has no labeled members; prototypes undefined"
            )));
        }
    }
    let mut s = DenseMatrix::zeros(num_classes, n);
    for &i in v_l {
        s.set(labels[i], i, 1.0 / counts[labels[i]] as f64);
    }
    Ok(s)
}

/// One prototype matrix per embedding family.
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    pub p_sh: DenseMatrix,
    pub p_su: DenseMatrix,
    pub p_h: DenseMatrix,
    pub p_u: DenseMatrix,
}

/// Classwise Euclidean distances between the three prototype pairs,
/// summed: ‖SH−H‖ + ‖SU−U‖ + ‖H−U‖ per class. Zero exactly when each pair
/// coincides classwise.
pub fn prototypical_loss(p: &PrototypeSet) -> f64 {
    let pair = |a: &DenseMatrix, b: &DenseMatrix| -> f64 {
        (0..a.rows())
            .map(|k| {
                a.row(k)
                    .iter()
                    .zip(b.row(k))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum()
    };
    pair(&p.p_sh, &p.p_h) + pair(&p.p_su, &p.p_u) + pair(&p.p_h, &p.p_u)
}

/// Mean negative log-probability of the true class; rows of `probs` are
/// probability vectors aligned with `labels`, clamped at 1e-12 before the
/// log.
pub fn cross_entropy(probs: &DenseMatrix, labels: &[usize]) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| probs.get(r, y).max(LOG_FLOOR).ln())
        .sum();
    -total / n as f64
}

/// Eq.-style weighted total: classification plus λ_p times the prototype
/// term.
pub fn total_loss(l_c: f64, l_p: f64, lambda_p: f64) -> f64 {
    l_c + lambda_p * l_p
}

// ---- per-trial training state ---------------------------------------------

/// Metrics of one epoch. `val_acc` is present only when a validation split
/// drives early stopping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub loss: f64,
    pub l_c: f64,
    pub l_p: f64,
    pub train_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
}

/// A loss graph ready for backward: the tape plus handles to the total,
/// its two terms, and the labeled-row class probabilities.
pub struct LossGraph {
    pub tape: Tape,
    pub total: NodeId,
    pub l_c: NodeId,
    pub l_p: NodeId,
    pub probs: NodeId,
}

/// Everything one trial needs between epochs: parameters, current masks,
/// propagation operators, eligibility sets for the labeled nodes, and the
/// prototype selector.
pub struct TrainContext {
    pub store: ParamStore,
    pub params: MuseParams,
    pub masks: BTreeMap<(usize, View), MaskVector>,
    split: Split,
    labels: Vec<usize>,
    num_classes: usize,
    features: Arc<DenseMatrix>,
    adjacency: SparseMatrix,
    prop_naive: Option<Propagation>,
    prop_latent: Option<Propagation>,
    latent: Option<Arc<LatentGraph>>,
    selector: Option<Arc<DenseMatrix>>,
    plan: Plan,
    subcfg: SubgraphConfig,
    cfg: TrainConfig,
}

impl TrainContext {
    pub fn new(
        ds: &GraphDataset,
        cfg: &TrainConfig,
        variant: Variant,
        latent: Option<Arc<LatentGraph>>,
        split: Split,
        rng: &mut Rng,
    ) -> Result<Self, TrainError> {
        let plan = variant.plan();
        if plan.needs_latent_branch() && latent.is_none() {
            return Err(TrainError::Invalid(format!(
                "variant {} needs the latent graph",
                variant.cli_name()
            )));
        }
        let n = ds.node_count();
        let prop_naive = if plan.needs_naive_branch() {
            Some(Propagation::Sparse(Arc::new(symmetric_normalized(
                &ds.adjacency,
            )?)))
        } else {
            None
        };
        let prop_latent = match (&latent, plan.needs_latent_branch()) {
            (Some(lg), true) => Some(Propagation::Dense(Arc::new(row_normalized_latent(
                &lg.adjacency,
            )?))),
            _ => None,
        };
        let selector = if plan.parts.len() > 1 || !plan.lp_pairs().is_empty() {
            Some(Arc::new(prototype_selector(
                &ds.labels,
                &split.train,
                ds.num_classes,
                n,
            )?))
        } else {
            // bare and single-part heads never touch prototypes, but the
            // labeled split still has to cover every class
            prototype_selector(&ds.labels, &split.train, ds.num_classes, n)?;
            None
        };
        let mut store = ParamStore::new();
        let params = init_params(
            &mut store,
            ds.feature_dim(),
            cfg.hidden,
            ds.num_classes,
            plan.parts.len(),
            rng,
        )?;
        let subcfg = cfg.subgraph_config();

        // seed zero masks for every (labeled node, view) the plan touches:
        // the optimizer warm-starts from these, and frozen-mask variants
        // keep them for good
        let mut masks = BTreeMap::new();
        for view in [View::Naive, View::Latent] {
            if !plan.needs_view(view) {
                continue;
            }
            let x_prime = latent
                .as_ref()
                .map(|lg| &lg.x_prime)
                .unwrap_or(&ds.features);
            for &i in &split.train {
                let elig = eligibility(&ds.adjacency, x_prime, i, view, &subcfg);
                let logits = vec![0.0; elig.members.len()];
                masks.insert(
                    (i, view),
                    MaskVector {
                        node: i,
                        view,
                        members: elig.members,
                        logits,
                    },
                );
            }
        }

        Ok(TrainContext {
            store,
            params,
            masks,
            split,
            labels: ds.labels.clone(),
            num_classes: ds.num_classes,
            features: Arc::new(ds.features.clone()),
            adjacency: ds.adjacency.clone(),
            prop_naive,
            prop_latent,
            latent,
            selector,
            plan,
            subcfg,
            cfg: cfg.clone(),
        })
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    /// Both branch forwards on `tape`, drawing dropout from `rng` in a
    /// fixed order (observed branch first).
    fn branches(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(Option<NodeId>, Option<NodeId>), TrainError> {
        let x = tape.constant((*self.features).clone());
        let h = match &self.prop_naive {
            Some(prop) => Some(gcn_branch(
                tape,
                store,
                &self.params,
                prop,
                x,
                self.cfg.dropout,
                self.cfg.final_activation,
                rng,
                training,
            )?),
            None => None,
        };
        let u = match &self.prop_latent {
            Some(prop) => Some(gcn_branch(
                tape,
                store,
                &self.params,
                prop,
                x,
                self.cfg.dropout,
                self.cfg.final_activation,
                rng,
                training,
            )?),
            None => None,
        };
        Ok((h, u))
    }

    /// Masked aggregation, fusion or bare head, and both loss terms, all
    /// built from the given mask state.
    fn heads(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        h: Option<NodeId>,
        u: Option<NodeId>,
        masks: &BTreeMap<(usize, View), MaskVector>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<(NodeId, NodeId, NodeId, NodeId), TrainError> {
        let n = self.labels.len();
        let v_l = &self.split.train;

        let aggregate = |tape: &mut Tape,
                             view: View,
                             branch: Option<NodeId>|
         -> Result<Option<NodeId>, TrainError> {
            if !self.plan.needs_view(view) {
                return Ok(None);
            }
            let branch = branch.ok_or_else(|| {
                TrainError::Invalid("subgraph family without its branch".into())
            })?;
            let mut rows = Vec::with_capacity(v_l.len());
            for &i in v_l {
                let mask = masks.get(&(i, view)).ok_or_else(|| {
                    TrainError::Invalid(format!("no mask for labeled node {i} ({view:?} view)"))
                })?;
                rows.push(mask.clone());
            }
            let w = mask_weight_matrix(&rows, n)?;
            Ok(Some(tape.spmm(Arc::new(w), branch)?))
        };
        let sh = aggregate(tape, View::Naive, h)?;
        let su = aggregate(tape, View::Latent, u)?;

        let full_node = |fam: Fam| -> Result<NodeId, TrainError> {
            let node = match fam {
                Fam::Sh => sh,
                Fam::Su => su,
                Fam::U => u,
                Fam::H => h,
            };
            node.ok_or_else(|| TrainError::Invalid("family missing from this plan".into()))
        };

        // head scores for the labeled rows
        let scores = if let Some(fam) = self.plan.bare {
            tape.gather_rows(full_node(fam)?, v_l)?
        } else {
            let mut gathered = Vec::with_capacity(self.plan.parts.len());
            for &fam in &self.plan.parts {
                let rows = tape.gather_rows(full_node(fam)?, v_l)?;
                // the fusion layer sees only |V_l| rows; dropout on its
                // input is the one regularizer keeping it from memorizing
                let rows = if self.plan.parts.len() > 1 {
                    tape.dropout(rows, self.cfg.dropout, rng, training)?
                } else {
                    rows
                };
                gathered.push(rows);
            }
            if gathered.len() == 1 {
                gathered[0]
            } else {
                fuse(tape, store, &self.params, &gathered, FUSION_ACTIVATION)?
            }
        };
        let probs = tape.row_softmax(scores);
        let coords: Vec<(usize, usize)> = v_l
            .iter()
            .enumerate()
            .map(|(r, &i)| (r, self.labels[i]))
            .collect();
        let picked = tape.pick_entries(probs, &coords)?;
        let ln_p = tape.ln_clamped(picked);
        let sum = tape.sum_all(ln_p);
        let l_c = tape.scale(sum, -1.0 / v_l.len() as f64);

        // prototype alignment over whatever pairs this plan supports
        let pairs = self.plan.lp_pairs();
        let l_p = if pairs.is_empty() {
            tape.constant(DenseMatrix::zeros(1, 1))
        } else {
            let selector = self
                .selector
                .as_ref()
                .expect("selector exists when prototype pairs do")
                .clone();
            let mut proto: BTreeMap<u8, NodeId> = BTreeMap::new();
            let fam_key = |f: Fam| f as u8;
            let mut proto_of = |tape: &mut Tape, fam: Fam| -> Result<NodeId, TrainError> {
                if let Some(&id) = proto.get(&fam_key(fam)) {
                    return Ok(id);
                }
                let id = tape.dense_left(selector.clone(), full_node(fam)?)?;
                proto.insert(fam_key(fam), id);
                Ok(id)
            };
            let mut acc: Option<NodeId> = None;
            for (a, b) in pairs {
                let pa = proto_of(tape, a)?;
                let pb = proto_of(tape, b)?;
                let diff = tape.sub(pa, pb)?;
                let norms = tape.l2_norm_rows(diff);
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, norms)?,
                    None => norms,
                });
            }
            tape.sum_all(acc.expect("at least one pair"))
        };
        let weighted = tape.scale(l_p, self.cfg.lambda_p * self.plan.lambda_scale);
        let total = tape.add(l_c, weighted)?;
        Ok((total, l_c, l_p, probs))
    }

    /// Builds the complete loss graph from `store` with the context's
    /// current masks frozen. Pure in the store, so repeated calls with the
    /// same rng seed rebuild the identical graph — which is what the
    /// finite-difference gradient check needs.
    pub fn loss_graph(
        &self,
        store: &ParamStore,
        rng: &mut Rng,
        training: bool,
    ) -> Result<LossGraph, TrainError> {
        let mut tape = Tape::new();
        let (h, u) = self.branches(store, &mut tape, rng, training)?;
        let (total, l_c, l_p, probs) = self.heads(store, &mut tape, h, u, &self.masks, rng, training)?;
        Ok(LossGraph {
            tape,
            total,
            l_c,
            l_p,
            probs,
        })
    }

    /// One full training step: forward, mask optimization against the
    /// frozen branch outputs, loss, backward, Adam.
    pub fn epoch(&mut self, rng: &mut Rng, epoch_idx: usize) -> Result<EpochMetrics, TrainError> {
        let mut tape = Tape::new();
        let (h, u) = self.branches(&self.store, &mut tape, rng, true)?;

        if self.plan.optimize_masks {
            let psi_h = h.map(|id| tape.value(id).clone());
            let psi_u = u.map(|id| tape.value(id).clone());
            let train_nodes = self.split.train.clone();
            for view in [View::Naive, View::Latent] {
                if !self.plan.needs_view(view) {
                    continue;
                }
                let psi = match view {
                    View::Naive => psi_h.as_ref(),
                    View::Latent => psi_u.as_ref(),
                }
                .expect("branch exists for its view");
                for &i in &train_nodes {
                    let key = (i, view);
                    let current = self.masks.get(&key).expect("masks seeded at build");
                    let elig = crate::subgraph::EligibilitySet {
                        node: i,
                        view,
                        members: current.members.clone(),
                    };
                    let warm = if self.cfg.warm_start_masks {
                        Some(current)
                    } else {
                        None
                    };
                    let updated = optimize_mask(
                        psi,
                        &elig,
                        warm,
                        self.subcfg.steps,
                        self.subcfg.lr,
                    )?;
                    self.masks.insert(key, updated);
                }
            }
        }

        let (total, l_c, l_p, probs) = self.heads(&self.store, &mut tape, h, u, &self.masks, rng, true)?;
        let loss = tape.value(total).get(0, 0);
        if !loss.is_finite() {
            return Err(TrainError::Overflow { epoch: epoch_idx });
        }
        let l_c_v = tape.value(l_c).get(0, 0);
        let l_p_v = tape.value(l_p).get(0, 0);
        let preds = argmax_rows(tape.value(probs));
        let hits = preds
            .iter()
            .zip(&self.split.train)
            .filter(|(p, &i)| **p == self.labels[i])
            .count();
        let train_acc = hits as f64 / self.split.train.len() as f64;

        self.store.zero_grads();
        tape.backward_params(total, &mut self.store)?;
        adam_step(&mut self.store, &self.cfg.adam());

        Ok(EpochMetrics {
            loss,
            l_c: l_c_v,
            l_p: l_p_v,
            train_acc,
            val_acc: None,
        })
    }

    /// Deterministic predictions for `nodes` with the current parameters:
    /// fresh no-dropout forward, stored masks where present, cold mask
    /// optimization where absent.
    fn predict(
        &self,
        store: &ParamStore,
        masks: Option<&BTreeMap<(usize, View), MaskVector>>,
        nodes: &[usize],
    ) -> Result<Vec<usize>, TrainError> {
        predict_nodes(
            &self.adjacency,
            &self.features,
            store,
            &self.params,
            &self.plan,
            &self.subcfg,
            self.cfg.final_activation,
            self.latent.as_deref(),
            masks,
            nodes,
        )
    }
}

/// Inference for an arbitrary node set. Branch outputs are recomputed
/// without dropout; subgraph embeddings come from `masks` when present and
/// from a cold mask optimization otherwise.
#[allow(clippy::too_many_arguments)]
fn predict_nodes(
    adjacency: &SparseMatrix,
    features: &DenseMatrix,
    store: &ParamStore,
    params: &MuseParams,
    plan: &Plan,
    subcfg: &SubgraphConfig,
    act2: Activation,
    latent: Option<&LatentGraph>,
    masks: Option<&BTreeMap<(usize, View), MaskVector>>,
    nodes: &[usize],
) -> Result<Vec<usize>, TrainError> {
    use crate::model::gcn_forward;

    let psi_h = if plan.needs_naive_branch() {
        let prop = Propagation::Sparse(Arc::new(symmetric_normalized(adjacency)?));
        Some(gcn_forward(&prop, features, store, params, act2)?)
    } else {
        None
    };
    let psi_u = if plan.needs_latent_branch() {
        let lg = latent.ok_or_else(|| TrainError::Invalid("latent graph missing".into()))?;
        let prop = Propagation::Dense(Arc::new(row_normalized_latent(&lg.adjacency)?));
        Some(gcn_forward(&prop, features, store, params, act2)?)
    } else {
        None
    };

    let subgraph_row = |view: View, node: usize| -> Result<Vec<f64>, TrainError> {
        let psi = match view {
            View::Naive => psi_h.as_ref(),
            View::Latent => psi_u.as_ref(),
        }
        .expect("branch exists for its view");
        if let Some(m) = masks.and_then(|m| m.get(&(node, view))) {
            return Ok(subgraph_embedding(m, psi)?);
        }
        let x_prime = latent.map(|lg| &lg.x_prime).unwrap_or(features);
        let elig = eligibility(adjacency, x_prime, node, view, subcfg);
        let mask = optimize_mask(psi, &elig, None, subcfg.steps, subcfg.lr)?;
        Ok(subgraph_embedding(&mask, psi)?)
    };

    if let Some(fam) = plan.bare {
        let psi = match fam {
            Fam::H => psi_h.as_ref(),
            Fam::U => psi_u.as_ref(),
            _ => unreachable!("bare heads are branch embeddings"),
        }
        .expect("bare branch exists");
        return Ok(nodes.iter().map(|&i| argmax_row(psi.row(i))).collect());
    }

    let k = params.num_classes;
    let mut z = DenseMatrix::zeros(nodes.len(), plan.parts.len() * k);
    for (r, &node) in nodes.iter().enumerate() {
        for (pi, &fam) in plan.parts.iter().enumerate() {
            let row: Vec<f64> = match fam {
                Fam::Sh => subgraph_row(View::Naive, node)?,
                Fam::Su => subgraph_row(View::Latent, node)?,
                Fam::U => psi_u.as_ref().expect("latent branch").row(node).to_vec(),
                Fam::H => psi_h.as_ref().expect("observed branch").row(node).to_vec(),
            };
            z.row_mut(r)[pi * k..(pi + 1) * k].copy_from_slice(&row);
        }
    }
    if plan.parts.len() == 1 {
        return Ok(argmax_rows(&z));
    }
    let fc_w = &store.get(params.fc_w.expect("fusion weights")).value;
    let fc_b = &store.get(params.fc_b.expect("fusion bias")).value;
    let mut logits = matmul(&z, fc_w)?;
    for r in 0..logits.rows() {
        for (l, &b) in logits.row_mut(r).iter_mut().zip(fc_b.row(0)) {
            *l += b;
        }
    }
    let activated = match FUSION_ACTIVATION {
        FusionActivation::Relu => logits.map(|v| v.max(0.0)),
        FusionActivation::Sigmoid => logits.map(|v| 1.0 / (1.0 + (-v).exp())),
    };
    Ok(argmax_rows(&activated))
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

// ---- full training runs ----------------------------------------------------

/// A trained trial: restored best-epoch parameters, the masks for labeled
/// and evaluation nodes, and the episode's trace.
pub struct TrainedModel {
    pub store: ParamStore,
    pub params: MuseParams,
    pub masks: BTreeMap<(usize, View), MaskVector>,
    pub latent: Option<Arc<LatentGraph>>,
    pub split: Split,
    pub variant: Variant,
    pub config: TrainConfig,
    pub config_hash: String,
    pub loss_trace: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// Trains the full model. Equivalent to [`train_variant`] with
/// [`Variant::Full`] and no precomputed latent graph.
pub fn train(ds: &GraphDataset, cfg: &TrainConfig) -> Result<TrainedModel, TrainError> {
    train_variant(ds, cfg, Variant::Full, None)
}

/// Trains one variant. `latent` short-circuits the Isomap stage when the
/// caller already built the latent graph (it does not depend on the seed,
/// so trials share one).
pub fn train_variant(
    ds: &GraphDataset,
    cfg: &TrainConfig,
    variant: Variant,
    latent: Option<Arc<LatentGraph>>,
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    let plan = variant.plan();
    let mut rng = Rng::new(cfg.seed);
    let split = sample_labels(ds, cfg.per_class, &mut rng)?;

    let latent = match (latent, plan.needs_latent_branch()) {
        (Some(lg), _) => Some(lg),
        (None, true) => {
            let params = IsomapParams {
                isomap_k: cfg.isomap_k,
                d_prime: cfg.d_prime,
                ..IsomapParams::default()
            };
            Some(Arc::new(build_latent_graph(&ds.features, &params)?))
        }
        (None, false) => None,
    };

    let mut ctx = TrainContext::new(ds, cfg, variant, latent.clone(), split.clone(), &mut rng)?;
    let monitor_val = !split.val.is_empty();

    let mut best_metric = f64::NEG_INFINITY;
    let mut best: Option<(ParamStore, BTreeMap<(usize, View), MaskVector>, usize)> = None;
    let mut still = 0usize;
    let mut trace: Vec<EpochMetrics> = Vec::new();

    for epoch in 0..cfg.epochs_max {
        let mut metrics = ctx.epoch(&mut rng, epoch)?;
        if monitor_val {
            let preds = ctx.predict(&ctx.store, None, &split.val)?;
            let hits = preds
                .iter()
                .zip(&split.val)
                .filter(|(p, &i)| **p == ds.labels[i])
                .count();
            metrics.val_acc = Some(hits as f64 / split.val.len() as f64);
        }
        // Without a validation set the classification term is the monitor:
        // the alignment term keeps falling even when the representation
        // degenerates, so total loss would chase the degenerate optimum.
        let metric = match metrics.val_acc {
            Some(acc) => acc,
            None => -metrics.l_c,
        };
        trace.push(metrics);
        if metric > best_metric {
            best_metric = metric;
            best = Some((ctx.store.clone(), ctx.masks.clone(), epoch));
            still = 0;
        } else {
            still += 1;
            if still > cfg.patience {
                break;
            }
        }
    }

    let (best_store, best_masks, best_epoch) = best.expect("at least one epoch ran");
    ctx.store = best_store;
    ctx.masks = best_masks;

    // inference masks for the evaluation nodes, against the frozen network
    if plan.needs_view(View::Naive) || plan.needs_view(View::Latent) {
        let mut eval_nodes: Vec<usize> = split.val.iter().chain(&split.test).copied().collect();
        eval_nodes.sort_unstable();
        eval_nodes.dedup();
        let psi_h = match (&ctx.prop_naive, plan.needs_view(View::Naive)) {
            (Some(prop), true) => Some(crate::model::gcn_forward(
                prop,
                &ctx.features,
                &ctx.store,
                &ctx.params,
                cfg.final_activation,
            )?),
            _ => None,
        };
        let psi_u = match (&ctx.prop_latent, plan.needs_view(View::Latent)) {
            (Some(prop), true) => Some(crate::model::gcn_forward(
                prop,
                &ctx.features,
                &ctx.store,
                &ctx.params,
                cfg.final_activation,
            )?),
            _ => None,
        };
        let x_prime = latent.as_ref().map(|lg| &lg.x_prime).unwrap_or(&ds.features);
        for view in [View::Naive, View::Latent] {
            if !plan.needs_view(view) {
                continue;
            }
            let psi = match view {
                View::Naive => psi_h.as_ref(),
                View::Latent => psi_u.as_ref(),
            }
            .expect("branch exists for its view");
            for &node in &eval_nodes {
                let elig = eligibility(&ds.adjacency, x_prime, node, view, &ctx.subcfg);
                let mask = optimize_mask(psi, &elig, None, ctx.subcfg.steps, ctx.subcfg.lr)?;
                ctx.masks.insert((node, view), mask);
            }
        }
    }

    let epochs_run = trace.len();
    Ok(TrainedModel {
        store: ctx.store,
        params: ctx.params,
        masks: ctx.masks,
        latent,
        split,
        variant,
        config: cfg.clone(),
        config_hash: config_hash(cfg, variant),
        loss_trace: trace,
        best_epoch,
        epochs_run,
    })
}

/// Fraction of `nodes` whose argmax prediction matches the label. An empty
/// node set is vacuously perfect.
pub fn evaluate(
    model: &TrainedModel,
    ds: &GraphDataset,
    nodes: &[usize],
) -> Result<f64, TrainError> {
    if nodes.is_empty() {
        log::warn!("evaluate called with no nodes; reporting 1.0");
        return Ok(1.0);
    }
    let plan = model.variant.plan();
    let preds = predict_nodes(
        &ds.adjacency,
        &ds.features,
        &model.store,
        &model.params,
        &plan,
        &model.config.subgraph_config(),
        model.config.final_activation,
        model.latent.as_deref(),
        Some(&model.masks),
        nodes,
    )?;
    let hits = preds
        .iter()
        .zip(nodes)
        .filter(|(p, &i)| **p == ds.labels[i])
        .count();
    Ok(hits as f64 / nodes.len() as f64)
}

// ---- the experiment harness -------------------------------------------------

/// One trial's summary inside a report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRow {
    pub seed: u64,
    pub accuracy: f64,
    pub epochs: usize,
    pub best_epoch: usize,
}

/// Mean ± sample standard deviation of test accuracy over independent
/// trials, with the per-trial rows and the exact config echoed back.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialReport {
    pub schema: u32,
    pub variant: String,
    pub config: TrainConfig,
    pub per_trial: Vec<TrialRow>,
    pub mean: f64,
    pub std: f64,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostics: Option<serde_json::Value>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `cfg.trials` independent trials of `variant`; trial t uses seed
/// `cfg.seed + t` and is bit-identical to a standalone [`train_variant`]
/// call with that seed. The latent graph is seed-independent, so it is
/// built once (cached under `cache_dir` when given) and shared.
pub fn run_trials(
    ds: &GraphDataset,
    cfg: &TrainConfig,
    variant: Variant,
    cache_dir: Option<&Path>,
) -> Result<TrialReport, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let latent = if variant.plan().needs_latent_branch() {
        let params = IsomapParams {
            isomap_k: cfg.isomap_k,
            d_prime: cfg.d_prime,
            cache_dir: cache_dir.map(|p| p.to_path_buf()),
            ..IsomapParams::default()
        };
        Some(Arc::new(build_latent_graph(&ds.features, &params)?))
    } else {
        None
    };

    let mut per_trial = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let mut trial_cfg = cfg.clone();
        trial_cfg.seed = cfg.seed + t as u64;
        let model = train_variant(ds, &trial_cfg, variant, latent.clone())?;
        let accuracy = evaluate(&model, ds, &model.split.test)?;
        per_trial.push(TrialRow {
            seed: trial_cfg.seed,
            accuracy,
            epochs: model.epochs_run,
            best_epoch: model.best_epoch,
        });
    }
    let accs: Vec<f64> = per_trial.iter().map(|r| r.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(TrialReport {
        schema: 1,
        variant: variant.cli_name().to_string(),
        config: cfg.clone(),
        per_trial,
        mean,
        std,
        wall_time_s: started.elapsed().as_secs_f64(),
        diagnostics: None,
    })
}

/// The single-branch plain-GCN reference through the same harness.
pub fn baseline_gcn(ds: &GraphDataset, cfg: &TrainConfig) -> Result<TrialReport, TrainError> {
    run_trials(ds, cfg, Variant::GcnRaw, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sbm, SbmParams};
    use crate::SplitSpec;

    fn small_sbm() -> GraphDataset {
        generate_sbm(&SbmParams {
            classes: 4,
            per_block: 25,
            p_in: 0.2,
            p_out: 0.02,
            feat_dim: 8,
            feat_noise: 0.35,
            seed: 9,
        })
        .unwrap()
    }

    fn small_latent(ds: &GraphDataset) -> Arc<LatentGraph> {
        let params = IsomapParams {
            isomap_k: 4,
            d_prime: 6,
            ..IsomapParams::default()
        };
        Arc::new(build_latent_graph(&ds.features, &params).unwrap())
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            hidden: 12,
            isomap_k: 4,
            d_prime: 6,
            epochs_max: 20,
            patience: 100,
            trials: 2,
            mask_steps: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn prototype_of_singleton_is_the_node() {
        let emb = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let p = prototypes(&emb, &[0, 1], &[0, 1], 2).unwrap();
        assert_eq!(p.row(0), &[1.0, 2.0]);
        assert_eq!(p.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn prototype_of_identical_members_is_either() {
        let emb = DenseMatrix::from_rows(&[&[2.0, -1.0], &[2.0, -1.0]]).unwrap();
        let p = prototypes(&emb, &[0, 0], &[0, 1], 1).unwrap();
        assert_eq!(p.row(0), &[2.0, -1.0]);
    }

    #[test]
    fn prototype_averages_unit_vectors() {
        let emb = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let p = prototypes(&emb, &[0, 0], &[0, 1], 1).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn prototype_missing_class_errors() {
        let emb = DenseMatrix::from_rows(&[&[1.0]]).unwrap();
        assert!(prototypes(&emb, &[0], &[0], 2).is_err());
    }

    #[test]
    fn prototypical_loss_zero_when_coincident() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let set = PrototypeSet {
            p_sh: m.clone(),
            p_su: m.clone(),
            p_h: m.clone(),
            p_u: m,
        };
        assert_eq!(prototypical_loss(&set), 0.0);
    }

    #[test]
    fn prototypical_loss_three_four_five() {
        let origin = DenseMatrix::from_rows(&[&[0.0, 0.0]]).unwrap();
        let set = PrototypeSet {
            p_sh: DenseMatrix::from_rows(&[&[3.0, 4.0]]).unwrap(),
            p_su: origin.clone(),
            p_h: origin.clone(),
            p_u: origin,
        };
        assert!((prototypical_loss(&set) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn prototypical_loss_is_positively_homogeneous() {
        let mut rng = Rng::new(3);
        let rand = |rng: &mut Rng| {
            let mut m = DenseMatrix::zeros(3, 4);
            for v in m.values_mut() {
                *v = rng.normal();
            }
            m
        };
        let set = PrototypeSet {
            p_sh: rand(&mut rng),
            p_su: rand(&mut rng),
            p_h: rand(&mut rng),
            p_u: rand(&mut rng),
        };
        let base = prototypical_loss(&set);
        let c = 2.5;
        let scaled = PrototypeSet {
            p_sh: set.p_sh.map(|v| c * v),
            p_su: set.p_su.map(|v| c * v),
            p_h: set.p_h.map(|v| c * v),
            p_u: set.p_u.map(|v| c * v),
        };
        assert!((prototypical_loss(&scaled) - c * base).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_examples() {
        let perfect = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(cross_entropy(&perfect, &[0, 1]), 0.0);

        let uniform = DenseMatrix::from_rows(&[&[0.5, 0.5]]).unwrap();
        assert!((cross_entropy(&uniform, &[0]) - 2.0_f64.ln()).abs() < 1e-12);

        let two = DenseMatrix::from_rows(&[&[0.5, 0.5], &[0.25, 0.75]]).unwrap();
        let expected = (2.0_f64.ln() + 4.0_f64.ln()) / 2.0;
        assert!((cross_entropy(&two, &[0, 0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 0.5, 0.0), 1.0);
        assert_eq!(total_loss(1.0, 0.0, 4.0), 1.0);
        assert_eq!(total_loss(1.0, 0.5, 4.0), 3.0);
    }

    #[test]
    fn variant_cli_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_cli(v.cli_name()), Some(v));
        }
        assert_eq!(Variant::from_cli("bogus"), None);
    }

    #[test]
    fn zero_lr_epoch_keeps_parameters_and_reproduces_loss() {
        let ds = small_sbm();
        let latent = small_latent(&ds);
        let cfg = TrainConfig {
            lr: 0.0,
            warm_start_masks: false,
            ..quick_cfg()
        };
        let mut rng = Rng::new(cfg.seed);
        let split = sample_labels(&ds, cfg.per_class, &mut rng).unwrap();
        let mut ctx = TrainContext::new(&ds, &cfg, Variant::Full, Some(latent), split, &mut rng)
            .unwrap();
        let before: Vec<Vec<u64>> = (0..ctx.store.len())
            .map(|i| {
                ctx.store
                    .get(crate::tensor::ParamId(i))
                    .value
                    .values()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        let m1 = ctx.epoch(&mut Rng::new(5), 0).unwrap();
        let m2 = ctx.epoch(&mut Rng::new(5), 1).unwrap();
        assert_eq!(m1.loss.to_bits(), m2.loss.to_bits());
        for (i, bits) in before.iter().enumerate() {
            let now: Vec<u64> = ctx
                .store
                .get(crate::tensor::ParamId(i))
                .value
                .values()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(*bits, now, "parameter {i} drifted under zero lr");
        }
    }

    #[test]
    fn loss_decreases_on_the_fixture_for_most_seeds() {
        let ds = small_sbm();
        let latent = small_latent(&ds);
        let mut decreased = 0;
        for seed in 0..10 {
            let cfg = TrainConfig {
                seed,
                epochs_max: 20,
                patience: 100,
                ..quick_cfg()
            };
            let model = train_variant(&ds, &cfg, Variant::Full, Some(latent.clone())).unwrap();
            assert_eq!(model.loss_trace.len(), 20);
            if model.loss_trace[19].loss < model.loss_trace[0].loss {
                decreased += 1;
            }
        }
        assert!(decreased >= 9, "loss fell in only {decreased}/10 seeds");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let ds = small_sbm();
        let latent = small_latent(&ds);
        let cfg = TrainConfig {
            epochs_max: 5,
            ..quick_cfg()
        };
        let a = train_variant(&ds, &cfg, Variant::Full, Some(latent.clone())).unwrap();
        let b = train_variant(&ds, &cfg, Variant::Full, Some(latent)).unwrap();
        for i in 0..a.store.len() {
            let pa = a.store.get(crate::tensor::ParamId(i));
            let pb = b.store.get(crate::tensor::ParamId(i));
            for (x, y) in pa.value.values().iter().zip(pb.value.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for ((ka, ma), (kb, mb)) in a.masks.iter().zip(&b.masks) {
            assert_eq!(ka, kb);
            assert_eq!(ma.logits, mb.logits);
        }
        let ta: Vec<u64> = a.loss_trace.iter().map(|m| m.loss.to_bits()).collect();
        let tb: Vec<u64> = b.loss_trace.iter().map(|m| m.loss.to_bits()).collect();
        assert_eq!(ta, tb);
    }

    #[test]
    fn fixture_accuracy_beats_chance_by_twenty_points() {
        let ds = small_sbm();
        let latent = small_latent(&ds);
        let mut accs = Vec::new();
        for seed in 0..10 {
            let cfg = TrainConfig {
                seed,
                epochs_max: 60,
                patience: 60,
                lambda_p: 0.003,
                k_hop: 2,
                ..quick_cfg()
            };
            let model = train_variant(&ds, &cfg, Variant::Full, Some(latent.clone())).unwrap();
            accs.push(evaluate(&model, &ds, &model.split.test).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(mean >= 0.45, "10-seed mean accuracy {mean} under 45%");
    }

    #[test]
    fn patience_zero_stops_after_first_plateau() {
        let ds = small_sbm();
        let latent = small_latent(&ds);
        let cfg = TrainConfig {
            lr: 0.0,
            dropout: 0.0,
            warm_start_masks: false,
            patience: 0,
            epochs_max: 50,
            ..quick_cfg()
        };
        let model = train_variant(&ds, &cfg, Variant::Full, Some(latent)).unwrap();
        // epoch 0 improves on -inf; epoch 1 repeats the same loss exactly
        assert_eq!(model.epochs_run, 2);
        assert_eq!(model.best_epoch, 0);
    }

    #[test]
    fn evaluate_empty_set_is_vacuously_perfect() {
        let ds = small_sbm();
        let cfg = TrainConfig {
            epochs_max: 1,
            ..quick_cfg()
        };
        let model = train_variant(&ds, &cfg, Variant::GcnRaw, None).unwrap();
        assert_eq!(evaluate(&model, &ds, &[]).unwrap(), 1.0);
    }

    #[test]
    fn zero_weights_predict_chance_with_class_zero_ties() {
        let ds = small_sbm();
        let cfg = TrainConfig {
            epochs_max: 1,
            ..quick_cfg()
        };
        let mut model = train_variant(&ds, &cfg, Variant::GcnRaw, None).unwrap();
        for i in 0..model.store.len() {
            let p = model.store.get_mut(crate::tensor::ParamId(i));
            for v in p.value.values_mut() {
                *v = 0.0;
            }
        }
        let all: Vec<usize> = (0..ds.node_count()).collect();
        let acc = evaluate(&model, &ds, &all).unwrap();
        assert!((acc - 0.25).abs() < 1e-12, "accuracy {acc}");
    }

    #[test]
    fn trial_rows_match_standalone_runs() {
        let ds = small_sbm();
        let cfg = TrainConfig {
            epochs_max: 10,
            trials: 2,
            seed: 100,
            ..quick_cfg()
        };
        let report = run_trials(&ds, &cfg, Variant::GcnRaw, None).unwrap();
        assert_eq!(report.per_trial.len(), 2);
        let standalone_cfg = TrainConfig { seed: 101, ..cfg };
        let model = train_variant(&ds, &standalone_cfg, Variant::GcnRaw, None).unwrap();
        let acc = evaluate(&model, &ds, &model.split.test).unwrap();
        assert_eq!(report.per_trial[1].seed, 101);
        assert_eq!(report.per_trial[1].accuracy.to_bits(), acc.to_bits());
        assert_eq!(report.per_trial[1].epochs, model.epochs_run);
        assert_eq!(report.per_trial[1].best_epoch, model.best_epoch);
    }

    #[test]
    fn single_trial_reports_zero_std() {
        let ds = small_sbm();
        let cfg = TrainConfig {
            epochs_max: 3,
            trials: 1,
            ..quick_cfg()
        };
        let report = run_trials(&ds, &cfg, Variant::GcnRaw, None).unwrap();
        assert_eq!(report.std, 0.0);
        assert_eq!(report.mean, report.per_trial[0].accuracy);
    }

    #[test]
    fn baseline_reports_are_bitwise_repeatable() {
        let ds = small_sbm();
        let cfg = TrainConfig {
            epochs_max: 8,
            trials: 2,
            ..quick_cfg()
        };
        let a = baseline_gcn(&ds, &cfg).unwrap();
        let b = baseline_gcn(&ds, &cfg).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.std.to_bits(), b.std.to_bits());
        for (ra, rb) in a.per_trial.iter().zip(&b.per_trial) {
            assert_eq!(ra.accuracy.to_bits(), rb.accuracy.to_bits());
            assert_eq!(ra.epochs, rb.epochs);
        }
    }

    #[test]
    fn early_stopping_restores_the_best_validation_epoch() {
        let mut ds = small_sbm();
        let train: Vec<usize> = vec![0, 25, 50, 75];
        let val: Vec<usize> = vec![1, 2, 26, 27, 51, 52, 76, 77];
        let test: Vec<usize> = (0..ds.node_count())
            .filter(|i| !train.contains(i) && !val.contains(i))
            .collect();
        ds.split_spec = SplitSpec::Explicit(Split {
            train: train.clone(),
            val: val.clone(),
            test,
        });
        let latent = small_latent(&ds);
        let cfg = TrainConfig {
            epochs_max: 15,
            patience: 4,
            per_class: 1,
            ..quick_cfg()
        };
        let model = train_variant(&ds, &cfg, Variant::Full, Some(latent)).unwrap();
        let best_traced = model
            .loss_trace
            .iter()
            .filter_map(|m| m.val_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        let restored = evaluate(&model, &ds, &val).unwrap();
        assert_eq!(restored.to_bits(), best_traced.to_bits());
    }

    #[test]
    fn config_hash_is_stable_and_variant_sensitive() {
        let cfg = TrainConfig::default();
        let a = config_hash(&cfg, Variant::Full);
        let b = config_hash(&cfg, Variant::Full);
        let c = config_hash(&cfg, Variant::NoLp);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = TrainConfig::default();
        cfg.per_class = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr = -0.1;
        assert!(cfg.validate().is_err());
    }
}
