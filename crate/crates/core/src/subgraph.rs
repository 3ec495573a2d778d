//! Per-node multi-view subgraphs: eligibility sets, the KL surrogate for
//! the mutual-information objective, the s-step mask optimizer, and the
//! weighted subgraph embedding.
//!
//! Eligible members are excluded structurally rather than zero-masked: a
//! node's observed-view candidates are its k-hop neighborhood, the latent
//! view's are the nodes whose embedded coordinates point the same way
//! (cosine ≥ τ, with a top-m fallback when that set is too small). Mask
//! logits exist only for eligible members.
//!
//! The KL objective compares softmax(ψ_i) with softmax(s̃_i), where s̃ is
//! the σ-weighted mean of member embeddings — the same normalized average
//! the subgraph embedding uses. Normalizing lets a lone member reproduce
//! its node's distribution exactly at any mask value, and keeps the
//! objective well-defined for embeddings that aren't distributions.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::k_hop;
use crate::tensor::{
    row_softmax_values, sigmoid_scalar, DenseMatrix, NodeId, SparseMatrix, Tape, TensorError,
};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Error, Debug)]
pub enum SubgraphError {
    #[error("subgraph for node {0} has no members")]
    EmptyMembers(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("mask dump: {0}")]
    Io(String),
}

/// Which graph view a subgraph lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Naive,
    Latent,
}

/// Nodes allowed into one node's subgraph for one view, ascending and
/// deduplicated. A node with no candidates gets itself as a singleton.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EligibilitySet {
    pub node: usize,
    pub view: View,
    pub members: Vec<usize>,
}

/// Mask logits aligned with an eligibility set's members.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVector {
    pub node: usize,
    pub view: View,
    pub members: Vec<usize>,
    pub logits: Vec<f64>,
}

/// Subgraph-selection hyperparameters.
#[derive(Clone, Debug)]
pub struct SubgraphConfig {
    /// Hop radius for the observed view.
    pub k_hop: usize,
    /// Cosine threshold for the latent view.
    pub tau: f64,
    /// Latent sets smaller than this trigger the top-m fallback.
    pub min_latent: usize,
    /// Fallback size: top-m nodes by cosine similarity.
    pub fallback_m: usize,
    /// Gradient-descent steps per mask optimization round.
    pub steps: usize,
    /// Mask learning rate.
    pub lr: f64,
}

impl Default for SubgraphConfig {
    fn default() -> Self {
        SubgraphConfig {
            k_hop: 3,
            tau: 0.5,
            min_latent: 5,
            fallback_m: 20,
            steps: 20,
            lr: 0.1,
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Candidate members for `node`'s subgraph in the given view.
///
/// Observed view: every node within `k_hop` hops. Latent view: nodes whose
/// embedded rows have cosine similarity at least `tau`; if fewer than
/// `min_latent` qualify, the `fallback_m` most similar nodes are taken
/// instead (ties toward smaller indices). An isolated result degrades to
/// the node itself.
pub fn eligibility(
    adjacency: &SparseMatrix,
    x_prime: &DenseMatrix,
    node: usize,
    view: View,
    cfg: &SubgraphConfig,
) -> EligibilitySet {
    let n = adjacency.rows();
    let mut members = match view {
        View::Naive => k_hop(adjacency, node, cfg.k_hop),
        View::Latent => {
            let own = x_prime.row(node);
            let mut sims: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != node)
                .map(|j| (j, cosine(own, x_prime.row(j))))
                .collect();
            let mut kept: Vec<usize> = sims
                .iter()
                .filter(|&&(_, s)| s >= cfg.tau)
                .map(|&(j, _)| j)
                .collect();
            if kept.len() < cfg.min_latent {
                sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                kept = sims
                    .iter()
                    .take(cfg.fallback_m)
                    .map(|&(j, _)| j)
                    .collect();
                kept.sort_unstable();
            }
            kept
        }
    };
    if members.is_empty() {
        members.push(node);
    }
    EligibilitySet {
        node,
        view,
        members,
    }
}

/// σ-weighted mean of member embeddings (the Eq. 9 aggregate): a convex
/// combination, so each coordinate stays inside the members' range.
pub fn subgraph_embedding(
    mask: &MaskVector,
    psi: &DenseMatrix,
) -> Result<Vec<f64>, SubgraphError> {
    if mask.members.is_empty() {
        return Err(SubgraphError::EmptyMembers(mask.node));
    }
    let k = psi.cols();
    let mut acc = vec![0.0; k];
    let mut total = 0.0;
    for (&j, &logit) in mask.members.iter().zip(&mask.logits) {
        let w = sigmoid_scalar(logit);
        total += w;
        for (a, &v) in acc.iter_mut().zip(psi.row(j)) {
            *a += w * v;
        }
    }
    for a in acc.iter_mut() {
        *a /= total;
    }
    Ok(acc)
}

fn softmax_row(values: &[f64]) -> Vec<f64> {
    let m = DenseMatrix::from_vec(1, values.len(), values.to_vec()).expect("row");
    row_softmax_values(&m).row(0).to_vec()
}

/// KL divergence `KL(softmax(ψ_i) ‖ softmax(s̃))` where s̃ is the masked
/// subgraph mean. Straight-line arithmetic; the optimizer's tape version is
/// checked against this in tests.
pub fn kl_objective(
    psi_own: &[f64],
    logits: &[f64],
    members_psi: &DenseMatrix,
) -> Result<f64, SubgraphError> {
    if members_psi.rows() == 0 {
        return Err(SubgraphError::EmptyMembers(usize::MAX));
    }
    if logits.len() != members_psi.rows() || psi_own.len() != members_psi.cols() {
        return Err(SubgraphError::Tensor(TensorError::Invalid {
            op: "kl_objective",
            reason: format!(
                "{} logits and {}-dim node row against a {}x{} member block",
                logits.len(),
                psi_own.len(),
                members_psi.rows(),
                members_psi.cols()
            ),
        }));
    }
    let k = members_psi.cols();
    let mut agg = vec![0.0; k];
    let mut total = 0.0;
    for (j, &logit) in logits.iter().enumerate() {
        let w = sigmoid_scalar(logit);
        total += w;
        for (a, &v) in agg.iter_mut().zip(members_psi.row(j)) {
            *a += w * v;
        }
    }
    for a in agg.iter_mut() {
        *a /= total;
    }
    let p = softmax_row(psi_own);
    let q = softmax_row(&agg);
    let mut kl = 0.0;
    for (pk, qk) in p.iter().zip(&q) {
        kl += pk * (pk.max(LOG_FLOOR).ln() - qk.max(LOG_FLOOR).ln());
    }
    Ok(kl)
}

/// The reusable optimization tape: logits are the only leaf that moves.
struct MaskTape {
    tape: Tape,
    logits: NodeId,
    /// −Σ_k p_k · ln q_k; differs from the true KL by a constant.
    objective: NodeId,
}

fn build_mask_tape(
    psi_own: &[f64],
    members_psi: DenseMatrix,
    logits0: &[f64],
) -> Result<MaskTape, TensorError> {
    let mut tape = Tape::new();
    let logits = tape.variable(
        DenseMatrix::from_vec(1, logits0.len(), logits0.to_vec()).expect("logit row"),
    );
    let members = tape.constant(members_psi);
    let weights = tape.sigmoid(logits);
    let num = tape.matmul(weights, members)?;
    let den = tape.sum_all(weights);
    let mean = tape.scalar_div(num, den)?;
    let q = tape.row_softmax(mean);
    let ln_q = tape.ln_clamped(q);
    let p = softmax_row(psi_own);
    let p_row = Arc::new(DenseMatrix::from_vec(1, p.len(), p).expect("p row"));
    let cross = tape.weighted_sum(ln_q, p_row)?;
    let objective = tape.scale(cross, -1.0);
    Ok(MaskTape {
        tape,
        logits,
        objective,
    })
}

/// Runs `steps` plain gradient-descent steps on the KL objective with the
/// network outputs frozen. Steps that would increase the objective retry
/// with a halved rate (up to 10 halvings), so the objective never goes up;
/// starting logits come from `warm` when its member list still matches,
/// zeros otherwise.
pub fn optimize_mask(
    psi: &DenseMatrix,
    elig: &EligibilitySet,
    warm: Option<&MaskVector>,
    steps: usize,
    lr: f64,
) -> Result<MaskVector, SubgraphError> {
    let members = &elig.members;
    if members.is_empty() {
        return Err(SubgraphError::EmptyMembers(elig.node));
    }
    let mut logits = match warm {
        Some(w) if w.members == *members => w.logits.clone(),
        Some(w) => {
            log::warn!(
                "warm mask for node {} view {:?} has stale members; starting cold",
                w.node,
                w.view
            );
            vec![0.0; members.len()]
        }
        None => vec![0.0; members.len()],
    };
    if steps == 0 {
        return Ok(MaskVector {
            node: elig.node,
            view: elig.view,
            members: members.clone(),
            logits,
        });
    }

    let mut block = DenseMatrix::zeros(members.len(), psi.cols());
    for (r, &j) in members.iter().enumerate() {
        block.row_mut(r).copy_from_slice(psi.row(j));
    }
    let mut mt = build_mask_tape(psi.row(elig.node), block, &logits)?;
    for _ in 0..steps {
        let current = mt.tape.value(mt.objective).get(0, 0);
        mt.tape.backward(mt.objective)?;
        let grad = mt
            .tape
            .grad(mt.logits)
            .expect("logits require grad")
            .row(0)
            .to_vec();
        let mut rate = lr;
        let mut accepted = false;
        for _halving in 0..=10 {
            let candidate: Vec<f64> = logits
                .iter()
                .zip(&grad)
                .map(|(m, g)| m - rate * g)
                .collect();
            mt.tape.set_leaf(
                mt.logits,
                DenseMatrix::from_vec(1, candidate.len(), candidate.clone()).expect("row"),
            );
            mt.tape.forward();
            if mt.tape.value(mt.objective).get(0, 0) <= current {
                logits = candidate;
                accepted = true;
                break;
            }
            rate *= 0.5;
        }
        if !accepted {
            // no step length helps; restore and stop early
            mt.tape.set_leaf(
                mt.logits,
                DenseMatrix::from_vec(1, logits.len(), logits.clone()).expect("row"),
            );
            mt.tape.forward();
            break;
        }
    }
    Ok(MaskVector {
        node: elig.node,
        view: elig.view,
        members: members.clone(),
        logits,
    })
}

/// Row-stochastic aggregation weights for a batch of masks: row `owner`
/// holds `σ(m_j)/Σσ(m)` at each member column. Multiplying embeddings by
/// this matrix yields every owner's subgraph embedding at once; nodes
/// without a mask get a zero row.
pub fn mask_weight_matrix(
    masks: &[MaskVector],
    n: usize,
) -> Result<SparseMatrix, SubgraphError> {
    let mut triplets = Vec::new();
    for mask in masks {
        if mask.members.is_empty() {
            return Err(SubgraphError::EmptyMembers(mask.node));
        }
        let weights: Vec<f64> = mask.logits.iter().map(|&l| sigmoid_scalar(l)).collect();
        let total: f64 = weights.iter().sum();
        for (&j, w) in mask.members.iter().zip(weights) {
            triplets.push((mask.node, j, w / total));
        }
    }
    SparseMatrix::from_triplets(n, n, &triplets).map_err(SubgraphError::Tensor)
}

#[derive(Serialize)]
struct MaskRecord<'a> {
    node: usize,
    view: View,
    members: &'a [usize],
    sigmoid_weights: Vec<f64>,
}

/// Writes one JSON line per mask: node, view, members, and the sigmoid of
/// each logit.
pub fn dump_masks(path: &Path, masks: &[MaskVector]) -> Result<(), SubgraphError> {
    let mut out = std::fs::File::create(path).map_err(|e| SubgraphError::Io(e.to_string()))?;
    for mask in masks {
        let record = MaskRecord {
            node: mask.node,
            view: mask.view,
            members: &mask.members,
            sigmoid_weights: mask.logits.iter().map(|&l| sigmoid_scalar(l)).collect(),
        };
        let line = serde_json::to_string(&record).map_err(|e| SubgraphError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| SubgraphError::Io(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn path_graph(n: usize) -> SparseMatrix {
        let mut triplets = Vec::new();
        for i in 0..n - 1 {
            triplets.push((i, i + 1, 1.0));
            triplets.push((i + 1, i, 1.0));
        }
        SparseMatrix::from_triplets(n, n, &triplets).unwrap()
    }

    #[test]
    fn naive_eligibility_on_path() {
        let adj = path_graph(5);
        let x = DenseMatrix::zeros(5, 1);
        let set = eligibility(&adj, &x, 0, View::Naive, &SubgraphConfig::default());
        assert_eq!(set.members, vec![1, 2, 3]);
    }

    #[test]
    fn naive_eligibility_isolated_node_is_self() {
        let adj = SparseMatrix::from_triplets(3, 3, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let x = DenseMatrix::zeros(3, 1);
        let set = eligibility(&adj, &x, 2, View::Naive, &SubgraphConfig::default());
        assert_eq!(set.members, vec![2]);
    }

    #[test]
    fn latent_eligibility_identical_rows_takes_everyone() {
        let adj = path_graph(6);
        let x = DenseMatrix::filled(6, 2, 0.7);
        let mut cfg = SubgraphConfig::default();
        cfg.min_latent = 1;
        let set = eligibility(&adj, &x, 2, View::Latent, &cfg);
        assert_eq!(set.members, vec![0, 1, 3, 4, 5]);
    }

    #[test]
    fn latent_eligibility_orthogonal_row_falls_back() {
        // node 0 is orthogonal to everyone else; fallback takes top-m anyway
        let x = DenseMatrix::from_rows(&[
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[0.0, 2.0],
            &[0.0, 0.5],
            &[0.0, 3.0],
        ])
        .unwrap();
        let adj = path_graph(5);
        let mut cfg = SubgraphConfig::default();
        cfg.fallback_m = 3;
        let set = eligibility(&adj, &x, 0, View::Latent, &cfg);
        assert_eq!(set.members.len(), 3);
        // all cosines tie at 0, so the smallest indices win
        assert_eq!(set.members, vec![1, 2, 3]);
    }

    #[test]
    fn kl_zero_for_single_identical_member_at_any_mask() {
        let psi_own = [1.0, 0.5];
        let members = DenseMatrix::from_rows(&[&[1.0, 0.5]]).unwrap();
        for logit in [-3.0, 0.0, 5.0] {
            let kl = kl_objective(&psi_own, &[logit], &members).unwrap();
            assert!(kl.abs() <= 1e-12, "logit {logit}: {kl}");
        }
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = Rng::new(31);
        for _ in 0..50 {
            let k = 3;
            let m = 4;
            let psi_own: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
            let logits: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let mut members = DenseMatrix::zeros(m, k);
            for v in members.values_mut() {
                *v = rng.normal();
            }
            let kl = kl_objective(&psi_own, &logits, &members).unwrap();
            assert!(kl >= -1e-15, "{kl}");
        }
    }

    #[test]
    fn kl_prefers_the_matching_member() {
        let psi_own = [1.0, 0.0];
        let members = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let favor_match = kl_objective(&psi_own, &[4.0, -4.0], &members).unwrap();
        let favor_other = kl_objective(&psi_own, &[-4.0, 4.0], &members).unwrap();
        assert!(
            favor_match < favor_other,
            "{favor_match} !< {favor_other}"
        );
    }

    #[test]
    fn tape_objective_matches_straight_line_kl() {
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let (m, k) = (5, 3);
            let psi_own: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
            let logits: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let mut members = DenseMatrix::zeros(m, k);
            for v in members.values_mut() {
                *v = rng.normal();
            }
            let reference = kl_objective(&psi_own, &logits, &members).unwrap();
            let mt = build_mask_tape(&psi_own, members.clone(), &logits).unwrap();
            let p = softmax_row(&psi_own);
            let p_ln_p: f64 = p.iter().map(|&pk| pk * pk.max(LOG_FLOOR).ln()).sum();
            let tape_kl = p_ln_p + mt.tape.value(mt.objective).get(0, 0);
            assert!(
                (tape_kl - reference).abs() < 1e-12,
                "{tape_kl} vs {reference}"
            );
        }
    }

    #[test]
    fn mask_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let (m, k) = (4, 3);
        let psi_own: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let logits: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let mut members = DenseMatrix::zeros(m, k);
        for v in members.values_mut() {
            *v = rng.normal();
        }
        let mut mt = build_mask_tape(&psi_own, members.clone(), &logits).unwrap();
        mt.tape.backward(mt.objective).unwrap();
        let grad = mt.tape.grad(mt.logits).unwrap().row(0).to_vec();
        let eps = 1e-6;
        for j in 0..m {
            let mut hi = logits.clone();
            hi[j] += eps;
            let mut lo = logits.clone();
            lo[j] -= eps;
            let f_hi = kl_objective(&psi_own, &hi, &members).unwrap();
            let f_lo = kl_objective(&psi_own, &lo, &members).unwrap();
            let numeric = (f_hi - f_lo) / (2.0 * eps);
            let denom = grad[j].abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((grad[j] - numeric) / denom).abs() < 1e-5,
                "logit {j}: analytic {} vs numeric {numeric}",
                grad[j]
            );
        }
    }

    fn elig_for(members: Vec<usize>, node: usize) -> EligibilitySet {
        EligibilitySet {
            node,
            view: View::Naive,
            members,
        }
    }

    #[test]
    fn optimize_stationary_point_stays_put() {
        // the lone member equals the node's own embedding: KL is already 0
        let psi = DenseMatrix::from_rows(&[&[1.0, 0.5], &[1.0, 0.5]]).unwrap();
        let warm = MaskVector {
            node: 0,
            view: View::Naive,
            members: vec![1],
            logits: vec![0.7],
        };
        let out = optimize_mask(&psi, &elig_for(vec![1], 0), Some(&warm), 20, 0.1).unwrap();
        assert!((out.logits[0] - 0.7).abs() < 1e-9);
        let kl = kl_objective(psi.row(0), &out.logits, &psi_row_block(&psi, &[1])).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    fn psi_row_block(psi: &DenseMatrix, members: &[usize]) -> DenseMatrix {
        let mut block = DenseMatrix::zeros(members.len(), psi.cols());
        for (r, &j) in members.iter().enumerate() {
            block.row_mut(r).copy_from_slice(psi.row(j));
        }
        block
    }

    #[test]
    fn optimize_zero_steps_returns_warm_verbatim() {
        let psi = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let warm = MaskVector {
            node: 0,
            view: View::Naive,
            members: vec![1],
            logits: vec![-1.25],
        };
        let out = optimize_mask(&psi, &elig_for(vec![1], 0), Some(&warm), 0, 0.1).unwrap();
        assert_eq!(out.logits, vec![-1.25]);
    }

    #[test]
    fn optimize_upweights_the_matching_member() {
        // member 1 equals the node's embedding; members 2 and 3 are noise
        let psi = DenseMatrix::from_rows(&[
            &[2.0, 0.0, 0.0],
            &[2.0, 0.0, 0.0],
            &[0.0, 2.0, 0.0],
            &[0.0, 0.0, 2.0],
        ])
        .unwrap();
        let elig = elig_for(vec![1, 2, 3], 0);
        let out = optimize_mask(&psi, &elig, None, 20, 0.1).unwrap();
        let w: Vec<f64> = out.logits.iter().map(|&l| sigmoid_scalar(l)).collect();
        assert!(w[0] > w[1] && w[0] > w[2], "weights {w:?}");
        // and the objective went down from the cold start
        let block = psi_row_block(&psi, &elig.members);
        let cold = kl_objective(psi.row(0), &[0.0, 0.0, 0.0], &block).unwrap();
        let tuned = kl_objective(psi.row(0), &out.logits, &block).unwrap();
        assert!(tuned < cold);
    }

    #[test]
    fn optimize_never_increases_objective() {
        let mut rng = Rng::new(1234);
        for case in 0..10 {
            let (m, k) = (5, 3);
            let mut psi = DenseMatrix::zeros(m + 1, k);
            for v in psi.values_mut() {
                *v = rng.normal();
            }
            let members: Vec<usize> = (1..=m).collect();
            let warm_logits: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let warm = MaskVector {
                node: 0,
                view: View::Naive,
                members: members.clone(),
                logits: warm_logits.clone(),
            };
            let elig = elig_for(members.clone(), 0);
            let out = optimize_mask(&psi, &elig, Some(&warm), 20, 0.5).unwrap();
            let block = psi_row_block(&psi, &members);
            let before = kl_objective(psi.row(0), &warm_logits, &block).unwrap();
            let after = kl_objective(psi.row(0), &out.logits, &block).unwrap();
            assert!(after <= before + 1e-12, "case {case}: {after} > {before}");
        }
    }

    #[test]
    fn embedding_uniform_logits_give_plain_mean() {
        let psi = DenseMatrix::from_rows(&[&[0.0, 0.0], &[1.0, 3.0], &[5.0, 1.0]]).unwrap();
        let mask = MaskVector {
            node: 0,
            view: View::Naive,
            members: vec![1, 2],
            logits: vec![1.3, 1.3],
        };
        let s = subgraph_embedding(&mask, &psi).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12);
        assert!((s[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_saturated_logit_selects_member() {
        let psi = DenseMatrix::from_rows(&[&[0.0, 0.0], &[1.0, 3.0], &[5.0, 1.0]]).unwrap();
        let mask = MaskVector {
            node: 0,
            view: View::Naive,
            members: vec![1, 2],
            logits: vec![50.0, -50.0],
        };
        let s = subgraph_embedding(&mask, &psi).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-10);
        assert!((s[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn embedding_two_unit_members_at_zero_logits() {
        let psi = DenseMatrix::from_rows(&[&[9.0, 9.0], &[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let mask = MaskVector {
            node: 0,
            view: View::Latent,
            members: vec![1, 2],
            logits: vec![0.0, 0.0],
        };
        let s = subgraph_embedding(&mask, &psi).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn embedding_is_convex_combination() {
        let mut rng = Rng::new(8);
        let psi = {
            let mut m = DenseMatrix::zeros(6, 4);
            for v in m.values_mut() {
                *v = rng.normal();
            }
            m
        };
        let mask = MaskVector {
            node: 0,
            view: View::Naive,
            members: vec![1, 2, 4, 5],
            logits: vec![rng.normal(), rng.normal(), rng.normal(), rng.normal()],
        };
        let s = subgraph_embedding(&mask, &psi).unwrap();
        for c in 0..4 {
            let lo = mask
                .members
                .iter()
                .map(|&j| psi.get(j, c))
                .fold(f64::INFINITY, f64::min);
            let hi = mask
                .members
                .iter()
                .map(|&j| psi.get(j, c))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(s[c] >= lo - 1e-12 && s[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn non_members_cannot_influence_embedding() {
        let mut psi = DenseMatrix::from_rows(&[
            &[0.1, 0.2],
            &[1.0, 3.0],
            &[5.0, 1.0],
            &[7.0, 7.0],
        ])
        .unwrap();
        let mask = MaskVector {
            node: 0,
            view: View::Naive,
            members: vec![1, 2],
            logits: vec![0.4, -0.3],
        };
        let before = subgraph_embedding(&mask, &psi).unwrap();
        psi.set(3, 0, -100.0);
        psi.set(3, 1, 55.0);
        let after = subgraph_embedding(&mask, &psi).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(b.to_bits(), a.to_bits());
        }
    }

    #[test]
    fn optimization_order_does_not_matter() {
        let mut rng = Rng::new(17);
        let mut psi = DenseMatrix::zeros(6, 3);
        for v in psi.values_mut() {
            *v = rng.normal();
        }
        let e0 = elig_for(vec![1, 2, 3], 0);
        let e1 = elig_for(vec![2, 4, 5], 1);
        let a0 = optimize_mask(&psi, &e0, None, 10, 0.1).unwrap();
        let a1 = optimize_mask(&psi, &e1, None, 10, 0.1).unwrap();
        let b1 = optimize_mask(&psi, &e1, None, 10, 0.1).unwrap();
        let b0 = optimize_mask(&psi, &e0, None, 10, 0.1).unwrap();
        assert_eq!(a0, b0);
        assert_eq!(a1, b1);
    }

    #[test]
    fn weight_matrix_rows_are_stochastic_over_members() {
        let masks = vec![
            MaskVector {
                node: 0,
                view: View::Naive,
                members: vec![1, 2],
                logits: vec![0.3, -0.8],
            },
            MaskVector {
                node: 2,
                view: View::Naive,
                members: vec![0],
                logits: vec![5.0],
            },
        ];
        let w = mask_weight_matrix(&masks, 4).unwrap();
        let (cols, vals) = w.row(0);
        assert_eq!(cols, &[1, 2]);
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (cols, vals) = w.row(2);
        assert_eq!(cols, &[0]);
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert_eq!(w.row(1).0.len(), 0);
        assert_eq!(w.row(3).0.len(), 0);
    }

    #[test]
    fn mask_dump_round_trips_as_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("masks.jsonl");
        let masks = vec![MaskVector {
            node: 3,
            view: View::Latent,
            members: vec![0, 5],
            logits: vec![0.0, 2.0],
        }];
        dump_masks(&path, &masks).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(line["node"], 3);
        assert_eq!(line["view"], "latent");
        assert_eq!(line["members"][1], 5);
        let w1 = line["sigmoid_weights"][1].as_f64().unwrap();
        assert!((w1 - sigmoid_scalar(2.0)).abs() < 1e-12);
    }
}
