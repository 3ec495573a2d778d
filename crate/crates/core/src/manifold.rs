//! Latent-graph construction: Isomap on node features, then a softmax
//! similarity adjacency over the embedded coordinates.
//!
//! The pipeline is pairwise Euclidean distances → kNN graph → connectivity
//! repair → all-sources Dijkstra → classical MDS → `A' =
//! row_softmax(X'·X'ᵀ/√d')`. Every stage is deterministic: ties break
//! toward smaller indices, the eigensolver starts from a fixed internal
//! seed, and reductions run in a fixed order.
//!
//! Embedded coordinates are rounded through f32 before any downstream use,
//! whether they were just computed or reloaded from the on-disk cache, so
//! cached and fresh runs produce bit-identical latent graphs.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{read_f32_matrix, write_f32_matrix, GraphError};
use crate::tensor::{matmul, matmul_nt, matmul_tn, row_softmax_values, DenseMatrix, Rng, SparseMatrix};

/// Fixed start seed for the eigensolver's initial block. Independent of any
/// user-facing seed: the embedding must not change when the trial seed does.
const EIG_SEED: u64 = 271_828_182;

/// Extra subspace dimensions carried beyond the requested eigenpair count.
const OVERSAMPLE: usize = 4;

#[derive(Error, Debug)]
pub enum ManifoldError {
    #[error("isomap: {0}")]
    Invalid(String),
    #[error(
        "eigensolver stalled at residual {residual:.3e} after {iters} iterations (needed {needed:.3e})"
    )]
    NonConverged {
        residual: f64,
        needed: f64,
        iters: usize,
    },
    #[error(transparent)]
    Cache(#[from] GraphError),
}

/// Isomap and latent-adjacency hyperparameters.
#[derive(Clone, Debug)]
pub struct IsomapParams {
    /// Neighbors per node in the manifold graph.
    pub isomap_k: usize,
    /// Target embedding dimension (capped at the node count).
    pub d_prime: usize,
    /// Eigensolver residual tolerance, relative to the Frobenius norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Directory for the `.f32` coordinate/adjacency cache; `None` disables.
    pub cache_dir: Option<PathBuf>,
}

impl Default for IsomapParams {
    fn default() -> Self {
        IsomapParams {
            isomap_k: 10,
            d_prime: 64,
            tol: 1e-7,
            max_iter: 1000,
            cache_dir: None,
        }
    }
}

/// What the Isomap stage did, for logs and reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IsomapSummary {
    pub components_before_repair: usize,
    pub repair_edges_added: usize,
    /// Top eigenvalues of the MDS Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
    #[serde(default)]
    pub cache_hit: bool,
}

/// The feature-derived view: embedded coordinates and their softmax
/// similarity adjacency.
#[derive(Clone, Debug)]
pub struct LatentGraph {
    /// Embedded coordinates, one row per node, f32-rounded.
    pub x_prime: DenseMatrix,
    /// `row_softmax(X'·X'ᵀ/√d')`; rows sum to 1.
    pub adjacency: DenseMatrix,
    pub d_prime: usize,
    pub isomap_k: usize,
    pub summary: IsomapSummary,
}

impl LatentGraph {
    /// Checks the structural invariants: finite coordinates, row-stochastic
    /// adjacency with entries in (0, 1] — the upper boundary only occurs
    /// for a single-node graph.
    pub fn validate(&self) -> Result<(), ManifoldError> {
        if !self.x_prime.all_finite() {
            return Err(ManifoldError::Invalid("non-finite coordinates".into()));
        }
        let n = self.adjacency.rows();
        for r in 0..n {
            let row = self.adjacency.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ManifoldError::Invalid(format!(
                    "adjacency row {r} sums to {sum}"
                )));
            }
            if row.iter().any(|&v| v <= 0.0 || v > 1.0) {
                return Err(ManifoldError::Invalid(format!(
                    "adjacency row {r} has an entry outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

// ===== distances ========================================================

/// All-pairs Euclidean distances between the rows of `x`. Symmetric with a
/// zero diagonal; accumulated as squared differences so the radicand can
/// never go negative.
pub fn pairwise_euclidean(x: &DenseMatrix) -> DenseMatrix {
    let n = x.rows();
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut sq = 0.0;
            for (a, b) in x.row(i).iter().zip(x.row(j)) {
                let d = a - b;
                sq += d * d;
            }
            let d = sq.sqrt();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

/// k-nearest-neighbor graph over a distance matrix. Node `i` links to its
/// `k` nearest others (ties toward the smaller index), and the edge set is
/// symmetrized by union; weights are the distances, zero weights permitted
/// for duplicate points.
pub fn knn_graph(d: &DenseMatrix, k: usize) -> Result<SparseMatrix, ManifoldError> {
    let n = d.rows();
    if k == 0 || k >= n {
        return Err(ManifoldError::Invalid(format!(
            "neighbor count {k} must satisfy 1 <= k < {n}"
        )));
    }
    let mut pairs = std::collections::BTreeSet::new();
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            d.get(i, a)
                .total_cmp(&d.get(i, b))
                .then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let mut triplets = Vec::with_capacity(pairs.len() * 2);
    for (a, b) in pairs {
        triplets.push((a, b, d.get(a, b)));
        triplets.push((b, a, d.get(a, b)));
    }
    SparseMatrix::from_triplets(n, n, &triplets).map_err(|e| ManifoldError::Invalid(e.to_string()))
}

fn component_labels(g: &SparseMatrix) -> Vec<usize> {
    let n = g.rows();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            let (cols, _) = g.row(u);
            for &v in cols {
                if label[v] == usize::MAX {
                    label[v] = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    label
}

/// Number of connected components of an undirected graph.
pub fn component_count(g: &SparseMatrix) -> usize {
    component_labels(g).iter().max().map_or(0, |&m| m + 1)
}

/// Joins a disconnected graph: while more than one component remains, adds
/// the cross-component pair with the smallest distance in `d` (ties toward
/// the lexicographically smallest pair). Returns the repaired graph and the
/// number of edges added.
pub fn connect_components(
    g: &SparseMatrix,
    d: &DenseMatrix,
) -> Result<(SparseMatrix, usize), ManifoldError> {
    let n = g.rows();
    let mut label = component_labels(g);
    let mut triplets: Vec<(usize, usize, f64)> = g.iter().collect();
    let mut added = 0;
    loop {
        let components = label.iter().max().map_or(0, |&m| m + 1);
        if components <= 1 {
            break;
        }
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                if label[i] != label[j]
                    && best.is_none_or(|(bi, bj)| d.get(i, j) < d.get(bi, bj))
                {
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.expect("multiple components imply a cross pair");
        triplets.push((i, j, d.get(i, j)));
        triplets.push((j, i, d.get(i, j)));
        added += 1;
        // relabel j's component into i's
        let (from, to) = (label[j], label[i]);
        for l in label.iter_mut() {
            if *l == from {
                *l = to;
            }
        }
        // compact labels so the loop's component count stays honest
        let mut remap = std::collections::BTreeMap::new();
        for l in label.iter_mut() {
            let next = remap.len();
            *l = *remap.entry(*l).or_insert(next);
        }
    }
    let repaired = SparseMatrix::from_triplets(n, n, &triplets)
        .map_err(|e| ManifoldError::Invalid(e.to_string()))?;
    Ok((repaired, added))
}

fn dijkstra_row(g: &SparseMatrix, src: usize, out: &mut [f64]) {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    out.fill(f64::INFINITY);
    out[src] = 0.0;
    // non-negative f64 bit patterns order like the values themselves
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((0u64, src)));
    while let Some(Reverse((dbits, u))) = heap.pop() {
        let du = f64::from_bits(dbits);
        if du > out[u] {
            continue;
        }
        let (cols, vals) = g.row(u);
        for (&v, &w) in cols.iter().zip(vals) {
            let nd = du + w;
            if nd < out[v] {
                out[v] = nd;
                heap.push(Reverse((nd.to_bits(), v)));
            }
        }
    }
}

/// Shortest-path distance matrix of a non-negatively weighted graph, one
/// Dijkstra per source. Sources are independent, so rows may be filled in
/// parallel without affecting the result.
pub fn geodesic_distances(g: &SparseMatrix) -> Result<DenseMatrix, ManifoldError> {
    if let Some((r, c, v)) = g.iter().find(|&(_, _, v)| v < 0.0) {
        return Err(ManifoldError::Invalid(format!(
            "negative edge weight {v} on ({r}, {c})"
        )));
    }
    let n = g.rows();
    let mut out = DenseMatrix::zeros(n, n);
    out.values_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(src, row)| dijkstra_row(g, src, row));
    if !out.all_finite() {
        return Err(ManifoldError::Invalid(
            "graph is disconnected; repair connectivity before computing geodesics".into(),
        ));
    }
    Ok(out)
}

// ===== spectral machinery ===============================================

/// Double-centered Gram matrix of a distance matrix:
/// `B = -1/2 · J (D∘D) J` with `J = I - 11ᵀ/n`. Computed entrywise so the
/// result is bit-exactly symmetric.
pub fn mds_gram(d: &DenseMatrix) -> DenseMatrix {
    let n = d.rows();
    let mut sq = d.clone();
    for v in sq.values_mut() {
        *v *= *v;
    }
    let mut row_mean = vec![0.0; n];
    for i in 0..n {
        row_mean[i] = sq.row(i).iter().sum::<f64>() / n as f64;
    }
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let t = row_mean[i] + row_mean[j];
            b.set(i, j, -0.5 * ((sq.get(i, j) - t) + grand));
        }
    }
    b
}

fn orthonormalize(q: &mut DenseMatrix, rng: &mut Rng) {
    let (n, cols) = q.shape();
    for c in 0..cols {
        let mut col: Vec<f64> = (0..n).map(|r| q.get(r, c)).collect();
        let before: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        // two rounds of projection keep orthogonality near machine precision
        for _ in 0..2 {
            for p in 0..c {
                let dot: f64 = (0..n).map(|r| col[r] * q.get(r, p)).sum();
                for r in 0..n {
                    col[r] -= dot * q.get(r, p);
                }
            }
        }
        let mut norm: f64 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= before * 1e-12 + 1e-300 {
            // degenerate direction: replace with a fresh deterministic draw
            for v in col.iter_mut() {
                *v = rng.normal();
            }
            for _ in 0..2 {
                for p in 0..c {
                    let dot: f64 = (0..n).map(|r| col[r] * q.get(r, p)).sum();
                    for r in 0..n {
                        col[r] -= dot * q.get(r, p);
                    }
                }
            }
            norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        for r in 0..n {
            q.set(r, c, col[r] / norm);
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix. Returns
/// eigenvalues (descending) and the matching orthonormal columns.
fn jacobi_small(t: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let n = t.rows();
    let mut a = t.clone();
    let mut v = DenseMatrix::identity(n);
    let scale = t.frobenius_norm().max(1e-300);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t_val = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t_val * t_val + 1.0).sqrt();
                let s = t_val * c;
                for r in 0..n {
                    let arp = a.get(r, p);
                    let arq = a.get(r, q);
                    a.set(r, p, c * arp - s * arq);
                    a.set(r, q, s * arp + c * arq);
                }
                for cidx in 0..n {
                    let apc = a.get(p, cidx);
                    let aqc = a.get(q, cidx);
                    a.set(p, cidx, c * apc - s * aqc);
                    a.set(q, cidx, s * apc + c * aqc);
                }
                for r in 0..n {
                    let vrp = v.get(r, p);
                    let vrq = v.get(r, q);
                    v.set(r, p, c * vrp - s * vrq);
                    v.set(r, q, s * vrp + c * vrq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new, v.get(r, old));
        }
    }
    (values, vectors)
}

/// Dominant-eigenvalue estimate (signed, by Rayleigh quotient) via plain
/// power iteration; used only to pick a spectral shift.
fn dominant_estimate(b: &DenseMatrix, shift: f64, rng: &mut Rng) -> f64 {
    let n = b.rows();
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let mut rayleigh = 0.0;
    for _ in 0..80 {
        let vm = DenseMatrix::from_vec(n, 1, v.clone()).unwrap();
        let mut w = matmul(b, &vm).unwrap();
        for (wi, vi) in w.values_mut().iter_mut().zip(&v) {
            *wi += shift * vi;
        }
        let norm: f64 = w.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-300 {
            return 0.0;
        }
        rayleigh = w.values().iter().zip(&v).map(|(a, b)| a * b).sum();
        v = w.values().iter().map(|x| x / norm).collect();
    }
    rayleigh
}

/// Top-`k` eigenpairs of a symmetric matrix by algebraic value, via shifted
/// block power iteration with Rayleigh–Ritz extraction. Each returned pair
/// satisfies `‖Bv - λv‖ ≤ tol·‖B‖_F`; vectors are orthonormal and
/// sign-fixed so the largest-magnitude entry is positive.
pub fn eig_topk(
    b: &DenseMatrix,
    k: usize,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, DenseMatrix), ManifoldError> {
    let n = b.rows();
    if n != b.cols() {
        return Err(ManifoldError::Invalid(format!(
            "eigensolver needs a square matrix, got {}x{}",
            n,
            b.cols()
        )));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (b.get(i, j) - b.get(j, i)).abs() > 1e-9 {
                return Err(ManifoldError::Invalid(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let k = k.min(n);
    if k == 0 {
        return Ok((Vec::new(), DenseMatrix::zeros(n, 0)));
    }
    let bnorm = b.frobenius_norm();
    if bnorm == 0.0 {
        // zero matrix: every unit vector is an eigenvector for λ = 0
        let mut vectors = DenseMatrix::zeros(n, k);
        for c in 0..k {
            vectors.set(c, c, 1.0);
        }
        return Ok((vec![0.0; k], vectors));
    }

    let mut rng = Rng::new(EIG_SEED);
    // shift so every eigenvalue of B + sI is nonnegative; ordering by
    // algebraic value is preserved and residuals are unchanged
    let dominant = dominant_estimate(b, 0.0, &mut rng);
    let lambda_min = if dominant < 0.0 {
        dominant
    } else {
        dominant + dominant_estimate(b, -dominant, &mut rng)
    };
    let s = if lambda_min < 0.0 {
        1.05 * lambda_min.abs()
    } else {
        0.0
    };

    let block = (k + OVERSAMPLE).min(n);
    let mut q = DenseMatrix::zeros(n, block);
    for v in q.values_mut() {
        *v = rng.normal();
    }
    orthonormalize(&mut q, &mut rng);

    let mut worst = f64::INFINITY;
    for _iter in 0..max_iter {
        // y = (B + sI)·q
        let mut y = matmul(b, &q).unwrap();
        if s != 0.0 {
            for (yv, qv) in y.values_mut().iter_mut().zip(q.values()) {
                *yv += s * qv;
            }
        }
        let mut t = matmul_tn(&q, &y).unwrap();
        for i in 0..block {
            for j in (i + 1)..block {
                let avg = 0.5 * (t.get(i, j) + t.get(j, i));
                t.set(i, j, avg);
                t.set(j, i, avg);
            }
        }
        let (theta, v_small) = jacobi_small(&t);
        let ritz = matmul(&q, &v_small).unwrap();
        let applied = matmul(&y, &v_small).unwrap();
        // ‖(B+sI)v - θv‖ = ‖Bv - λv‖ exactly, with λ = θ - s
        worst = 0.0;
        for c in 0..k {
            let mut sq = 0.0;
            for r in 0..n {
                let resid = applied.get(r, c) - theta[c] * ritz.get(r, c);
                sq += resid * resid;
            }
            worst = worst.max(sq.sqrt());
        }
        if worst <= tol * bnorm {
            let values: Vec<f64> = theta.iter().take(k).map(|&th| th - s).collect();
            let mut vectors = DenseMatrix::zeros(n, k);
            for c in 0..k {
                // sign rule: largest-magnitude entry positive. Magnitudes
                // within a relative 1e-12 count as tied and resolve toward
                // the smaller row index, so exact-tie vectors like
                // (1, -1)/√2 aren't at the mercy of rounding noise.
                let max_mag = (0..n)
                    .map(|r| ritz.get(r, c).abs())
                    .fold(0.0f64, f64::max);
                let arg = (0..n)
                    .find(|&r| ritz.get(r, c).abs() >= max_mag * (1.0 - 1e-12))
                    .unwrap_or(0);
                let flip = if ritz.get(arg, c) < 0.0 { -1.0 } else { 1.0 };
                for r in 0..n {
                    vectors.set(r, c, flip * ritz.get(r, c));
                }
            }
            return Ok((values, vectors));
        }
        q = applied;
        orthonormalize(&mut q, &mut rng);
    }
    Err(ManifoldError::NonConverged {
        residual: worst,
        needed: tol * bnorm,
        iters: max_iter,
    })
}

/// Classical MDS embedding of a distance matrix: top-`d_prime` eigenpairs
/// of the double-centered Gram matrix, columns scaled by `√max(λ, 0)` and
/// ordered by descending eigenvalue. Also returns the eigenvalues.
pub fn classical_mds(
    d: &DenseMatrix,
    d_prime: usize,
    tol: f64,
    max_iter: usize,
) -> Result<(DenseMatrix, Vec<f64>), ManifoldError> {
    if d_prime == 0 {
        return Err(ManifoldError::Invalid(
            "embedding dimension must be at least 1".into(),
        ));
    }
    let b = mds_gram(d);
    let k = d_prime.min(d.rows());
    let (values, vectors) = eig_topk(&b, k, tol, max_iter)?;
    let n = d.rows();
    let mut x = DenseMatrix::zeros(n, k);
    for c in 0..k {
        let scale = values[c].max(0.0).sqrt();
        for r in 0..n {
            x.set(r, c, vectors.get(r, c) * scale);
        }
    }
    Ok((x, values))
}

// ===== latent adjacency =================================================

/// `A' = row_softmax(X'·X'ᵀ / √d')`: dense similarity adjacency over the
/// embedded coordinates. Every row sums to 1.
pub fn latent_adjacency(x_prime: &DenseMatrix) -> DenseMatrix {
    let scale = 1.0 / (x_prime.cols().max(1) as f64).sqrt();
    let mut scores = matmul_nt(x_prime, x_prime).unwrap();
    for v in scores.values_mut() {
        *v *= scale;
    }
    row_softmax_values(&scores)
}

/// Sparse variant for large graphs: keeps each row's `m` largest scores
/// (ties toward smaller indices), softmaxes over the kept set, and stores
/// the result as CSR. Rows still sum to 1. The primary pipeline stores A'
/// dense; this bounds memory when |V| is large.
pub fn latent_adjacency_topm(x_prime: &DenseMatrix, m: usize) -> SparseMatrix {
    let n = x_prime.rows();
    let scale = 1.0 / (x_prime.cols().max(1) as f64).sqrt();
    let m = m.max(1).min(n);
    let mut triplets = Vec::with_capacity(n * m);
    for i in 0..n {
        let xi = x_prime.row(i);
        let mut scores: Vec<(usize, f64)> = (0..n)
            .map(|j| {
                let dot: f64 = xi.iter().zip(x_prime.row(j)).map(|(a, b)| a * b).sum();
                (j, dot * scale)
            })
            .collect();
        scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scores.truncate(m);
        scores.sort_by_key(|&(j, _)| j);
        let raw: Vec<f64> = scores.iter().map(|&(_, s)| s).collect();
        let soft = row_softmax_values(&DenseMatrix::from_vec(1, raw.len(), raw).unwrap());
        for ((j, _), &p) in scores.into_iter().zip(soft.row(0)) {
            triplets.push((i, j, p));
        }
    }
    SparseMatrix::from_triplets(n, n, &triplets).expect("indices in range by construction")
}

// ===== orchestration and cache ==========================================

fn cache_key(features: &DenseMatrix, params: &IsomapParams) -> String {
    let mut h = Sha256::new();
    h.update((features.rows() as u64).to_le_bytes());
    h.update((features.cols() as u64).to_le_bytes());
    for &v in features.values() {
        h.update(v.to_le_bytes());
    }
    h.update((params.isomap_k as u64).to_le_bytes());
    h.update((params.d_prime as u64).to_le_bytes());
    h.update(params.tol.to_le_bytes());
    let digest = h.finalize();
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

fn atomic_write(path: &Path, write: impl FnOnce(&Path) -> Result<(), GraphError>) -> Result<(), GraphError> {
    let tmp = path.with_extension("tmp");
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Rounds every entry through f32. Fresh embeddings pass through this
/// before use so they match a cache reload bit-for-bit.
fn round_to_f32(m: &mut DenseMatrix) {
    for v in m.values_mut() {
        *v = *v as f32 as f64;
    }
}

/// Runs the full Isomap pipeline over node features and assembles the
/// latent graph. With a cache directory set, coordinates are reused across
/// runs keyed by a content hash of the features and hyperparameters; cache
/// hits and misses yield bit-identical results.
pub fn build_latent_graph(
    features: &DenseMatrix,
    params: &IsomapParams,
) -> Result<LatentGraph, ManifoldError> {
    let n = features.rows();
    if n < 2 {
        return Err(ManifoldError::Invalid(format!(
            "need at least 2 nodes to build a latent graph, got {n}"
        )));
    }
    if !features.all_finite() {
        return Err(ManifoldError::Invalid("features contain non-finite values".into()));
    }

    let key = params.cache_dir.as_ref().map(|dir| {
        let key = cache_key(features, params);
        (
            dir.join(format!("muse_iso_{key}.xprime.f32")),
            dir.join(format!("muse_iso_{key}.aprime.f32")),
            dir.join(format!("muse_iso_{key}.json")),
        )
    });

    if let Some((x_path, _, meta_path)) = &key {
        if x_path.exists() && meta_path.exists() {
            let x_prime = read_f32_matrix(x_path)?;
            let meta = fs::read_to_string(meta_path).ok();
            let summary = meta.and_then(|text| serde_json::from_str::<IsomapSummary>(&text).ok());
            if let Some(mut summary) = summary {
                if x_prime.rows() == n {
                    summary.cache_hit = true;
                    log::info!(
                        "latent coordinates loaded from cache ({})",
                        x_path.display()
                    );
                    let adjacency = latent_adjacency(&x_prime);
                    let d_prime = x_prime.cols();
                    return Ok(LatentGraph {
                        x_prime,
                        adjacency,
                        d_prime,
                        isomap_k: params.isomap_k,
                        summary,
                    });
                }
            }
            log::warn!("ignoring unreadable latent cache at {}", x_path.display());
        }
    }

    let euclid = pairwise_euclidean(features);
    let knn = knn_graph(&euclid, params.isomap_k)?;
    let components_before_repair = component_count(&knn);
    let (connected, repair_edges_added) = connect_components(&knn, &euclid)?;
    if repair_edges_added > 0 {
        log::info!(
            "manifold graph had {components_before_repair} components; added {repair_edges_added} repair edge(s)"
        );
    }
    let geo = geodesic_distances(&connected)?;
    let (mut x_prime, eigenvalues) =
        classical_mds(&geo, params.d_prime.min(n), params.tol, params.max_iter)?;
    round_to_f32(&mut x_prime);

    let summary = IsomapSummary {
        components_before_repair,
        repair_edges_added,
        eigenvalues,
        cache_hit: false,
    };
    let adjacency = latent_adjacency(&x_prime);

    if let Some((x_path, a_path, meta_path)) = &key {
        atomic_write(x_path, |p| write_f32_matrix(p, &x_prime))?;
        atomic_write(a_path, |p| write_f32_matrix(p, &adjacency))?;
        let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
        atomic_write(meta_path, |p| {
            fs::write(p, &body).map_err(|source| GraphError::Io {
                path: p.to_path_buf(),
                source,
            })
        })?;
    }

    let d_prime = x_prime.cols();
    Ok(LatentGraph {
        x_prime,
        adjacency,
        d_prime,
        isomap_k: params.isomap_k,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_points(points: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(points).unwrap()
    }

    #[test]
    fn pairwise_one_dimensional_pair() {
        let d = pairwise_euclidean(&from_points(&[&[0.0], &[3.0]]));
        assert_eq!(d.get(0, 1), 3.0);
        assert_eq!(d.get(1, 0), 3.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn pairwise_identical_rows_are_zero() {
        let d = pairwise_euclidean(&from_points(&[&[1.0, 2.0], &[1.0, 2.0]]));
        assert_eq!(d.get(0, 1), 0.0);
    }

    #[test]
    fn pairwise_unit_square() {
        let d = pairwise_euclidean(&from_points(&[
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[1.0, 1.0],
            &[0.0, 1.0],
        ]));
        assert!((d.get(0, 1) - 1.0).abs() < 1e-15);
        assert!((d.get(0, 2) - 2.0_f64.sqrt()).abs() < 1e-15);
        assert!((d.get(1, 3) - 2.0_f64.sqrt()).abs() < 1e-15);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(d.get(i, j).to_bits(), d.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn knn_collinear_three_points() {
        let d = pairwise_euclidean(&from_points(&[&[0.0], &[1.0], &[10.0]]));
        let g = knn_graph(&d, 1).unwrap();
        assert_eq!(g.get(0, 1), 1.0);
        assert_eq!(g.get(1, 0), 1.0);
        assert_eq!(g.get(1, 2), 9.0);
        assert_eq!(g.get(2, 1), 9.0);
        assert_eq!(g.get(0, 2), 0.0);
        assert_eq!(g.nnz(), 4);
    }

    #[test]
    fn knn_saturation_is_complete() {
        let d = pairwise_euclidean(&from_points(&[&[0.0], &[1.0], &[5.0], &[9.0]]));
        let g = knn_graph(&d, 3).unwrap();
        assert_eq!(g.nnz(), 12);
    }

    #[test]
    fn knn_duplicate_points_keep_zero_weight_edge() {
        let d = pairwise_euclidean(&from_points(&[&[2.0], &[2.0], &[5.0]]));
        let g = knn_graph(&d, 1).unwrap();
        let (cols, vals) = g.row(0);
        assert!(cols.contains(&1));
        assert_eq!(vals[cols.iter().position(|&c| c == 1).unwrap()], 0.0);
    }

    #[test]
    fn knn_tie_breaks_toward_smaller_index() {
        // node 1 is equidistant from 0 and 2; it must pick 0
        let d = pairwise_euclidean(&from_points(&[&[0.0], &[1.0], &[2.0]]));
        let g = knn_graph(&d, 1).unwrap();
        assert!(g.get(1, 0) > 0.0 || g.get(0, 1) > 0.0);
        // 2's nearest is 1, so 1-2 exists via symmetrization regardless
        assert_eq!(g.get(0, 2), 0.0);
        assert_eq!(g.get(2, 0), 0.0);
    }

    #[test]
    fn repair_leaves_connected_graph_unchanged() {
        let d = pairwise_euclidean(&from_points(&[&[0.0], &[1.0], &[2.0]]));
        let g = knn_graph(&d, 2).unwrap();
        let (repaired, added) = connect_components(&g, &d).unwrap();
        assert_eq!(added, 0);
        assert_eq!(repaired, g);
    }

    #[test]
    fn repair_joins_two_singletons() {
        let d = from_points(&[&[0.0, 4.0], &[4.0, 0.0]]);
        let empty = SparseMatrix::from_triplets(2, 2, &[]).unwrap();
        let (repaired, added) = connect_components(&empty, &d).unwrap();
        assert_eq!(added, 1);
        assert_eq!(repaired.get(0, 1), 4.0);
        assert_eq!(repaired.get(1, 0), 4.0);
    }

    #[test]
    fn repair_three_clusters_adds_two_edges() {
        let points = from_points(&[&[0.0], &[0.1], &[10.0], &[10.1], &[30.0], &[30.1]]);
        let d = pairwise_euclidean(&points);
        let g = knn_graph(&d, 1).unwrap();
        assert_eq!(component_count(&g), 3);
        let (repaired, added) = connect_components(&g, &d).unwrap();
        assert_eq!(added, 2);
        assert_eq!(component_count(&repaired), 1);
        // nearest cross-cluster gaps are 1-2 (9.9) then 3-4 (19.9)
        assert_eq!(repaired.get(1, 2), d.get(1, 2));
        assert_eq!(repaired.get(3, 4), d.get(3, 4));
    }

    #[test]
    fn geodesic_path_graph() {
        let triplets = [
            (0, 1, 1.0),
            (1, 0, 1.0),
            (1, 2, 1.0),
            (2, 1, 1.0),
        ];
        let g = SparseMatrix::from_triplets(3, 3, &triplets).unwrap();
        let d = geodesic_distances(&g).unwrap();
        assert_eq!(d.get(0, 2), 2.0);
        assert_eq!(d.get(2, 0), 2.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn geodesic_metric_input_is_fixed_point() {
        // complete graph whose direct edges already satisfy the triangle
        // inequality: shortest paths equal the input weights
        let points = from_points(&[&[0.0], &[1.0], &[3.0]]);
        let d = pairwise_euclidean(&points);
        let g = knn_graph(&d, 2).unwrap();
        let geo = geodesic_distances(&g).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((geo.get(i, j) - d.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn geodesic_rejects_negative_weights() {
        let g = SparseMatrix::from_triplets(2, 2, &[(0, 1, -1.0), (1, 0, -1.0)]).unwrap();
        assert!(geodesic_distances(&g).is_err());
    }

    #[test]
    fn geodesic_rejects_disconnected() {
        let g = SparseMatrix::from_triplets(3, 3, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert!(geodesic_distances(&g).is_err());
    }

    #[test]
    fn eig_diagonal_matrix() {
        let b = DenseMatrix::from_rows(&[
            &[3.0, 0.0, 0.0],
            &[0.0, 2.0, 0.0],
            &[0.0, 0.0, 1.0],
        ])
        .unwrap();
        let (values, vectors) = eig_topk(&b, 2, 1e-10, 2000).unwrap();
        assert!((values[0] - 3.0).abs() < 1e-8);
        assert!((values[1] - 2.0).abs() < 1e-8);
        assert!(vectors.get(0, 0).abs() > 0.999);
        assert!(vectors.get(1, 1).abs() > 0.999);
        assert!(vectors.get(0, 0) > 0.0, "sign rule");
    }

    #[test]
    fn eig_rank_one() {
        let v = [1.0, 2.0, 2.0];
        let mut b = DenseMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                b.set(i, j, v[i] * v[j]);
            }
        }
        let (values, vectors) = eig_topk(&b, 1, 1e-10, 2000).unwrap();
        assert!((values[0] - 9.0).abs() < 1e-7); // ‖v‖² = 9
        let norm = 3.0;
        for i in 0..3 {
            assert!((vectors.get(i, 0) - v[i] / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn eig_with_negative_eigenvalues() {
        // eigenvalues 1 and -3: algebraic top-1 must be 1, not -3
        let b = DenseMatrix::from_rows(&[&[-1.0, 2.0], &[2.0, -1.0]]).unwrap();
        let (values, vectors) = eig_topk(&b, 1, 1e-10, 2000).unwrap();
        assert!((values[0] - 1.0).abs() < 1e-8);
        let inv_sqrt2 = 0.5_f64.sqrt();
        assert!((vectors.get(0, 0) - inv_sqrt2).abs() < 1e-6);
        assert!((vectors.get(1, 0) - inv_sqrt2).abs() < 1e-6);
    }

    #[test]
    fn eig_orthogonality() {
        let mut rng = Rng::new(99);
        let n = 7;
        let mut b = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.normal();
                b.set(i, j, v);
                b.set(j, i, v);
            }
        }
        let (_, vectors) = eig_topk(&b, 4, 1e-9, 5000).unwrap();
        for a in 0..4 {
            for c in 0..4 {
                let dot: f64 = (0..n).map(|r| vectors.get(r, a) * vectors.get(r, c)).sum();
                let expect = if a == c { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-6, "columns {a},{c}: {dot}");
            }
        }
    }

    #[test]
    fn eig_zero_matrix() {
        let (values, vectors) = eig_topk(&DenseMatrix::zeros(3, 3), 2, 1e-8, 10).unwrap();
        assert_eq!(values, vec![0.0, 0.0]);
        assert_eq!(vectors.get(0, 0), 1.0);
        assert_eq!(vectors.get(1, 1), 1.0);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let b = DenseMatrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        assert!(eig_topk(&b, 1, 1e-8, 10).is_err());
    }

    #[test]
    fn mds_two_points() {
        let d = DenseMatrix::from_rows(&[&[0.0, 2.0], &[2.0, 0.0]]).unwrap();
        let b = mds_gram(&d);
        assert!((b.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((b.get(0, 1) + 1.0).abs() < 1e-12);
        let (x, values) = classical_mds(&d, 1, 1e-10, 1000).unwrap();
        assert!((values[0] - 2.0).abs() < 1e-8);
        // sign rule puts the positive coordinate first
        assert!((x.get(0, 0) - 1.0).abs() < 1e-6);
        assert!((x.get(1, 0) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn mds_all_equal_points_embed_at_zero() {
        let d = DenseMatrix::zeros(4, 4);
        let (x, _) = classical_mds(&d, 2, 1e-8, 100).unwrap();
        for &v in x.values() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn mds_roundtrip_planar_points() {
        let points = from_points(&[&[0.0, 0.0], &[2.0, 0.0], &[2.0, 3.0], &[-1.0, 1.0], &[0.5, -2.0]]);
        let d = pairwise_euclidean(&points);
        let (x, _) = classical_mds(&d, 2, 1e-12, 5000).unwrap();
        let back = pairwise_euclidean(&x);
        for i in 0..5 {
            for j in 0..5 {
                assert!(
                    (back.get(i, j) - d.get(i, j)).abs() < 1e-6,
                    "pair ({i},{j}): {} vs {}",
                    back.get(i, j),
                    d.get(i, j)
                );
            }
        }
    }

    #[test]
    fn latent_adjacency_identical_rows() {
        let a = latent_adjacency(&from_points(&[&[1.0], &[1.0]]));
        for r in 0..2 {
            for c in 0..2 {
                assert!((a.get(r, c) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn latent_adjacency_opposed_rows() {
        let a = latent_adjacency(&from_points(&[&[1.0], &[-1.0]]));
        let expect = 1f64.exp() / (1f64.exp() + (-1f64).exp());
        assert!((a.get(0, 0) - expect).abs() < 1e-12);
        assert!((a.get(1, 1) - expect).abs() < 1e-12);
        let sum0: f64 = a.row(0).iter().sum();
        assert!((sum0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn latent_adjacency_permutation_equivariance() {
        let x = from_points(&[&[0.3, 1.0], &[-0.5, 0.2], &[2.0, -1.0]]);
        let a = latent_adjacency(&x);
        // swap rows 0 and 2
        let xp = from_points(&[&[2.0, -1.0], &[-0.5, 0.2], &[0.3, 1.0]]);
        let ap = latent_adjacency(&xp);
        let perm = [2usize, 1, 0];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.get(i, j).to_bits(), ap.get(perm[i], perm[j]).to_bits());
            }
        }
    }

    #[test]
    fn topm_with_full_budget_matches_dense() {
        let x = from_points(&[&[0.3, 1.0], &[-0.5, 0.2], &[2.0, -1.0]]);
        let dense = latent_adjacency(&x);
        let sparse = latent_adjacency_topm(&x, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert!((dense.get(i, j) - sparse.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn topm_rows_sum_to_one() {
        let x = from_points(&[&[0.3, 1.0], &[-0.5, 0.2], &[2.0, -1.0], &[0.0, 0.7]]);
        let sparse = latent_adjacency_topm(&x, 2);
        for i in 0..4 {
            let (cols, vals) = sparse.row(i);
            assert_eq!(cols.len(), 2);
            let sum: f64 = vals.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn build_duplicate_nodes_share_rows() {
        let mut points = Vec::new();
        for i in 0..8 {
            points.push(vec![i as f64, (i * i % 5) as f64]);
        }
        points.push(points[3].clone()); // node 8 duplicates node 3
        let rows: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let features = from_points(&rows);
        let params = IsomapParams {
            isomap_k: 2,
            d_prime: 2,
            tol: 1e-10,
            max_iter: 5000,
            cache_dir: None,
        };
        let lg = build_latent_graph(&features, &params).unwrap();
        lg.validate().unwrap();
        for c in 0..lg.x_prime.cols() {
            assert!(
                (lg.x_prime.get(3, c) - lg.x_prime.get(8, c)).abs() < 1e-5,
                "column {c}"
            );
        }
        for j in 0..9 {
            assert!((lg.adjacency.get(3, j) - lg.adjacency.get(8, j)).abs() < 1e-5);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let features = from_points(&[
            &[0.0, 1.0],
            &[1.0, 0.5],
            &[2.0, 0.2],
            &[3.0, 1.5],
            &[4.0, 0.9],
        ]);
        let params = IsomapParams {
            isomap_k: 2,
            d_prime: 2,
            tol: 1e-9,
            max_iter: 2000,
            cache_dir: None,
        };
        let a = build_latent_graph(&features, &params).unwrap();
        let b = build_latent_graph(&features, &params).unwrap();
        assert_eq!(a.x_prime, b.x_prime);
        assert_eq!(a.adjacency, b.adjacency);
    }

    #[test]
    fn cache_hit_is_bit_identical_to_miss() {
        let dir = tempfile::tempdir().unwrap();
        let features = from_points(&[
            &[0.0, 1.0],
            &[1.0, 0.5],
            &[2.0, 0.2],
            &[3.0, 1.5],
            &[4.0, 0.9],
            &[5.0, 0.1],
        ]);
        let mut params = IsomapParams {
            isomap_k: 2,
            d_prime: 2,
            tol: 1e-9,
            max_iter: 2000,
            cache_dir: Some(dir.path().to_path_buf()),
        };
        let fresh = build_latent_graph(&features, &params).unwrap();
        assert!(!fresh.summary.cache_hit);
        let cached = build_latent_graph(&features, &params).unwrap();
        assert!(cached.summary.cache_hit);
        assert_eq!(fresh.x_prime, cached.x_prime);
        assert_eq!(fresh.adjacency, cached.adjacency);
        // and disabling the cache entirely still gives the same bits
        params.cache_dir = None;
        let uncached = build_latent_graph(&features, &params).unwrap();
        assert_eq!(fresh.x_prime, uncached.x_prime);
        assert_eq!(fresh.adjacency, uncached.adjacency);
    }

    #[test]
    fn cache_distinguishes_hyperparameters() {
        let features = from_points(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let p1 = IsomapParams {
            isomap_k: 1,
            d_prime: 1,
            tol: 1e-9,
            max_iter: 2000,
            cache_dir: None,
        };
        let mut p2 = p1.clone();
        p2.isomap_k = 2;
        assert_ne!(cache_key(&features, &p1), cache_key(&features, &p2));
        let mut p3 = p1.clone();
        p3.d_prime = 2;
        assert_ne!(cache_key(&features, &p1), cache_key(&features, &p3));
    }

    #[test]
    fn geodesic_dominates_euclidean() {
        let features = from_points(&[
            &[0.0, 0.0],
            &[1.0, 0.3],
            &[2.0, -0.2],
            &[3.0, 0.4],
            &[4.0, 0.0],
        ]);
        let euclid = pairwise_euclidean(&features);
        let g = knn_graph(&euclid, 2).unwrap();
        let (connected, _) = connect_components(&g, &euclid).unwrap();
        let geo = geodesic_distances(&connected).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!(geo.get(i, j) >= euclid.get(i, j) - 1e-9);
            }
        }
    }
}
