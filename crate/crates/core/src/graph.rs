//! Dataset loading, propagation operators, and label splits.
//!
//! A dataset directory holds:
//!
//! * `edges.tsv` — one `src\tdst` pair per line, 0-based, undirected;
//!   duplicates collapse, self-loops are dropped with a warning
//! * `labels.tsv` — one `node\tclass` per line covering every node
//! * `features.csv` (comma-separated decimals) or `features.f32` (8-byte
//!   header of two little-endian u32 counts `rows, cols`, then row-major
//!   little-endian f32 values, promoted to f64). When both exist the CSV
//!   wins, because it round-trips f64 exactly.
//! * `split.json` — optional; either `{"train": [...], "val": [...],
//!   "test": [...]}` or `{"labels_per_class": n}`
//!
//! Windows line endings are normalized silently. `save_dataset` writes the
//! same layout back (features as CSV, one undirected edge per line with the
//! smaller endpoint first), and `load(save(load(dir)))` reproduces features
//! and adjacency bit-for-bit.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DenseMatrix, Rng, SparseMatrix};

/// Errors for dataset I/O and validation; the CLI maps these to exit code 3.
#[derive(Error, Debug)]
pub enum GraphError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid dataset: {0}")]
    Validation(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Operational split produced by [`sample_labels`]: pairwise disjoint node
/// lists with a non-empty train set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// What `split.json` provided, before any sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitSpec {
    /// Explicit membership lists; `train` is the sampling pool.
    Explicit(Split),
    /// Sample this many labels per class from all nodes.
    PerClass(usize),
    /// No split file; sample from all nodes, test on the rest.
    Unspecified,
}

/// An attributed, labeled, undirected graph.
#[derive(Clone, Debug)]
pub struct GraphDataset {
    /// Symmetric unweighted adjacency without self-loops.
    pub adjacency: SparseMatrix,
    /// One row of features per node.
    pub features: DenseMatrix,
    /// Class id per node, each in `0..num_classes`.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split_spec: SplitSpec,
}

impl GraphDataset {
    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

// ===== f32 container ====================================================

/// Reads the binary matrix container: u32 LE rows, u32 LE cols, then
/// row-major f32 LE values promoted to f64.
pub fn read_f32_matrix(path: &Path) -> Result<DenseMatrix, GraphError> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut header = [0u8; 8];
    file.read_exact(&mut header).map_err(io_err(path))?;
    let rows = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(io_err(path))?;
    if raw.len() != rows * cols * 4 {
        return Err(GraphError::Validation(format!(
            "{}: header promises {}x{} values but payload holds {} bytes",
            path.display(),
            rows,
            cols,
            raw.len()
        )));
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    DenseMatrix::from_vec(rows, cols, values)
        .map_err(|e| GraphError::Validation(e.to_string()))
}

/// Writes the binary matrix container; values are truncated to f32.
pub fn write_f32_matrix(path: &Path, m: &DenseMatrix) -> Result<(), GraphError> {
    let mut buf = Vec::with_capacity(8 + m.values().len() * 4);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

// ===== loading ==========================================================

fn read_text(path: &Path) -> Result<String, GraphError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(raw.replace("\r\n", "\n"))
}

fn parse_pair_lines(
    path: &Path,
    what: &str,
) -> Result<Vec<(usize, usize, usize)>, GraphError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let parse = |field: Option<&str>| -> Result<usize, GraphError> {
            field
                .ok_or(())
                .and_then(|f| f.trim().parse::<usize>().map_err(|_| ()))
                .map_err(|_| GraphError::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    reason: format!("expected two tab-separated integers ({what})"),
                })
        };
        let a = parse(it.next())?;
        let b = parse(it.next())?;
        if it.next().is_some() {
            return Err(GraphError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!("trailing fields ({what})"),
            });
        }
        out.push((a, b, idx + 1));
    }
    Ok(out)
}

fn load_features(dir: &Path) -> Result<DenseMatrix, GraphError> {
    let csv = dir.join("features.csv");
    let bin = dir.join("features.f32");
    if csv.exists() {
        let text = read_text(&csv)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| GraphError::Parse {
                    path: csv.clone(),
                    line: idx + 1,
                    reason: format!("non-numeric feature entry {field:?}"),
                })?;
                if !v.is_finite() {
                    return Err(GraphError::Parse {
                        path: csv.clone(),
                        line: idx + 1,
                        reason: "non-finite feature entry".into(),
                    });
                }
                row.push(v);
            }
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(GraphError::Parse {
                        path: csv.clone(),
                        line: idx + 1,
                        reason: format!(
                            "row has {} entries, expected {}",
                            row.len(),
                            first.len()
                        ),
                    });
                }
            }
            rows.push(row);
        }
        let cols = rows.first().map_or(0, Vec::len);
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        DenseMatrix::from_vec(values.len() / cols.max(1), cols, values)
            .map_err(|e| GraphError::Validation(e.to_string()))
    } else if bin.exists() {
        read_f32_matrix(&bin)
    } else {
        Err(GraphError::Validation(format!(
            "{}: neither features.csv nor features.f32 found",
            dir.display()
        )))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SplitFile {
    PerClass {
        labels_per_class: usize,
    },
    Explicit {
        train: Vec<usize>,
        #[serde(default)]
        val: Vec<usize>,
        #[serde(default)]
        test: Vec<usize>,
    },
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<GraphDataset, GraphError> {
    let features = load_features(dir)?;
    let n = features.rows();

    // labels: every node exactly once
    let labels_path = dir.join("labels.tsv");
    let mut labels = vec![usize::MAX; n];
    for (node, class, line) in parse_pair_lines(&labels_path, "node and class")? {
        if node >= n {
            return Err(GraphError::Parse {
                path: labels_path.clone(),
                line,
                reason: format!("node {node} out of range for {n} feature rows"),
            });
        }
        if labels[node] != usize::MAX {
            return Err(GraphError::Parse {
                path: labels_path.clone(),
                line,
                reason: format!("duplicate label for node {node}"),
            });
        }
        labels[node] = class;
    }
    if let Some(missing) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(GraphError::Validation(format!(
            "node {missing} has no label"
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);

    // edges: undirected, deduplicated, self-loops dropped
    let edges_path = dir.join("edges.tsv");
    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut self_loops = 0usize;
    for (src, dst, line) in parse_pair_lines(&edges_path, "src and dst")? {
        if src >= n || dst >= n {
            return Err(GraphError::Parse {
                path: edges_path.clone(),
                line,
                reason: format!("edge ({src}, {dst}) references a node >= {n}"),
            });
        }
        if src == dst {
            self_loops += 1;
            continue;
        }
        pairs.insert((src.min(dst), src.max(dst)));
    }
    if self_loops > 0 {
        log::warn!("dropped {self_loops} self-loop edge(s) from {}", edges_path.display());
    }
    let mut triplets = Vec::with_capacity(pairs.len() * 2);
    for &(a, b) in &pairs {
        triplets.push((a, b, 1.0));
        triplets.push((b, a, 1.0));
    }
    let adjacency = SparseMatrix::from_triplets(n, n, &triplets)
        .map_err(|e| GraphError::Validation(e.to_string()))?;

    // split.json is optional
    let split_path = dir.join("split.json");
    let split_spec = if split_path.exists() {
        let text = read_text(&split_path)?;
        let parsed: SplitFile = serde_json::from_str(&text).map_err(|e| GraphError::Parse {
            path: split_path.clone(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        match parsed {
            SplitFile::PerClass { labels_per_class } => SplitSpec::PerClass(labels_per_class),
            SplitFile::Explicit { train, val, test } => {
                let split = Split { train, val, test };
                validate_split(&split, n)?;
                SplitSpec::Explicit(split)
            }
        }
    } else {
        SplitSpec::Unspecified
    };

    Ok(GraphDataset {
        adjacency,
        features,
        labels,
        num_classes,
        split_spec,
    })
}

fn validate_split(split: &Split, n: usize) -> Result<(), GraphError> {
    let mut seen = vec![false; n];
    for (name, list) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        for &id in list {
            if id >= n {
                return Err(GraphError::Validation(format!(
                    "split {name} references node {id}, but the graph has {n} nodes"
                )));
            }
            if seen[id] {
                return Err(GraphError::Validation(format!(
                    "node {id} appears in more than one split part"
                )));
            }
            seen[id] = true;
        }
    }
    Ok(())
}

/// Writes a dataset back to `dir` in the canonical on-disk layout.
pub fn save_dataset(ds: &GraphDataset, dir: &Path) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let n = ds.node_count();

    let edges_path = dir.join("edges.tsv");
    let mut edges = String::new();
    for (r, c, _v) in ds.adjacency.iter() {
        if r < c {
            edges.push_str(&format!("{r}\t{c}\n"));
        }
    }
    fs::write(&edges_path, edges).map_err(io_err(&edges_path))?;

    let labels_path = dir.join("labels.tsv");
    let mut labels = String::new();
    for (node, &class) in ds.labels.iter().enumerate() {
        labels.push_str(&format!("{node}\t{class}\n"));
    }
    fs::write(&labels_path, labels).map_err(io_err(&labels_path))?;

    let feat_path = dir.join("features.csv");
    let mut out = fs::File::create(&feat_path).map_err(io_err(&feat_path))?;
    let mut buf = String::new();
    for r in 0..n {
        buf.clear();
        for (j, v) in ds.features.row(r).iter().enumerate() {
            if j > 0 {
                buf.push(',');
            }
            // shortest round-trip decimal form: reload is bit-identical
            buf.push_str(&format!("{v}"));
        }
        buf.push('\n');
        out.write_all(buf.as_bytes()).map_err(io_err(&feat_path))?;
    }

    match &ds.split_spec {
        SplitSpec::Unspecified => {}
        SplitSpec::PerClass(k) => {
            let path = dir.join("split.json");
            let body = serde_json::json!({ "labels_per_class": k });
            fs::write(&path, serde_json::to_string_pretty(&body).unwrap())
                .map_err(io_err(&path))?;
        }
        SplitSpec::Explicit(split) => {
            let path = dir.join("split.json");
            fs::write(&path, serde_json::to_string_pretty(split).unwrap())
                .map_err(io_err(&path))?;
        }
    }
    Ok(())
}

// ===== feature and adjacency normalization ==============================

/// L1-normalizes each feature row in place; all-zero rows stay zero.
pub fn row_normalize_features(features: &mut DenseMatrix) {
    for r in 0..features.rows() {
        let sum: f64 = features.row(r).iter().map(|v| v.abs()).sum();
        if sum > 0.0 {
            for v in features.row_mut(r) {
                *v /= sum;
            }
        }
    }
}

/// Symmetrically normalized propagation operator with self-loops:
/// `S = Dt^{-1/2} (A + I) Dt^{-1/2}` where `Dt` holds the row sums of
/// `A + I`. Degrees are at least 1, so `S` is always finite, and entries
/// are computed as `v * (s_i * s_j)` so `S` is bit-exactly symmetric.
pub fn symmetric_normalized(a: &SparseMatrix) -> Result<SparseMatrix, GraphError> {
    if a.rows() != a.cols() {
        return Err(GraphError::Validation(format!(
            "adjacency must be square, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut triplets: Vec<(usize, usize, f64)> = a.iter().collect();
    for i in 0..n {
        triplets.push((i, i, 1.0));
    }
    let with_loops = SparseMatrix::from_triplets(n, n, &triplets)
        .map_err(|e| GraphError::Validation(e.to_string()))?;
    let mut inv_sqrt = vec![0.0; n];
    for i in 0..n {
        let (_, vals) = with_loops.row(i);
        let deg: f64 = vals.iter().sum();
        inv_sqrt[i] = 1.0 / deg.sqrt();
    }
    let scaled: Vec<(usize, usize, f64)> = with_loops
        .iter()
        .map(|(r, c, v)| (r, c, v * (inv_sqrt[r] * inv_sqrt[c])))
        .collect();
    SparseMatrix::from_triplets(n, n, &scaled).map_err(|e| GraphError::Validation(e.to_string()))
}

/// Row-normalized latent propagation operator:
/// `P = D'^{-1} (A' + I)` with `D'` the row sums of `A' + I`. Every row of
/// `P` sums to 1 up to rounding.
pub fn row_normalized_latent(a: &DenseMatrix) -> Result<DenseMatrix, GraphError> {
    if a.rows() != a.cols() {
        return Err(GraphError::Validation(format!(
            "latent adjacency must be square, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut out = a.clone();
    for i in 0..n {
        let row = out.row_mut(i);
        row[i] += 1.0;
        let sum: f64 = row.iter().sum();
        for v in row {
            *v /= sum;
        }
    }
    Ok(out)
}

/// The two propagation operators driving the branch forwards.
#[derive(Clone, Debug)]
pub struct PropagationPair {
    pub naive: Arc<SparseMatrix>,
    pub latent: Arc<DenseMatrix>,
}

// ===== splits and neighborhoods =========================================

/// Draws `per_class` labeled nodes per class, uniformly without
/// replacement, from the sampling pool (`split.json`'s train list when
/// explicit, otherwise all nodes). Val and test memberships are preserved
/// from an explicit split; otherwise val is empty and test is every
/// unsampled node.
pub fn sample_labels(
    ds: &GraphDataset,
    per_class: usize,
    rng: &mut Rng,
) -> Result<Split, GraphError> {
    if per_class == 0 {
        return Err(GraphError::Validation("per_class must be at least 1".into()));
    }
    let n = ds.node_count();
    let pool: Vec<usize> = match &ds.split_spec {
        SplitSpec::Explicit(s) => s.train.clone(),
        _ => (0..n).collect(),
    };
    let mut train = Vec::with_capacity(per_class * ds.num_classes);
    for class in 0..ds.num_classes {
        let candidates: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| ds.labels[i] == class)
            .collect();
        if candidates.len() < per_class {
            return Err(GraphError::Validation(format!(
                "class {class} has only {} candidate node(s), cannot sample {per_class}",
                candidates.len()
            )));
        }
        for pick in rng.sample_indices(candidates.len(), per_class) {
            train.push(candidates[pick]);
        }
    }
    train.sort_unstable();
    let (val, test) = match &ds.split_spec {
        SplitSpec::Explicit(s) => (s.val.clone(), s.test.clone()),
        _ => {
            let in_train: Vec<bool> = {
                let mut f = vec![false; n];
                for &t in &train {
                    f[t] = true;
                }
                f
            };
            (
                Vec::new(),
                (0..n).filter(|&i| !in_train[i]).collect::<Vec<usize>>(),
            )
        }
    };
    Ok(Split { train, val, test })
}

/// Nodes whose hop distance from `i` lies in `1..=k`, ascending. BFS over
/// the adjacency; `i` itself is excluded, `k = 0` gives an empty set.
pub fn k_hop(a: &SparseMatrix, i: usize, k: usize) -> Vec<usize> {
    let n = a.rows();
    let mut dist = vec![usize::MAX; n];
    dist[i] = 0;
    let mut frontier = vec![i];
    let mut out = Vec::new();
    for depth in 1..=k {
        let mut next = Vec::new();
        for &u in &frontier {
            let (cols, _) = a.row(u);
            for &v in cols {
                if dist[v] == usize::MAX {
                    dist[v] = depth;
                    next.push(v);
                    out.push(v);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    out.sort_unstable();
    out
}
