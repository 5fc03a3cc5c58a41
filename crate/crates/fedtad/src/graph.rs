//! Sparse attributed graph and the normalization / diffusion primitives
//! consumed by the rest of the crate.

use ndarray::{Array2, ArrayView2};

use crate::error::{FedTadError, Result};

/// Label sentinel for unlabeled nodes.
pub const UNLABELED: i64 = -1;

/// Compressed sparse row matrix over f64.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets. Triplets must not contain
    /// duplicate (row, col) pairs.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for &(r, c, v) in &triplets {
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n_rows: n,
            n_cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                triplets.push((c, r, v));
            }
        }
        CsrMatrix::from_triplets(self.n_cols, self.n_rows, triplets)
    }

    /// Sparse-dense product `self * dense`.
    pub fn matmul_dense(&self, dense: &ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(self.n_cols, dense.nrows(), "csr matmul dimension mismatch");
        let mut out = Array2::zeros((self.n_rows, dense.ncols()));
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let mut out_row = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out_row.scaled_add(v, &dense.row(c));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[r, c]] = v;
            }
        }
        out
    }
}

/// Immutable attributed graph. Adjacency is symmetric, deduplicated, with no
/// stored self-loops.
#[derive(Debug, Clone)]
pub struct Graph {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub features: Array2<f64>,
    /// Per-node class in [0, C) or [`UNLABELED`].
    pub labels: Vec<i64>,
    adj: CsrMatrix,
}

impl Graph {
    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adj
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        self.adj.row(u).0
    }

    pub fn degree(&self, u: usize) -> usize {
        self.neighbors(u).len()
    }

    pub fn num_edges(&self) -> usize {
        self.adj.nnz() / 2
    }

    pub fn label(&self, u: usize) -> Option<usize> {
        if self.labels[u] == UNLABELED {
            None
        } else {
            Some(self.labels[u] as usize)
        }
    }

    /// Undirected edge list with u < v, lexicographically sorted.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                if u < v {
                    edges.push((u, v));
                }
            }
        }
        edges
    }
}

/// Construct a [`Graph`] from a raw edge list. Edges are symmetrized and
/// deduplicated; self-loops are dropped.
pub fn build_graph(
    edge_list: &[(usize, usize)],
    features: Vec<Vec<f64>>,
    labels: Vec<i64>,
    num_classes: usize,
) -> Result<Graph> {
    let num_nodes = features.len();
    if labels.len() != num_nodes {
        return Err(FedTadError::Graph(format!(
            "label count {} does not match node count {}",
            labels.len(),
            num_nodes
        )));
    }
    let feature_dim = features.first().map_or(0, |r| r.len());
    for (i, row) in features.iter().enumerate() {
        if row.len() != feature_dim {
            return Err(FedTadError::Graph(format!(
                "ragged feature row {}: expected {} values, got {}",
                i,
                feature_dim,
                row.len()
            )));
        }
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != UNLABELED && (l < 0 || l as usize >= num_classes) {
            return Err(FedTadError::Graph(format!(
                "label {} of node {} outside [0, {})",
                l, i, num_classes
            )));
        }
    }
    let mut pairs = std::collections::BTreeSet::new();
    for &(u, v) in edge_list {
        if u >= num_nodes || v >= num_nodes {
            return Err(FedTadError::Graph(format!(
                "edge ({}, {}) out of range for {} nodes",
                u, v, num_nodes
            )));
        }
        if u == v {
            continue;
        }
        pairs.insert((u.min(v), u.max(v)));
    }
    let mut triplets = Vec::with_capacity(pairs.len() * 2);
    for &(u, v) in &pairs {
        triplets.push((u, v, 1.0));
        triplets.push((v, u, 1.0));
    }
    let adj = CsrMatrix::from_triplets(num_nodes, num_nodes, triplets);
    let mut feat = Array2::zeros((num_nodes, feature_dim));
    for (i, row) in features.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            feat[[i, j]] = v;
        }
    }
    Ok(Graph {
        num_nodes,
        num_classes,
        feature_dim,
        features: feat,
        labels,
        adj,
    })
}

/// Symmetric GCN normalization of the self-looped adjacency.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    pub matrix: CsrMatrix,
}

/// Column-stochastic random walk transition matrix over the raw adjacency.
/// Isolated nodes have an all-zero column.
#[derive(Debug, Clone)]
pub struct TransitionMatrix {
    pub matrix: CsrMatrix,
}

pub fn gcn_normalize(g: &Graph) -> NormalizedAdjacency {
    normalize_csr(&g.adj, g.num_nodes)
}

/// Same normalization for an adjacency not backed by a [`Graph`] (pseudo
/// graphs on the server side).
pub fn normalize_csr(adj: &CsrMatrix, n: usize) -> NormalizedAdjacency {
    let mut deg = vec![1.0f64; n]; // self-loop contributes 1
    for r in 0..n {
        deg[r] += adj.row(r).0.len() as f64;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(adj.nnz() + n);
    for r in 0..n {
        let (cols, _) = adj.row(r);
        for &c in cols {
            triplets.push((r, c, inv_sqrt[r] * inv_sqrt[c]));
        }
        triplets.push((r, r, inv_sqrt[r] * inv_sqrt[r]));
    }
    NormalizedAdjacency {
        matrix: CsrMatrix::from_triplets(n, n, triplets),
    }
}

pub fn transition_matrix(g: &Graph) -> TransitionMatrix {
    let n = g.num_nodes;
    let mut triplets = Vec::with_capacity(g.adj.nnz());
    for r in 0..n {
        for &c in g.neighbors(r) {
            // column c is scaled by 1/deg(c)
            triplets.push((r, c, 1.0 / g.degree(c) as f64));
        }
    }
    TransitionMatrix {
        matrix: CsrMatrix::from_triplets(n, n, triplets),
    }
}

/// Diagonals of `T^1 .. T^p`, one column per power. Keeps a single dense
/// working matrix and multiplies by the sparse `T` at each step.
pub fn diffusion_diagonals(t: &TransitionMatrix, p: usize) -> Array2<f64> {
    assert!(p >= 1, "diffusion walk length must be >= 1");
    let n = t.matrix.n_rows;
    let mut out = Array2::zeros((n, p));
    let mut power = t.matrix.to_dense();
    for step in 0..p {
        if step > 0 {
            power = t.matrix.matmul_dense(&power.view());
        }
        for i in 0..n {
            out[[i, step]] = power[[i, i]];
        }
    }
    out
}
