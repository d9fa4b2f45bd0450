//! Neighborhood graphs over embedded points and their degree-normalized operators.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddedDataset;
use crate::error::{Error, Result};
use crate::kdtree::{KdTree, Neighbor};

/// Rows above this size use rayon in matrix-vector products.
const PARALLEL_ROWS: usize = 8192;
const PARALLEL_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphKind {
    Knn { k: usize },
    Epsilon { h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `S = D^{-1/2} A D^{-1/2}`
    #[default]
    Symmetric,
    /// `S = D^{-1} A`
    RandomWalk,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Symmetric => "symmetric",
            Normalization::RandomWalk => "random_walk",
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" | "sym" => Ok(Normalization::Symmetric),
            "random_walk" | "random-walk" | "rw" => Ok(Normalization::RandomWalk),
            other => Err(Error::InvalidArgument(format!("unknown normalization '{other}'"))),
        }
    }
}

/// Symmetric sparse affinity matrix in compressed-row layout with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    offsets: Vec<usize>,
    columns: Vec<usize>,
    weights: Vec<f64>,
    sigma2: Option<f64>,
    kind: GraphKind,
}

impl NeighborGraph {
    /// Assembles a graph from per-row `(column, weight)` lists.
    ///
    /// Rows must be sorted by column, free of self-loops, and mirror each other.
    fn from_rows(rows: Vec<Vec<(usize, f64)>>, sigma2: Option<f64>, kind: GraphKind) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut columns = Vec::with_capacity(nnz);
        let mut weights = Vec::with_capacity(nnz);
        for row in rows {
            for (j, w) in row {
                columns.push(j);
                weights.push(w);
            }
            offsets.push(columns.len());
        }
        Self {
            offsets,
            columns,
            weights,
            sigma2,
            kind,
        }
    }

    /// Builds a graph from an undirected weighted edge list. Duplicate edges are summed.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)], kind: GraphKind) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::OutOfRange { index: i.max(j), size: n });
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self-loop at node {i}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("edge ({i},{j}) has weight {w}")));
            }
            rows[i].push((j, w));
            rows[j].push((i, w));
        }
        for row in &mut rows {
            row.sort_by_key(|&(j, _)| j);
            row.dedup_by(|next, kept| {
                if next.0 == kept.0 {
                    kept.1 += next.1;
                    true
                } else {
                    false
                }
            });
        }
        Ok(Self::from_rows(rows, None, kind))
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn edge_count(&self) -> usize {
        self.columns.len() / 2
    }

    pub fn sigma2(&self) -> Option<f64> {
        self.sigma2
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    /// Column indices and weights of row `i`, columns ascending.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let range = self.offsets[i]..self.offsets[i + 1];
        (&self.columns[range.clone()], &self.weights[range])
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (cols, weights) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |pos| weights[pos])
    }

    pub fn degrees(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.row(i).1.iter().sum()).collect()
    }

    /// Connected components as a label per node, labels in order of first appearance.
    pub fn components(&self) -> Vec<usize> {
        let n = self.len();
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            stack.push(start);
            while let Some(i) = stack.pop() {
                for &j in self.row(i).0 {
                    if label[j] == usize::MAX {
                        label[j] = next;
                        stack.push(j);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn is_connected(&self) -> bool {
        self.components().iter().all(|&c| c == 0)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let (cols, weights) = self.row(i);
            for (&j, &w) in cols.iter().zip(weights) {
                m[(i, j)] = w;
            }
        }
        m
    }

    /// Writes the edge list `i,j,weight` with `i < j`.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "i,j,weight")?;
        for i in 0..self.len() {
            let (cols, weights) = self.row(i);
            for (&j, &w) in cols.iter().zip(weights) {
                if i < j {
                    writeln!(out, "{i},{j},{w}")?;
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn gaussian(dist2: f64, sigma2: f64) -> f64 {
    // Far neighbors can underflow; keep the edge strictly positive.
    (-dist2 / (2.0 * sigma2)).exp().max(f64::MIN_POSITIVE)
}

/// k-NN graph with Gaussian weights and bandwidth set to the mean squared
/// distance to each point's k-th neighbor. The one-sided kernel matrix `W` is
/// symmetrized as `(W + W^T) / 2`.
pub fn build_knn_graph(dataset: &EmbeddedDataset, k: usize) -> Result<NeighborGraph> {
    let n = dataset.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("k must satisfy 1 <= k < n = {n}, got {k}")));
    }
    let tree = KdTree::new(dataset.features());
    let neighbors: Vec<Vec<Neighbor>> = (0..n)
        .into_par_iter()
        .map(|i| tree.nearest(dataset.point(i), k, Some(i)))
        .collect();
    let sigma2 = neighbors.iter().map(|nb| nb[k - 1].dist2).sum::<f64>() / n as f64;
    if !(sigma2 > 0.0) {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(symmetrize(&neighbors, sigma2, GraphKind::Knn { k }))
}

fn symmetrize(neighbors: &[Vec<Neighbor>], sigma2: f64, kind: GraphKind) -> NeighborGraph {
    let n = neighbors.len();
    // Row i gathers its own one-sided entries w_ij and the mirrored w_ji.
    let mut one_sided: Vec<Vec<(usize, f64, f64)>> = neighbors
        .iter()
        .map(|nb| nb.iter().map(|x| (x.index, gaussian(x.dist2, sigma2), 0.0)).collect())
        .collect();
    for (i, nb) in neighbors.iter().enumerate() {
        for x in nb {
            one_sided[x.index].push((i, 0.0, gaussian(x.dist2, sigma2)));
        }
    }
    let rows = one_sided
        .into_par_iter()
        .map(|mut entries| {
            entries.sort_by_key(|e| e.0);
            let mut row: Vec<(usize, f64, f64)> = Vec::with_capacity(entries.len());
            for (j, own, mirrored) in entries {
                match row.last_mut() {
                    Some(last) if last.0 == j => {
                        last.1 += own;
                        last.2 += mirrored;
                    }
                    _ => row.push((j, own, mirrored)),
                }
            }
            row.into_iter().map(|(j, own, mirrored)| (j, (own + mirrored) / 2.0)).collect()
        })
        .collect();
    debug_assert_eq!(n, neighbors.len());
    NeighborGraph::from_rows(rows, Some(sigma2), kind)
}

/// Unit-weight graph joining points strictly closer than `h`.
pub fn build_epsilon_graph(dataset: &EmbeddedDataset, h: f64) -> Result<NeighborGraph> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth h must be positive, got {h}")));
    }
    let tree = KdTree::new(dataset.features());
    let rows = (0..dataset.len())
        .into_par_iter()
        .map(|i| tree.within(dataset.point(i), h, Some(i)).into_iter().map(|x| (x.index, 1.0)).collect())
        .collect();
    Ok(NeighborGraph::from_rows(rows, None, GraphKind::Epsilon { h }))
}

pub fn build_graph(dataset: &EmbeddedDataset, kind: GraphKind) -> Result<NeighborGraph> {
    match kind {
        GraphKind::Knn { k } => build_knn_graph(dataset, k),
        GraphKind::Epsilon { h } => build_epsilon_graph(dataset, h),
    }
}

/// Degree-normalized affinity operator `S`.
///
/// Both the symmetric entries (used by the solver for either variant) and,
/// for the random-walk variant, the row-normalized entries are stored on the
/// graph's sparsity pattern. Rows and columns of degree-zero nodes are zero.
#[derive(Debug, Clone)]
pub struct NormalizedOperator {
    graph: Arc<NeighborGraph>,
    variant: Normalization,
    degrees: Vec<f64>,
    inv_sqrt_degrees: Vec<f64>,
    /// Narrow copy of the graph's column indices; halves index traffic in products.
    columns: Vec<u32>,
    symmetric: Vec<f64>,
    random_walk: Option<Vec<f64>>,
}

pub fn normalize(graph: Arc<NeighborGraph>, variant: Normalization) -> NormalizedOperator {
    let degrees = graph.degrees();
    let sqrt_degrees: Vec<f64> = degrees.iter().map(|d| d.sqrt()).collect();
    let inv_sqrt_degrees = sqrt_degrees.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 0.0 }).collect();
    let mut symmetric = Vec::with_capacity(graph.columns.len());
    for i in 0..graph.len() {
        let (cols, weights) = graph.row(i);
        // a_ij / (sqrt(d_i) sqrt(d_j)) is bitwise symmetric because the product commutes.
        symmetric.extend(cols.iter().zip(weights).map(|(&j, &w)| w / (sqrt_degrees[i] * sqrt_degrees[j])));
    }
    let random_walk = match variant {
        Normalization::Symmetric => None,
        Normalization::RandomWalk => {
            let mut values = Vec::with_capacity(graph.columns.len());
            for i in 0..graph.len() {
                let (_, weights) = graph.row(i);
                values.extend(weights.iter().map(|&w| w / degrees[i]));
            }
            Some(values)
        }
    };
    let columns = graph
        .columns
        .iter()
        .map(|&j| u32::try_from(j).expect("graphs are limited to u32::MAX nodes"))
        .collect();
    NormalizedOperator {
        graph,
        variant,
        degrees,
        inv_sqrt_degrees,
        columns,
        symmetric,
        random_walk,
    }
}

impl NormalizedOperator {
    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }

    pub fn variant(&self) -> Normalization {
        self.variant
    }

    pub fn graph(&self) -> &Arc<NeighborGraph> {
        &self.graph
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub(crate) fn inv_sqrt_degrees(&self) -> &[f64] {
        &self.inv_sqrt_degrees
    }

    fn values(&self) -> &[f64] {
        self.random_walk.as_deref().unwrap_or(&self.symmetric)
    }

    /// `out = S x` for this operator's variant.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.spmv(self.values(), 0.0, 1.0, x, out);
    }

    /// `out = x - alpha D^{-1/2} A D^{-1/2} x` regardless of variant; returns `x . out`.
    pub(crate) fn apply_shifted_symmetric(&self, alpha: f64, x: &[f64], out: &mut [f64]) -> f64 {
        self.spmv(&self.symmetric, 1.0, -alpha, x, out)
    }

    /// Offsets, columns and symmetric values of the sparsity pattern.
    pub(crate) fn symmetric_csr(&self) -> (&[usize], &[u32], &[f64]) {
        (&self.graph.offsets, &self.columns, &self.symmetric)
    }

    /// `out = diag * x + scale * (M x)` for values `M` on the sparsity pattern; returns `x . out`.
    fn spmv(&self, values: &[f64], diag: f64, scale: f64, x: &[f64], out: &mut [f64]) -> f64 {
        let offsets = &self.graph.offsets;
        let columns = &self.columns;
        let row = |i: usize| -> f64 {
            let range = offsets[i]..offsets[i + 1];
            let s: f64 = columns[range.clone()]
                .iter()
                .zip(&values[range])
                .map(|(&j, &v)| v * x[j as usize])
                .sum();
            diag * x[i] + scale * s
        };
        if out.len() >= PARALLEL_ROWS {
            // fixed chunks summed in order keep the reduction reproducible
            let partial: Vec<f64> = out
                .par_chunks_mut(PARALLEL_CHUNK)
                .enumerate()
                .map(|(c, chunk)| {
                    let base = c * PARALLEL_CHUNK;
                    chunk
                        .iter_mut()
                        .enumerate()
                        .map(|(k, o)| {
                            *o = row(base + k);
                            *o * x[base + k]
                        })
                        .sum::<f64>()
                })
                .collect();
            partial.into_iter().sum()
        } else {
            out.iter_mut()
                .enumerate()
                .map(|(i, o)| {
                    *o = row(i);
                    *o * x[i]
                })
                .sum()
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let values = self.values();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let range = self.graph.offsets[i]..self.graph.offsets[i + 1];
            for p in range {
                m[(i, self.graph.columns[p])] = values[p];
            }
        }
        m
    }
}
