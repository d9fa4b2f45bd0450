//! Helpers shared by the integration tests: random datasets, brute-force
//! reference graphs and connected unit-weight graphs.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softspread::dataset::EmbeddedDataset;
use softspread::graph::{build_epsilon_graph, GraphKind, NeighborGraph};
use softspread::matrix::RowMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` points in `[0, 1)^d`; with `grid` set, coordinates are small integers so
/// that distance ties and duplicate points are common.
pub fn random_points(seed: u64, n: usize, d: usize, grid: bool) -> EmbeddedDataset {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..n * d)
        .map(|_| if grid { r.random_range(0..4) as f64 } else { r.random::<f64>() })
        .collect();
    EmbeddedDataset::from_features(RowMatrix::from_vec(n, d, data).unwrap()).unwrap()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// O(n^2 d) k-NN graph: sort all others by (distance, index), take k.
pub fn brute_force_knn(ds: &EmbeddedDataset, k: usize) -> Vec<Vec<f64>> {
    let n = ds.len();
    let mut neighbors = Vec::with_capacity(n);
    for i in 0..n {
        let mut all: Vec<(f64, usize)> =
            (0..n).filter(|&j| j != i).map(|j| (dist2(ds.point(i), ds.point(j)), j)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        neighbors.push(all);
    }
    let mut sum = 0.0;
    for nb in &neighbors {
        sum += nb[k - 1].0;
    }
    let sigma2 = sum / n as f64;
    let mut w = vec![vec![0.0; n]; n];
    for (i, nb) in neighbors.iter().enumerate() {
        for &(d2, j) in nb {
            w[i][j] = (-d2 / (2.0 * sigma2)).exp().max(f64::MIN_POSITIVE);
        }
    }
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = (w[i][j] + w[j][i]) / 2.0;
        }
    }
    a
}

/// Smallest bandwidth whose strict-inequality epsilon graph is connected
/// (the bottleneck edge of a minimum spanning tree), nudged up.
pub fn connecting_bandwidth(ds: &EmbeddedDataset) -> f64 {
    let n = ds.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    best[0] = 0.0;
    let mut bottleneck: f64 = 0.0;
    for _ in 0..n {
        let u = (0..n).filter(|&i| !in_tree[i]).min_by(|&a, &b| best[a].total_cmp(&best[b])).unwrap();
        in_tree[u] = true;
        bottleneck = bottleneck.max(best[u]);
        for v in 0..n {
            if !in_tree[v] {
                best[v] = best[v].min(dist2(ds.point(u), ds.point(v)).sqrt());
            }
        }
    }
    bottleneck * 1.0001 + 1e-12
}

/// Connected unit-weight graph on random points.
pub fn connected_unit_graph(seed: u64, n: usize, d: usize) -> Arc<NeighborGraph> {
    let ds = random_points(seed, n, d, false);
    let h = connecting_bandwidth(&ds);
    let g = build_epsilon_graph(&ds, h).unwrap();
    assert!(g.is_connected());
    Arc::new(g)
}

/// Cycle on `n` nodes; 2-regular, so column sums of the random-walk operator are 1 too.
pub fn cycle(n: usize) -> Arc<NeighborGraph> {
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect();
    Arc::new(NeighborGraph::from_edges(n, &edges, GraphKind::Epsilon { h: 1.0 }).unwrap())
}
