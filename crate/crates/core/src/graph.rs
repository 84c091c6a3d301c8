//! k-nearest-neighbor correlation graph over the rows of a batch.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Directed k-NN lists for every node of a batch.
///
/// `neighbors` holds `k` entries per node, nearest first, never containing
/// the node itself. Attention neighborhoods append the node as an explicit
/// self entry (see [`NeighborGraph::attention_table`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    n_nodes: usize,
    k: usize,
    neighbors: Vec<usize>,
}

impl NeighborGraph {
    /// Builds a graph from explicit lists; each list must have the same
    /// length `k`, valid indices and no self references.
    pub fn from_lists(lists: &[Vec<usize>]) -> Result<Self> {
        let n = lists.len();
        let k = lists.first().map_or(0, Vec::len);
        let mut neighbors = Vec::with_capacity(n * k);
        for (i, list) in lists.iter().enumerate() {
            if list.len() != k {
                return Err(Error::Config(format!(
                    "node {i} has {} neighbors, expected {k}",
                    list.len()
                )));
            }
            if let Some(&j) = list.iter().find(|&&j| j >= n || j == i) {
                return Err(Error::Config(format!("node {i} has invalid neighbor {j}")));
            }
            neighbors.extend_from_slice(list);
        }
        Ok(NeighborGraph {
            n_nodes: n,
            k,
            neighbors,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The k nearest neighbors of node `i`, nearest first.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Attention neighborhood of `i`: its k-NN list followed by `i` itself.
    pub fn neighborhood(&self, i: usize) -> Vec<usize> {
        let mut out = self.neighbors(i).to_vec();
        out.push(i);
        out
    }

    /// Flattened `n_nodes x (k+1)` table of attention neighborhoods.
    pub fn attention_table(&self) -> Arc<[usize]> {
        let mut out = Vec::with_capacity(self.n_nodes * (self.k + 1));
        for i in 0..self.n_nodes {
            out.extend_from_slice(self.neighbors(i));
            out.push(i);
        }
        out.into()
    }

    /// Undirected edges `(i, j)` with `i < j`; self-loops are not edges.
    pub fn undirected_edge_set(&self) -> BTreeSet<(usize, usize)> {
        let mut edges = BTreeSet::new();
        for i in 0..self.n_nodes {
            for &j in self.neighbors(i) {
                edges.insert((i.min(j), i.max(j)));
            }
        }
        edges
    }

    /// Writes the undirected edge list as `i,j` CSV rows.
    pub fn write_edges_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "i,j")?;
        for (i, j) in self.undirected_edge_set() {
            writeln!(out, "{i},{j}")?;
        }
        Ok(())
    }
}

fn squared_distances(x: &Matrix) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let xi = x.row(i);
        for j in i + 1..n {
            let v: f64 = xi
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Exact k-NN graph under Euclidean distance. Ties are broken by the
/// lower node index.
pub fn build_knn_graph(x: &Matrix, k: usize) -> Result<NeighborGraph> {
    let n = x.rows();
    if k == 0 || k >= n {
        return Err(Error::InvalidK { k, n });
    }
    x.check_finite()?;
    let dist = squared_distances(x);
    let lists: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = &dist[i * n..(i + 1) * n];
            let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let cmp = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
            cand.sort_unstable_by(cmp);
            cand
        })
        .collect();
    Ok(NeighborGraph {
        n_nodes: n,
        k,
        neighbors: lists.concat(),
    })
}
