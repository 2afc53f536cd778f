use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row/column extent of a lattice whose nodes are numbered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub rows: usize,
    pub cols: usize,
}

impl GridDims {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn n_nodes(self) -> usize {
        self.rows * self.cols
    }

    /// Dimensions after 2x2 pooling; odd extents round up.
    pub fn pooled(self) -> Self {
        Self::new(self.rows.div_ceil(2), self.cols.div_ceil(2))
    }
}

/// Undirected adjacency over regions, neighbor lists kept sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionGraph {
    neighbors: Vec<Vec<usize>>,
}

impl RegionGraph {
    /// Builds a graph from explicit neighbor lists, checking symmetry and the absence of
    /// self-loops. Lists are sorted on the way in.
    pub fn from_neighbors(mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&j| j >= n || j == i) {
                return Err(Error::InvalidSpec(format!("bad neighbor list for node {i}: {list:?}")));
            }
        }
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                if neighbors[j].binary_search(&i).is_err() {
                    return Err(Error::InvalidSpec(format!("asymmetric edge {i} -> {j}")));
                }
            }
        }
        Ok(Self { neighbors })
    }

    /// Neighbor lists in caller-supplied order, without sorting. Only validity of indices is
    /// checked; used to exercise order-independence of aggregation.
    pub fn with_unsorted_lists(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let mut sorted = neighbors.clone();
        Self::from_neighbors(std::mem::take(&mut sorted))?;
        Ok(Self { neighbors })
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes();
        if perm.len() != n {
            return Err(Error::shape("RegionGraph::relabel", format!("{} labels for {n} nodes", perm.len())));
        }
        let mut lists = vec![Vec::new(); n];
        for (i, list) in self.neighbors.iter().enumerate() {
            lists[perm[i]] = list.iter().map(|&j| perm[j]).collect();
        }
        Self::from_neighbors(lists)
    }
}

/// Moore (8-neighborhood) adjacency over a `rows x cols` lattice.
pub fn build_graph(dims: GridDims) -> RegionGraph {
    let GridDims { rows, cols } = dims;
    let mut neighbors = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut list = Vec::with_capacity(8);
            for rr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                    if (rr, cc) != (r, c) {
                        list.push(rr * cols + cc);
                    }
                }
            }
            neighbors.push(list);
        }
    }
    RegionGraph { neighbors }
}
