//! Sensor graph construction and exact-k-hop neighborhoods.
//!
//! The binary adjacency comes from a thresholded Gaussian kernel over
//! pairwise sensor distances: `A_ij = 1` iff `i != j` and
//! `exp(-d_ij^2 / delta) >= epsilon`. Hop `k` neighbors of a node are the
//! nodes at unweighted shortest-path distance exactly `k`.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::{NeighborLists, Tensor};

/// Above this node count [`HopNeighborhoods::aggregate_hop`] skips the dense
/// aggregator and gathers rows directly.
pub const DENSE_AGGREGATION_LIMIT: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceEntry {
    pub from: usize,
    pub to: usize,
    pub cost: f64,
}

/// Pairwise sensor distances, as listed in a `from,to,cost` file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistanceTable {
    pub entries: Vec<DistanceEntry>,
}

/// Sensor id to node index, one id per line.
#[derive(Clone, Debug, Default)]
pub struct IdMap {
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn parse(text: &str) -> Self {
        let index = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, id)| (id.to_string(), i))
            .collect();
        Self { index }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn from_ids<S: AsRef<str>>(ids: &[S]) -> Self {
        Self {
            index: ids.iter().enumerate().map(|(i, id)| (id.as_ref().to_string(), i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

impl DistanceTable {
    pub fn new(entries: Vec<DistanceEntry>) -> Self {
        Self { entries }
    }

    /// Parses `from,to,cost` rows. A non-numeric first row is taken as a header.
    pub fn parse_csv(text: &str, source: &str, ids: Option<&IdMap>) -> Result<Self> {
        let mut entries = Vec::new();
        for (row, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let known = |c: &str| match ids {
                Some(map) => map.get(c).is_some(),
                None => c.parse::<usize>().is_ok(),
            };
            if row == 0
                && cells.len() == 3
                && !known(cells[0])
                && cells[2].parse::<f64>().is_err()
            {
                continue;
            }
            if cells.len() != 3 {
                return Err(Error::Parse {
                    path: source.into(),
                    row: row + 1,
                    col: cells.len(),
                    msg: "expected three fields from,to,cost".into(),
                });
            }
            let node = |col: usize| -> Result<usize> {
                let cell = cells[col];
                let parsed = match ids {
                    Some(map) => map.get(cell),
                    None => cell.parse::<usize>().ok(),
                };
                parsed.ok_or_else(|| Error::Parse {
                    path: source.into(),
                    row: row + 1,
                    col: col + 1,
                    msg: format!("unknown sensor {cell:?}"),
                })
            };
            let cost = cells[2].parse::<f64>().map_err(|_| Error::Parse {
                path: source.into(),
                row: row + 1,
                col: 3,
                msg: format!("non-numeric cost {:?}", cells[2]),
            })?;
            entries.push(DistanceEntry {
                from: node(0)?,
                to: node(1)?,
                cost,
            });
        }
        Ok(Self { entries })
    }

    pub fn load_csv(path: &Path, ids: Option<&IdMap>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string(), ids)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("from,to,cost\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.from, e.to, e.cost);
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Multiplies every distance by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| DistanceEntry {
                    cost: e.cost * factor,
                    ..*e
                })
                .collect(),
        }
    }
}

/// Symmetric binary adjacency with an empty diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SensorGraph {
    n_nodes: usize,
    adjacency: Vec<bool>,
}

impl SensorGraph {
    pub fn empty(n_nodes: usize) -> Self {
        Self {
            n_nodes,
            adjacency: vec![false; n_nodes * n_nodes],
        }
    }

    /// Undirected graph from an edge list; self-loops are dropped.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(n_nodes);
        for &(i, j) in edges {
            if i >= n_nodes || j >= n_nodes {
                return Err(Error::Input(format!(
                    "edge ({i}, {j}) out of range for {n_nodes} nodes"
                )));
            }
            g.connect(i, j);
        }
        Ok(g)
    }

    fn connect(&mut self, i: usize, j: usize) {
        if i != j {
            self.adjacency[i * self.n_nodes + j] = true;
            self.adjacency[j * self.n_nodes + i] = true;
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n_nodes + j]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.n_nodes;
        (0..n).filter(move |&j| self.adjacency[i * n + j])
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a).count() / 2
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut g = Self::empty(self.n_nodes);
        for i in 0..self.n_nodes {
            for j in self.neighbors(i) {
                g.connect(perm[i], perm[j]);
            }
        }
        g
    }

    pub fn adjacency_tensor(&self) -> Tensor {
        let data = self
            .adjacency
            .iter()
            .map(|&a| if a { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[self.n_nodes, self.n_nodes], data).expect("square adjacency")
    }

    /// Dense 0/1 matrix, one row per line.
    pub fn adjacency_csv(&self) -> String {
        let mut out = String::with_capacity(self.n_nodes * self.n_nodes * 2);
        for i in 0..self.n_nodes {
            let row: Vec<&str> = (0..self.n_nodes)
                .map(|j| if self.has_edge(i, j) { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Unweighted shortest-path lengths from `source` (`None` = unreachable).
    pub fn bfs(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_nodes];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for v in self.neighbors(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.n_nodes == 0 || self.bfs(0).iter().all(Option::is_some)
    }
}

/// Gaussian-kernel threshold edge test for one distance.
pub fn kernel_edge(distance: f64, delta: f64, epsilon: f64) -> bool {
    (-(distance * distance) / delta).exp() >= epsilon
}

/// Thresholded Gaussian kernel adjacency; pairs absent from `dist` get no edge.
pub fn build_adjacency(
    dist: &DistanceTable,
    n_nodes: usize,
    delta: f64,
    epsilon: f64,
) -> Result<SensorGraph> {
    if !(delta > 0.0) {
        return Err(Error::Input(format!("delta must be > 0, got {delta}")));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Input(format!(
            "epsilon must be in (0, 1], got {epsilon}"
        )));
    }
    let mut g = SensorGraph::empty(n_nodes);
    for e in &dist.entries {
        if e.from >= n_nodes || e.to >= n_nodes {
            return Err(Error::Input(format!(
                "distance entry ({}, {}) out of range for {n_nodes} nodes",
                e.from, e.to
            )));
        }
        if !(e.cost >= 0.0) {
            return Err(Error::Input(format!(
                "negative or NaN distance {} between {} and {}",
                e.cost, e.from, e.to
            )));
        }
        if kernel_edge(e.cost, delta, epsilon) {
            g.connect(e.from, e.to);
        }
    }
    Ok(g)
}

/// Exact-hop neighbor lists for hops `1..=k_max`.
#[derive(Clone, Debug)]
pub struct HopNeighborhoods {
    n_nodes: usize,
    hops: Vec<Arc<NeighborLists>>,
}

/// BFS from every node; `hops[k - 1][u]` lists nodes exactly `k` away from `u`.
pub fn khop_neighborhoods(g: &SensorGraph, k_max: usize) -> Result<HopNeighborhoods> {
    if k_max == 0 {
        return Err(Error::Input("max hop K must be >= 1".into()));
    }
    let n = g.n_nodes();
    let mut lists = vec![vec![Vec::new(); n]; k_max];
    for u in 0..n {
        for (v, d) in g.bfs(u).into_iter().enumerate() {
            if let Some(d) = d {
                if (1..=k_max).contains(&d) {
                    lists[d - 1][u].push(v);
                }
            }
        }
    }
    Ok(HopNeighborhoods {
        n_nodes: n,
        hops: lists
            .iter()
            .map(|l| Arc::new(NeighborLists::from_lists(l)))
            .collect(),
    })
}

impl HopNeighborhoods {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn k_max(&self) -> usize {
        self.hops.len()
    }

    /// Neighbor lists for hop `k` (1-based).
    pub fn lists(&self, k: usize) -> &Arc<NeighborLists> {
        &self.hops[k - 1]
    }

    /// Binary matrix of pairs exactly `k` hops apart.
    pub fn hop_adjacency(&self, k: usize) -> Tensor {
        let n = self.n_nodes;
        let mut t = Tensor::zeros(&[n, n]);
        let lists = self.lists(k);
        for u in 0..n {
            for &v in lists.neighbors(u) {
                t.set(u, v, 1.0);
            }
        }
        t
    }

    /// Row-normalized hop matrix; rows of nodes with no hop-`k` neighbor are zero.
    pub fn aggregator(&self, k: usize) -> Tensor {
        let n = self.n_nodes;
        let mut t = Tensor::zeros(&[n, n]);
        let lists = self.lists(k);
        for u in 0..n {
            let nb = lists.neighbors(u);
            for &v in nb {
                t.set(u, v, 1.0 / nb.len() as f64);
            }
        }
        t
    }

    /// Mean of `x` over each node's exact-`k`-hop neighbors.
    pub fn aggregate_hop(&self, k: usize, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.rows() != self.n_nodes {
            return Err(Error::dim("aggregate_hop", &[self.n_nodes], x.shape()));
        }
        if self.n_nodes <= DENSE_AGGREGATION_LIMIT {
            self.aggregator(k).matmul(x)
        } else {
            self.lists(k).gather_mean(x)
        }
    }
}
