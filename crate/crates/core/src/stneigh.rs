//! Spatio-temporal neighborhoods over the time-expanded graph and the
//! relative time encoding of input features.
//!
//! The time-expanded graph has one vertex per `(node, time)`. Vertices at the
//! same time are joined by that snapshot's links and every node is joined to
//! its own copy at the previous time. A neighborhood of `(v, t)` is every
//! vertex within `k` hops of it, where paths may only use times `t - 1` and `t`.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::dyngraph::{DynamicGraph, GraphSnapshot, GraphWindow, NodeId};
use crate::error::{DgibError, Result};

/// Adjacency over `(node, time)` vertices, times `1..=num_times`.
#[derive(Debug, Clone)]
pub struct TimeExpandedGraph {
    num_nodes: usize,
    num_times: usize,
    adjacency: Vec<Vec<usize>>,
}

impl TimeExpandedGraph {
    /// Builds the graph over exactly the given snapshots.
    pub fn from_snapshots(snapshots: &[GraphSnapshot], num_nodes: usize) -> Self {
        Self::build(snapshots.iter().map(Some), snapshots.len(), num_nodes)
    }

    /// History of the window plus an edgeless slot for the target step.
    pub fn from_window(window: &GraphWindow<'_>) -> Self {
        let n = window.num_nodes();
        let slots = window.history.iter().map(Some).chain(std::iter::once(None));
        Self::build(slots, window.len() + 1, n)
    }

    fn build<'a>(
        slots: impl Iterator<Item = Option<&'a GraphSnapshot>>,
        num_times: usize,
        num_nodes: usize,
    ) -> Self {
        let mut adjacency = vec![Vec::new(); num_nodes * num_times];
        for (i, snap) in slots.enumerate() {
            let t = i + 1;
            if let Some(snap) = snap {
                for e in snap.edges() {
                    adjacency[(t - 1) * num_nodes + e.src].push((t - 1) * num_nodes + e.dst);
                }
            }
            if t >= 2 {
                for v in 0..num_nodes {
                    let here = (t - 1) * num_nodes + v;
                    let before = (t - 2) * num_nodes + v;
                    adjacency[here].push(before);
                    adjacency[before].push(here);
                }
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        TimeExpandedGraph { num_nodes, num_times, adjacency }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_times(&self) -> usize {
        self.num_times
    }

    pub fn num_vertices(&self) -> usize {
        self.adjacency.len()
    }

    pub fn vertex(&self, v: NodeId, t: usize) -> usize {
        (t - 1) * self.num_nodes + v
    }

    pub fn unpack(&self, idx: usize) -> (NodeId, usize) {
        (idx % self.num_nodes, idx / self.num_nodes + 1)
    }

    /// Neighbors of vertex `(v, t)` as `(node, time)` pairs, sorted.
    pub fn adjacent(&self, v: NodeId, t: usize) -> Vec<(NodeId, usize)> {
        self.adjacency[self.vertex(v, t)]
            .iter()
            .map(|&i| self.unpack(i))
            .collect()
    }

    /// Number of links between consecutive copies of the same node.
    pub fn temporal_edge_count(&self) -> usize {
        self.num_nodes * self.num_times.saturating_sub(1)
    }

    pub fn st_neighbors(&self, v: NodeId, k: usize, t: usize) -> Result<STNeighborhood> {
        if k == 0 {
            return Err(DgibError::arg("k must be >= 1"));
        }
        if t == 0 || t > self.num_times {
            return Err(DgibError::arg(format!("time {t} outside 1..={}", self.num_times)));
        }
        if v >= self.num_nodes {
            return Err(DgibError::arg(format!("node {v} outside 0..{}", self.num_nodes)));
        }
        let lo = t.saturating_sub(1).max(1);
        let in_slice = |idx: usize| {
            let time = idx / self.num_nodes + 1;
            time >= lo && time <= t
        };
        let start = self.vertex(v, t);
        let mut dist = std::collections::HashMap::new();
        dist.insert(start, 0usize);
        let mut queue = VecDeque::from([start]);
        let mut members = Vec::new();
        while let Some(cur) = queue.pop_front() {
            let d = dist[&cur];
            if d == k {
                continue;
            }
            for &nb in &self.adjacency[cur] {
                if !in_slice(nb) || dist.contains_key(&nb) {
                    continue;
                }
                dist.insert(nb, d + 1);
                members.push(self.unpack(nb));
                queue.push_back(nb);
            }
        }
        members.sort_unstable_by_key(|&(u, time)| (time, u));
        Ok(STNeighborhood { anchor: (v, t), hop: k, members })
    }
}

pub fn build_time_expanded_graph(dg: &DynamicGraph) -> TimeExpandedGraph {
    TimeExpandedGraph::from_snapshots(&dg.snapshots, dg.num_nodes)
}

/// Spatio-temporal neighborhood of `(v, t)`; `t` may be `T + 1`.
pub fn st_neighbors(dg: &DynamicGraph, v: NodeId, k: usize, t: usize) -> Result<STNeighborhood> {
    TimeExpandedGraph::from_window(&dg.full_window()).st_neighbors(v, k, t)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct STNeighborhood {
    pub anchor: (NodeId, usize),
    pub hop: usize,
    /// `(node, time)` pairs ordered by time then node; times are `t - 1` or `t`.
    pub members: Vec<(NodeId, usize)>,
}

impl STNeighborhood {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, u: NodeId, t: usize) -> bool {
        self.members.contains(&(u, t))
    }
}

/// Flattened neighborhoods of every node at one time step.
///
/// Members are encoded as row indices into the stacked matrix
/// `[Z_hat(t); Z_hat(t-1)]`, i.e. `u` for a same-time member and `N + u` for
/// a previous-time member.
#[derive(Debug, Clone, Default)]
pub struct SliceNeighborhoods {
    pub anchors: Vec<usize>,
    pub members: Vec<usize>,
    /// `offsets[v]..offsets[v + 1]` indexes the entries of anchor `v`.
    pub offsets: Vec<usize>,
}

impl SliceNeighborhoods {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }
}

/// Neighborhoods of all `(v, t)` in a window, `t = 1..=T+1`.
#[derive(Debug, Clone)]
pub struct NeighborhoodIndex {
    pub k: usize,
    pub num_nodes: usize,
    pub slices: Vec<SliceNeighborhoods>,
}

impl NeighborhoodIndex {
    pub fn build(window: &GraphWindow<'_>, k: usize) -> Result<Self> {
        let teg = TimeExpandedGraph::from_window(window);
        let n = teg.num_nodes();
        let mut slices = Vec::with_capacity(teg.num_times());
        for t in 1..=teg.num_times() {
            let mut s = SliceNeighborhoods { offsets: vec![0], ..Default::default() };
            for v in 0..n {
                let nb = teg.st_neighbors(v, k, t)?;
                for (u, time) in nb.members {
                    s.anchors.push(v);
                    s.members.push(if time == t { u } else { n + u });
                }
                s.offsets.push(s.anchors.len());
            }
            slices.push(s);
        }
        Ok(NeighborhoodIndex { k, num_nodes: n, slices })
    }

    pub fn slice(&self, t: usize) -> &SliceNeighborhoods {
        &self.slices[t - 1]
    }

    pub fn num_times(&self) -> usize {
        self.slices.len()
    }
}

/// Fixed sinusoidal code of a time offset: even dims `sin`, odd dims `cos`,
/// frequencies `10000^(-2i/dim)`.
pub fn positional_encoding(dt: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let freq = 10000f64.powf(-2.0 * i / dim as f64);
            if j % 2 == 0 {
                (dt * freq).sin()
            } else {
                (dt * freq).cos()
            }
        })
        .collect()
}

/// Layer-0 representations for `t = 1..=T+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeatures {
    pub z0: Vec<Array2<f64>>,
}

/// `z0[t] = X(t) * projection + PE((T + 1) - t)` for every step of the window.
pub fn relative_time_encode(window: &GraphWindow<'_>, projection: &Array2<f64>) -> Result<EncodedFeatures> {
    let out_dim = projection.ncols();
    if out_dim % 2 != 0 {
        return Err(DgibError::arg(format!("output dim {out_dim} must be even")));
    }
    let t_next = window.len() + 1;
    let mut z0 = Vec::with_capacity(t_next);
    for t in 1..=t_next {
        let x = window.features(t);
        if x.ncols() != projection.nrows() {
            return Err(DgibError::arg(format!(
                "feature dim {} does not match projection rows {}",
                x.ncols(),
                projection.nrows()
            )));
        }
        let pe = positional_encoding((t_next - t) as f64, out_dim);
        let mut z = x.dot(projection);
        for mut row in z.rows_mut() {
            for (r, p) in row.iter_mut().zip(&pe) {
                *r += p;
            }
        }
        z0.push(z);
    }
    Ok(EncodedFeatures { z0 })
}
