//! Discrete dynamic graphs: snapshots over a fixed node set, file IO,
//! a planted-community generator and link-label sampling.

mod io;
mod sampling;
mod synthetic;

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DgibError, Result};

pub use io::{load_dataset, save_dataset, Manifest, ManifestFiles, ManifestSplit};
pub use sampling::{negatives_are_clean, sample_link_labels, sample_snapshot_labels, NegativeCache};
pub use synthetic::{community_of, generate_synthetic, SyntheticParams};

pub type NodeId = usize;

/// One directed orientation of an undirected link. Snapshots hold both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSnapshot {
    /// 1-based time index.
    pub t: usize,
    edges: Vec<Edge>,
    pub features: Array2<f64>,
}

impl GraphSnapshot {
    /// Builds a snapshot from an arbitrary edge list. Self loops are dropped,
    /// both orientations are inserted and duplicates keep the first type seen.
    pub fn new(
        t: usize,
        num_nodes: usize,
        links: impl IntoIterator<Item = Edge>,
        features: Array2<f64>,
    ) -> Result<Self> {
        if features.nrows() != num_nodes {
            return Err(DgibError::arg(format!(
                "snapshot t={t}: feature rows {} != num_nodes {num_nodes}",
                features.nrows()
            )));
        }
        let mut seen = HashSet::new();
        let mut edges = Vec::new();
        for e in links {
            if e.src >= num_nodes || e.dst >= num_nodes {
                return Err(DgibError::arg(format!(
                    "snapshot t={t}: edge ({}, {}) outside node range {num_nodes}",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                continue;
            }
            let key = (e.src.min(e.dst), e.src.max(e.dst));
            if seen.insert(key) {
                edges.push(Edge { src: key.0, dst: key.1, kind: e.kind });
                edges.push(Edge { src: key.1, dst: key.0, kind: e.kind });
            }
        }
        edges.sort_unstable();
        Ok(GraphSnapshot { t, edges, features })
    }

    pub fn empty(t: usize, features: Array2<f64>) -> Self {
        GraphSnapshot { t, edges: Vec::new(), features }
    }

    /// All directed orientations, sorted by (src, dst).
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Each undirected link once, with `src < dst`.
    pub fn links(&self) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(|e| e.src < e.dst)
    }

    pub fn num_links(&self) -> usize {
        self.edges.len() / 2
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.edges
            .binary_search_by(|e| (e.src, e.dst).cmp(&(u, v)))
            .is_ok()
    }

    /// Neighbors of `v`, ascending.
    pub fn neighbors(&self, v: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        let start = self.edges.partition_point(|e| e.src < v);
        self.edges[start..]
            .iter()
            .take_while(move |e| e.src == v)
            .map(|e| e.dst)
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.neighbors(v).count()
    }

    /// Adds the link `{u, v}` (untyped) if absent, removes it otherwise.
    /// Returns true when the link was added.
    pub(crate) fn toggle_link(&mut self, u: NodeId, v: NodeId) -> bool {
        let key = |e: &Edge| (e.src, e.dst);
        match self.edges.binary_search_by(|e| key(e).cmp(&(u, v))) {
            Ok(i) => {
                self.edges.remove(i);
                let j = self
                    .edges
                    .binary_search_by(|e| key(e).cmp(&(v, u)))
                    .expect("both orientations are stored");
                self.edges.remove(j);
                false
            }
            Err(_) => {
                for (a, b) in [(u, v), (v, u)] {
                    let i = self.edges.partition_point(|e| key(e) < (a, b));
                    self.edges.insert(i, Edge { src: a, dst: b, kind: None });
                }
                true
            }
        }
    }

    pub(crate) fn replace_links(&mut self, links: impl IntoIterator<Item = Edge>) -> Result<()> {
        let n = self.num_nodes();
        let features = std::mem::replace(&mut self.features, Array2::zeros((0, 0)));
        *self = GraphSnapshot::new(self.t, n, links, features)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    pub fn new(train_len: usize, val_len: usize, test_len: usize) -> Result<Self> {
        if train_len == 0 {
            return Err(DgibError::arg("split: train_len must be >= 1"));
        }
        Ok(SplitSpec { train_len, val_len, test_len })
    }

    pub fn total(&self) -> usize {
        self.train_len + self.val_len + self.test_len
    }

    /// 1-based inclusive time range of a split.
    pub fn range(&self, kind: SplitKind) -> std::ops::RangeInclusive<usize> {
        let (start, len) = match kind {
            SplitKind::Train => (1, self.train_len),
            SplitKind::Val => (self.train_len + 1, self.val_len),
            SplitKind::Test => (self.train_len + self.val_len + 1, self.test_len),
        };
        // start >= 1, so an empty split yields `start..=start - 1`
        start..=start + len - 1
    }

    pub fn kind_of(&self, t: usize) -> Option<SplitKind> {
        [SplitKind::Train, SplitKind::Val, SplitKind::Test]
            .into_iter()
            .find(|k| self.range(*k).contains(&t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGraph {
    pub name: String,
    pub snapshots: Vec<GraphSnapshot>,
    /// Node features of the prediction step T+1.
    pub next_features: Array2<f64>,
    pub num_nodes: usize,
    pub feature_dim: usize,
    /// Number of distinct link types; 0 for untyped graphs.
    pub link_types: u32,
    pub split: SplitSpec,
}

/// The slice of a dynamic graph a model sees when predicting the links of
/// time `target`: snapshots `1..target` and the features of `target`.
#[derive(Debug, Clone, Copy)]
pub struct GraphWindow<'a> {
    pub history: &'a [GraphSnapshot],
    pub next_features: &'a Array2<f64>,
}

impl<'a> GraphWindow<'a> {
    /// Number of history snapshots (the `T` of this window).
    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.next_features.nrows()
    }

    /// Features at 1-based time `t`, where `t = len() + 1` is the target step.
    pub fn features(&self, t: usize) -> &'a Array2<f64> {
        if t == self.history.len() + 1 {
            self.next_features
        } else {
            &self.history[t - 1].features
        }
    }
}

impl DynamicGraph {
    pub fn new(
        name: impl Into<String>,
        snapshots: Vec<GraphSnapshot>,
        next_features: Array2<f64>,
        link_types: u32,
        split: SplitSpec,
    ) -> Result<Self> {
        let num_nodes = next_features.nrows();
        let feature_dim = next_features.ncols();
        let dg = DynamicGraph {
            name: name.into(),
            snapshots,
            next_features,
            num_nodes,
            feature_dim,
            link_types,
            split,
        };
        dg.validate()?;
        Ok(dg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snapshots.is_empty() {
            return Err(DgibError::arg("dynamic graph has no snapshots"));
        }
        if self.split.total() != self.snapshots.len() {
            return Err(DgibError::arg(format!(
                "split lengths sum to {} but graph has {} snapshots",
                self.split.total(),
                self.snapshots.len()
            )));
        }
        if self.split.train_len == 0 {
            return Err(DgibError::arg("split: train_len must be >= 1"));
        }
        if self.next_features.dim() != (self.num_nodes, self.feature_dim) {
            return Err(DgibError::arg("next_features shape mismatch"));
        }
        for (i, s) in self.snapshots.iter().enumerate() {
            if s.t != i + 1 {
                return Err(DgibError::arg(format!(
                    "snapshot {i} carries time {} (expected {})",
                    s.t,
                    i + 1
                )));
            }
            if s.features.dim() != (self.num_nodes, self.feature_dim) {
                return Err(DgibError::arg(format!(
                    "snapshot t={} feature shape {:?} != ({}, {})",
                    s.t,
                    s.features.dim(),
                    self.num_nodes,
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }

    /// Number of snapshots `T`.
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshot(&self, t: usize) -> Result<&GraphSnapshot> {
        if t == 0 || t > self.snapshots.len() {
            return Err(DgibError::arg(format!(
                "time {t} outside 1..={}",
                self.snapshots.len()
            )));
        }
        Ok(&self.snapshots[t - 1])
    }

    pub fn total_links(&self) -> usize {
        self.snapshots.iter().map(|s| s.num_links()).sum()
    }

    /// Input window for predicting the links at `target` (2..=T+1).
    pub fn window(&self, target: usize) -> Result<GraphWindow<'_>> {
        let t_max = self.snapshots.len();
        if target < 2 || target > t_max + 1 {
            return Err(DgibError::arg(format!(
                "window target {target} outside 2..={}",
                t_max + 1
            )));
        }
        let next_features = if target == t_max + 1 {
            &self.next_features
        } else {
            &self.snapshots[target - 1].features
        };
        Ok(GraphWindow {
            history: &self.snapshots[..target - 1],
            next_features,
        })
    }

    /// The full-history window predicting step T+1.
    pub fn full_window(&self) -> GraphWindow<'_> {
        GraphWindow {
            history: &self.snapshots,
            next_features: &self.next_features,
        }
    }

    /// Target times whose labels belong to `kind`. Training targets start at 2
    /// because the first snapshot has no history.
    pub fn targets(&self, kind: SplitKind) -> Vec<usize> {
        self.split.range(kind).filter(|&t| t >= 2).collect()
    }

    /// Applies a node relabeling: node `v` becomes `perm[v]`.
    pub fn permute_nodes(&self, perm: &[NodeId]) -> Result<DynamicGraph> {
        let n = self.num_nodes;
        if perm.len() != n {
            return Err(DgibError::arg("permutation length mismatch"));
        }
        let permute_rows = |x: &Array2<f64>| {
            let mut out = Array2::zeros(x.dim());
            for v in 0..n {
                out.row_mut(perm[v]).assign(&x.row(v));
            }
            out
        };
        let snapshots = self
            .snapshots
            .iter()
            .map(|s| {
                GraphSnapshot::new(
                    s.t,
                    n,
                    s.links().map(|e| Edge { src: perm[e.src], dst: perm[e.dst], kind: e.kind }),
                    permute_rows(&s.features),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        DynamicGraph::new(
            self.name.clone(),
            snapshots,
            permute_rows(&self.next_features),
            self.link_types,
            self.split,
        )
    }
}

/// A labeled node pair at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSample {
    pub u: NodeId,
    pub v: NodeId,
    pub t: usize,
    pub label: u8,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(n: usize) -> Array2<f64> {
        Array2::zeros((n, 2))
    }

    #[test]
    fn snapshot_symmetrizes_and_dedups() {
        let s = GraphSnapshot::new(
            1,
            4,
            vec![
                Edge { src: 0, dst: 1, kind: Some(1) },
                Edge { src: 1, dst: 0, kind: Some(2) },
                Edge { src: 2, dst: 2, kind: None },
                Edge { src: 3, dst: 1, kind: None },
            ],
            feats(4),
        )
        .unwrap();
        assert_eq!(s.num_links(), 2);
        assert!(s.has_edge(0, 1) && s.has_edge(1, 0));
        assert!(s.has_edge(1, 3) && s.has_edge(3, 1));
        assert!(!s.has_edge(2, 2));
        assert_eq!(s.neighbors(1).collect::<Vec<_>>(), vec![0, 3]);
        // first type wins
        assert!(s.edges().iter().filter(|e| e.src.min(e.dst) == 0).all(|e| e.kind == Some(1)));
    }

    #[test]
    fn snapshot_rejects_out_of_range() {
        let r = GraphSnapshot::new(1, 2, vec![Edge { src: 0, dst: 5, kind: None }], feats(2));
        assert!(r.is_err());
    }

    #[test]
    fn split_ranges_are_disjoint_and_contiguous() {
        let s = SplitSpec::new(10, 1, 5).unwrap();
        assert_eq!(s.range(SplitKind::Train), 1..=10);
        assert_eq!(s.range(SplitKind::Val), 11..=11);
        assert_eq!(s.range(SplitKind::Test), 12..=16);
        for t in 1..=16 {
            let hits = [SplitKind::Train, SplitKind::Val, SplitKind::Test]
                .iter()
                .filter(|k| s.range(**k).contains(&t))
                .count();
            assert_eq!(hits, 1, "t={t}");
        }
        let no_val = SplitSpec::new(3, 0, 1).unwrap();
        assert_eq!(no_val.range(SplitKind::Val).count(), 0);
        assert_eq!(no_val.range(SplitKind::Test), 4..=4);
        assert!(SplitSpec::new(0, 1, 1).is_err());
    }

    #[test]
    fn window_slices_history() {
        let snaps = (1..=3).map(|t| GraphSnapshot::empty(t, feats(3))).collect();
        let dg = DynamicGraph::new("w", snaps, feats(3), 0, SplitSpec::new(1, 1, 1).unwrap()).unwrap();
        let w = dg.window(3).unwrap();
        assert_eq!(w.len(), 2);
        assert!(std::ptr::eq(w.next_features, &dg.snapshots[2].features));
        assert_eq!(dg.full_window().len(), 3);
        assert!(dg.window(1).is_err());
        assert!(dg.window(5).is_err());
        assert_eq!(dg.targets(SplitKind::Train), Vec::<usize>::new());
        assert_eq!(dg.targets(SplitKind::Test), vec![3]);
    }

    #[test]
    fn validate_catches_shape_mismatch() {
        let snaps = vec![GraphSnapshot::empty(1, feats(3)), GraphSnapshot::empty(2, feats(4))];
        let r = DynamicGraph::new("bad", snaps, feats(3), 0, SplitSpec::new(1, 0, 1).unwrap());
        assert!(r.is_err());
    }
}
