use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DynamicGraph, GraphSnapshot, LinkSample, SplitKind};
use crate::error::{DgibError, Result};
use crate::rng;

/// All links of snapshot `t` as positives plus the same number of negatives
/// drawn uniformly from non-adjacent pairs `u != v`.
pub fn sample_link_labels<R: Rng>(dg: &DynamicGraph, t: usize, rng: &mut R) -> Result<Vec<LinkSample>> {
    sample_snapshot_labels(dg.snapshot(t)?, rng)
}

pub fn sample_snapshot_labels<R: Rng>(snap: &GraphSnapshot, rng: &mut R) -> Result<Vec<LinkSample>> {
    let n = snap.num_nodes();
    let n_pos = snap.num_links();
    if n_pos == 0 {
        return Err(DgibError::EmptyResult(format!("snapshot t={} has no links", snap.t)));
    }
    let total_pairs = n * (n - 1) / 2;
    let n_non_edges = total_pairs - n_pos;
    if n_non_edges == 0 {
        return Err(DgibError::EmptyResult(format!(
            "snapshot t={} is complete; no negative pairs exist",
            snap.t
        )));
    }
    let mut out: Vec<LinkSample> = snap
        .links()
        .map(|e| LinkSample { u: e.src, v: e.dst, t: snap.t, label: 1 })
        .collect();

    if n_non_edges * 4 >= total_pairs {
        // sparse enough for rejection sampling
        while out.len() < 2 * n_pos {
            let u = rng.random_range(0..n);
            let v = rng.random_range(0..n);
            if u != v && !snap.has_edge(u, v) {
                out.push(LinkSample { u: u.min(v), v: u.max(v), t: snap.t, label: 0 });
            }
        }
    } else {
        let pool: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| ((u + 1)..n).map(move |v| (u, v)))
            .filter(|&(u, v)| !snap.has_edge(u, v))
            .collect();
        for _ in 0..n_pos {
            let (u, v) = pool[rng.random_range(0..pool.len())];
            out.push(LinkSample { u, v, t: snap.t, label: 0 });
        }
    }
    Ok(out)
}

/// Evaluation pairs for a split, drawn once per seed and shared by every
/// model and ablation evaluated against that seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NegativeCache {
    entries: BTreeMap<String, Vec<LinkSample>>,
}

fn split_name(kind: SplitKind) -> &'static str {
    match kind {
        SplitKind::Train => "train",
        SplitKind::Val => "val",
        SplitKind::Test => "test",
    }
}

impl NegativeCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(kind: SplitKind, seed: u64) -> String {
        format!("{}:seed{seed}", split_name(kind))
    }

    /// Labeled pairs for every target of `kind` with at least one link.
    pub fn get_or_sample(&mut self, dg: &DynamicGraph, kind: SplitKind, seed: u64) -> Result<&[LinkSample]> {
        let key = Self::key(kind, seed);
        if !self.entries.contains_key(&key) {
            let samples = Self::draw(dg, kind, seed)?;
            self.entries.insert(key.clone(), samples);
        }
        Ok(&self.entries[&key])
    }

    /// The deterministic draw behind `get_or_sample`, without caching.
    pub fn draw(dg: &DynamicGraph, kind: SplitKind, seed: u64) -> Result<Vec<LinkSample>> {
        let mut samples = Vec::new();
        for t in dg.targets(kind) {
            let snap = dg.snapshot(t)?;
            if snap.num_links() == 0 {
                continue;
            }
            let mut r = rng::stream(rng::mix(seed, t as u64), 0xE7A1);
            samples.extend(sample_snapshot_labels(snap, &mut r)?);
        }
        if samples.is_empty() {
            return Err(DgibError::EmptyResult(format!(
                "no labeled links in the {} split",
                split_name(kind)
            )));
        }
        Ok(samples)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("cache serializes");
        fs::write(path, text).map_err(|e| DgibError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DgibError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DgibError::Parse {
            file: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Positive pairs never appear among the negatives of their snapshot.
pub fn negatives_are_clean(snap: &GraphSnapshot, samples: &[LinkSample]) -> bool {
    let pos: HashSet<(usize, usize)> = snap.links().map(|e| (e.src, e.dst)).collect();
    samples
        .iter()
        .filter(|s| s.label == 0)
        .all(|s| s.u != s.v && !pos.contains(&(s.u.min(s.v), s.u.max(s.v))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyngraph::{generate_synthetic, Edge, SplitSpec, SyntheticParams};
    use ndarray::Array2;

    fn ten_edge_graph() -> DynamicGraph {
        let links: Vec<Edge> = (0..10).map(|i| Edge { src: i, dst: i + 1, kind: None }).collect();
        let s1 = GraphSnapshot::new(1, 20, links, Array2::zeros((20, 1))).unwrap();
        let s2 = GraphSnapshot::empty(2, Array2::zeros((20, 1)));
        DynamicGraph::new("ten", vec![s1, s2], Array2::zeros((20, 1)), 0, SplitSpec::new(1, 0, 1).unwrap())
            .unwrap()
    }

    #[test]
    fn balanced_positives_and_negatives() {
        let dg = ten_edge_graph();
        let mut r = rng::seeded(1);
        let s = sample_link_labels(&dg, 1, &mut r).unwrap();
        assert_eq!(s.iter().filter(|x| x.label == 1).count(), 10);
        assert_eq!(s.iter().filter(|x| x.label == 0).count(), 10);
    }

    #[test]
    fn empty_snapshot_is_an_error() {
        let dg = ten_edge_graph();
        let mut r = rng::seeded(1);
        assert!(matches!(sample_link_labels(&dg, 2, &mut r), Err(DgibError::EmptyResult(_))));
    }

    #[test]
    fn negatives_never_hit_edges() {
        let dg = generate_synthetic(&SyntheticParams { n_nodes: 30, p_intra: 0.6, ..Default::default() }).unwrap();
        let snap = dg.snapshot(1).unwrap();
        let mut r = rng::seeded(9);
        for _ in 0..1000 {
            let s = sample_snapshot_labels(snap, &mut r).unwrap();
            assert!(negatives_are_clean(snap, &s));
        }
    }

    #[test]
    fn dense_snapshot_uses_enumeration() {
        let links: Vec<Edge> = (0..6)
            .flat_map(|u| ((u + 1)..6).map(move |v| Edge { src: u, dst: v, kind: None }))
            .filter(|e| !(e.src == 0 && e.dst == 5))
            .collect();
        let snap = GraphSnapshot::new(1, 6, links, Array2::zeros((6, 1))).unwrap();
        let mut r = rng::seeded(0);
        let s = sample_snapshot_labels(&snap, &mut r).unwrap();
        assert!(s.iter().filter(|x| x.label == 0).all(|x| (x.u, x.v) == (0, 5)));
    }

    #[test]
    fn cache_is_deterministic_and_persists() {
        let dg = generate_synthetic(&SyntheticParams { n_nodes: 30, ..Default::default() }).unwrap();
        let mut a = NegativeCache::new();
        let first = a.get_or_sample(&dg, SplitKind::Test, 5).unwrap().to_vec();
        let again = a.get_or_sample(&dg, SplitKind::Test, 5).unwrap().to_vec();
        assert_eq!(first, again);
        assert_eq!(first, NegativeCache::draw(&dg, SplitKind::Test, 5).unwrap());
        assert_ne!(first, NegativeCache::draw(&dg, SplitKind::Test, 6).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("neg.json");
        a.save(&p).unwrap();
        assert_eq!(NegativeCache::load(&p).unwrap(), a);
    }
}
