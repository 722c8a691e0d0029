use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DynamicGraph, Edge, GraphSnapshot, SplitSpec};
use crate::error::{DgibError, Result};
use crate::rng;

/// Parameters of the planted-community generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub n_nodes: usize,
    pub n_snapshots: usize,
    pub n_communities: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    /// Fraction of links rewired between consecutive snapshots.
    pub drift: f64,
    /// Number of link types; 0 leaves links untyped.
    pub link_types: u32,
    pub seed: u64,
    /// Standard deviation of the Gaussian jitter added to the one-hot features.
    #[serde(default = "default_jitter")]
    pub feature_jitter: f64,
    /// Chronological split; defaults to one validation snapshot and
    /// `max(1, round(T / 5))` test snapshots.
    #[serde(default)]
    pub split: Option<SplitSpec>,
}

fn default_jitter() -> f64 {
    0.1
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n_nodes: 100,
            n_snapshots: 6,
            n_communities: 5,
            p_intra: 0.3,
            p_inter: 0.005,
            drift: 0.1,
            link_types: 5,
            seed: 0,
            feature_jitter: default_jitter(),
            split: None,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_intra", self.p_intra), ("p_inter", self.p_inter), ("drift", self.drift)] {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(DgibError::arg(format!("{name} = {p} is not a probability")));
            }
        }
        if self.n_nodes == 0 || self.n_communities == 0 || self.n_communities > self.n_nodes {
            return Err(DgibError::arg(format!(
                "n_communities = {} must be in 1..=n_nodes ({})",
                self.n_communities, self.n_nodes
            )));
        }
        if !(self.feature_jitter >= 0.0) {
            return Err(DgibError::arg("feature_jitter must be >= 0"));
        }
        Ok(())
    }

    pub fn resolved_split(&self) -> Result<SplitSpec> {
        if let Some(s) = self.split {
            return Ok(s);
        }
        let t = self.n_snapshots;
        if t < 3 {
            return Err(DgibError::arg(format!(
                "n_snapshots = {t}: need at least 3 snapshots for the default split"
            )));
        }
        let test = ((t as f64 / 5.0).round() as usize).max(1);
        SplitSpec::new(t - test - 1, 1, test)
    }
}

/// Community of node `v` under balanced contiguous blocks.
pub fn community_of(v: usize, n_nodes: usize, n_communities: usize) -> usize {
    v * n_communities / n_nodes
}

fn link_probability(p: &SyntheticParams, u: usize, v: usize) -> f64 {
    if community_of(u, p.n_nodes, p.n_communities) == community_of(v, p.n_nodes, p.n_communities) {
        p.p_intra
    } else {
        p.p_inter
    }
}

fn random_kind<R: Rng>(p: &SyntheticParams, rng: &mut R) -> Option<u32> {
    (p.link_types > 0).then(|| rng.random_range(0..p.link_types))
}

fn features<R: Rng>(p: &SyntheticParams, rng: &mut R) -> Array2<f64> {
    let d = p.n_communities;
    let jitter = Normal::new(0.0, p.feature_jitter).expect("jitter validated");
    let mut x = Array2::zeros((p.n_nodes, d));
    for v in 0..p.n_nodes {
        x[[v, community_of(v, p.n_nodes, d)]] = 1.0;
        for j in 0..d {
            x[[v, j]] += jitter.sample(rng);
        }
    }
    x
}

fn sbm_draw<R: Rng>(p: &SyntheticParams, rng: &mut R) -> Vec<Edge> {
    let mut links = Vec::new();
    for u in 0..p.n_nodes {
        for v in (u + 1)..p.n_nodes {
            let prob = link_probability(p, u, v);
            if prob > 0.0 && rng.random::<f64>() < prob {
                links.push(Edge { src: u, dst: v, kind: random_kind(p, rng) });
            }
        }
    }
    links
}

/// Removes `round(drift * |E|)` random links and draws as many fresh links
/// from the block model by rejection sampling over node pairs.
fn rewire<R: Rng>(p: &SyntheticParams, prev: &[Edge], rng: &mut R) -> Vec<Edge> {
    let mut links = prev.to_vec();
    let m = (p.drift * links.len() as f64).round() as usize;
    if m == 0 {
        return links;
    }
    links.shuffle(rng);
    links.truncate(links.len() - m);
    let mut present: HashSet<(usize, usize)> = links.iter().map(|e| (e.src, e.dst)).collect();
    let p_max = p.p_intra.max(p.p_inter);
    let mut added = 0;
    let mut attempts = 0usize;
    let max_attempts = 1000 * m + 10_000;
    while added < m && attempts < max_attempts {
        attempts += 1;
        let u = rng.random_range(0..p.n_nodes);
        let v = rng.random_range(0..p.n_nodes);
        if u == v {
            continue;
        }
        let key = (u.min(v), u.max(v));
        if present.contains(&key) {
            continue;
        }
        if rng.random::<f64>() * p_max < link_probability(p, u, v) {
            present.insert(key);
            links.push(Edge { src: key.0, dst: key.1, kind: random_kind(p, rng) });
            added += 1;
        }
    }
    links
}

pub fn generate_synthetic(params: &SyntheticParams) -> Result<DynamicGraph> {
    params.validate()?;
    let split = params.resolved_split()?;
    if split.total() != params.n_snapshots {
        return Err(DgibError::arg(format!(
            "split sums to {} but n_snapshots = {}",
            split.total(),
            params.n_snapshots
        )));
    }
    let mut snapshots = Vec::with_capacity(params.n_snapshots);
    let mut links: Vec<Edge> = Vec::new();
    for t in 1..=params.n_snapshots {
        let mut r = rng::stream(params.seed, t as u64);
        links = if t == 1 {
            sbm_draw(params, &mut r)
        } else {
            rewire(params, &links, &mut r)
        };
        let x = features(params, &mut r);
        snapshots.push(GraphSnapshot::new(t, params.n_nodes, links.iter().copied(), x)?);
        // keep a canonical order so rewiring does not depend on hash iteration
        links = snapshots[t - 1].links().copied().collect();
    }
    let mut r = rng::stream(params.seed, params.n_snapshots as u64 + 1);
    let next = features(params, &mut r);
    DynamicGraph::new(
        format!("sbm-n{}-t{}-s{}", params.n_nodes, params.n_snapshots, params.seed),
        snapshots,
        next,
        params.link_types,
        split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_probabilities_give_edgeless_snapshots() {
        let p = SyntheticParams { p_intra: 0.0, p_inter: 0.0, n_nodes: 20, ..Default::default() };
        let dg = generate_synthetic(&p).unwrap();
        assert!(dg.snapshots.iter().all(|s| s.num_links() == 0));
    }

    #[test]
    fn same_seed_same_graph() {
        let p = SyntheticParams { n_nodes: 40, seed: 3, ..Default::default() };
        assert_eq!(generate_synthetic(&p).unwrap(), generate_synthetic(&p).unwrap());
        let q = SyntheticParams { seed: 4, ..p.clone() };
        assert_ne!(generate_synthetic(&p).unwrap(), generate_synthetic(&q).unwrap());
    }

    #[test]
    fn invalid_probability_is_rejected() {
        for bad in [-0.1, 1.5, f64::NAN] {
            let p = SyntheticParams { p_intra: bad, ..Default::default() };
            assert!(matches!(generate_synthetic(&p), Err(DgibError::Argument(_))));
        }
        let p = SyntheticParams { n_communities: 200, ..Default::default() };
        assert!(generate_synthetic(&p).is_err());
    }

    #[test]
    fn intra_count_within_three_sigma() {
        let p = SyntheticParams {
            n_nodes: 50,
            n_snapshots: 4,
            n_communities: 2,
            p_intra: 0.2,
            p_inter: 0.01,
            seed: 7,
            ..Default::default()
        };
        let dg = generate_synthetic(&p).unwrap();
        // two blocks of 25 nodes: 2 * C(25, 2) = 600 intra pairs
        let pairs = 600.0;
        let mean = pairs * 0.2;
        let sd = (pairs * 0.2 * 0.8f64).sqrt();
        let intra = dg.snapshots[0]
            .links()
            .filter(|e| community_of(e.src, 50, 2) == community_of(e.dst, 50, 2))
            .count() as f64;
        assert!((intra - mean).abs() <= 3.0 * sd, "intra={intra} mean={mean} sd={sd}");
    }

    #[test]
    fn rewiring_preserves_link_count_and_changes_links() {
        let p = SyntheticParams { n_nodes: 60, drift: 0.3, seed: 1, ..Default::default() };
        let dg = generate_synthetic(&p).unwrap();
        let a = &dg.snapshots[0];
        let b = &dg.snapshots[1];
        assert_eq!(a.num_links(), b.num_links());
        let kept = a.links().filter(|e| b.has_edge(e.src, e.dst)).count();
        let expected = a.num_links() - (0.3 * a.num_links() as f64).round() as usize;
        assert!(kept >= expected && kept < a.num_links());
    }

    #[test]
    fn features_are_jittered_one_hot() {
        let p = SyntheticParams { n_nodes: 30, n_communities: 3, feature_jitter: 0.0, ..Default::default() };
        let dg = generate_synthetic(&p).unwrap();
        assert_eq!(dg.feature_dim, 3);
        for v in 0..30 {
            let row = dg.snapshots[0].features.row(v);
            assert_eq!(row.sum(), 1.0);
            assert_eq!(row[community_of(v, 30, 3)], 1.0);
        }
    }

    #[test]
    fn link_types_are_in_range() {
        let p = SyntheticParams { n_nodes: 40, link_types: 3, ..Default::default() };
        let dg = generate_synthetic(&p).unwrap();
        assert!(dg
            .snapshots
            .iter()
            .flat_map(|s| s.edges())
            .all(|e| matches!(e.kind, Some(k) if k < 3)));
        let untyped = SyntheticParams { link_types: 0, ..p };
        let dg = generate_synthetic(&untyped).unwrap();
        assert!(dg.snapshots.iter().flat_map(|s| s.edges()).all(|e| e.kind.is_none()));
    }
}
