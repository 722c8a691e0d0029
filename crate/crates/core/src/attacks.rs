//! Adversarial perturbations of dynamic graphs.
//!
//! Two non-targeted attacks (link-type removal, Gaussian feature noise) and
//! a greedy targeted edge-flip attack driven by a surrogate loss. The
//! targeted attack is a stand-in for NETTACK, not a reimplementation: it
//! picks targets from the top-degree decile and flips single edges incident
//! to each target while the surrogate loss does not decrease.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::bounds::ce_lower_bound;
use crate::dyngraph::{DynamicGraph, Edge, LinkSample, NodeId, SplitKind};
use crate::error::{DgibError, Result};
use crate::model::{DGIBModel, WindowIndex};
use crate::rng;

/// Noise scales evaluated in the original protocol.
pub const PROTOCOL_LAMBDAS: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    #[serde(alias = "structure")]
    StructureLinktype,
    #[serde(alias = "feature")]
    FeatureNoise,
    Targeted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackPhase {
    Evasion,
    Poisoning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub mode: AttackMode,
    pub lambda: f64,
    pub n_perturbations: usize,
    pub phase: AttackPhase,
    /// Link type removed by the structure attack; random when absent.
    pub removed_type: Option<u32>,
    pub n_targets: usize,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            mode: AttackMode::FeatureNoise,
            lambda: 1.0,
            n_perturbations: 2,
            phase: AttackPhase::Evasion,
            removed_type: None,
            n_targets: 10,
            seed: 0,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DgibError::arg(format!("lambda = {} must be finite and >= 0", self.lambda)));
        }
        if self.mode == AttackMode::Targeted && self.n_targets == 0 {
            return Err(DgibError::arg("n_targets must be >= 1"));
        }
        Ok(())
    }

    /// True when `lambda` is one of the original protocol's values.
    pub fn is_protocol_lambda(&self) -> bool {
        PROTOCOL_LAMBDAS.contains(&self.lambda)
    }

    /// Short label used in tables, e.g. `feature:1` or `targeted-evasion:2`.
    pub fn label(&self) -> String {
        match self.mode {
            AttackMode::StructureLinktype => "structure".into(),
            AttackMode::FeatureNoise => format!("feature:{}", self.lambda),
            AttackMode::Targeted => {
                let phase = match self.phase {
                    AttackPhase::Evasion => "evasion",
                    AttackPhase::Poisoning => "poisoning",
                };
                format!("targeted-{phase}:{}", self.n_perturbations)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureAttack {
    pub graph: DynamicGraph,
    pub removed_type: u32,
}

/// Removes every link of one type from the training and validation
/// snapshots and strips the type labels of the surviving links there.
pub fn attack_structure<R: Rng>(dg: &DynamicGraph, spec: &AttackSpec, rng: &mut R) -> Result<StructureAttack> {
    if dg.link_types < 2 {
        return Err(DgibError::arg(format!(
            "structure attack needs at least 2 link types, dataset `{}` has {}",
            dg.name, dg.link_types
        )));
    }
    let removed_type = match spec.removed_type {
        Some(k) if k < dg.link_types => k,
        Some(k) => {
            return Err(DgibError::arg(format!("removed_type {k} outside 0..{}", dg.link_types)));
        }
        None => rng.random_range(0..dg.link_types),
    };
    let mut graph = dg.clone();
    for snap in &mut graph.snapshots {
        if matches!(dg.split.kind_of(snap.t), Some(SplitKind::Train | SplitKind::Val)) {
            let kept: Vec<Edge> = snap
                .links()
                .filter(|e| e.kind != Some(removed_type))
                .map(|e| Edge { kind: None, ..*e })
                .collect();
            snap.replace_links(kept)?;
        }
    }
    Ok(StructureAttack { graph, removed_type })
}

/// Mean absolute value over every clean feature entry.
pub fn reference_amplitude(dg: &DynamicGraph) -> f64 {
    let mats = dg.snapshots.iter().map(|s| &s.features).chain(std::iter::once(&dg.next_features));
    let (sum, count) = mats.fold((0.0, 0usize), |(s, c), m| (s + m.iter().map(|x| x.abs()).sum::<f64>(), c + m.len()));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// `X + lambda * r * eps` on every feature matrix, `r` from the clean graph.
pub fn attack_features<R: Rng>(dg: &DynamicGraph, lambda: f64, rng: &mut R) -> Result<DynamicGraph> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(DgibError::arg(format!("lambda = {lambda} must be finite and >= 0")));
    }
    let mut out = dg.clone();
    if lambda == 0.0 {
        return Ok(out);
    }
    let scale = lambda * reference_amplitude(dg);
    let mut noise = |m: &mut Array2<f64>| {
        for x in m.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *x += scale * e;
        }
    };
    for s in &mut out.snapshots {
        noise(&mut s.features);
    }
    noise(&mut out.next_features);
    Ok(out)
}

/// A link-prediction loss on fixed labeled pairs, evaluated on a candidate
/// (possibly perturbed) graph.
pub trait Surrogate {
    fn loss(&self, dg: &DynamicGraph, pairs: &[LinkSample]) -> Result<f64>;
}

/// The trained model's own predictor.
pub struct ModelSurrogate<'a> {
    pub model: &'a DGIBModel,
}

impl Surrogate for ModelSurrogate<'_> {
    fn loss(&self, dg: &DynamicGraph, pairs: &[LinkSample]) -> Result<f64> {
        let mut probs = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for (t, group) in group_by_time(pairs) {
            let window = dg.window(t)?;
            let index = WindowIndex::build(&window, self.model.cfg.k)?;
            let uv: Vec<(usize, usize)> = group.iter().map(|s| (s.u, s.v)).collect();
            probs.extend(self.model.score_window(&window, &index, &uv)?);
            labels.extend(group.iter().map(|s| s.label));
        }
        ce_lower_bound(&probs, &labels)
    }
}

/// Parameter-free proxy: embeddings `mean_t (A_t^2 X_t)` over the window
/// with a self-loop, symmetrically normalized adjacency, scored by
/// `sigmoid(4 cos(h_u, h_v))`.
pub struct LinearProxy;

impl LinearProxy {
    fn embeddings(dg: &DynamicGraph, target: usize) -> Result<Array2<f64>> {
        let window = dg.window(target)?;
        let n = dg.num_nodes;
        let mut acc = Array2::zeros((n, dg.feature_dim));
        for snap in window.history {
            let deg: Vec<f64> = (0..n).map(|v| (snap.degree(v) + 1) as f64).collect();
            let prop = |x: &Array2<f64>| {
                let mut out = Array2::zeros(x.dim());
                for v in 0..n {
                    let mut row = out.row_mut(v);
                    row.scaled_add(1.0 / deg[v], &x.row(v));
                    for u in snap.neighbors(v) {
                        row.scaled_add(1.0 / (deg[v] * deg[u]).sqrt(), &x.row(u));
                    }
                }
                out
            };
            acc += &prop(&prop(&snap.features));
        }
        Ok(acc / window.history.len() as f64)
    }
}

impl Surrogate for LinearProxy {
    fn loss(&self, dg: &DynamicGraph, pairs: &[LinkSample]) -> Result<f64> {
        let mut probs = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for (t, group) in group_by_time(pairs) {
            let h = Self::embeddings(dg, t)?;
            for s in group {
                let (a, b) = (h.row(s.u), h.row(s.v));
                let denom = (a.dot(&a) * b.dot(&b)).sqrt().max(1e-12);
                probs.push(sigmoid(4.0 * a.dot(&b) / denom));
                labels.push(s.label);
            }
        }
        ce_lower_bound(&probs, &labels)
    }
}

fn group_by_time(pairs: &[LinkSample]) -> BTreeMap<usize, Vec<LinkSample>> {
    let mut out: BTreeMap<usize, Vec<LinkSample>> = BTreeMap::new();
    for s in pairs {
        out.entry(s.t).or_default().push(*s);
    }
    out
}

/// Up to `count` nodes sampled from the top decile by total degree.
pub fn select_targets<R: Rng>(dg: &DynamicGraph, count: usize, rng: &mut R) -> Vec<NodeId> {
    let n = dg.num_nodes;
    let degree: Vec<usize> = (0..n).map(|v| dg.snapshots.iter().map(|s| s.degree(v)).sum()).collect();
    let mut order: Vec<NodeId> = (0..n).collect();
    order.sort_by(|&a, &b| degree[b].cmp(&degree[a]).then(a.cmp(&b)));
    let decile = n.div_ceil(10).max(1);
    let pool = &order[..decile.min(n)];
    let mut picked: Vec<NodeId> = pool.choose_multiple(rng, count.min(pool.len())).copied().collect();
    picked.sort_unstable();
    picked
}

/// Labeled pairs incident to the targets at the test steps: every incident
/// link plus as many incident non-links per target and step.
pub fn target_eval_samples(dg: &DynamicGraph, targets: &[NodeId], seed: u64) -> Result<Vec<LinkSample>> {
    let mut out = Vec::new();
    for t in dg.targets(SplitKind::Test) {
        let snap = dg.snapshot(t)?;
        for &v in targets {
            let pos: Vec<NodeId> = snap.neighbors(v).collect();
            let mut free: Vec<NodeId> = (0..dg.num_nodes).filter(|&u| u != v && !snap.has_edge(u, v)).collect();
            let mut r = rng::stream(rng::mix(seed, t as u64), v as u64);
            let m = pos.len().min(free.len());
            let (neg, _) = free.partial_shuffle(&mut r, m);
            out.extend(pos.iter().map(|&u| LinkSample { u: v, v: u, t, label: 1 }));
            out.extend(neg.iter().map(|&u| LinkSample { u: v, v: u, t, label: 0 }));
        }
    }
    if !out.iter().any(|s| s.label == 1) || !out.iter().any(|s| s.label == 0) {
        return Err(DgibError::EmptyResult("targets have no incident test links".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flip {
    pub target: NodeId,
    pub other: NodeId,
    pub t: usize,
    pub added: bool,
}

#[derive(Debug, Clone)]
pub struct TargetedAttack {
    pub graph: DynamicGraph,
    pub targets: Vec<NodeId>,
    pub flips: Vec<Flip>,
    /// Surrogate loss of each target before and after each applied flip.
    pub loss_trace: Vec<Vec<f64>>,
    /// Pairs the surrogate loss and the attacked AUC are measured on.
    pub eval_samples: Vec<LinkSample>,
}

/// Snapshots an attack may modify: inputs of the test windows for evasion,
/// every snapshot for poisoning.
pub fn flippable_snapshots(dg: &DynamicGraph, phase: AttackPhase) -> Vec<usize> {
    match phase {
        AttackPhase::Poisoning => (1..=dg.len()).collect(),
        AttackPhase::Evasion => {
            let tests = dg.targets(SplitKind::Test);
            match (tests.first(), tests.last()) {
                (Some(&first), Some(&last)) => ((first - 1).max(1)..last).collect(),
                _ => Vec::new(),
            }
        }
    }
}

/// Greedy targeted attack with `n` flips per target.
pub fn attack_targeted<R: Rng>(
    dg: &DynamicGraph,
    surrogate: &dyn Surrogate,
    n: usize,
    phase: AttackPhase,
    n_targets: usize,
    rng: &mut R,
) -> Result<TargetedAttack> {
    let targets = select_targets(dg, n_targets, rng);
    let eval_seed: u64 = rng.random();
    let eval_samples = target_eval_samples(dg, &targets, eval_seed)?;
    let mut graph = dg.clone();
    let mut flips = Vec::new();
    let mut loss_trace = Vec::new();
    let times = flippable_snapshots(dg, phase);
    for &v in &targets {
        let pairs: Vec<LinkSample> = eval_samples.iter().filter(|s| s.u == v).copied().collect();
        let mut current = surrogate.loss(&graph, &pairs)?;
        let mut trace = vec![current];
        for _ in 0..n {
            let mut best: Option<(f64, usize, NodeId)> = None;
            for &t in &times {
                for u in (0..graph.num_nodes).filter(|&u| u != v) {
                    graph.snapshots[t - 1].toggle_link(v, u);
                    let loss = surrogate.loss(&graph, &pairs)?;
                    graph.snapshots[t - 1].toggle_link(v, u);
                    if best.is_none_or(|(b, _, _)| loss > b) {
                        best = Some((loss, t, u));
                    }
                }
            }
            match best {
                Some((loss, t, u)) if loss >= current => {
                    let added = graph.snapshots[t - 1].toggle_link(v, u);
                    flips.push(Flip { target: v, other: u, t, added });
                    current = loss;
                    trace.push(loss);
                }
                _ => break,
            }
        }
        loss_trace.push(trace);
    }
    Ok(TargetedAttack { graph, targets, flips, loss_trace, eval_samples })
}

/// Link pairs whose presence differs between two graphs, per snapshot.
pub fn edge_difference(a: &DynamicGraph, b: &DynamicGraph) -> BTreeSet<(usize, NodeId, NodeId)> {
    let mut out = BTreeSet::new();
    for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
        for e in sa.links() {
            if !sb.has_edge(e.src, e.dst) {
                out.insert((sa.t, e.src, e.dst));
            }
        }
        for e in sb.links() {
            if !sa.has_edge(e.src, e.dst) {
                out.insert((sa.t, e.src, e.dst));
            }
        }
    }
    out
}
