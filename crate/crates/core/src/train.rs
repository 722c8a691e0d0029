//! Training, evaluation and diagnostics.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    attack_features, attack_structure, attack_targeted, AttackMode, AttackPhase, AttackSpec, LinearProxy,
    ModelSurrogate,
};
use crate::bounds::{mi_exact_discrete, BoundConfig, LossBreakdown, TimeIndices};
use crate::dyngraph::{sample_link_labels, DynamicGraph, LinkSample, NegativeCache, SplitKind};
use crate::error::{DgibError, Result};
use crate::model::{DGIBModel, ForwardTrace, ModelConfig, WindowIndex};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "no_cons")]
    NoCons,
    #[serde(rename = "no_A")]
    NoA,
    #[serde(rename = "no_Z")]
    NoZ,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoCons, Ablation::NoA, Ablation::NoZ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoCons => "no_cons",
            Ablation::NoA => "no_A",
            Ablation::NoZ => "no_Z",
        }
    }
}

impl FromStr for Ablation {
    type Err = DgibError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| DgibError::arg(format!("unknown ablation `{s}` (expected none, no_cons, no_A or no_Z)")))
    }
}

/// `no_cons` drops the consensual channel, `no_A` / `no_Z` empty the
/// structure / feature index sets.
pub fn apply_ablation(cfg: &BoundConfig, variant: Ablation) -> BoundConfig {
    let mut out = cfg.clone();
    match variant {
        Ablation::None => {}
        Ablation::NoCons => out.alpha = 1.0,
        Ablation::NoA => out.time_indices_a = TimeIndices::none(),
        Ablation::NoZ => out.time_indices_z = TimeIndices::none(),
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub bound_cfg: BoundConfig,
    pub ablation: Ablation,
    /// Bins of the information-plane estimator; 0 disables tracking.
    pub info_plane_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 1000,
            patience: 50,
            seed: 0,
            bound_cfg: BoundConfig::default(),
            ablation: Ablation::None,
            info_plane_bins: 16,
        }
    }
}

/// Learning rates of the original protocol's grid.
pub const LEARNING_RATE_GRID: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(DgibError::arg("max_epochs and patience must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(DgibError::arg(format!("learning_rate = {} must be >= 0", self.learning_rate)));
        }
        self.bound_cfg.validate()
    }
}

/// Adam with the usual moment decay constants.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(lr: f64, model: &DGIBModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn update(&mut self, model: &mut DGIBModel, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, p) in model.param_slices_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rank AUC: the probability that a random positive outscores a random
/// negative, ties counted one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(DgibError::arg("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DgibError::arg("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DgibError::arg("AUC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average of the 1-based ranks i+1..=j+1
        let rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

fn group_by_time(samples: &[LinkSample]) -> BTreeMap<usize, Vec<LinkSample>> {
    let mut out: BTreeMap<usize, Vec<LinkSample>> = BTreeMap::new();
    for s in samples {
        out.entry(s.t).or_default().push(*s);
    }
    out
}

/// Pooled AUC of eval-mode predictions on `samples`, each scored with the
/// window of `inputs` ending before its time step.
pub fn evaluate(model: &DGIBModel, inputs: &DynamicGraph, samples: &[LinkSample]) -> Result<f64> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for (t, group) in group_by_time(samples) {
        let window = inputs.window(t)?;
        let index = WindowIndex::build(&window, model.cfg.k)?;
        let pairs: Vec<(usize, usize)> = group.iter().map(|s| (s.u, s.v)).collect();
        scores.extend(model.score_window(&window, &index, &pairs)?);
        labels.extend(group.iter().map(|s| s.label));
    }
    auc(&scores, &labels)
}

/// Test AUC on the shared evaluation pairs of `seed`.
pub fn test_auc(model: &DGIBModel, dg: &DynamicGraph, seed: u64) -> Result<f64> {
    evaluate(model, dg, &NegativeCache::draw(dg, SplitKind::Test, seed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub ce: f64,
    pub sum_a: f64,
    pub sum_z: f64,
    pub consensual: f64,
    pub total: f64,
    pub val_auc: Option<f64>,
    pub i_dz: Option<f64>,
    pub i_yz: Option<f64>,
    pub temperature: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub stopped_early: bool,
    pub train_config: TrainConfig,
    pub seconds_total: f64,
}

impl EvalReport {
    pub fn write_metrics_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["epoch", "ce", "sum_A", "sum_Z", "consensual", "total", "val_auc"])
            .map_err(|e| csv_err(path, e))?;
        for r in &self.epochs {
            let val = r.val_auc.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                r.epoch.to_string(),
                r.ce.to_string(),
                r.sum_a.to_string(),
                r.sum_z.to_string(),
                r.consensual.to_string(),
                r.total.to_string(),
                val,
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| DgibError::io(path, e))
    }

    pub fn write_infoplane_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["epoch", "I_DZ", "I_YZ"]).map_err(|e| csv_err(path, e))?;
        for r in &self.epochs {
            let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.epoch.to_string(), f(r.i_dz), f(r.i_yz)]).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| DgibError::io(path, e))
    }
}

pub(crate) fn csv_err(path: &std::path::Path, e: csv::Error) -> DgibError {
    DgibError::io(path, std::io::Error::other(e.to_string()))
}

struct TrainWindow {
    target: usize,
    index: WindowIndex,
}

fn build_windows(dg: &DynamicGraph, targets: &[usize], k: usize) -> Result<Vec<TrainWindow>> {
    targets
        .iter()
        .map(|&t| Ok(TrainWindow { target: t, index: WindowIndex::build(&dg.window(t)?, k)? }))
        .collect()
}

fn mean_breakdown(parts: &[LossBreakdown]) -> (f64, f64, f64, f64, f64) {
    let n = parts.len() as f64;
    let avg = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    (
        avg(&|b| b.ce),
        avg(&|b| b.sum_a()),
        avg(&|b| b.sum_z()),
        avg(&|b| b.consensual),
        avg(&|b| b.total),
    )
}

/// Trains on rolling windows of the training split: each training snapshot
/// `t >= 2` serves once per epoch as the prediction target, with all earlier
/// snapshots as history. Stops when the validation AUC has not improved for
/// `patience` epochs and restores the best-validation parameters.
pub fn train(mut model: DGIBModel, dg: &DynamicGraph, cfg: &TrainConfig) -> Result<(DGIBModel, EvalReport)> {
    cfg.validate()?;
    model.validate()?;
    let started = Instant::now();
    model.cfg.bound = apply_ablation(&cfg.bound_cfg, cfg.ablation);
    let train_targets: Vec<usize> = dg
        .targets(SplitKind::Train)
        .into_iter()
        .filter(|&t| dg.snapshots[t - 1].num_links() > 0)
        .collect();
    if train_targets.is_empty() {
        return Err(DgibError::EmptyResult("no training targets with links (need train_len >= 2)".into()));
    }
    let windows = build_windows(dg, &train_targets, model.cfg.k)?;
    let val_samples = NegativeCache::draw(dg, SplitKind::Val, cfg.seed).ok();
    let info_samples = match cfg.info_plane_bins {
        0 => None,
        _ => Some(NegativeCache::draw(dg, SplitKind::Train, cfg.seed)?),
    };

    let mut opt = Adam::new(cfg.learning_rate, &model);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, DGIBModel)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        model.temperature = model.cfg.temperature.at(epoch);
        let mut parts = Vec::with_capacity(windows.len());
        for w in &windows {
            let window = dg.window(w.target)?;
            let mut r = rng::stream(rng::mix(cfg.seed, epoch as u64), w.target as u64);
            let samples = sample_link_labels(dg, w.target, &mut r)?;
            let (bd, grads) = model.loss_and_grad(&window, &w.index, &samples, &mut r, true)?;
            if let Some(term) = bd.first_non_finite() {
                return Err(DgibError::Divergence { epoch: epoch + 1, term });
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(DgibError::Divergence { epoch: epoch + 1, term: "gradient".into() });
            }
            opt.update(&mut model, &grads);
            parts.push(bd);
        }
        let (ce, sum_a, sum_z, consensual, total) = mean_breakdown(&parts);
        let val_auc = match &val_samples {
            Some(s) => Some(evaluate(&model, dg, s)?),
            None => None,
        };
        let (i_dz, i_yz) = match &info_samples {
            Some(samples) => {
                let (a, b) = info_plane_for_model(&model, dg, samples, cfg.info_plane_bins)?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            ce,
            sum_a,
            sum_z,
            consensual,
            total,
            val_auc,
            i_dz,
            i_yz,
            temperature: model.temperature,
            seconds: t0.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {} total {total:.5} val_auc {val_auc:?}", epoch + 1);

        let score = val_auc.unwrap_or(-total);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch + 1, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch + 1 < cfg.max_epochs;
                break;
            }
        }
    }

    log_compression_phase(&epochs, model.cfg.bound.beta1);
    let (best_score, best_epoch, best_model) = best.expect("at least one epoch ran");
    let model = best_model;
    let test_auc = if dg.targets(SplitKind::Test).is_empty() { None } else { test_auc(&model, dg, cfg.seed).ok() };
    let report = EvalReport {
        epochs,
        best_epoch,
        best_val_auc: val_samples.as_ref().map(|_| best_score),
        test_auc,
        stopped_early,
        train_config: cfg.clone(),
        seconds_total: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Soft check: with `beta1 > 0` the peak of I(D; Z) should precede the last
/// epoch. Only logged, the estimator is too noisy to gate on.
fn log_compression_phase(epochs: &[EpochRecord], beta1: f64) {
    let series: Vec<f64> = epochs.iter().filter_map(|e| e.i_dz).collect();
    if beta1 <= 0.0 || series.len() < 2 {
        return;
    }
    let peak = series.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
    if peak + 1 < series.len() {
        log::info!("I(D;Z) peaked at epoch {} of {}: compression phase observed", peak + 1, series.len());
    } else {
        log::info!("I(D;Z) peaked at the final epoch: no compression phase observed");
    }
}

fn info_plane_for_model(
    model: &DGIBModel,
    dg: &DynamicGraph,
    samples: &[LinkSample],
    bins: usize,
) -> Result<(f64, f64)> {
    // the latest training target, evaluated without sampling noise
    let t = samples.iter().map(|s| s.t).max().expect("non-empty samples");
    let window = dg.window(t)?;
    let index = WindowIndex::build(&window, model.cfg.k)?;
    let trace = model.forward_tape(&window, &index, &mut rng::seeded(0), false)?.trace();
    let at_t: Vec<LinkSample> = samples.iter().filter(|s| s.t == t).copied().collect();
    info_plane_track(&trace, dg, &at_t, bins)
}

const INFO_PROJECTIONS: usize = 8;
const INFO_SEED: u64 = 0x1F0_B1A5;

/// Equal-width binning into `bins` cells; `None` when fewer than two cells
/// are occupied.
fn bin_values(x: &[f64], bins: usize) -> Option<Vec<usize>> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return None;
    }
    let width = (hi - lo) / bins as f64;
    let out: Vec<usize> = x.iter().map(|&v| (((v - lo) / width) as usize).min(bins - 1)).collect();
    let used: BTreeSet<usize> = out.iter().copied().collect();
    (used.len() >= 2).then_some(out)
}

/// Plug-in mutual information between binned `x` and discrete `y`.
pub fn binned_mi(x: &[f64], y: &[usize], bins: usize) -> f64 {
    assert_eq!(x.len(), y.len());
    let Some(bx) = bin_values(x, bins.max(2)) else {
        log::warn!("information-plane projection occupies fewer than 2 bins; estimate set to 0");
        return 0.0;
    };
    let ny = y.iter().copied().max().unwrap_or(0) + 1;
    let mut joint = Array2::zeros((bins.max(2), ny));
    for (&a, &b) in bx.iter().zip(y) {
        joint[[a, b]] += 1.0;
    }
    joint /= x.len() as f64;
    mi_exact_discrete(&joint).unwrap_or(0.0).max(0.0)
}

fn projections(dim: usize) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(INFO_SEED);
    (0..INFO_PROJECTIONS)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn node_digest(dg: &DynamicGraph, v: usize) -> u64 {
    let mut h = DefaultHasher::new();
    for s in &dg.snapshots {
        for x in s.features.row(v) {
            x.to_bits().hash(&mut h);
        }
        s.neighbors(v).for_each(|u| u.hash(&mut h));
    }
    for x in dg.next_features.row(v) {
        x.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Information-plane coordinate `(I(D; Z), I(Y; Z))` of the final
/// representation, averaged over a fixed ensemble of random 1-D projections.
///
/// `D` is a hash digest of each sampled node's input (features and
/// adjacency across the graph) folded into `bins` buckets; `Y` are the link
/// labels of `samples`, paired with the projected `z_u * z_v`.
pub fn info_plane_track(trace: &ForwardTrace, dg: &DynamicGraph, samples: &[LinkSample], bins: usize) -> Result<(f64, f64)> {
    if bins < 2 {
        return Err(DgibError::arg("need at least 2 bins"));
    }
    let z = &trace.z_final;
    let nodes: Vec<usize> = samples
        .iter()
        .flat_map(|s| [s.u, s.v])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let digest: Vec<usize> = nodes.iter().map(|&v| (node_digest(dg, v) % bins as u64) as usize).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label as usize).collect();
    let dirs = projections(z.ncols());
    let mut i_dz = 0.0;
    let mut i_yz = 0.0;
    for d in &dirs {
        let proj_nodes: Vec<f64> = nodes.iter().map(|&v| z.row(v).iter().zip(d).map(|(a, b)| a * b).sum()).collect();
        i_dz += binned_mi(&proj_nodes, &digest, bins);
        let proj_pairs: Vec<f64> = samples
            .iter()
            .map(|s| z.row(s.u).iter().zip(z.row(s.v)).zip(d).map(|((a, b), w)| a * b * w).sum())
            .collect();
        i_yz += binned_mi(&proj_pairs, &labels, bins);
    }
    Ok((i_dz / dirs.len() as f64, i_yz / dirs.len() as f64))
}

/// Central differences with step `h` on the given coordinates; returns the
/// largest `|fd - g| / max(|fd|, |g|, 1e-6)`.
pub fn finite_difference_error(
    params: &[f64],
    coords: &[usize],
    h: f64,
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for &i in coords {
        p[i] = params[i] + h;
        let up = f(&p)?;
        p[i] = params[i] - h;
        let down = f(&p)?;
        p[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(DgibError::Divergence { epoch: 0, term: "total".into() });
        }
        let fd = (up - down) / (2.0 * h);
        let g = analytic[i];
        worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6));
    }
    Ok(worst)
}

fn flatten(model: &DGIBModel) -> Vec<f64> {
    model.param_slices().into_iter().flatten().copied().collect()
}

fn unflatten(model: &mut DGIBModel, flat: &[f64]) {
    let mut k = 0;
    for s in model.param_slices_mut() {
        s.copy_from_slice(&flat[k..k + s.len()]);
        k += s.len();
    }
}

/// Max relative error of the tape gradient of the total loss against
/// central differences (`h = 1e-5`) on `n_params` random parameters.
///
/// Uses the last training window in training mode with every random draw
/// (relaxation noise, reparameterization noise, node subsets) replayed from
/// a fixed seed, so the loss is a deterministic smooth function.
pub fn grad_check<R: Rng>(model: &DGIBModel, dg: &DynamicGraph, cfg: &TrainConfig, n_params: usize, rng: &mut R) -> Result<f64> {
    let mut model = model.clone();
    model.cfg.bound = apply_ablation(&cfg.bound_cfg, cfg.ablation);
    let target = *dg
        .targets(SplitKind::Train)
        .last()
        .ok_or_else(|| DgibError::EmptyResult("no training target for the gradient check".into()))?;
    let window = dg.window(target)?;
    let index = WindowIndex::build(&window, model.cfg.k)?;
    let samples = sample_link_labels(dg, target, &mut rng::seeded(cfg.seed))?;
    let draw_seed: u64 = rng.random();
    let (bd, grads) = model.loss_and_grad(&window, &index, &samples, &mut rng::seeded(draw_seed), true)?;
    if let Some(term) = bd.first_non_finite() {
        return Err(DgibError::Divergence { epoch: 0, term });
    }
    let flat = flatten(&model);
    let flat_grad: Vec<f64> = grads.into_iter().flatten().collect();
    let coords: Vec<usize> = (0..n_params).map(|_| rng.random_range(0..flat.len())).collect();
    let mut probe = model.clone();
    let mut f = |p: &[f64]| -> Result<f64> {
        unflatten(&mut probe, p);
        let (bd, _) = probe.loss_and_grad(&window, &index, &samples, &mut rng::seeded(draw_seed), true)?;
        Ok(bd.total)
    };
    finite_difference_error(&flat, &coords, 1e-5, &mut f, &flat_grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack: String,
    pub clean_auc: f64,
    pub attacked_auc: f64,
    /// Link type removed by a structure attack.
    pub removed_type: Option<u32>,
    /// Target nodes of a targeted attack.
    pub targets: Vec<usize>,
}

/// Clean and attacked AUC of `model`, trained on the clean `dg`.
///
/// Feature noise and targeted evasion perturb the inputs of a trained model.
/// The structure attack and targeted poisoning perturb the data first and
/// retrain from `model_cfg` with `train_cfg`. Labels always come from the
/// clean graph. Targeted attacks are scored on the pairs incident to the
/// targets, every other attack on the shared test pairs.
pub fn evaluate_attack(
    model: &DGIBModel,
    model_cfg: &ModelConfig,
    dg: &DynamicGraph,
    spec: &AttackSpec,
    train_cfg: &TrainConfig,
) -> Result<AttackOutcome> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, 0xA77A);
    let test_samples = NegativeCache::draw(dg, SplitKind::Test, train_cfg.seed)?;
    let retrain = |attacked: &DynamicGraph| -> Result<DGIBModel> {
        let fresh = DGIBModel::new(model_cfg.clone(), &mut rng::stream(train_cfg.seed, 0x1417))?;
        Ok(train(fresh, attacked, train_cfg)?.0)
    };
    let outcome = |clean_auc, attacked_auc, removed_type, targets| AttackOutcome {
        attack: spec.label(),
        clean_auc,
        attacked_auc,
        removed_type,
        targets,
    };
    match spec.mode {
        AttackMode::FeatureNoise => {
            let attacked = attack_features(dg, spec.lambda, &mut r)?;
            let clean = evaluate(model, dg, &test_samples)?;
            Ok(outcome(clean, evaluate(model, &attacked, &test_samples)?, None, vec![]))
        }
        AttackMode::StructureLinktype => {
            let a = attack_structure(dg, spec, &mut r)?;
            let clean = evaluate(model, dg, &test_samples)?;
            let retrained = retrain(&a.graph)?;
            Ok(outcome(clean, evaluate(&retrained, &a.graph, &test_samples)?, Some(a.removed_type), vec![]))
        }
        AttackMode::Targeted => {
            let a = match spec.phase {
                AttackPhase::Evasion => {
                    let sur = ModelSurrogate { model };
                    attack_targeted(dg, &sur, spec.n_perturbations, spec.phase, spec.n_targets, &mut r)?
                }
                AttackPhase::Poisoning => {
                    attack_targeted(dg, &LinearProxy, spec.n_perturbations, spec.phase, spec.n_targets, &mut r)?
                }
            };
            let clean = evaluate(model, dg, &a.eval_samples)?;
            let attacked = match spec.phase {
                AttackPhase::Evasion => evaluate(model, &a.graph, &a.eval_samples)?,
                AttackPhase::Poisoning => evaluate(&retrain(&a.graph)?, &a.graph, &a.eval_samples)?,
            };
            Ok(outcome(clean, attacked, None, a.targets))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub inv_beta1: f64,
    pub inv_beta2: f64,
    pub attack: String,
    pub clean_auc: f64,
    pub attacked_auc: f64,
}

/// Worker count from `DGIB_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("DGIB_THREADS").ok()?.parse().ok().filter(|&n: &usize| n > 0)
}

/// Runs `f` on a pool capped by `DGIB_THREADS`.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| DgibError::arg(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains one model per `(1/beta1, 1/beta2)` grid point with shared seeds and
/// evaluates each attack. Rows follow grid order, then attack order.
pub fn beta_sweep(
    dg: &DynamicGraph,
    grid: &[(f64, f64)],
    attacks: &[AttackSpec],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(DgibError::arg("empty sweep grid"));
    }
    if attacks.is_empty() {
        return Err(DgibError::arg("sweep needs at least one attack"));
    }
    if grid.iter().any(|&(a, b)| !(a > 0.0) || !(b > 0.0)) {
        return Err(DgibError::arg("grid values 1/beta must be positive"));
    }
    let run = |&(ib1, ib2): &(f64, f64)| -> Result<Vec<SweepRow>> {
        let mut tc = train_cfg.clone();
        tc.bound_cfg.beta1 = 1.0 / ib1;
        tc.bound_cfg.beta2 = 1.0 / ib2;
        let mut mc = model_cfg.clone();
        mc.bound = tc.bound_cfg.clone();
        let fresh = DGIBModel::new(mc.clone(), &mut rng::stream(tc.seed, 0x1417))?;
        let (model, _) = train(fresh, dg, &tc)?;
        attacks
            .iter()
            .map(|spec| {
                let o = evaluate_attack(&model, &mc, dg, spec, &tc)?;
                Ok(SweepRow {
                    inv_beta1: ib1,
                    inv_beta2: ib2,
                    attack: o.attack,
                    clean_auc: o.clean_auc,
                    attacked_auc: o.attacked_auc,
                })
            })
            .collect()
    };
    let results: Vec<Result<Vec<SweepRow>>> = with_pool(|| grid.par_iter().map(run).collect())?;
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::PriorKind;
    use crate::dyngraph::{generate_synthetic, SyntheticParams};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.9, 0.8, 0.4, 0.3], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(auc(&[0.5, 0.4], &[1, 1]).is_err());
    }

    fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count_and_is_rank_invariant(
            data in prop::collection::vec((0u8..6, 0u8..2), 2..40)
        ) {
            let s: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let y: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(y.contains(&0) && y.contains(&1));
            let a = auc(&s, &y).unwrap();
            prop_assert!((a - brute_auc(&s, &y)).abs() < 1e-12);
            let t: Vec<f64> = s.iter().map(|x| (x * 0.7).exp() - 3.0).collect();
            prop_assert!((auc(&t, &y).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn ablation_variants() {
        let base = BoundConfig::default();
        assert_eq!(apply_ablation(&base, Ablation::None), base);
        assert_eq!(apply_ablation(&base, Ablation::NoCons).alpha, 1.0);
        assert!(apply_ablation(&base, Ablation::NoA).time_indices_a.is_empty());
        assert!(apply_ablation(&base, Ablation::NoZ).time_indices_z.is_empty());
        assert_eq!("no_A".parse::<Ablation>().unwrap(), Ablation::NoA);
        assert!("no_B".parse::<Ablation>().is_err());
    }

    fn tiny() -> DynamicGraph {
        generate_synthetic(&SyntheticParams {
            n_nodes: 30,
            n_snapshots: 4,
            n_communities: 3,
            seed: 1,
            split: Some(crate::dyngraph::SplitSpec::new(2, 1, 1).unwrap()),
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_model(dg: &DynamicGraph) -> DGIBModel {
        DGIBModel::new(ModelConfig { hidden_dim: 8, ..ModelConfig::new(dg.feature_dim) }, &mut rng::seeded(0)).unwrap()
    }

    #[test]
    fn ablations_shape_the_loss() {
        let dg = tiny();
        let model = tiny_model(&dg);
        let window = dg.window(2).unwrap();
        let index = WindowIndex::build(&window, 1).unwrap();
        let samples = sample_link_labels(&dg, 2, &mut rng::seeded(0)).unwrap();
        let total = |cfg: BoundConfig| {
            let mut m = model.clone();
            m.cfg.bound = cfg;
            m.loss_and_grad(&window, &index, &samples, &mut rng::seeded(3), true).unwrap().0
        };
        let base = BoundConfig { beta1: 0.5, beta2: 0.5, ..Default::default() };
        let no_cons = apply_ablation(&base, Ablation::NoCons);
        let a = total(no_cons.clone());
        assert!((a.total - a.dgib_ms).abs() < 1e-12);
        let b = total(BoundConfig { beta2: 7.0, ..no_cons });
        assert_eq!(a.total, b.total);
        let c = total(apply_ablation(&base, Ablation::NoA));
        assert_eq!(c.sum_a(), 0.0);
        let d = total(apply_ablation(&base, Ablation::NoZ));
        assert_eq!(d.sum_z(), 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let dg = tiny();
        let model = tiny_model(&dg);
        let cfg = TrainConfig { learning_rate: 0.0, max_epochs: 3, info_plane_bins: 0, ..Default::default() };
        let (trained, report) = train(model.clone(), &dg, &cfg).unwrap();
        assert_eq!(report.epochs.len(), 3);
        for (a, b) in model.param_slices().iter().zip(trained.param_slices()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn loss_decreases_on_a_planted_graph() {
        let dg = tiny();
        let cfg = TrainConfig { learning_rate: 1e-2, max_epochs: 50, patience: 1000, info_plane_bins: 0, ..Default::default() };
        let (_, report) = train(tiny_model(&dg), &dg, &cfg).unwrap();
        assert!(report.epochs[49].total < report.epochs[0].total);
    }

    #[test]
    fn stagnant_validation_stops_early() {
        let dg = tiny();
        let cfg = TrainConfig { learning_rate: 0.0, max_epochs: 100, patience: 3, info_plane_bins: 0, ..Default::default() };
        let (_, report) = train(tiny_model(&dg), &dg, &cfg).unwrap();
        assert_eq!(report.epochs.len(), 4);
        assert!(report.stopped_early);
    }

    #[test]
    fn restored_model_has_the_best_validation_auc() {
        let dg = tiny();
        let cfg = TrainConfig { learning_rate: 5e-2, max_epochs: 30, patience: 5, ..Default::default() };
        let (model, report) = train(tiny_model(&dg), &dg, &cfg).unwrap();
        let best = report.epochs.iter().filter_map(|e| e.val_auc).fold(f64::MIN, f64::max);
        assert_eq!(report.best_val_auc, Some(best));
        let val = evaluate(&model, &dg, &NegativeCache::draw(&dg, SplitKind::Val, cfg.seed).unwrap()).unwrap();
        assert_abs_diff_eq!(val, best, epsilon = 1e-12);
        assert!(report.epochs.iter().all(|e| e.i_dz.unwrap() >= 0.0 && e.i_yz.unwrap() >= 0.0));
    }

    #[test]
    fn training_is_reproducible() {
        let dg = tiny();
        let cfg = TrainConfig { max_epochs: 5, seed: 9, ..Default::default() };
        let (a, ra) = train(tiny_model(&dg), &dg, &cfg).unwrap();
        let (b, rb) = train(tiny_model(&dg), &dg, &cfg).unwrap();
        assert_eq!(a, b);
        let strip = |r: &EvalReport| r.epochs.iter().map(|e| (e.total, e.val_auc, e.i_dz)).collect::<Vec<_>>();
        assert_eq!(strip(&ra), strip(&rb));
    }

    #[test]
    fn quadratic_finite_difference_check() {
        let p = [1.7];
        let g = [2.0 * 1.7];
        let mut f = |x: &[f64]| Ok(x[0] * x[0]);
        assert!(finite_difference_error(&p, &[0], 1e-5, &mut f, &g).unwrap() < 1e-8);
        let p = [-1.7];
        let g = [-2.0 * 1.7];
        assert!(finite_difference_error(&p, &[0], 1e-5, &mut f, &g).unwrap() < 1e-8);
    }

    #[test]
    fn full_loss_gradient_check() {
        let dg = tiny();
        for kind in [PriorKind::Bernoulli, PriorKind::Categorical] {
            let cfg = TrainConfig {
                bound_cfg: BoundConfig { prior_kind: kind, beta1: 0.1, beta2: 0.1, ..Default::default() },
                ..Default::default()
            };
            let mut model = tiny_model(&dg);
            model.cfg.bound.prior_kind = kind;
            let err = grad_check(&model, &dg, &cfg, 10, &mut rng::seeded(4)).unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }

    #[test]
    fn binned_mi_examples() {
        let y: Vec<usize> = (0..1000).map(|i| i % 2).collect();
        let x: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        assert_abs_diff_eq!(binned_mi(&x, &y, 16), 2f64.ln(), epsilon = 1e-12);
        assert_eq!(binned_mi(&vec![1.0; 1000], &y, 16), 0.0);
    }

    #[test]
    fn binned_mi_of_independent_variables_is_near_the_permutation_null() {
        let mut r = rng::seeded(8);
        let x: Vec<f64> = (0..2000).map(|_| r.random::<f64>()).collect();
        let y: Vec<usize> = (0..2000).map(|_| r.random_range(0..2)).collect();
        let observed = binned_mi(&x, &y, 16);
        let mut null: Vec<f64> = (0..200)
            .map(|_| {
                let mut yy = y.clone();
                rand::seq::SliceRandom::shuffle(yy.as_mut_slice(), &mut r);
                binned_mi(&x, &yy, 16)
            })
            .collect();
        null.sort_by(f64::total_cmp);
        assert!(observed <= null[195], "observed {observed} above the null 97.5% quantile");
    }

    #[test]
    fn sweep_rows_and_rerun_equality() {
        let dg = tiny();
        let mc = ModelConfig { hidden_dim: 8, ..ModelConfig::new(dg.feature_dim) };
        let tc = TrainConfig { max_epochs: 3, info_plane_bins: 0, ..Default::default() };
        let attack = AttackSpec { mode: AttackMode::FeatureNoise, lambda: 0.5, ..Default::default() };
        let rows = beta_sweep(&dg, &[(10.0, 10.0)], std::slice::from_ref(&attack), &mc, &tc).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((0.0..=1.0).contains(&rows[0].clean_auc) && (0.0..=1.0).contains(&rows[0].attacked_auc));
        let twice = beta_sweep(&dg, &[(10.0, 10.0), (10.0, 10.0)], &[attack], &mc, &tc).unwrap();
        assert_eq!(twice[0], twice[1]);
        assert_eq!(twice[0], rows[0]);
        assert!(beta_sweep(&dg, &[], &[], &mc, &tc).is_err());
    }

    #[test]
    fn zero_lambda_feature_attack_keeps_auc() {
        let dg = tiny();
        let model = tiny_model(&dg);
        let spec = AttackSpec { mode: AttackMode::FeatureNoise, lambda: 0.0, ..Default::default() };
        let o = evaluate_attack(&model, &model.cfg, &dg, &spec, &TrainConfig::default()).unwrap();
        assert_eq!(o.clean_auc, o.attacked_auc);
    }
}
