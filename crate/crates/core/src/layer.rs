//! The stochastic attention layer.
//!
//! Each application at time `t` projects the rectified input, scores every
//! spatio-temporal neighbor, samples which neighbors to keep, aggregates the
//! kept messages and maps the result to a diagonal Gaussian.
//!
//! The free functions operate on a single anchor and are the reference
//! semantics. [`apply_tape`] runs the same pipeline for all anchors of one
//! time step on an autograd tape; the model uses it for both training and
//! evaluation.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tape, Var};
use crate::bounds::{GaussianParams, PriorKind};
use crate::error::{DgibError, Result};
use crate::stneigh::SliceNeighborhoods;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Projection `d' x d'`.
    pub w: Array2<f64>,
    /// Attention weights of length `2 d'`; the first half scores the anchor.
    pub attn_w: Array1<f64>,
    pub mu_head: Array2<f64>,
    pub logvar_head: Array2<f64>,
}

fn glorot<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let a = gain * (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..=a))
}

impl LayerParams {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        LayerParams {
            w: glorot(dim, dim, 1.0, rng),
            attn_w: glorot(2 * dim, 1, 1.0, rng).column(0).to_owned(),
            mu_head: glorot(dim, dim, 1.0, rng),
            logvar_head: glorot(dim, dim, 0.1, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerParams {
            w: Array2::zeros((dim, dim)),
            attn_w: Array1::zeros(2 * dim),
            mu_head: Array2::zeros((dim, dim)),
            logvar_head: Array2::zeros((dim, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let ok = self.w.dim() == (d, d)
            && self.attn_w.len() == 2 * d
            && self.mu_head.dim() == (d, d)
            && self.logvar_head.dim() == (d, d);
        if !ok {
            return Err(DgibError::arg(format!("layer parameter shapes inconsistent with d' = {d}")));
        }
        let all = self.w.iter().chain(&self.attn_w).chain(&self.mu_head).chain(&self.logvar_head);
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(DgibError::arg("layer parameters must be finite"));
        }
        Ok(())
    }
}

/// Attention scores of one anchor against its neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLogits {
    /// Pre-sigmoid scores.
    pub scores: Vec<f64>,
    /// `sigmoid(scores)`, each in `(0, 1)`.
    pub phi: Vec<f64>,
}

impl AttentionLogits {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let phi = scores.iter().map(|&s| sigmoid(s)).collect();
        AttentionLogits { scores, phi }
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

/// Retention weights of one anchor's neighbors, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledStructure {
    pub weights: Vec<f64>,
}

impl SampledStructure {
    /// Positions of neighbors kept by a 0.5 read-out of the weights.
    pub fn retained(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&i| self.weights[i] >= 0.5).collect()
    }
}

/// `relu(z_prev) * W`.
pub fn project(z_prev: &Array2<f64>, params: &LayerParams) -> Result<Array2<f64>> {
    if z_prev.ncols() != params.w.nrows() {
        return Err(DgibError::arg(format!(
            "input has {} columns, projection expects {}",
            z_prev.ncols(),
            params.w.nrows()
        )));
    }
    Ok(z_prev.mapv(|x| x.max(0.0)).dot(&params.w))
}

/// `phi_u = sigmoid([z_v, z_u] . attn_w)` for each neighbor `u`.
pub fn attention_logits(
    z_hat_anchor: ArrayView1<'_, f64>,
    z_hat_neighbors: &[ArrayView1<'_, f64>],
    attn_w: &Array1<f64>,
) -> Result<AttentionLogits> {
    let d = z_hat_anchor.len();
    if attn_w.len() != 2 * d || z_hat_neighbors.iter().any(|u| u.len() != d) {
        return Err(DgibError::arg("attention input dimensions do not match attn_w"));
    }
    let (wa, wb) = attn_w.view().split_at(Axis(0), d);
    let base = z_hat_anchor.dot(&wa);
    Ok(AttentionLogits::from_scores(z_hat_neighbors.iter().map(|u| base + u.dot(&wb)).collect()))
}

/// Noise for the relaxed samplers: logistic for Bernoulli gates, Gumbel for
/// the categorical relaxation. Always draws exactly `n` values.
pub fn relaxation_noise<R: Rng>(mode: PriorKind, n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = Open01.sample(rng);
            match mode {
                PriorKind::Bernoulli => u.ln() - (-u).ln_1p(),
                PriorKind::Categorical => -(-u.ln()).ln(),
            }
        })
        .collect()
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(DgibError::arg(format!("temperature must be positive, got {temperature}")))
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Relaxed samples in training mode, expected weights in eval mode.
pub fn sample_structure<R: Rng>(
    logits: &AttentionLogits,
    mode: PriorKind,
    temperature: f64,
    training: bool,
    rng: &mut R,
) -> Result<SampledStructure> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Ok(SampledStructure { weights: Vec::new() });
    }
    let total: f64 = logits.phi.iter().sum();
    let weights = match (mode, training) {
        (PriorKind::Bernoulli, true) => {
            let noise = relaxation_noise(mode, logits.len(), rng);
            logits
                .scores
                .iter()
                .zip(&noise)
                .map(|(s, l)| sigmoid((s + l) / temperature))
                .collect()
        }
        (PriorKind::Bernoulli, false) => logits.phi.clone(),
        (PriorKind::Categorical, true) => {
            let noise = relaxation_noise(mode, logits.len(), rng);
            let x: Vec<f64> = logits
                .phi
                .iter()
                .zip(&noise)
                .map(|(p, g)| ((p / total).ln() + g) / temperature)
                .collect();
            softmax(&x)
        }
        (PriorKind::Categorical, false) => logits.phi.iter().map(|p| p / total).collect(),
    };
    Ok(SampledStructure { weights })
}

/// `sum_u weight(u) * z_hat_u`; zero when nothing is retained.
pub fn aggregate(structure: &SampledStructure, z_hat: &[ArrayView1<'_, f64>], dim: usize) -> Result<Array1<f64>> {
    if structure.weights.len() != z_hat.len() {
        return Err(DgibError::arg("structure and neighbor features differ in length"));
    }
    let mut out = Array1::zeros(dim);
    for (w, z) in structure.weights.iter().zip(z_hat) {
        if *w != 0.0 {
            out.scaled_add(*w, z);
        }
    }
    Ok(out)
}

/// Gaussian head: mean, clamped log-variance and a reparameterized sample
/// (the mean itself in eval mode).
pub fn gaussian_heads<R: Rng>(
    aggregated: ArrayView1<'_, f64>,
    params: &LayerParams,
    rng: &mut R,
    training: bool,
) -> Result<(Array1<f64>, GaussianParams)> {
    if aggregated.len() != params.mu_head.nrows() {
        return Err(DgibError::arg("aggregated vector does not match the head dimension"));
    }
    let mu = aggregated.dot(&params.mu_head);
    let lv = aggregated.dot(&params.logvar_head).mapv(|x| x.clamp(LOGVAR_MIN, LOGVAR_MAX));
    let z = if training {
        let eps = gaussian_noise(mu.len(), rng);
        Array1::from_shape_fn(mu.len(), |i| mu[i] + (0.5 * lv[i]).exp() * eps[i])
    } else {
        mu.clone()
    };
    Ok((z, GaussianParams { mu: mu.to_vec(), log_sigma2: lv.to_vec() }))
}

pub fn gaussian_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Tape handles of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w: Var,
    /// `2d' x 1` column.
    pub attn: Var,
    pub mu: Var,
    pub lv: Var,
}

impl LayerVars {
    pub fn register(tape: &mut Tape, p: &LayerParams) -> Self {
        LayerVars {
            w: tape.leaf(p.w.clone()),
            attn: tape.leaf(p.attn_w.clone().insert_axis(Axis(1))),
            mu: tape.leaf(p.mu_head.clone()),
            lv: tape.leaf(p.logvar_head.clone()),
        }
    }
}

/// A neighborhood slice with shared index buffers for the tape ops.
#[derive(Debug, Clone)]
pub struct SliceIndex {
    pub num_nodes: usize,
    pub anchors: Rc<[usize]>,
    pub members: Rc<[usize]>,
    pub offsets: Rc<[usize]>,
    /// Neighborhood size of each entry's anchor.
    pub anchor_degree: Rc<[usize]>,
}

impl SliceIndex {
    pub fn new(slice: &SliceNeighborhoods, num_nodes: usize) -> Self {
        let anchor_degree: Vec<usize> = slice.anchors.iter().map(|&a| slice.degree(a)).collect();
        SliceIndex {
            num_nodes,
            anchors: Rc::from(slice.anchors.as_slice()),
            members: Rc::from(slice.members.as_slice()),
            offsets: Rc::from(slice.offsets.as_slice()),
            anchor_degree: Rc::from(anchor_degree),
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Tape nodes produced by one layer at one time step.
#[derive(Debug, Clone, Copy)]
pub struct LayerStep {
    pub scores: Var,
    pub phi: Var,
    pub weights: Var,
    pub mu: Var,
    pub lv: Var,
    /// Sample in training mode when requested, otherwise the mean.
    pub z: Var,
}

pub struct StepOptions {
    pub mode: PriorKind,
    pub temperature: f64,
    pub training: bool,
    /// Draw a reparameterized sample as the layer output.
    pub sample_z: bool,
}

/// One layer at one time step for all anchors.
///
/// `z_in` is the layer input at `t`, `z_prev_out` this layer's output at
/// `t - 1` (absent at the first step). Noise is drawn from `rng` in a fixed
/// order whose length depends only on the neighborhood sizes.
pub fn apply_tape<R: Rng>(
    tape: &mut Tape,
    vars: &LayerVars,
    z_in: Var,
    z_prev_out: Option<Var>,
    index: &SliceIndex,
    opts: &StepOptions,
    rng: &mut R,
) -> Result<LayerStep> {
    check_temperature(opts.temperature)?;
    let n = index.num_nodes;
    let r = tape.relu(z_in);
    let z_hat = tape.matmul(r, vars.w);
    let stacked = match z_prev_out {
        Some(prev) => {
            let rp = tape.relu(prev);
            let prev_hat = tape.matmul(rp, vars.w);
            tape.concat_rows(z_hat, prev_hat)
        }
        None => {
            if index.members.iter().any(|&m| m >= n) {
                return Err(DgibError::arg("previous-time members without a previous step"));
            }
            z_hat
        }
    };
    let scores = tape.pair_score(z_hat, stacked, vars.attn, index.anchors.clone(), index.members.clone());
    let phi = tape.sigmoid(scores);
    let e = index.len();
    let weights = match (opts.mode, opts.training) {
        (PriorKind::Bernoulli, true) => {
            let noise = tape.constant(col(relaxation_noise(opts.mode, e, rng)));
            let x = tape.add(scores, noise);
            let x = tape.scale(x, 1.0 / opts.temperature);
            tape.sigmoid(x)
        }
        (PriorKind::Bernoulli, false) => phi,
        (PriorKind::Categorical, true) => {
            let noise = tape.constant(col(relaxation_noise(opts.mode, e, rng)));
            let q = tape.segment_normalize(phi, index.offsets.clone());
            let lq = tape.log(q);
            let x = tape.add(lq, noise);
            let x = tape.scale(x, 1.0 / opts.temperature);
            tape.segment_softmax(x, index.offsets.clone())
        }
        (PriorKind::Categorical, false) => tape.segment_normalize(phi, index.offsets.clone()),
    };
    let agg = tape.scatter_weighted(weights, stacked, index.anchors.clone(), index.members.clone(), n);
    let mu = tape.matmul(agg, vars.mu);
    let lv_raw = tape.matmul(agg, vars.lv);
    let lv = tape.clamp(lv_raw, LOGVAR_MIN, LOGVAR_MAX);
    let z = if opts.training && opts.sample_z {
        let d = tape.value(mu).ncols();
        let eps = Array2::from_shape_vec((n, d), gaussian_noise(n * d, rng)).expect("noise shape");
        let eps = tape.constant(eps);
        let half = tape.scale(lv, 0.5);
        let sd = tape.exp(half);
        let noise = tape.mul(sd, eps);
        tape.add(mu, noise)
    } else {
        mu
    };
    Ok(LayerStep { scores, phi, weights, mu, lv, z })
}

fn col(values: Vec<f64>) -> Array2<f64> {
    let n = values.len();
    Array2::from_shape_vec((n, 1), values).expect("column shape")
}
