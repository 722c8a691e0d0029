//! The full model: time encoding, the layer recursion over `t = 1..=T+1`,
//! the inner-product link predictor and the loss.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Gradients, Tape, Var};
use crate::bounds::{
    assemble_loss, ce_lower_bound, gaussian_log_ratio, kl_bernoulli, kl_categorical, BoundConfig, GaussianParams,
    LossBreakdown, LossParts, PriorKind, PROB_EPS,
};
use crate::dyngraph::{DynamicGraph, GraphWindow, LinkSample};
use crate::error::{DgibError, Result};
use crate::layer::{apply_tape, LayerParams, LayerStep, LayerVars, SliceIndex, StepOptions};
use crate::stneigh::{positional_encoding, NeighborhoodIndex};

/// Bernoulli prior probabilities are kept inside `[PRIOR_CLAMP, 1 - PRIOR_CLAMP]`.
pub const PRIOR_CLAMP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule { initial: 0.5, decay: 0.97, floor: 0.1 }
    }
}

impl TemperatureSchedule {
    /// Temperature for a 0-based epoch.
    pub fn at(&self, epoch: usize) -> f64 {
        (self.initial * self.decay.powi(epoch as i32)).max(self.floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub k: usize,
    pub temperature: TemperatureSchedule,
    pub bound: BoundConfig,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dim: 16,
            num_layers: 1,
            k: 1,
            temperature: TemperatureSchedule::default(),
            bound: BoundConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.k == 0 || self.input_dim == 0 {
            return Err(DgibError::arg("num_layers, k and input_dim must be >= 1"));
        }
        if self.hidden_dim == 0 || self.hidden_dim % 2 != 0 {
            return Err(DgibError::arg(format!("hidden_dim = {} must be even and positive", self.hidden_dim)));
        }
        let t = &self.temperature;
        if !(t.initial > 0.0 && t.floor > 0.0 && t.decay > 0.0) {
            return Err(DgibError::arg("temperature schedule values must be positive"));
        }
        self.bound.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DGIBModel {
    pub cfg: ModelConfig,
    /// `d x d'`.
    pub input_projection: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// Relaxation temperature used by training-mode forwards.
    pub temperature: f64,
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Window length `T`; steps cover `1..=T+1`.
    pub t_len: usize,
    pub z_final: Array2<f64>,
    /// `steps[l][t - 1]`.
    pub steps: Vec<Vec<StepTrace>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    /// `offsets[v]..offsets[v + 1]` are the entries of anchor `v`.
    pub offsets: Vec<usize>,
    pub phi: Array1<f64>,
    pub weights: Array1<f64>,
    pub mu: Array2<f64>,
    pub log_sigma2: Array2<f64>,
    pub z: Array2<f64>,
}

impl ForwardTrace {
    pub fn final_layer(&self) -> &[StepTrace] {
        self.steps.last().expect("at least one layer")
    }
}

/// Tape handles of every parameter tensor, in [`DGIBModel::param_slices`] order.
#[derive(Debug, Clone)]
pub struct TapeParams {
    pub projection: Var,
    pub layers: Vec<LayerVars>,
}

impl TapeParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.projection];
        for l in &self.layers {
            v.extend([l.w, l.attn, l.mu, l.lv]);
        }
        v
    }
}

/// A forward pass recorded on a tape.
pub struct ForwardPass {
    pub tape: Tape,
    pub params: TapeParams,
    pub t_len: usize,
    pub num_nodes: usize,
    pub slices: Vec<SliceIndex>,
    /// `steps[l][t - 1]`.
    pub steps: Vec<Vec<LayerStep>>,
    pub z_final: Var,
}

/// Per-step neighborhood indices of a window, reusable across epochs.
#[derive(Debug, Clone)]
pub struct WindowIndex {
    pub neighborhoods: NeighborhoodIndex,
}

impl WindowIndex {
    pub fn build(window: &GraphWindow<'_>, k: usize) -> Result<Self> {
        Ok(WindowIndex { neighborhoods: NeighborhoodIndex::build(window, k)? })
    }
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..=a))
}

fn bern_prior(degree: usize) -> f64 {
    (1.0 / degree as f64).clamp(PRIOR_CLAMP, 1.0 - PRIOR_CLAMP)
}

/// `sigmoid(<z_u, z_v>)` for each pair.
pub fn predict_links(z: &Array2<f64>, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let n = z.nrows();
    pairs
        .iter()
        .map(|&(u, v)| {
            if u >= n || v >= n {
                return Err(DgibError::arg(format!("pair ({u}, {v}) out of range for {n} nodes")));
            }
            Ok(sigmoid(z.row(u).dot(&z.row(v))))
        })
        .collect()
}

/// Nodes entering the Gaussian terms at one step.
fn mc_nodes<R: Rng>(n: usize, m: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = sample_indices(rng, n, m.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

impl DGIBModel {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let input_projection = glorot(cfg.input_dim, cfg.hidden_dim, rng);
        let layers = (0..cfg.num_layers).map(|_| LayerParams::init(cfg.hidden_dim, rng)).collect();
        let temperature = cfg.temperature.initial;
        Ok(DGIBModel { cfg, input_projection, layers, temperature })
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.input_projection.dim() != (self.cfg.input_dim, self.cfg.hidden_dim) {
            return Err(DgibError::arg("input projection shape does not match the config"));
        }
        if self.layers.len() != self.cfg.num_layers {
            return Err(DgibError::arg("layer count does not match the config"));
        }
        for l in &self.layers {
            l.validate()?;
            if l.dim() != self.cfg.hidden_dim {
                return Err(DgibError::arg("layer width does not match hidden_dim"));
            }
        }
        Ok(())
    }

    /// Parameter tensors as flat row-major slices: the input projection,
    /// then `W`, `attn_w`, `mu_head`, `logvar_head` of each layer.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.input_projection.as_slice().expect("standard layout")];
        for l in &self.layers {
            out.push(l.w.as_slice().expect("standard layout"));
            out.push(l.attn_w.as_slice().expect("standard layout"));
            out.push(l.mu_head.as_slice().expect("standard layout"));
            out.push(l.logvar_head.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.input_projection.as_slice_mut().expect("standard layout")];
        for l in &mut self.layers {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.attn_w.as_slice_mut().expect("standard layout"));
            out.push(l.mu_head.as_slice_mut().expect("standard layout"));
            out.push(l.logvar_head.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn register(&self, tape: &mut Tape) -> TapeParams {
        TapeParams {
            projection: tape.leaf(self.input_projection.clone()),
            layers: self.layers.iter().map(|l| LayerVars::register(tape, l)).collect(),
        }
    }

    /// Records the forward pass over `window` on a fresh tape.
    pub fn forward_tape<R: Rng>(
        &self,
        window: &GraphWindow<'_>,
        index: &WindowIndex,
        rng: &mut R,
        training: bool,
    ) -> Result<ForwardPass> {
        let n = window.num_nodes();
        let t_len = window.len();
        let d = self.hidden_dim();
        let nb = &index.neighborhoods;
        if nb.num_times() != t_len + 1 || nb.num_nodes != n {
            return Err(DgibError::arg("neighborhood index does not match the window"));
        }
        if window.features(1).ncols() != self.cfg.input_dim {
            return Err(DgibError::arg(format!(
                "feature dim {} does not match model input dim {}",
                window.features(1).ncols(),
                self.cfg.input_dim
            )));
        }
        let mut tape = Tape::new();
        let params = self.register(&mut tape);

        // relative time encoding: X(t) P + PE(T + 1 - t)
        let mut inputs = Vec::with_capacity(t_len + 1);
        for t in 1..=t_len + 1 {
            let x = tape.constant(window.features(t).clone());
            let xp = tape.matmul(x, params.projection);
            let pe = positional_encoding((t_len + 1 - t) as f64, d);
            let pe = Array2::from_shape_fn((n, d), |(_, j)| pe[j]);
            let pe = tape.constant(pe);
            inputs.push(tape.add(xp, pe));
        }

        let slices: Vec<SliceIndex> = (1..=t_len + 1).map(|t| SliceIndex::new(nb.slice(t), n)).collect();
        let mut steps = Vec::with_capacity(self.layers.len());
        for (l, vars) in params.layers.iter().enumerate() {
            let opts = StepOptions {
                mode: self.cfg.bound.prior_kind,
                temperature: self.temperature,
                training,
                sample_z: l + 1 == self.layers.len(),
            };
            let mut layer_steps: Vec<LayerStep> = Vec::with_capacity(t_len + 1);
            for t in 1..=t_len + 1 {
                let prev = layer_steps.last().map(|s| s.z);
                let step = apply_tape(&mut tape, vars, inputs[t - 1], prev, &slices[t - 1], &opts, rng)?;
                layer_steps.push(step);
            }
            inputs = layer_steps.iter().map(|s| s.z).collect();
            steps.push(layer_steps);
        }
        let z_final = *inputs.last().expect("window has a target step");
        Ok(ForwardPass { tape, params, t_len, num_nodes: n, slices, steps, z_final })
    }

    /// Forward pass over the full history, predicting step `T + 1`.
    pub fn forward<R: Rng>(&self, dg: &DynamicGraph, rng: &mut R, training: bool) -> Result<ForwardTrace> {
        let window = dg.full_window();
        let index = WindowIndex::build(&window, self.cfg.k)?;
        Ok(self.forward_tape(&window, &index, rng, training)?.trace())
    }

    /// Loss of a recorded pass plus gradients for every parameter slice.
    pub fn loss_and_grad<R: Rng>(
        &self,
        window: &GraphWindow<'_>,
        index: &WindowIndex,
        samples: &[LinkSample],
        rng: &mut R,
        training: bool,
    ) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
        let mut pass = self.forward_tape(window, index, rng, training)?;
        let (root, breakdown) = pass.loss(samples, &self.cfg.bound, rng)?;
        let grads = pass.tape.backward(root);
        Ok((breakdown, pass.param_grads(&grads)))
    }

    /// Link probabilities for `pairs` from an eval-mode forward on `window`.
    pub fn score_window(
        &self,
        window: &GraphWindow<'_>,
        index: &WindowIndex,
        pairs: &[(usize, usize)],
    ) -> Result<Vec<f64>> {
        // eval mode draws nothing, so any rng will do
        let mut rng = crate::rng::seeded(0);
        let pass = self.forward_tape(window, index, &mut rng, false)?;
        predict_links(pass.tape.value(pass.z_final), pairs)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ck = Checkpoint::from_model(self);
        let text = serde_json::to_string(&ck).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| DgibError::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(DgibError::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| DgibError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| DgibError::Parse {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
        ck.into_model().map_err(|e| DgibError::Parse { file: path.display().to_string(), message: e.to_string() })
    }
}

impl ForwardPass {
    pub fn trace(&self) -> ForwardTrace {
        let v = |x: Var| self.tape.value(x).clone();
        let col = |x: Var| self.tape.value(x).column(0).to_owned();
        let steps = self
            .steps
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .enumerate()
                    .map(|(i, s)| StepTrace {
                        t: i + 1,
                        offsets: self.slices[i].offsets.to_vec(),
                        phi: col(s.phi),
                        weights: col(s.weights),
                        mu: v(s.mu),
                        log_sigma2: v(s.lv),
                        z: v(s.z),
                    })
                    .collect()
            })
            .collect();
        ForwardTrace { t_len: self.t_len, z_final: v(self.z_final), steps }
    }

    /// Builds the total loss on the tape.
    ///
    /// Draws the node sets for the Gaussian terms from `rng` in the same order
    /// as [`compute_loss`].
    pub fn loss<R: Rng>(&mut self, samples: &[LinkSample], cfg: &BoundConfig, rng: &mut R) -> Result<(Var, LossBreakdown)> {
        if samples.is_empty() {
            return Err(DgibError::arg("no link samples for the loss"));
        }
        let n = self.num_nodes;
        if samples.iter().any(|s| s.u >= n || s.v >= n) {
            return Err(DgibError::arg("link sample node out of range"));
        }
        let tape = &mut self.tape;
        let us: Rc<[usize]> = samples.iter().map(|s| s.u).collect();
        let vs: Rc<[usize]> = samples.iter().map(|s| s.v).collect();
        let labels: Rc<[u8]> = samples.iter().map(|s| s.label).collect();
        let logits = tape.pair_dot(self.z_final, us, vs);
        let ce = tape.bce_logits(logits, labels, PROB_EPS);

        let mut a_vars: BTreeMap<usize, Var> = BTreeMap::new();
        for layer in &self.steps {
            for (i, step) in layer.iter().enumerate() {
                let slice = &self.slices[i];
                let term = match cfg.prior_kind {
                    PriorKind::Bernoulli => {
                        let prior: Rc<[f64]> = slice.anchor_degree.iter().map(|&m| bern_prior(m)).collect();
                        tape.kl_bern_logits(step.scores, prior)
                    }
                    PriorKind::Categorical => {
                        let q = tape.segment_normalize(step.phi, slice.offsets.clone());
                        let support: Rc<[f64]> = slice.anchor_degree.iter().map(|&m| m as f64).collect();
                        tape.kl_cat_uniform(q, support)
                    }
                };
                let term = tape.scale(term, 1.0 / n as f64);
                let entry = a_vars.entry(i + 1).or_insert(term);
                if *entry != term {
                    *entry = tape.add(*entry, term);
                }
            }
        }

        let last = self.steps.last().expect("at least one layer");
        let mut z_vars: BTreeMap<usize, Var> = BTreeMap::new();
        let gauss = |tape: &mut Tape, step: &LayerStep, rng: &mut R| {
            let rows: Rc<[usize]> = mc_nodes(n, cfg.mc_samples, rng).into();
            let z = tape.gather_rows(step.z, rows.clone());
            let mu = tape.gather_rows(step.mu, rows.clone());
            let lv = tape.gather_rows(step.lv, rows);
            tape.gauss_log_ratio(z, mu, lv)
        };
        for (i, step) in last.iter().take(self.t_len).enumerate() {
            let term = gauss(tape, step, rng);
            z_vars.insert(i + 1, term);
        }
        let cons = gauss(tape, &last[self.t_len], rng);

        let parts = LossParts {
            ce: tape.scalar(ce),
            a_terms: a_vars.iter().map(|(t, v)| (*t, tape.scalar(*v))).collect(),
            z_terms: z_vars.iter().map(|(t, v)| (*t, tape.scalar(*v))).collect(),
            consensual: tape.scalar(cons),
        };
        let breakdown = assemble_loss(&parts, cfg);

        // total = ce + alpha beta1 (sum A + sum Z) + (1 - alpha) beta2 cons
        let mut total = ce;
        let selected = a_vars
            .iter()
            .filter(|(t, _)| cfg.time_indices_a.contains(**t))
            .chain(z_vars.iter().filter(|(t, _)| cfg.time_indices_z.contains(**t)))
            .map(|(_, v)| *v)
            .collect::<Vec<_>>();
        for v in selected {
            let s = tape.scale(v, cfg.alpha * cfg.beta1);
            total = tape.add(total, s);
        }
        let c = tape.scale(cons, (1.0 - cfg.alpha) * cfg.beta2);
        total = tape.add(total, c);
        Ok((total, breakdown))
    }

    /// Gradients in [`DGIBModel::param_slices`] order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.params
            .vars()
            .into_iter()
            .map(|v| grads.get_or_zeros(v, self.tape.value(v).dim()).iter().copied().collect())
            .collect()
    }
}

/// The loss of a trace computed with the reference estimators.
///
/// Draws the same node sets from `rng` as [`ForwardPass::loss`].
pub fn compute_loss<R: Rng>(
    trace: &ForwardTrace,
    samples: &[LinkSample],
    cfg: &BoundConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let pairs: Vec<(usize, usize)> = samples.iter().map(|s| (s.u, s.v)).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let ce = ce_lower_bound(&predict_links(&trace.z_final, &pairs)?, &labels)?;
    let n = trace.z_final.nrows();

    let mut a_terms: BTreeMap<usize, f64> = BTreeMap::new();
    for layer in &trace.steps {
        for step in layer {
            let mut total = 0.0;
            for v in 0..n {
                let phi = &step.phi.as_slice().expect("contiguous")[step.offsets[v]..step.offsets[v + 1]];
                if phi.is_empty() {
                    continue;
                }
                total += match cfg.prior_kind {
                    PriorKind::Bernoulli => kl_bernoulli(phi, bern_prior(phi.len()))?,
                    PriorKind::Categorical => {
                        let s: f64 = phi.iter().sum();
                        let q: Vec<f64> = phi.iter().map(|p| p / s).collect();
                        kl_categorical(&q, q.len())?
                    }
                };
            }
            *a_terms.entry(step.t).or_insert(0.0) += total / n as f64;
        }
    }

    let gauss = |step: &StepTrace, rng: &mut R| -> Result<f64> {
        let rows = mc_nodes(n, cfg.mc_samples, rng);
        let q = GaussianParams::standard(step.mu.ncols());
        let mut total = 0.0;
        for &v in &rows {
            let p = GaussianParams::new(step.mu.row(v).to_vec(), step.log_sigma2.row(v).to_vec())?;
            total += gaussian_log_ratio(&[step.z.row(v).to_vec()], &p, &q)?;
        }
        Ok(total / rows.len() as f64)
    };
    let last = trace.final_layer();
    let mut z_terms = BTreeMap::new();
    for step in last.iter().take(trace.t_len) {
        z_terms.insert(step.t, gauss(step, rng)?);
    }
    let consensual = gauss(&last[trace.t_len], rng)?;
    Ok(assemble_loss(&LossParts { ce, a_terms, z_terms, consensual }, cfg))
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    temperature: f64,
    tensors: Vec<NamedTensor>,
}

const CHECKPOINT_FORMAT: &str = "dgib-checkpoint";

impl Checkpoint {
    fn from_model(m: &DGIBModel) -> Self {
        let t2 = |name: String, a: &Array2<f64>| NamedTensor {
            name,
            shape: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        };
        let mut tensors = vec![t2("input_projection".into(), &m.input_projection)];
        for (i, l) in m.layers.iter().enumerate() {
            tensors.push(t2(format!("layer{i}.w"), &l.w));
            tensors.push(NamedTensor {
                name: format!("layer{i}.attn_w"),
                shape: vec![l.attn_w.len()],
                data: l.attn_w.to_vec(),
            });
            tensors.push(t2(format!("layer{i}.mu_head"), &l.mu_head));
            tensors.push(t2(format!("layer{i}.logvar_head"), &l.logvar_head));
        }
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: m.cfg.clone(),
            temperature: m.temperature,
            tensors,
        }
    }

    fn into_model(self) -> Result<DGIBModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(DgibError::arg(format!("unknown checkpoint format {:?}", self.format)));
        }
        let mut map: BTreeMap<String, NamedTensor> = self.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut take = |name: String, rank: usize| -> Result<NamedTensor> {
            let t = map.remove(&name).ok_or_else(|| DgibError::arg(format!("missing tensor {name}")))?;
            if t.shape.len() != rank || t.shape.iter().product::<usize>() != t.data.len() {
                return Err(DgibError::arg(format!("tensor {name} has shape {:?}", t.shape)));
            }
            Ok(t)
        };
        let mat = |t: NamedTensor| Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data).expect("shape checked");
        let input_projection = mat(take("input_projection".into(), 2)?);
        let mut layers = Vec::new();
        for i in 0..self.config.num_layers {
            let w = mat(take(format!("layer{i}.w"), 2)?);
            let mu_head = mat(take(format!("layer{i}.mu_head"), 2)?);
            let logvar_head = mat(take(format!("layer{i}.logvar_head"), 2)?);
            let attn_w = Array1::from(take(format!("layer{i}.attn_w"), 1)?.data);
            layers.push(LayerParams { w, attn_w, mu_head, logvar_head });
        }
        let m = DGIBModel { cfg: self.config, input_projection, layers, temperature: self.temperature };
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyngraph::{generate_synthetic, sample_link_labels, Edge, GraphSnapshot, SplitSpec, SyntheticParams};
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn small_cfg(input_dim: usize) -> ModelConfig {
        ModelConfig { hidden_dim: 4, ..ModelConfig::new(input_dim) }
    }

    fn small_graph(seed: u64) -> DynamicGraph {
        generate_synthetic(&SyntheticParams {
            n_nodes: 20,
            n_snapshots: 4,
            n_communities: 2,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn predict_links_examples() {
        let z = array![[0.0, 0.0], [1.0, 1.0], [1.0, -1.0]];
        let p = predict_links(&z, &[(0, 1), (1, 2), (1, 1)]).unwrap();
        assert_eq!(p[0], 0.5);
        assert_eq!(p[1], 0.5);
        assert_abs_diff_eq!(p[2], 0.88080, epsilon = 1e-5);
        assert!(predict_links(&z, &[(0, 3)]).is_err());
    }

    #[test]
    fn temperature_schedule() {
        let s = TemperatureSchedule::default();
        assert_eq!(s.at(0), 0.5);
        assert_abs_diff_eq!(s.at(1), 0.485, epsilon = 1e-12);
        assert_eq!(s.at(1000), 0.1);
    }

    /// Path 0-1-2 at t = 1, d = d' = 2, one layer, categorical expectation
    /// weights. Every line of the recursion is recomputed with scalars.
    #[test]
    fn hand_traced_path_graph() {
        let x1 = array![[0.5, -0.2], [0.1, 0.9], [-0.3, 0.4]];
        let x2 = array![[0.2, 0.2], [0.7, -0.5], [0.0, 1.0]];
        let links = vec![Edge { src: 0, dst: 1, kind: None }, Edge { src: 1, dst: 2, kind: None }];
        let s1 = GraphSnapshot::new(1, 3, links, x1.clone()).unwrap();
        let dg = DynamicGraph::new("path", vec![s1], x2.clone(), 0, SplitSpec::new(1, 0, 0).unwrap()).unwrap();

        let mut cfg = ModelConfig { hidden_dim: 2, ..ModelConfig::new(2) };
        cfg.bound.prior_kind = PriorKind::Categorical;
        let p = array![[1.0, 0.5], [-0.5, 1.0]];
        let w = array![[0.8, 0.1], [0.3, 1.2]];
        let attn = [0.4, -0.3, 0.2, 0.6];
        let mu_h = array![[1.0, -0.2], [0.5, 0.7]];
        let lv_h = array![[0.1, 0.0], [0.0, -0.1]];
        let model = DGIBModel {
            cfg,
            input_projection: p.clone(),
            layers: vec![LayerParams {
                w: w.clone(),
                attn_w: Array1::from(attn.to_vec()),
                mu_head: mu_h.clone(),
                logvar_head: lv_h,
            }],
            temperature: 0.5,
        };
        let trace = model.forward(&dg, &mut rng::seeded(0), false).unwrap();

        let mm = |a: [f64; 2], m: &Array2<f64>| [a[0] * m[[0, 0]] + a[1] * m[[1, 0]], a[0] * m[[0, 1]] + a[1] * m[[1, 1]]];
        let relu = |a: [f64; 2]| [a[0].max(0.0), a[1].max(0.0)];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        // PE(dt) for d' = 2 is [sin(dt), cos(dt)]
        let enc = |x: &Array2<f64>, v: usize, dt: f64| {
            let r = mm([x[[v, 0]], x[[v, 1]]], &p);
            [r[0] + dt.sin(), r[1] + dt.cos()]
        };
        // t = 1: neighbors are same-time graph neighbors only
        let hat1: Vec<[f64; 2]> = (0..3).map(|v| mm(relu(enc(&x1, v, 1.0)), &w)).collect();
        let nbrs = [vec![1], vec![0, 2], vec![1]];
        let mut z1 = Vec::new();
        for v in 0..3 {
            let phis: Vec<f64> = nbrs[v]
                .iter()
                .map(|&u| {
                    sig(hat1[v][0] * attn[0] + hat1[v][1] * attn[1] + hat1[u][0] * attn[2] + hat1[u][1] * attn[3])
                })
                .collect();
            let s: f64 = phis.iter().sum();
            let mut agg = [0.0, 0.0];
            for (k, &u) in nbrs[v].iter().enumerate() {
                agg[0] += phis[k] / s * hat1[u][0];
                agg[1] += phis[k] / s * hat1[u][1];
            }
            z1.push(mm(agg, &mu_h));
        }
        // t = 2: the only neighbor is (v, 1), so its weight is 1 and X(2) only
        // enters through the attention score
        for v in 0..3 {
            let prev_hat = mm(relu(z1[v]), &w);
            let z2 = mm(prev_hat, &mu_h);
            for j in 0..2 {
                assert_abs_diff_eq!(trace.z_final[[v, j]], z2[j], epsilon = 1e-10);
                assert_abs_diff_eq!(trace.steps[0][0].z[[v, j]], z1[v][j], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn eval_forward_is_permutation_equivariant() {
        let dg = small_graph(1);
        let model = DGIBModel::new(small_cfg(dg.feature_dim), &mut rng::seeded(2)).unwrap();
        let perm: Vec<usize> = (0..20).map(|v| (v * 7 + 3) % 20).collect();
        let pdg = dg.permute_nodes(&perm).unwrap();
        let a = model.forward(&dg, &mut rng::seeded(0), false).unwrap();
        let b = model.forward(&pdg, &mut rng::seeded(0), false).unwrap();
        for v in 0..20 {
            for j in 0..4 {
                assert_abs_diff_eq!(a.z_final[[v, j]], b.z_final[[perm[v], j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn training_forward_is_deterministic_per_seed() {
        let dg = small_graph(2);
        let model = DGIBModel::new(small_cfg(dg.feature_dim), &mut rng::seeded(2)).unwrap();
        let a = model.forward(&dg, &mut rng::seeded(5), true).unwrap();
        let b = model.forward(&dg, &mut rng::seeded(5), true).unwrap();
        assert_eq!(a, b);
        let c = model.forward(&dg, &mut rng::seeded(6), true).unwrap();
        assert_ne!(a.z_final, c.z_final);
    }

    fn loss_setup(kind: PriorKind) -> (DynamicGraph, DGIBModel, Vec<LinkSample>) {
        let dg = small_graph(3);
        let mut cfg = small_cfg(dg.feature_dim);
        cfg.num_layers = 2;
        cfg.bound.prior_kind = kind;
        cfg.bound.beta1 = 0.3;
        cfg.bound.beta2 = 0.2;
        cfg.bound.mc_samples = 8;
        let model = DGIBModel::new(cfg, &mut rng::seeded(4)).unwrap();
        let samples = sample_link_labels(&dg, 4, &mut rng::seeded(1)).unwrap();
        (dg, model, samples)
    }

    #[test]
    fn tape_loss_matches_reference_estimators() {
        for kind in [PriorKind::Bernoulli, PriorKind::Categorical] {
            let (dg, model, samples) = loss_setup(kind);
            let window = dg.window(4).unwrap();
            let index = WindowIndex::build(&window, 1).unwrap();
            for training in [false, true] {
                let mut r = rng::seeded(8);
                let mut pass = model.forward_tape(&window, &index, &mut r, training).unwrap();
                let trace = pass.trace();
                let mut r2 = r.clone();
                let (root, tape_bd) = pass.loss(&samples, &model.cfg.bound, &mut r).unwrap();
                let ref_bd = compute_loss(&trace, &samples, &model.cfg.bound, &mut r2).unwrap();
                assert_abs_diff_eq!(tape_bd.ce, ref_bd.ce, epsilon = 1e-10);
                assert_abs_diff_eq!(tape_bd.consensual, ref_bd.consensual, epsilon = 1e-9);
                for (t, v) in &ref_bd.a_terms {
                    assert_abs_diff_eq!(tape_bd.a_terms[t], *v, epsilon = 1e-9);
                }
                for (t, v) in &ref_bd.z_terms {
                    assert_abs_diff_eq!(tape_bd.z_terms[t], *v, epsilon = 1e-9);
                }
                let total = pass.tape.scalar(root);
                assert!((total - ref_bd.total).abs() <= 1e-10 * ref_bd.total.abs().max(1.0));
                assert!((ref_bd.recompose(&model.cfg.bound) - ref_bd.total).abs() <= 1e-10 * ref_bd.total.abs());
                assert_eq!(tape_bd.a_terms.len(), 4);
                assert_eq!(tape_bd.z_terms.len(), 3);
            }
        }
    }

    #[test]
    fn zero_betas_give_pure_cross_entropy() {
        let (dg, mut model, samples) = loss_setup(PriorKind::Bernoulli);
        model.cfg.bound.beta1 = 0.0;
        model.cfg.bound.beta2 = 0.0;
        let window = dg.window(4).unwrap();
        let index = WindowIndex::build(&window, 1).unwrap();
        let (bd, _) = model.loss_and_grad(&window, &index, &samples, &mut rng::seeded(1), true).unwrap();
        assert_eq!(bd.total, bd.ce);
    }

    #[test]
    fn identical_gaussians_give_zero_feature_terms() {
        // with zero heads mu = 0 and log-variance = 0, so P equals Q
        let (dg, mut model, samples) = loss_setup(PriorKind::Bernoulli);
        for l in &mut model.layers {
            l.mu_head.fill(0.0);
            l.logvar_head.fill(0.0);
        }
        let window = dg.window(4).unwrap();
        let index = WindowIndex::build(&window, 1).unwrap();
        let (bd, _) = model.loss_and_grad(&window, &index, &samples, &mut rng::seeded(1), true).unwrap();
        assert!(bd.z_terms.values().all(|v| v.abs() < 1e-12));
        assert!(bd.consensual.abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [PriorKind::Bernoulli, PriorKind::Categorical] {
            let (dg, model, samples) = loss_setup(kind);
            let window = dg.window(4).unwrap();
            let index = WindowIndex::build(&window, 1).unwrap();
            let loss = |m: &DGIBModel| {
                m.loss_and_grad(&window, &index, &samples, &mut rng::seeded(17), true).unwrap()
            };
            let (_, grads) = loss(&model);
            let mut pick = rng::seeded(23);
            let h = 1e-5;
            for _ in 0..10 {
                let tensor = pick.random_range(0..grads.len());
                let i = pick.random_range(0..grads[tensor].len());
                let mut a = model.clone();
                a.param_slices_mut()[tensor][i] += h;
                let mut b = model.clone();
                b.param_slices_mut()[tensor][i] -= h;
                let fd = (loss(&a).0.total - loss(&b).0.total) / (2.0 * h);
                let an = grads[tensor][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-4 || (fd - an).abs() < 1e-9, "{kind:?} tensor {tensor} index {i}: fd {fd} an {an}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (_, model, _) = loss_setup(PriorKind::Categorical);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_checkpoint(&path).unwrap();
        let back = DGIBModel::load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        for (a, b) in model.param_slices().iter().zip(back.param_slices()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(matches!(
            DGIBModel::load_checkpoint(dir.path().join("missing.json")),
            Err(DgibError::MissingArtifact(_))
        ));
    }
}
