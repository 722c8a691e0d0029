//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node that depends on a
//! differentiable leaf. Only the operations the model needs are provided; the
//! graph-specific ones (pair scores, weighted scatter, segment softmax) work
//! on flattened neighbor lists so a whole time step is a handful of nodes.

use std::rc::Rc;

use ndarray::{Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Idx = Rc<[usize]>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    ConcatRows(Var, Var),
    GatherRows(Var, Idx),
    Sum(Var),
    /// `s[e] = a[rows_a[e]] . w[..d] + b[rows_b[e]] . w[d..]`
    PairScore { a: Var, b: Var, w: Var, rows_a: Idx, rows_b: Idx },
    /// `s[e] = a[rows_a[e]] . a[rows_b[e]]`
    PairDot { a: Var, rows_a: Idx, rows_b: Idx },
    /// `out[anchor[e]] += w[e] * h[member[e]]`
    ScatterWeighted { w: Var, h: Var, anchors: Idx, members: Idx },
    /// Per-segment `x / sum(x)` on a column vector.
    SegmentNormalize { x: Var, offsets: Idx },
    /// Per-segment softmax on a column vector.
    SegmentSoftmax { x: Var, offsets: Idx },
    /// Mean binary cross-entropy of logits with probability clamping.
    BceLogits { s: Var, labels: Rc<[u8]>, eps: f64 },
    /// `sum_e KL[Bern(sigmoid(s_e)) || Bern(prior_e)]`.
    KlBernLogits { s: Var, prior: Rc<[f64]> },
    /// `sum_e q_e * ln(q_e * m_e)` for a categorical column `q`.
    KlCatUniform { q: Var, support: Rc<[f64]> },
    /// Mean over rows of `log N(z; mu, exp(lv)) - log N(z; 0, I)`.
    GaussLogRatio { z: Var, mu: Var, lv: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to tape nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not
    /// influence the differentiated scalar.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(shape))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn col(values: Vec<f64>) -> Mat {
    let n = values.len();
    Mat::from_shape_vec((n, 1), values).expect("column shape")
}

fn scalar(x: f64) -> Mat {
    Mat::from_elem((1, 1), x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    /// Elementwise clamp; the gradient is zero where the input is clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows: column counts differ");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatRows(a, b), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Idx) -> Var {
        let value = self.value(a).select(Axis(0), &rows);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, rows), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn pair_score(&mut self, a: Var, b: Var, w: Var, rows_a: Idx, rows_b: Idx) -> Var {
        let (av, bv, wv) = (self.value(a), self.value(b), self.value(w));
        let d = av.ncols();
        assert_eq!(wv.dim(), (2 * d, 1), "pair_score: weight must be 2d x 1");
        let w1 = wv.column(0);
        let (wa, wb) = w1.split_at(Axis(0), d);
        let values: Vec<f64> = rows_a
            .iter()
            .zip(rows_b.iter())
            .map(|(&i, &j)| av.row(i).dot(&wa) + bv.row(j).dot(&wb))
            .collect();
        let rg = self.rg(a) || self.rg(b) || self.rg(w);
        self.push(col(values), Op::PairScore { a, b, w, rows_a, rows_b }, rg)
    }

    pub fn pair_dot(&mut self, a: Var, rows_a: Idx, rows_b: Idx) -> Var {
        let av = self.value(a);
        let values: Vec<f64> = rows_a
            .iter()
            .zip(rows_b.iter())
            .map(|(&i, &j)| av.row(i).dot(&av.row(j)))
            .collect();
        let rg = self.rg(a);
        self.push(col(values), Op::PairDot { a, rows_a, rows_b }, rg)
    }

    /// Weighted sum of member rows into `n_out` anchor rows.
    pub fn scatter_weighted(&mut self, w: Var, h: Var, anchors: Idx, members: Idx, n_out: usize) -> Var {
        let (wv, hv) = (self.value(w), self.value(h));
        let mut out = Mat::zeros((n_out, hv.ncols()));
        for (e, (&a, &m)) in anchors.iter().zip(members.iter()).enumerate() {
            let we = wv[[e, 0]];
            if we != 0.0 {
                out.row_mut(a).scaled_add(we, &hv.row(m));
            }
        }
        let rg = self.rg(w) || self.rg(h);
        self.push(out, Op::ScatterWeighted { w, h, anchors, members }, rg)
    }

    pub fn segment_normalize(&mut self, x: Var, offsets: Idx) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for s in offsets.windows(2) {
            let total: f64 = (s[0]..s[1]).map(|e| xv[[e, 0]]).sum();
            for e in s[0]..s[1] {
                out[[e, 0]] = xv[[e, 0]] / total;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SegmentNormalize { x, offsets }, rg)
    }

    pub fn segment_softmax(&mut self, x: Var, offsets: Idx) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for s in offsets.windows(2) {
            if s[0] == s[1] {
                continue;
            }
            let max = (s[0]..s[1]).map(|e| xv[[e, 0]]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (s[0]..s[1]).map(|e| (xv[[e, 0]] - max).exp()).sum();
            for e in s[0]..s[1] {
                out[[e, 0]] = (xv[[e, 0]] - max).exp() / total;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SegmentSoftmax { x, offsets }, rg)
    }

    pub fn bce_logits(&mut self, s: Var, labels: Rc<[u8]>, eps: f64) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.nrows(), labels.len());
        let total: f64 = sv
            .column(0)
            .iter()
            .zip(labels.iter())
            .map(|(&x, &y)| {
                let p = sigmoid(x).clamp(eps, 1.0 - eps);
                if y == 1 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        let value = scalar(total / labels.len() as f64);
        let rg = self.rg(s);
        self.push(value, Op::BceLogits { s, labels, eps }, rg)
    }

    pub fn kl_bern_logits(&mut self, s: Var, prior: Rc<[f64]>) -> Var {
        let sv = self.value(s);
        let total: f64 = sv
            .column(0)
            .iter()
            .zip(prior.iter())
            .map(|(&x, &p0)| {
                // ln(phi) = -softplus(-x), ln(1 - phi) = -softplus(x)
                let phi = sigmoid(x);
                let ln_phi = -softplus(-x);
                let ln_1m = -softplus(x);
                phi * (ln_phi - p0.ln()) + (1.0 - phi) * (ln_1m - (1.0 - p0).ln())
            })
            .sum();
        let rg = self.rg(s);
        self.push(scalar(total), Op::KlBernLogits { s, prior }, rg)
    }

    pub fn kl_cat_uniform(&mut self, q: Var, support: Rc<[f64]>) -> Var {
        let qv = self.value(q);
        let total: f64 = qv
            .column(0)
            .iter()
            .zip(support.iter())
            .map(|(&x, &m)| if x > 0.0 { x * (x * m).ln() } else { 0.0 })
            .sum();
        let rg = self.rg(q);
        self.push(scalar(total), Op::KlCatUniform { q, support }, rg)
    }

    pub fn gauss_log_ratio(&mut self, z: Var, mu: Var, lv: Var) -> Var {
        let (zv, mv, lvv) = (self.value(z), self.value(mu), self.value(lv));
        let rows = zv.nrows().max(1) as f64;
        let mut total = 0.0;
        for ((&x, &m), &l) in zv.iter().zip(mv.iter()).zip(lvv.iter()) {
            total += -0.5 * (l + (x - m).powi(2) * (-l).exp()) + 0.5 * x * x;
        }
        let rg = self.rg(z) || self.rg(mu) || self.rg(lv);
        self.push(scalar(total / rows), Op::GaussLogRatio { z, mu, lv }, rg)
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        grads[root.0] = Some(scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            let acc = |v: Var, delta: Mat, grads: &mut Vec<Option<Mat>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.clone(), &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, -&g, &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b), &mut grads);
                    acc(*b, &g * self.value(*a), &mut grads);
                }
                Op::Scale(a, c) => acc(*a, &g * *c, &mut grads),
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(*a, &g * &mask, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    acc(*a, &g * &d, &mut grads);
                }
                Op::Exp(a) => acc(*a, &g * &node.value, &mut grads),
                Op::Log(a) => acc(*a, &g / self.value(*a), &mut grads),
                Op::Clamp(a, lo, hi) => {
                    let mask = self
                        .value(*a)
                        .mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                    acc(*a, &g * &mask, &mut grads);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.value(*a).nrows();
                    acc(*a, g.slice(ndarray::s![..ra, ..]).to_owned(), &mut grads);
                    acc(*b, g.slice(ndarray::s![ra.., ..]).to_owned(), &mut grads);
                }
                Op::GatherRows(a, rows) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &g.row(k);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Sum(a) => acc(*a, Mat::from_elem(self.value(*a).dim(), g[[0, 0]]), &mut grads),
                Op::PairScore { a, b, w, rows_a, rows_b } => {
                    let (av, bv, wv) = (self.value(*a), self.value(*b), self.value(*w));
                    let d = av.ncols();
                    let mut da = Mat::zeros(av.dim());
                    let mut db = Mat::zeros(bv.dim());
                    let mut dw = Mat::zeros(wv.dim());
                    for (e, (&i, &j)) in rows_a.iter().zip(rows_b.iter()).enumerate() {
                        let ge = g[[e, 0]];
                        if ge == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            da[[i, c]] += ge * wv[[c, 0]];
                            db[[j, c]] += ge * wv[[d + c, 0]];
                            dw[[c, 0]] += ge * av[[i, c]];
                            dw[[d + c, 0]] += ge * bv[[j, c]];
                        }
                    }
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                    acc(*w, dw, &mut grads);
                }
                Op::PairDot { a, rows_a, rows_b } => {
                    let av = self.value(*a);
                    let mut da = Mat::zeros(av.dim());
                    for (e, (&i, &j)) in rows_a.iter().zip(rows_b.iter()).enumerate() {
                        let ge = g[[e, 0]];
                        da.row_mut(i).scaled_add(ge, &av.row(j));
                        da.row_mut(j).scaled_add(ge, &av.row(i));
                    }
                    acc(*a, da, &mut grads);
                }
                Op::ScatterWeighted { w, h, anchors, members } => {
                    let (wv, hv) = (self.value(*w), self.value(*h));
                    let mut dw = Mat::zeros(wv.dim());
                    let mut dh = Mat::zeros(hv.dim());
                    for (e, (&a, &m)) in anchors.iter().zip(members.iter()).enumerate() {
                        dw[[e, 0]] = g.row(a).dot(&hv.row(m));
                        dh.row_mut(m).scaled_add(wv[[e, 0]], &g.row(a));
                    }
                    acc(*w, dw, &mut grads);
                    acc(*h, dh, &mut grads);
                }
                Op::SegmentNormalize { x, offsets } => {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let mut dx = Mat::zeros(xv.dim());
                    for s in offsets.windows(2) {
                        let total: f64 = (s[0]..s[1]).map(|e| xv[[e, 0]]).sum();
                        let gy: f64 = (s[0]..s[1]).map(|e| g[[e, 0]] * y[[e, 0]]).sum();
                        for e in s[0]..s[1] {
                            dx[[e, 0]] = (g[[e, 0]] - gy) / total;
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::SegmentSoftmax { x, offsets } => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.dim());
                    for s in offsets.windows(2) {
                        let gy: f64 = (s[0]..s[1]).map(|e| g[[e, 0]] * y[[e, 0]]).sum();
                        for e in s[0]..s[1] {
                            dx[[e, 0]] = y[[e, 0]] * (g[[e, 0]] - gy);
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::BceLogits { s, labels, eps } => {
                    let sv = self.value(*s);
                    let n = labels.len() as f64;
                    let scale = g[[0, 0]] / n;
                    let d: Vec<f64> = sv
                        .column(0)
                        .iter()
                        .zip(labels.iter())
                        .map(|(&x, &y)| {
                            let p = sigmoid(x);
                            if p <= *eps || p >= 1.0 - *eps {
                                0.0
                            } else {
                                scale * (p - y as f64)
                            }
                        })
                        .collect();
                    acc(*s, col(d), &mut grads);
                }
                Op::KlBernLogits { s, prior } => {
                    let sv = self.value(*s);
                    let scale = g[[0, 0]];
                    let d: Vec<f64> = sv
                        .column(0)
                        .iter()
                        .zip(prior.iter())
                        .map(|(&x, &p0)| {
                            let phi = sigmoid(x);
                            let logit_p0 = p0.ln() - (1.0 - p0).ln();
                            scale * phi * (1.0 - phi) * (x - logit_p0)
                        })
                        .collect();
                    acc(*s, col(d), &mut grads);
                }
                Op::KlCatUniform { q, support } => {
                    let qv = self.value(*q);
                    let scale = g[[0, 0]];
                    let d: Vec<f64> = qv
                        .column(0)
                        .iter()
                        .zip(support.iter())
                        .map(|(&x, &m)| if x > 0.0 { scale * ((x * m).ln() + 1.0) } else { 0.0 })
                        .collect();
                    acc(*q, col(d), &mut grads);
                }
                Op::GaussLogRatio { z, mu, lv } => {
                    let (zv, mv, lvv) = (self.value(*z), self.value(*mu), self.value(*lv));
                    let scale = g[[0, 0]] / zv.nrows().max(1) as f64;
                    let mut dz = Mat::zeros(zv.dim());
                    let mut dm = Mat::zeros(zv.dim());
                    let mut dl = Mat::zeros(zv.dim());
                    ndarray::Zip::from(&mut dz)
                        .and(&mut dm)
                        .and(&mut dl)
                        .and(zv)
                        .and(mv)
                        .and(lvv)
                        .for_each(|dz, dm, dl, &x, &m, &l| {
                            let inv = (-l).exp();
                            *dz = scale * (-(x - m) * inv + x);
                            *dm = scale * (x - m) * inv;
                            *dl = scale * (-0.5 + 0.5 * (x - m).powi(2) * inv);
                        });
                    acc(*z, dz, &mut grads);
                    acc(*mu, dm, &mut grads);
                    acc(*lv, dl, &mut grads);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_mat(r: &mut impl Rng, rows: usize, cols: usize) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
    }

    /// Central differences of `f` around each entry of every input.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(vars[k], m.dim());
            for idx in 0..m.len() {
                let eval = |delta: f64| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| {
                            let mut x = x.clone();
                            if j == k {
                                let r = idx / x.ncols();
                                let c = idx % x.ncols();
                                x[[r, c]] += delta;
                            }
                            t.leaf(x)
                        })
                        .collect();
                    let out = build(&mut t, &vs);
                    t.scalar(out)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g[[idx / m.ncols(), idx % m.ncols()]];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} entry {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn dense_ops() {
        let mut r = rng::seeded(1);
        check(vec![rand_mat(&mut r, 3, 4), rand_mat(&mut r, 4, 2)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let s = t.sigmoid(m);
            let e = t.exp(s);
            let e = t.log(e);
            let e = t.exp(e);
            let q = t.mul(e, s);
            let c = t.scale(q, 0.7);
            let d = t.sub(c, s);
            let a = t.add(d, m);
            t.sum(a)
        });
        check(vec![rand_mat(&mut r, 3, 2), rand_mat(&mut r, 2, 2)], |t, v| {
            let rel = t.relu(v[0]);
            let cl = t.clamp(v[1], -0.5, 0.5);
            let cat = t.concat_rows(rel, cl);
            let g = t.gather_rows(cat, Rc::from(vec![4, 0, 0, 2]));
            let sq = t.mul(g, g);
            t.sum(sq)
        });
    }

    #[test]
    fn graph_ops() {
        let mut r = rng::seeded(2);
        let anchors: Idx = Rc::from(vec![0, 0, 1, 2, 2, 2]);
        let members: Idx = Rc::from(vec![1, 3, 0, 0, 1, 3]);
        let offsets: Idx = Rc::from(vec![0, 2, 3, 6]);
        let (a2, m2, o2) = (anchors.clone(), members.clone(), offsets.clone());
        check(
            vec![rand_mat(&mut r, 3, 2), rand_mat(&mut r, 4, 2), rand_mat(&mut r, 4, 1)],
            move |t, v| {
                let s = t.pair_score(v[0], v[1], v[2], a2.clone(), m2.clone());
                let phi = t.sigmoid(s);
                let q = t.segment_normalize(phi, o2.clone());
                let sm = t.segment_softmax(s, o2.clone());
                let w = t.mul(q, sm);
                let out = t.scatter_weighted(w, v[1], a2.clone(), m2.clone(), 3);
                let pd = t.pair_dot(out, Rc::from(vec![0, 1]), Rc::from(vec![2, 2]));
                let kl = t.kl_cat_uniform(q, Rc::from(vec![2.0, 2.0, 1.0, 3.0, 3.0, 3.0]));
                let bce = t.bce_logits(pd, Rc::from(vec![1u8, 0]), 1e-7);
                let kb = t.kl_bern_logits(s, Rc::from(vec![0.5, 0.5, 0.9, 0.3, 0.3, 0.3]));
                let x = t.add(kl, bce);
                t.add(x, kb)
            },
        );
    }

    #[test]
    fn gauss_log_ratio_op() {
        let mut r = rng::seeded(3);
        check(
            vec![rand_mat(&mut r, 3, 2), rand_mat(&mut r, 3, 2), rand_mat(&mut r, 3, 2)],
            |t, v| t.gauss_log_ratio(v[0], v[1], v[2]),
        );
    }

    #[test]
    fn gauss_log_ratio_matches_bounds_module() {
        use crate::bounds::{gaussian_log_ratio, GaussianParams};
        let mut t = Tape::new();
        let z = t.constant(Mat::from_shape_vec((2, 2), vec![0.1, -0.4, 1.2, 0.3]).unwrap());
        let mu = t.constant(Mat::from_shape_vec((2, 2), vec![0.0, 0.2, 0.2, 0.0]).unwrap());
        let lv = t.constant(Mat::from_shape_vec((2, 2), vec![0.5, -0.5, 0.5, -0.5]).unwrap());
        let v = t.gauss_log_ratio(z, mu, lv);
        // each row has its own p; compare row by row
        let q = GaussianParams::standard(2);
        let p0 = GaussianParams::new(vec![0.0, 0.2], vec![0.5, -0.5]).unwrap();
        let p1 = GaussianParams::new(vec![0.2, 0.0], vec![0.5, -0.5]).unwrap();
        let want = (gaussian_log_ratio(&[vec![0.1, -0.4]], &p0, &q).unwrap()
            + gaussian_log_ratio(&[vec![1.2, 0.3]], &p1, &q).unwrap())
            / 2.0;
        assert!((t.scalar(v) - want).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_closed_form_and_clamps() {
        let mut t = Tape::new();
        let s = t.leaf(col(vec![0.0, 50.0]));
        let v = t.bce_logits(s, Rc::from(vec![1u8, 0]), 1e-7);
        let want = (2f64.ln() - (1e-7f64).ln()) / 2.0;
        assert!((t.scalar(v) - want).abs() < 1e-9);
        let g = t.backward(v);
        let gs = g.get(s).unwrap();
        assert!((gs[[0, 0]] + 0.25).abs() < 1e-12);
        assert_eq!(gs[[1, 0]], 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Mat::ones((2, 2)));
        let b = t.leaf(Mat::ones((2, 2)));
        let m = t.mul(a, b);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &Mat::ones((2, 2)));
    }
}
