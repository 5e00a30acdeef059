//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`], are registered once per tape, and receive their
//! gradients from [`Tape::backward`] via [`Tape::param_grads`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{masked_softmax_rows, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Tanh(Var),
    Sqrt(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<S>,
        inv_std: Vec<S>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    SqDist(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix<S>,
    },
}

struct Node<S> {
    value: Matrix<S>,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<String, Var>,
    grads: Vec<Option<Matrix<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<S> {
        &self.nodes[v.0].value
    }

    /// A leaf that receives no named gradient.
    pub fn constant(&mut self, value: Matrix<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers (once) and returns the leaf for parameter `name`.
    pub fn param(&mut self, params: &ParamSet<S>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params.get(name)?.clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    /// Adds the `1 × n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let mut value = self.value(a).clone();
        let r = r.data().to_vec();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = S::lit(GELU_C);
        let k = S::lit(GELU_A);
        let half = S::lit(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh(a))
    }

    /// Elementwise square root of non-negative input; negative rounding noise clamps to 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(S::zero()).sqrt());
        self.push(value, Op::Sqrt(a))
    }

    /// Row softmax over the columns where `col_mask` is true.
    pub fn masked_softmax(&mut self, a: Var, col_mask: &[bool]) -> Result<Var> {
        if !col_mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument(
                "softmax needs at least one unmasked column".into(),
            ));
        }
        if col_mask.len() != self.value(a).cols() {
            return Err(Error::Shape(format!(
                "mask of width {} for {} columns",
                col_mask.len(),
                self.value(a).cols()
            )));
        }
        let value = masked_softmax_rows(self.value(a), col_mask);
        Ok(self.push(value, Op::MaskedSoftmax(a)))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1 × n` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = S::lit(cols as f64);
        let eps = S::lit(LN_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut value = xhat.clone();
        for i in 0..rows {
            for (j, o) in value.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Rows `ids` of `table`, in order.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&id| id >= t.rows()) {
            return Err(Error::OutOfVocab {
                id: bad,
                size: t.rows(),
            });
        }
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(rows.len(), av.cols());
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(av.row(r));
        }
        self.push(value, Op::SelectRows(a, rows.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `[start, start + width)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        let value = Matrix::from_fn(av.rows(), width, |i, j| av.get(i, start + j));
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height");
            for i in 0..rows {
                value.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
            }
            offset += v.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    /// Pairwise squared Euclidean distances: `out[i][j] = ‖a_i − b_j‖²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), bv.cols(), "sq_dist width");
        let value = Matrix::from_fn(av.rows(), bv.rows(), |i, j| {
            crate::tensor::squared_distance(av.row(i), bv.row(j))
        });
        self.push(value, Op::SqDist(a, b))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() || lv.rows() == 0 {
            return Err(Error::Shape(format!(
                "{} logit rows for {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(Error::Shape(format!("target {t} with {} classes", lv.cols())));
        }
        let all = vec![true; lv.cols()];
        let probs = masked_softmax_rows(lv, &all);
        let mut loss = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            // log-sum-exp form for stability
            let row = lv.row(i);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            loss += lse - row[t];
        }
        loss /= S::lit(targets.len() as f64);
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> S {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    fn accumulate(grads: &mut [Option<Matrix<S>>], v: Var, delta: Matrix<S>) {
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Back-propagates from the `1 × 1` node `loss`.
    pub fn backward(&mut self, loss: Var) {
        let mut grads: Vec<Option<Matrix<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, S::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    fn backprop_node(&self, idx: usize, g: &Matrix<S>, grads: &mut [Option<Matrix<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                Self::accumulate(grads, *a, g.matmul_nt(bv));
                Self::accumulate(grads, *b, av.matmul_tn(g));
            }
            Op::MatMulNt(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                Self::accumulate(grads, *a, g.matmul(bv));
                Self::accumulate(grads, *b, g.matmul_tn(av));
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.scale(-S::one()));
            }
            Op::AddRow(a, row) => {
                Self::accumulate(grads, *a, g.clone());
                let mut r = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &x) in r.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                Self::accumulate(grads, *row, r);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                Self::accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                Self::accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
            }
            Op::Scale(a, s) => Self::accumulate(grads, *a, g.scale(*s)),
            Op::Gelu(a) => {
                let c = S::lit(GELU_C);
                let k = S::lit(GELU_A);
                let half = S::lit(0.5);
                let three = S::lit(3.0);
                let d = self.value(*a).map(|x| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x)
                });
                Self::accumulate(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                Self::accumulate(grads, *a, g.zip_map(y, |gx, yx| gx * (S::one() - yx * yx)));
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                let half = S::lit(0.5);
                Self::accumulate(
                    grads,
                    *a,
                    g.zip_map(y, |gx, yx| if yx > S::zero() { gx * half / yx } else { S::zero() }),
                );
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let (rows, cols) = xhat.shape();
                let n = S::lit(cols as f64);
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let mut mean_d = S::zero();
                    let mut mean_dx = S::zero();
                    for j in 0..cols {
                        dgamma.row_mut(0)[j] += gr[j] * xr[j];
                        dbeta.row_mut(0)[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        mean_d += dxh;
                        mean_dx += dxh * xr[j];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    let inv = inv_std[i];
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        let dxh = gr[j] * gam[j];
                        *o = inv * (dxh - mean_d - xr[j] * mean_dx);
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gamma, dgamma);
                Self::accumulate(grads, *beta, dbeta);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, &x) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                Self::accumulate(grads, *table, d);
            }
            Op::SelectRows(a, rows) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &x) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                Self::accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    Self::accumulate(grads, p, g.slice_rows(offset, r));
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let mut d = Matrix::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                Self::accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let d = Matrix::from_fn(g.rows(), w, |i, j| g.get(i, offset + j));
                    Self::accumulate(grads, p, d);
                    offset += w;
                }
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                Self::accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), g.get(0, 0)));
            }
            Op::SqDist(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let two = S::lit(2.0);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                let mut db = Matrix::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let w = g.get(i, j) * two;
                        if w == S::zero() {
                            continue;
                        }
                        for c in 0..av.cols() {
                            let diff = av.get(i, c) - bv.get(j, c);
                            da.row_mut(i)[c] += w * diff;
                            db.row_mut(j)[c] -= w * diff;
                        }
                    }
                }
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.get(0, 0) / S::lit(targets.len() as f64);
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let v = d.get(i, t) - S::one();
                    d.set(i, t, v);
                }
                Self::accumulate(grads, *logits, d.scale(scale));
            }
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&Matrix<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every registered parameter; unreached parameters get zeros.
    pub fn param_grads(&self) -> ParamSet<S> {
        let mut names: Vec<(&String, &Var)> = self.params.iter().collect();
        names.sort_by_key(|(_, v)| v.0);
        let mut out = ParamSet::new();
        for (name, &v) in names {
            let g = match self.grad(v) {
                Some(g) => g.clone(),
                None => {
                    let val = self.value(v);
                    Matrix::zeros(val.rows(), val.cols())
                }
            };
            out.insert(name.clone(), g);
        }
        out
    }
}
