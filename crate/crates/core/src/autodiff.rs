//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably and records every
//! operation applied to its [`Var`] handles. [`Tape::backward`] walks the
//! record in reverse and returns a [`Gradients`] set keyed by parameter,
//! which the caller folds into the store with [`ParamStore::accumulate`].
//! Because the store is only borrowed, several tapes over one store can
//! run on different threads.

use crate::error::{shape_err, Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{elu_grad, layer_norm_parts, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Elu(Var),
    Relu(Var),
    MaskMul(Var, Vec<f64>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Transpose(Var),
    Sum(Var),
    Select(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.tensor(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Adds `bias` (one value per column) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) =
            layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).elu();
        self.push(out, Op::Elu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Elementwise product with a constant; the multiplier gets no gradient.
    pub fn mask_mul(&mut self, x: Var, keep: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.len() {
            return Err(shape_err("mask_mul", xv.shape(), &[keep.len()]));
        }
        let data = xv.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MaskMul(x, keep), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mean_rows()?;
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Picks one element (flat index) as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let v = *xv.data().get(index).ok_or_else(|| Error::InvalidArgument {
            op: "select",
            msg: format!("index {index} out of {} elements", xv.len()),
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Select(x, index), &[x]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            by_param: vec![None; self.params.len()],
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match &mut out.by_param[id.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let gt = self.grad_tensor(Var(idx), g)?;
                    if needs(*a) {
                        let ga = gt.matmul_nt(self.value(*b))?;
                        accumulate(&mut grads, *a, ga.data());
                    }
                    if needs(*b) {
                        let gb = self.value(*a).matmul_tn(&gt)?;
                        accumulate(&mut grads, *b, gb.data());
                    }
                }
                Op::MatMulNt(a, b) => {
                    // out = a · bᵀ: da = g · b, db = gᵀ · a
                    let gt = self.grad_tensor(Var(idx), g)?;
                    if needs(*a) {
                        let ga = gt.matmul(self.value(*b))?;
                        accumulate(&mut grads, *a, ga.data());
                    }
                    if needs(*b) {
                        let gb = gt.matmul_tn(self.value(*a))?;
                        accumulate(&mut grads, *b, gb.data());
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if needs(*b) {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        accumulate(&mut grads, *b, &neg);
                    }
                }
                Op::AddRow(x, bias) => {
                    if needs(*bias) {
                        let c = self.value(*bias).len();
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads, *bias, &gb);
                    }
                    if needs(*x) {
                        accumulate(&mut grads, *x, &g);
                    }
                }
                Op::Scale(x, c) => {
                    let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::AddScalar(x) => accumulate(&mut grads, *x, &g),
                Op::Softmax(x, axis) => {
                    let y = self.value(Var(idx));
                    let (outer, len, inner) = y.axis_split(*axis, "softmax")?;
                    let yd = y.data();
                    let mut gx = vec![0.0; yd.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * yd[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] = yd[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).data();
                    let c = gv.len();
                    if needs(*gain) {
                        let mut gg = vec![0.0; c];
                        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                gg[j] += grow[j] * hrow[j];
                            }
                        }
                        accumulate(&mut grads, *gain, &gg);
                    }
                    if needs(*bias) {
                        let mut gb = vec![0.0; c];
                        for grow in g.chunks(c) {
                            gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads, *bias, &gb);
                    }
                    if needs(*x) {
                        let mut gx = vec![0.0; g.len()];
                        for (r, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                            let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                            let k = inv_std[r] / c as f64;
                            for j in 0..c {
                                gx[r * c + j] = k * (c as f64 * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                            }
                        }
                        accumulate(&mut grads, *x, &gx);
                    }
                }
                Op::Elu(x) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g.iter().zip(xv).map(|(gi, &xi)| gi * elu_grad(xi)).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::MaskMul(x, keep) => {
                    let gx: Vec<f64> = g.iter().zip(keep).map(|(a, k)| a * k).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = self.value(*x).dims2()?;
                    let w = g.len() / r;
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::SliceRows(x, start) => {
                    let (r, c) = self.value(*x).dims2()?;
                    let mut gx = vec![0.0; r * c];
                    gx[start * c..start * c + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::ConcatCols(parts) => {
                    let total = self.value(Var(idx)).dims2()?.1;
                    let mut offset = 0;
                    for p in parts {
                        let (r, w) = self.value(*p).dims2()?;
                        if needs(*p) {
                            let mut gp = Vec::with_capacity(r * w);
                            for i in 0..r {
                                gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                            }
                            accumulate(&mut grads, *p, &gp);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        if needs(*p) {
                            accumulate(&mut grads, *p, &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.value(*x).dims2()?;
                    let mut gx = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        gx.extend(g.iter().map(|v| v / r as f64));
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Transpose(x) => {
                    let gt = self.grad_tensor(Var(idx), g)?.transpose()?;
                    accumulate(&mut grads, *x, gt.data());
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::Select(x, index) => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    gx[*index] = g[0];
                    accumulate(&mut grads, *x, &gx);
                }
            }
        }
        Ok(out)
    }

    fn grad_tensor(&self, v: Var, g: Vec<f64>) -> Result<Tensor> {
        Tensor::new(self.value(v).shape().to_vec(), g)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g.to_vec()),
    }
}
