//! Dense row-major `f64` tensors and the numeric kernels the model needs.
//!
//! Kernels here are plain functions of their inputs. Recording for
//! differentiation happens in [`crate::autodiff`], which calls back into
//! these kernels for its forward values.

use rand::Rng;

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument {
                op: "tensor",
                msg: format!("extents must be positive, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument {
                op: "tensor",
                msg: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform fan-based initialization in ±sqrt(6 / (fan_in + fan_out)).
    pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self::new(vec![rows, cols], data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidArgument {
                op: "dims2",
                msg: format!("expected a matrix, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[self.shape.len() - 1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul_nt", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul_tn", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Numerically stable softmax along `axis` (max subtracted per slice).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = self.axis_split(axis, "softmax")?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| self.data[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (self.data[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    /// Splits the shape around `axis` into (outer, axis extent, inner).
    pub(crate) fn axis_split(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(Error::InvalidAxis {
                op,
                axis,
                shape: self.shape.clone(),
            });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(layer_norm_parts(self, gain, bias, eps)?.0)
    }

    pub fn elu(&self) -> Tensor {
        self.map(elu)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        Tensor::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if bias.len() != c {
            return Err(shape_err("add_row", &self.shape, &bias.shape));
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Tensor::new(self.shape.clone(), out)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + len > c || len == 0 {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of {c}", start + len),
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Tensor::new(vec![r, len], out)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start + len > r || len == 0 {
            return Err(Error::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {r}", start + len),
            });
        }
        Tensor::new(vec![len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidArgument {
            op: "concat_cols",
            msg: "nothing to concatenate".into(),
        })?;
        let (r, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pr != r {
                return Err(shape_err("concat_cols", &first.shape, &p.shape));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Tensor::new(vec![r, total], out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidArgument {
            op: "concat_rows",
            msg: "nothing to concatenate".into(),
        })?;
        let (_, c) = first.dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pc != c {
                return Err(shape_err("concat_rows", &first.shape, &p.shape));
            }
            rows += pr;
            out.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, c], out)
    }

    /// Mean over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Tensor::new(vec![1, c], out)
    }
}

pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub(crate) fn elu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Returns (output, normalized input, per-row inverse std).
pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let c = *x.shape.last().expect("rank >= 1");
    if gain.len() != c || bias.len() != c {
        return Err(shape_err("layer_norm", &x.shape, &gain.shape));
    }
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..c {
            let h = (row[j] - mean) * is;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gain.data[j] + bias.data[j];
        }
    }
    Ok((Tensor::new(x.shape.clone(), out)?, xhat, inv_std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(p.matmul(&y).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::xavier_uniform(3, 4, &mut rng);
        let b = Tensor::xavier_uniform(4, 2, &mut rng);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let bt = b.transpose().unwrap();
        assert!(a.matmul_nt(&bt).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let at = a.transpose().unwrap();
        assert!(at.matmul_tn(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let u = Tensor::new(vec![3], vec![0.0; 3]).unwrap().softmax(0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap().softmax(0).unwrap();
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-15 && big.data()[1] < 1e-300);
        let logs = Tensor::new(vec![3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()])
            .unwrap()
            .softmax(0)
            .unwrap();
        for (v, e) in logs.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_non_last_axis() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        let s = x.softmax(0).unwrap();
        assert!((s.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.at(0, 1) + s.at(1, 1) - 1.0).abs() < 1e-15);
        assert!(matches!(x.softmax(2), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::filled(&[3], 1.0);
        let b = Tensor::filled(&[3], 0.25);
        let c = Tensor::filled(&[1, 3], 4.0).layer_norm(&g, &b, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.25, 0.25, 0.25]);

        let g2 = Tensor::filled(&[2], 1.0);
        let z2 = Tensor::zeros(&[2]);
        let y = Tensor::new(vec![1, 2], vec![1.0, -1.0])
            .unwrap()
            .layer_norm(&g2, &z2, 1e-300)
            .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::xavier_uniform(1, 32, &mut rng).map(|v| 10.0 * v + 3.0);
        let n = x
            .layer_norm(&Tensor::filled(&[32], 1.0), &Tensor::zeros(&[32]), 1e-12)
            .unwrap();
        let mean = n.data().iter().sum::<f64>() / 32.0;
        let var = n.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);

        assert!(x.layer_norm(&g, &b, 1e-5).is_err());
    }

    #[test]
    fn elu_values() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(2.0), 2.0);
        assert!((elu(-1.0) - (-1f64).exp_m1()).abs() < 1e-15);
        assert!((elu(-1.0) + 0.63212).abs() < 1e-5);
    }

    #[test]
    fn constructor_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
