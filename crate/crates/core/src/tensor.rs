//! Dense row-major `f64` tensors.
//!
//! Zero extents are permitted and represent empty sequences (an `0×d`
//! modality segment, for instance). A rank-0 tensor is a scalar.
//! Broadcasting is limited to scalar↔tensor and equal shapes.

use crate::error::{Error, Result};
use crate::kernels;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Exp,
    /// `exp(-exp(x))`, the per-channel decay gate.
    NegExpExp,
    Log,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl UnaryOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Sigmoid => kernels::sigmoid(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::NegExpExp => kernels::neg_exp_exp(x),
            UnaryOp::Log => x.ln(),
            UnaryOp::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and the output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Exp => y,
            UnaryOp::NegExpExp => kernels::neg_exp_exp_grad(x),
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Tanh => 1.0 - y * y,
        }
    }
}

impl BinaryOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Tensor::from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The value of a rank-0 tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Rank {
                op: "item",
                expected: 0,
                got: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Rank {
                op: "dims2",
                expected: 2,
                got: self.shape.clone(),
            }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn outer(u: &Tensor, v: &Tensor) -> Result<Tensor> {
        for t in [u, v] {
            if t.rank() != 1 {
                return Err(Error::Rank {
                    op: "outer",
                    expected: 1,
                    got: t.shape.clone(),
                });
            }
        }
        let mut out = Vec::with_capacity(u.numel() * v.numel());
        for &a in &u.data {
            out.extend(v.data.iter().map(|&b| a * b));
        }
        Tensor::matrix(u.numel(), v.numel(), out)
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Tensor> {
        if op == UnaryOp::Log {
            if let Some(bad) = self.data.iter().find(|v| **v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        Ok(self.map(|x| op.apply(x)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Equal-shape or scalar↔tensor pointwise arithmetic.
    pub fn binary(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op.apply(a, b))
                .collect();
            Ok(Tensor {
                shape: self.shape.clone(),
                data,
            })
        } else if other.is_scalar() {
            let b = other.data[0];
            Ok(self.map(|a| op.apply(a, b)))
        } else if self.is_scalar() {
            let a = self.data[0];
            Ok(other.map(|b| op.apply(a, b)))
        } else {
            Err(Error::shape("elementwise", &self.shape, &other.shape))
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    /// Reduction along `axis`. For `Max`, also returns the flat source index
    /// of each selected element (lowest index on ties).
    pub fn reduce_with_argmax(
        &self,
        op: ReduceOp,
        axis: usize,
    ) -> Result<(Tensor, Option<Vec<usize>>)> {
        if axis >= self.rank() {
            return Err(Error::Rank {
                op: "reduce",
                expected: axis + 1,
                got: self.shape.clone(),
            });
        }
        let extent = self.shape[axis];
        if extent == 0 {
            return Err(Error::EmptyReduction {
                axis,
                shape: self.shape.clone(),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        let mut arg = (op == ReduceOp::Max).then(|| vec![0usize; outer * inner]);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * extent + e) * inner + i;
                let slot = o * inner + i;
                match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut s = 0.0;
                        for e in 0..extent {
                            s += self.data[idx(e)];
                        }
                        out[slot] = if op == ReduceOp::Mean {
                            s / extent as f64
                        } else {
                            s
                        };
                    }
                    ReduceOp::Max => {
                        let mut best = idx(0);
                        for e in 1..extent {
                            if self.data[idx(e)] > self.data[best] {
                                best = idx(e);
                            }
                        }
                        out[slot] = self.data[best];
                        arg.as_mut().unwrap()[slot] = best;
                    }
                }
            }
        }
        Ok((
            Tensor {
                shape: out_shape,
                data: out,
            },
            arg,
        ))
    }

    pub fn reduce(&self, op: ReduceOp, axis: usize) -> Result<Tensor> {
        Ok(self.reduce_with_argmax(op, axis)?.0)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start > end || end > r {
            return Err(Error::Domain {
                op: "slice_rows",
                detail: format!("range {start}..{end} out of 0..{r}"),
            });
        }
        Tensor::matrix(end - start, c, self.data[start * c..end * c].to_vec())
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = match parts.first() {
            Some(p) => p.dims2()?.1,
            None => return Err(Error::State("concat of zero tensors".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::shape("concat_rows", &parts[0].shape, &p.shape));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, cols, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}
