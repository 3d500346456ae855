//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever the
//! backward rule needs. Nodes only ever refer to earlier nodes, so the tape
//! is topologically ordered by construction and the reverse sweep is a
//! single backwards pass over the node list.
//!
//! Ops are deliberately coarse where the model needs speed: layer norm, the
//! per-head delta-rule scan, the strided convolution and the masked
//! cross-entropy each record one node with a hand-written backward rule.
//! All of them are checked against central finite differences in the tests.
//!
//! ```
//! use modrwkv::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let id = store.insert("p", Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
//! let mut tape = Tape::new();
//! let p = tape.param(&store, id);
//! let sq = tape.mul(p, p).unwrap();
//! let loss = tape.sum_all(sq);
//! tape.backward(loss, &mut store).unwrap();
//! assert_eq!(store.get(id).grad.data(), &[2.0, -4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{BinaryOp, ReduceOp, Tensor, UnaryOp};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapeMode {
    Recording,
    /// Values are computed, backward is refused and scan states are not kept.
    Frozen,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Reduce {
        kind: ReduceOp,
        x: Var,
        axis: usize,
        argmax: Option<Vec<usize>>,
    },
    SumAll(Var),
    Outer(Var, Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        scale: Var,
        offset: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Wkv7 {
        r: Var,
        k: Var,
        v: Var,
        a: Var,
        decay: Var,
        heads: usize,
        states: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ShiftRows {
        x: Var,
        by: usize,
    },
    CrossEntropy {
        logits: Var,
        picks: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddRow(a, b) | Op::Outer(a, b) => {
                vec![*a, *b]
            }
            Op::Unary(_, x)
            | Op::Scale(x, _)
            | Op::SumAll(x)
            | Op::Reshape(x)
            | Op::Reduce { x, .. }
            | Op::SliceRows { x, .. }
            | Op::NormalizeRows { x, .. }
            | Op::ShiftRows { x, .. } => vec![*x],
            Op::ConcatRows(parts) => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::LayerNorm {
                x, scale, offset, ..
            } => vec![*x, *scale, *offset],
            Op::Wkv7 {
                r, k, v, a, decay, ..
            } => vec![*r, *k, *v, *a, *decay],
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: TapeMode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

fn add_into(slot: &mut Option<Tensor>, g: &[f64], shape: &[usize]) {
    accumulate(slot, shape, |d| {
        for (a, b) in d.iter_mut().zip(g) {
            *a += b;
        }
    });
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            mode: TapeMode::Recording,
        }
    }

    pub fn frozen() -> Self {
        Tape {
            nodes: Vec::new(),
            mode: TapeMode::Frozen,
        }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Verifies that every node's inputs precede it.
    pub fn check_topological(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|v| v.0 < i))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.param(store, store.id(name)?))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).binary(op, self.value(b))?;
        Ok(self.push(y, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let y = self.value(x).unary(op)?;
        Ok(self.push(y, Op::Unary(op, x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x).expect("tanh is total")
    }

    pub fn neg_exp_exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::NegExpExp, x).expect("neg_exp_exp is total")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, Op::Scale(x, s))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.shape() != [c] {
            return Err(Error::shape("add_row", self.value(x).shape(), b.shape()));
        }
        let mut y = self.value(x).clone();
        let bd = b.data().to_vec();
        for i in 0..r {
            for (o, bv) in y.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        Ok(self.push(y, Op::AddRow(x, bias)))
    }

    pub fn reduce(&mut self, kind: ReduceOp, x: Var, axis: usize) -> Result<Var> {
        let (y, argmax) = self.value(x).reduce_with_argmax(kind, axis)?;
        Ok(self.push(
            y,
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_all();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::EmptyReduction {
                axis: 0,
                shape: self.value(x).shape().to_vec(),
            });
        }
        let s = self.sum_all(x);
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let y = Tensor::outer(self.value(u), self.value(v))?;
        Ok(self.push(y, Op::Outer(u, v)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let y = self.value(x).slice_rows(start, end)?;
        Ok(self.push(y, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_rows(&ts)?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }

    /// Row lookup: output row `t` is `table[ids[t]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Domain {
                    op: "gather_rows",
                    detail: format!("index {id} out of {rows} rows"),
                });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let y = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(
            y,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise layer normalization with learned scale and offset vectors.
    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        for p in [scale, offset] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("layer_norm", &[c], self.value(p).shape()));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(scale).data();
        let b = self.value(offset).data();
        let ones = vec![1.0; c];
        let zeros = vec![0.0; c];
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            rstd[i] = kernels::layer_norm_row(row, &ones, &zeros, eps, &mut xhat[i * c..(i + 1) * c]);
            kernels::layer_norm_row(row, g, b, eps, &mut out[i * c..(i + 1) * c]);
        }
        let y = Tensor::matrix(r, c, out)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                scale,
                offset,
                xhat,
                rstd,
            },
        ))
    }

    /// Scales every row to unit Euclidean norm, `x / max(‖x‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        let xs = self.value(x).data();
        for i in 0..r {
            norms[i] = kernels::normalize(&xs[i * c..(i + 1) * c], eps, &mut out[i * c..(i + 1) * c]);
        }
        let y = Tensor::matrix(r, c, out)?;
        Ok(self.push(y, Op::NormalizeRows { x, eps, norms }))
    }

    /// Multi-head generalized delta-rule scan.
    ///
    /// `r`, `k`, `v`, `decay` are `L×d` with `d = heads·d_head`; `a` is `L×heads`
    /// (one in-context rate per head and step). `state0` holds the initial
    /// `heads×d_head×d_head` state (zeros when `None`) and is treated as a
    /// constant. Returns the `L×d` readouts and the final state.
    pub fn wkv7(
        &mut self,
        r: Var,
        k: Var,
        v: Var,
        a: Var,
        decay: Var,
        heads: usize,
        state0: Option<&[f64]>,
    ) -> Result<(Var, Vec<f64>)> {
        let (l, d) = self.value(r).dims2()?;
        for t in [k, v, decay] {
            if self.value(t).shape() != [l, d] {
                return Err(Error::shape("wkv7", &[l, d], self.value(t).shape()));
            }
        }
        if self.value(a).shape() != [l, heads] {
            return Err(Error::shape("wkv7", &[l, heads], self.value(a).shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let block = heads * dh * dh;
        let mut state = match state0 {
            Some(s) if s.len() == block => s.to_vec(),
            Some(s) => return Err(Error::shape("wkv7 state", &[block], &[s.len()])),
            None => vec![0.0; block],
        };
        let keep = self.mode == TapeMode::Recording;
        let mut states = Vec::with_capacity(if keep { (l + 1) * block } else { 0 });
        if keep {
            states.extend_from_slice(&state);
        }
        let (rv, kv, vv, av, dv) = (
            self.value(r).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.value(a).data(),
            self.value(decay).data(),
        );
        let mut out = vec![0.0; l * d];
        let mut scratch = vec![0.0; dh];
        for t in 0..l {
            for h in 0..heads {
                let span = t * d + h * dh..t * d + (h + 1) * dh;
                kernels::wkv7_step(
                    &mut state[h * dh * dh..(h + 1) * dh * dh],
                    &rv[span.clone()],
                    &kv[span.clone()],
                    &vv[span.clone()],
                    av[t * heads + h],
                    &dv[span.clone()],
                    &mut scratch,
                    &mut out[span],
                );
            }
            if keep {
                states.extend_from_slice(&state);
            }
        }
        let y = Tensor::matrix(l, d, out)?;
        let var = self.push(
            y,
            Op::Wkv7 {
                r,
                k,
                v,
                a,
                decay,
                heads,
                states,
            },
        );
        Ok((var, state))
    }

    /// Strided 1-D convolution of an `L×C_in` sequence with zero padding.
    /// `w` is `C_out×C_in×kernel`, `b` is `C_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = crate::modality::conv1d_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            padding,
        )?;
        let kernel = self.value(w).shape()[2];
        Ok(self.push(
            y,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// Causal shift: row `t` of the output is row `t - by` of the input,
    /// zero for `t < by`.
    pub fn shift_rows(&mut self, x: Var, by: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut out = vec![0.0; r * c];
        if by < r {
            out[by * c..].copy_from_slice(&self.value(x).data()[..(r - by) * c]);
        }
        let y = Tensor::matrix(r, c, out)?;
        Ok(self.push(y, Op::ShiftRows { x, by }))
    }

    /// Mean softmax cross-entropy over the selected `(row, target)` pairs.
    pub fn cross_entropy(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        if picks.is_empty() {
            return Err(Error::DegenerateLoss);
        }
        let (rows, vocab) = self.value(logits).dims2()?;
        let mut probs = Vec::with_capacity(picks.len() * vocab);
        let mut total = 0.0;
        for &(row, target) in picks {
            if row >= rows || target >= vocab {
                return Err(Error::Domain {
                    op: "cross_entropy",
                    detail: format!("pick ({row}, {target}) outside {rows}×{vocab}"),
                });
            }
            let z = self.value(logits).row(row);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            total += lse - z[target];
            probs.extend(z.iter().map(|&v| (v - lse).exp()));
        }
        let y = Tensor::scalar(total / picks.len() as f64);
        Ok(self.push(
            y,
            Op::CrossEntropy {
                logits,
                picks: picks.to_vec(),
                probs,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.mode == TapeMode::Frozen {
            return Err(Error::State("backward on a frozen tape".into()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Rank {
                op: "backward",
                expected: 0,
                got: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `∂loss/∂p` into `p.grad` for every trainable parameter
    /// reachable from `loss`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                let p = store.get_mut(*id);
                if p.trainable {
                    for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).shape()[1];
                let mut da = vec![0.0; m * k];
                kernels::matmul_nt(gd, val(*b).data(), &mut da, m, n, k);
                add_into(&mut grads[a.0], &da, &[m, k]);
                let mut db = vec![0.0; k * n];
                kernels::matmul_tn(val(*a).data(), gd, &mut db, m, k, n);
                add_into(&mut grads[b.0], &db, &[k, n]);
            }
            Op::Binary(op, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da: Vec<f64>;
                let db: Vec<f64>;
                // Per-element partials w.r.t. each operand, expanded to the
                // output shape; scalar operands are summed back below.
                let out_n = gd.len();
                let at = |i: usize| if av.is_scalar() { av.data()[0] } else { av.data()[i] };
                let bt = |i: usize| if bv.is_scalar() { bv.data()[0] } else { bv.data()[i] };
                match op {
                    BinaryOp::Add => {
                        da = gd.to_vec();
                        db = gd.to_vec();
                    }
                    BinaryOp::Sub => {
                        da = gd.to_vec();
                        db = gd.iter().map(|x| -x).collect();
                    }
                    BinaryOp::Mul => {
                        da = (0..out_n).map(|i| gd[i] * bt(i)).collect();
                        db = (0..out_n).map(|i| gd[i] * at(i)).collect();
                    }
                }
                let fold = |v: &Tensor, d: Vec<f64>| -> Vec<f64> {
                    if v.is_scalar() && out_n != 1 {
                        vec![d.iter().sum()]
                    } else {
                        d
                    }
                };
                let sa = shape_of(*a);
                let sb = shape_of(*b);
                add_into(&mut grads[a.0], &fold(av, da), &sa);
                add_into(&mut grads[b.0], &fold(bv, db), &sb);
            }
            Op::Unary(op, x) => {
                let xv = val(*x).data();
                let yv = node.value.data();
                let dx: Vec<f64> = (0..gd.len())
                    .map(|i| gd[i] * op.derivative(xv[i], yv[i]))
                    .collect();
                add_into(&mut grads[x.0], &dx, &shape_of(*x));
            }
            Op::Scale(x, s) => {
                let dx: Vec<f64> = gd.iter().map(|v| v * s).collect();
                add_into(&mut grads[x.0], &dx, &shape_of(*x));
            }
            Op::AddRow(x, b) => {
                let (r, c) = val(*x).dims2().unwrap();
                add_into(&mut grads[x.0], gd, &[r, c]);
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += gd[i * c + j];
                    }
                }
                add_into(&mut grads[b.0], &db, &[c]);
            }
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            } => {
                let xs = shape_of(*x);
                let extent = xs[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                accumulate(&mut grads[x.0], &xs, |d| match kind {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let f = if *kind == ReduceOp::Mean {
                            1.0 / extent as f64
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            for e in 0..extent {
                                for i in 0..inner {
                                    d[(o * extent + e) * inner + i] += f * gd[o * inner + i];
                                }
                            }
                        }
                    }
                    ReduceOp::Max => {
                        for (slot, &src) in argmax.as_ref().unwrap().iter().enumerate() {
                            d[src] += gd[slot];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let s = gd[0];
                accumulate(&mut grads[x.0], &shape_of(*x), |d| {
                    d.iter_mut().for_each(|v| *v += s)
                });
            }
            Op::Outer(u, v) => {
                let (uv, vv) = (val(*u).data(), val(*v).data());
                let n = vv.len();
                let du: Vec<f64> = (0..uv.len())
                    .map(|i| (0..n).map(|j| gd[i * n + j] * vv[j]).sum())
                    .collect();
                let dv: Vec<f64> = (0..n)
                    .map(|j| (0..uv.len()).map(|i| gd[i * n + j] * uv[i]).sum())
                    .collect();
                add_into(&mut grads[u.0], &du, &shape_of(*u));
                add_into(&mut grads[v.0], &dv, &shape_of(*v));
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], gd, &shape_of(*x)),
            Op::SliceRows { x, start } => {
                let xs = shape_of(*x);
                let c = xs[1];
                accumulate(&mut grads[x.0], &xs, |d| {
                    for (o, gv) in d[start * c..start * c + gd.len()].iter_mut().zip(gd) {
                        *o += gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).numel();
                    add_into(&mut grads[p.0], &gd[off..off + n], &shape_of(*p));
                    off += n;
                }
            }
            Op::Gather { table, ids } => {
                let ts = shape_of(*table);
                let c = ts[1];
                accumulate(&mut grads[table.0], &ts, |d| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            d[id * c + j] += gd[t * c + j];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                scale,
                offset,
                xhat,
                rstd,
            } => {
                let (r, c) = val(*x).dims2().unwrap();
                let gamma = val(*scale).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let gr = &gd[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        dbeta[j] += gr[j];
                        dgamma[j] += gr[j] * xh[j];
                        dxhat[j] = gr[j] * gamma[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xh[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        dx[i * c + j] = rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                add_into(&mut grads[x.0], &dx, &[r, c]);
                add_into(&mut grads[scale.0], &dgamma, &[c]);
                add_into(&mut grads[offset.0], &dbeta, &[c]);
            }
            Op::NormalizeRows { x, eps, norms } => {
                let (r, c) = val(*x).dims2().unwrap();
                let xs = val(*x).data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let n = norms[i];
                    let xr = &xs[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    if n > *eps {
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let corr = dot / (n * n * n);
                        for j in 0..c {
                            dx[i * c + j] = gr[j] / n - xr[j] * corr;
                        }
                    } else {
                        for j in 0..c {
                            dx[i * c + j] = gr[j] / eps;
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx, &[r, c]);
            }
            Op::Wkv7 {
                r,
                k,
                v,
                a,
                decay,
                heads,
                states,
            } => {
                let (l, d) = val(*r).dims2().unwrap();
                let heads = *heads;
                let dh = d / heads;
                let block = heads * dh * dh;
                let (rv, kv, vv, av, decv) = (
                    val(*r).data(),
                    val(*k).data(),
                    val(*v).data(),
                    val(*a).data(),
                    val(*decay).data(),
                );
                let mut dr = vec![0.0; l * d];
                let mut dk = vec![0.0; l * d];
                let mut dvv = vec![0.0; l * d];
                let mut da = vec![0.0; l * heads];
                let mut ddec = vec![0.0; l * d];
                let mut ds = vec![0.0; block];
                let mut shat = vec![0.0; dh * dh];
                let mut gm = vec![0.0; dh * dh];
                let mut u = vec![0.0; dh];
                let mut vmu = vec![0.0; dh];
                let mut du = vec![0.0; dh];
                for t in (0..l).rev() {
                    for h in 0..heads {
                        let base = t * d + h * dh;
                        let sp = &states[t * block + h * dh * dh..t * block + (h + 1) * dh * dh];
                        let sn = &states
                            [(t + 1) * block + h * dh * dh..(t + 1) * block + (h + 1) * dh * dh];
                        let kk = &kv[base..base + dh];
                        let rr = &rv[base..base + dh];
                        let vvv = &vv[base..base + dh];
                        let dd = &decv[base..base + dh];
                        let at = av[t * heads + h];
                        let go = &gd[base..base + dh];
                        let dsh = &mut ds[h * dh * dh..(h + 1) * dh * dh];
                        // decayed previous state and its key projection
                        u.iter_mut().for_each(|x| *x = 0.0);
                        for i in 0..dh {
                            for j in 0..dh {
                                let s = dd[i] * sp[i * dh + j];
                                shat[i * dh + j] = s;
                                u[j] += kk[i] * s;
                            }
                        }
                        for j in 0..dh {
                            vmu[j] = vvv[j] - u[j];
                        }
                        // readout o = Sᵀ r
                        for i in 0..dh {
                            let mut acc = 0.0;
                            for j in 0..dh {
                                acc += sn[i * dh + j] * go[j];
                                gm[i * dh + j] = dsh[i * dh + j] + rr[i] * go[j];
                            }
                            dr[base + i] += acc;
                        }
                        // S' = Ŝ + a k (v - u)ᵀ
                        let mut da_t = 0.0;
                        du.iter_mut().for_each(|x| *x = 0.0);
                        for i in 0..dh {
                            let mut row_dot = 0.0;
                            for j in 0..dh {
                                let g = gm[i * dh + j];
                                row_dot += g * vmu[j];
                                du[j] += kk[i] * g;
                            }
                            da_t += kk[i] * row_dot;
                            dk[base + i] += at * row_dot;
                        }
                        da[t * heads + h] += da_t;
                        for j in 0..dh {
                            dvv[base + j] += at * du[j];
                            du[j] *= -at;
                        }
                        // u = Ŝᵀ k
                        for i in 0..dh {
                            let mut acc = 0.0;
                            for j in 0..dh {
                                acc += shat[i * dh + j] * du[j];
                            }
                            dk[base + i] += acc;
                        }
                        // Ŝ = diag(decay) S_prev
                        for i in 0..dh {
                            let mut acc = 0.0;
                            for j in 0..dh {
                                let dshat = gm[i * dh + j] + kk[i] * du[j];
                                acc += dshat * sp[i * dh + j];
                                dsh[i * dh + j] = dd[i] * dshat;
                            }
                            ddec[base + i] += acc;
                        }
                    }
                }
                add_into(&mut grads[r.0], &dr, &[l, d]);
                add_into(&mut grads[k.0], &dk, &[l, d]);
                add_into(&mut grads[v.0], &dvv, &[l, d]);
                add_into(&mut grads[a.0], &da, &[l, heads]);
                add_into(&mut grads[decay.0], &ddec, &[l, d]);
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                padding,
            } => {
                let (l, cin) = val(*x).dims2().unwrap();
                let (lo, cout) = node.value.dims2().unwrap();
                let xs = val(*x).data();
                let ws = val(*w).data();
                let mut dx = vec![0.0; l * cin];
                let mut dw = vec![0.0; cout * cin * kernel];
                let mut db = vec![0.0; cout];
                for t in 0..lo {
                    for j in 0..*kernel {
                        let pos = (stride * t + j) as isize - *padding as isize;
                        if pos < 0 || pos as usize >= l {
                            continue;
                        }
                        let pos = pos as usize;
                        for c in 0..cout {
                            let gv = gd[t * cout + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for i in 0..cin {
                                let widx = (c * cin + i) * kernel + j;
                                dw[widx] += gv * xs[pos * cin + i];
                                dx[pos * cin + i] += gv * ws[widx];
                            }
                        }
                    }
                    for c in 0..cout {
                        db[c] += gd[t * cout + c];
                    }
                }
                add_into(&mut grads[x.0], &dx, &[l, cin]);
                add_into(&mut grads[w.0], &dw, &[cout, cin, *kernel]);
                add_into(&mut grads[b.0], &db, &[cout]);
            }
            Op::ShiftRows { x, by } => {
                let (r, c) = val(*x).dims2().unwrap();
                accumulate(&mut grads[x.0], &[r, c], |d| {
                    if *by < r {
                        for (o, gv) in d[..(r - by) * c].iter_mut().zip(&gd[by * c..]) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                picks,
                probs,
            } => {
                let ls = shape_of(*logits);
                let vocab = ls[1];
                let f = gd[0] / picks.len() as f64;
                accumulate(&mut grads[logits.0], &ls, |d| {
                    for (n, &(row, target)) in picks.iter().enumerate() {
                        for j in 0..vocab {
                            let p = probs[n * vocab + j];
                            let onehot = if j == target { 1.0 } else { 0.0 };
                            d[row * vocab + j] += f * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;
    use crate::rng::RngStream;

    fn rand_t(rng: &mut RngStream, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap()
    }

    #[test]
    fn linear_and_quadratic_grads() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::vector(vec![0.5, -1.5])).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.sum_all(p);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[1.0, 1.0]);
        // accumulation, not overwrite
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_and_frozen_tape_are_rejected() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        assert!(matches!(tape.backward(p, &mut store), Err(Error::Rank { .. })));
        let mut frozen = Tape::frozen();
        let p = frozen.param(&store, id);
        let s = frozen.sum_all(p);
        assert!(matches!(frozen.backward(s, &mut store), Err(Error::State(_))));
    }

    #[test]
    fn unreachable_and_frozen_params_untouched() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::vector(vec![1.0])).unwrap();
        let b = store.insert("b", Tensor::vector(vec![1.0])).unwrap();
        let c = store.insert("c", Tensor::vector(vec![3.0])).unwrap();
        store.get_mut(c).trainable = false;
        let mut tape = Tape::new();
        let va = tape.param(&store, a);
        let _vb = tape.param(&store, b);
        let vc = tape.param(&store, c);
        let prod = tape.mul(va, vc).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(a).grad.data(), &[3.0]);
        assert_eq!(store.get(b).grad.data(), &[0.0]);
        assert_eq!(store.get(c).grad.data(), &[0.0]);
    }

    #[test]
    fn max_routes_gradient_to_lowest_argmax() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![2.0, 7.0, 7.0, 1.0]));
        let m = tape.reduce(ReduceOp::Max, x, 0).unwrap();
        let g = tape.gradients(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn elementwise_and_reduction_grads_match_finite_differences() {
        let mut rng = RngStream::new(3);
        let x0 = rand_t(&mut rng, &[3, 4]);
        let y0 = rand_t(&mut rng, &[3, 4]).map(|v| v.abs() + 0.5);
        let report = check_inputs(&[x0, y0], 1e-5, 1e-6, |tape, v| {
            let s = tape.sigmoid(v[0]);
            let e = tape.unary(UnaryOp::Exp, v[0])?;
            let n = tape.neg_exp_exp(v[0]);
            let lg = tape.unary(UnaryOp::Log, v[1])?;
            let th = tape.tanh(v[1]);
            let m1 = tape.mul(s, lg)?;
            let m2 = tape.sub(e, n)?;
            let m3 = tape.add(m1, m2)?;
            let m4 = tape.mul(m3, th)?;
            let half = tape.constant(Tensor::scalar(0.5));
            let m5 = tape.mul(m4, half)?;
            let mx = tape.reduce(ReduceOp::Max, m5, 1)?;
            let mn = tape.reduce(ReduceOp::Mean, m5, 0)?;
            let a = tape.sum_all(mx);
            let b = tape.sum_all(mn);
            tape.add(a, b)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn structural_ops_grads_match_finite_differences() {
        let mut rng = RngStream::new(4);
        let a = rand_t(&mut rng, &[4, 3]);
        let b = rand_t(&mut rng, &[3, 5]);
        let bias = rand_t(&mut rng, &[5]);
        let u = rand_t(&mut rng, &[4]);
        let report = check_inputs(&[a, b, bias, u], 1e-5, 1e-6, |tape, v| {
            let p = tape.matmul(v[0], v[1])?;
            let p = tape.add_row(p, v[2])?;
            let top = tape.slice_rows(p, 0, 2)?;
            let bot = tape.slice_rows(p, 2, 4)?;
            let cat = tape.concat_rows(&[bot, top])?;
            let sh = tape.shift_rows(cat, 1)?;
            let flat = tape.reshape(sh, &[20])?;
            let g = tape.gather_rows(v[1], &[2, 0, 2])?;
            let o = tape.outer(v[3], v[3])?;
            let so = tape.sum_all(o);
            let sg = tape.mul(g, g)?;
            let sg = tape.sum_all(sg);
            let sf = tape.mul(flat, flat)?;
            let sf = tape.sum_all(sf);
            let t = tape.add(so, sg)?;
            tape.add(t, sf)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn fused_ops_grads_match_finite_differences() {
        let mut rng = RngStream::new(5);
        let x = rand_t(&mut rng, &[3, 6]);
        let g = rand_t(&mut rng, &[6]);
        let b = rand_t(&mut rng, &[6]);
        let report = check_inputs(&[x, g, b], 1e-5, 1e-6, |tape, v| {
            let ln = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let nr = tape.normalize_rows(ln, 1e-8)?;
            let w = tape.constant(Tensor::vector((0..6).map(|i| i as f64 - 2.0).collect()));
            let wr = tape.reshape(w, &[6, 1])?;
            let y = tape.matmul(nr, wr)?;
            let ce = tape.cross_entropy(ln, &[(0, 1), (2, 5), (2, 0)])?;
            let s = tape.sum_all(y);
            tape.add(s, ce)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn conv1d_grads_match_finite_differences() {
        let mut rng = RngStream::new(6);
        let x = rand_t(&mut rng, &[9, 2]);
        let w = rand_t(&mut rng, &[3, 2, 3]);
        let b = rand_t(&mut rng, &[3]);
        let report = check_inputs(&[x, w, b], 1e-5, 1e-6, |tape, v| {
            let y = tape.conv1d(v[0], v[1], v[2], 2, 1)?;
            let y2 = tape.mul(y, y)?;
            Ok(tape.sum_all(y2))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn wkv7_grads_match_finite_differences() {
        let mut rng = RngStream::new(7);
        let (l, heads, dh) = (5, 2, 3);
        let d = heads * dh;
        let r = rand_t(&mut rng, &[l, d]);
        let k = rand_t(&mut rng, &[l, d]);
        let v = rand_t(&mut rng, &[l, d]);
        let a = rand_t(&mut rng, &[l, heads]);
        let w = rand_t(&mut rng, &[l, d]);
        let s0: Vec<f64> = (0..heads * dh * dh).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let report = check_inputs(&[r, k, v, a, w], 1e-5, 1e-6, |tape, x| {
            let kr = tape.reshape(x[1], &[l * heads, dh])?;
            let kn = tape.normalize_rows(kr, 1e-8)?;
            let kn = tape.reshape(kn, &[l, d])?;
            let a = tape.sigmoid(x[3]);
            let dec = tape.neg_exp_exp(x[4]);
            let (o, _) = tape.wkv7(x[0], kn, x[2], a, dec, heads, Some(&s0))?;
            let o2 = tape.mul(o, o)?;
            Ok(tape.sum_all(o2))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 2]));
        let b = tape.matmul(a, a).unwrap();
        let c = tape.add(a, b).unwrap();
        tape.sum_all(c);
        assert!(tape.check_topological());
    }
}
