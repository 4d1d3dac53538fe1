//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Nodes whose inputs do not require gradients are stored as
//! constants, so an inference pass keeps no backward state. [`Tape::backward`]
//! walks the nodes in exact reverse order of creation.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    TransposeLastTwo(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SliceLast {
        src: Var,
        start: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    RowNormalize(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    MeanAll(Var),
    SumAll(Var),
    Square(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Option<Op>,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    relu_signs: Vec<bool>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major `m x k` and `k x n` operands.
/// A transposed operand is read from storage of the transposed shape.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn split_matrix_dims(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.len();
    let rows = shape[n - 2];
    let cols = shape[n - 1];
    (shape[..n - 2].iter().product(), rows, cols)
}

fn transpose_last_two(t: &Tensor) -> Tensor {
    let (batch, r, c) = split_matrix_dims(t.shape());
    let mut out = vec![0.0; t.numel()];
    let src = t.data();
    for b in 0..batch {
        let s = &src[b * r * c..(b + 1) * r * c];
        let d = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape.swap(n - 1, n - 2);
    Tensor::new(shape, out).expect("same element count")
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are accumulated for it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Sign of every ReLU input seen so far, in execution order. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> &[bool] {
        &self.relu_signs
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Option<Op>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: if requires_grad { op } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Matrix product over the last two axes.
    ///
    /// Leading axes broadcast when one side is a plain matrix; otherwise they
    /// must match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() < 2 || tb.ndim() < 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let (ba, m, k) = split_matrix_dims(ta.shape());
        let (bb, k2, n) = split_matrix_dims(tb.shape());
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out_shape: Vec<usize>;
        let mut out;
        if tb.ndim() == 2 {
            out_shape = [&ta.shape()[..ta.ndim() - 2], &[m, n]].concat();
            out = vec![0.0; ba * m * n];
            gemm(
                ba * m,
                k,
                n,
                ta.data(),
                false,
                tb.data(),
                false,
                0.0,
                &mut out,
            );
        } else if ta.ndim() == 2 {
            out_shape = [&tb.shape()[..tb.ndim() - 2], &[m, n]].concat();
            out = vec![0.0; bb * m * n];
            for i in 0..bb {
                gemm(
                    m,
                    k,
                    n,
                    ta.data(),
                    false,
                    &tb.data()[i * k * n..],
                    false,
                    0.0,
                    &mut out[i * m * n..],
                );
            }
        } else {
            if ta.shape()[..ta.ndim() - 2] != tb.shape()[..tb.ndim() - 2] {
                return Err(shape_err("matmul", ta, tb));
            }
            out_shape = [&ta.shape()[..ta.ndim() - 2], &[m, n]].concat();
            out = vec![0.0; ba * m * n];
            for i in 0..ba {
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[i * m * k..],
                    false,
                    &tb.data()[i * k * n..],
                    false,
                    0.0,
                    &mut out[i * m * n..],
                );
            }
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, rg, Some(Op::MatMul(a, b))))
    }

    /// Elementwise sum. `b` may also be a trailing-axes suffix of `a`
    /// (e.g. a bias vector), in which case it is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (big, small) = if ta.shape().ends_with(tb.shape()) {
            (ta, tb)
        } else if tb.shape().ends_with(ta.shape()) {
            (tb, ta)
        } else {
            return Err(shape_err("add", ta, tb));
        };
        let chunk = small.numel();
        let mut out = big.data().to_vec();
        for block in out.chunks_mut(chunk) {
            block
                .iter_mut()
                .zip(small.data())
                .for_each(|(o, s)| *o += s);
        }
        let value = Tensor::new(big.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Some(Op::Add(a, b))))
    }

    /// `a - b` with the same broadcasting as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Some(Op::Scale(a, c)))
    }

    pub fn transpose_last_two(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() < 2 {
            return Err(shape_err("transpose_last_two", t, t));
        }
        let value = transpose_last_two(t);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Some(Op::TransposeLastTwo(a))))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Some(Op::Reshape(a))))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.ndim() == 0 || t.shape()[..t.ndim() - 1] != lead[..] {
                return Err(shape_err("concat", self.value(*first), t));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, rg, Some(Op::Concat(parts.to_vec()))))
    }

    /// Splits the last axis into consecutive pieces of the given widths.
    pub fn split(&mut self, a: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let t = self.value(a);
        let d = t.last_dim();
        if t.ndim() == 0 || widths.iter().sum::<usize>() != d {
            return Err(Error::Shape {
                op: "split",
                lhs: t.shape().to_vec(),
                rhs: widths.to_vec(),
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_last(a, start, w));
            start += w;
        }
        Ok(out)
    }

    fn slice_last(&mut self, a: Var, start: usize, width: usize) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let rows = t.numel() / d;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * d + start..r * d + start + width]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(shape, data).expect("consistent slice");
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Some(Op::SliceLast { src: a, start }))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Some(op))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let signs = self.nodes[a.0].value.data().iter().map(|&v| v > 0.0);
        self.relu_signs.extend(signs);
        self.map(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |v| v * v, Op::Square(a))
    }

    pub fn softmax_last_axis(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Some(Op::Softmax(a)))
    }

    /// Divides every last-axis row by its sum. Inputs must be positive.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Some(Op::RowNormalize(a)))
    }

    /// Normalizes each last-axis row to zero mean and unit variance (with
    /// `eps` added to the variance), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Some(Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            }),
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    /// Returns `a` itself in eval mode or when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Some(Op::Dropout { x: a, mask })))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Some(Op::SumAll(a)))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Some(Op::MeanAll(a)))
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires gradients.
    /// Calling it again without [`Tape::zero_grads`] adds to the stored values.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                self.backprop(op, &node.value, g, &mut grads);
            } else if node.requires_grad {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ba, m, k) = split_matrix_dims(ta.shape());
                let (bb, _, n) = split_matrix_dims(tb.shape());
                if tb.ndim() == 2 {
                    if self.rg(*a) {
                        let mut ga = vec![0.0; ta.numel()];
                        gemm(ba * m, n, k, &g, false, tb.data(), true, 0.0, &mut ga);
                        accumulate(grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![0.0; tb.numel()];
                        gemm(k, ba * m, n, ta.data(), true, &g, false, 0.0, &mut gb);
                        accumulate(grads, *b, gb);
                    }
                } else {
                    let batch = bb;
                    let a_shared = ta.ndim() == 2;
                    if self.rg(*a) {
                        let mut ga = vec![0.0; ta.numel()];
                        for i in 0..batch {
                            let (dst, beta) = if a_shared {
                                (&mut ga[..], if i == 0 { 0.0 } else { 1.0 })
                            } else {
                                (&mut ga[i * m * k..], 0.0)
                            };
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                false,
                                &tb.data()[i * k * n..],
                                true,
                                beta,
                                dst,
                            );
                        }
                        accumulate(grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![0.0; tb.numel()];
                        for i in 0..batch {
                            let a_i = if a_shared {
                                ta.data()
                            } else {
                                &ta.data()[i * m * k..]
                            };
                            gemm(
                                k,
                                m,
                                n,
                                a_i,
                                true,
                                &g[i * m * n..],
                                false,
                                0.0,
                                &mut gb[i * k * n..],
                            );
                        }
                        accumulate(grads, *b, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if !self.rg(v) {
                        continue;
                    }
                    let n = self.value(v).numel();
                    if n == g.len() {
                        accumulate(grads, v, g.clone());
                    } else {
                        let mut acc = vec![0.0; n];
                        for block in g.chunks(n) {
                            acc.iter_mut().zip(block).for_each(|(s, x)| *s += x);
                        }
                        accumulate(grads, v, acc);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.iter().map(|x| x * c).collect());
                }
            }
            Op::TransposeLastTwo(a) => {
                if self.rg(*a) {
                    let gt = Tensor::new(out.shape().to_vec(), g).expect("grad shape");
                    accumulate(grads, *a, transpose_last_two(&gt).into_data());
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Concat(parts) => {
                let total = out.last_dim();
                let rows = out.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceLast { src, start } => {
                if self.rg(*src) {
                    let t = self.value(*src);
                    let d = t.last_dim();
                    let w = out.last_dim();
                    let mut gs = vec![0.0; t.numel()];
                    for (r, row) in g.chunks(w).enumerate() {
                        gs[r * d + start..r * d + start + w].copy_from_slice(row);
                    }
                    accumulate(grads, *src, gs);
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let x = self.value(*a).data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(grads, *a, ga);
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let ga = g
                        .iter()
                        .zip(out.data())
                        .map(|(gi, y)| gi * y * (1.0 - y))
                        .collect();
                    accumulate(grads, *a, ga);
                }
            }
            Op::Square(a) => {
                if self.rg(*a) {
                    let x = self.value(*a).data();
                    accumulate(
                        grads,
                        *a,
                        g.iter().zip(x).map(|(gi, xi)| 2.0 * xi * gi).collect(),
                    );
                }
            }
            Op::Softmax(a) => {
                if self.rg(*a) {
                    let d = out.last_dim();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), dst) in
                        g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            dst[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::RowNormalize(a) => {
                if self.rg(*a) {
                    let d = out.last_dim();
                    let x = self.value(*a).data();
                    let mut ga = vec![0.0; g.len()];
                    for r in 0..g.len() / d {
                        let span = r * d..(r + 1) * d;
                        let sum: f64 = x[span.clone()].iter().sum();
                        let dot: f64 = g[span.clone()]
                            .iter()
                            .zip(&out.data()[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for c in span {
                            ga[c] = (g[c] - dot) / sum;
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g[span.start + c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[span.start + c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for (c, &w) in gv.iter().enumerate() {
                            let i = span.start + c;
                            gx[i] = is * (g[i] * w - mean_dh - xhat[i] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.rg(*gain) {
                    let mut gg = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                    accumulate(grads, *gain, gg);
                }
                if self.rg(*bias) {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(s, x)| *s += x);
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.iter().zip(mask).map(|(a, b)| a * b).collect());
                }
            }
            Op::SumAll(a) => {
                if self.rg(*a) {
                    accumulate(grads, *a, vec![g[0]; self.value(*a).numel()]);
                }
            }
            Op::MeanAll(a) => {
                if self.rg(*a) {
                    let n = self.value(*a).numel();
                    accumulate(grads, *a, vec![g[0] / n as f64; n]);
                }
            }
        }
    }
}
