//! Reverse-mode automatic differentiation over a linear recording.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for its backward rule. Nodes are appended in execution order, so the
//! recording is topologically sorted by construction and the backward pass is
//! a single reverse sweep.

use std::collections::HashMap;

use super::kernels::{col2im, gemm, im2col, ConvGeometry};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv3d { x: Var, kernel: Var, geom: ConvGeometry },
    ConvTranspose3d { x: Var, kernel: Var, geom: ConvGeometry },
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    RepeatRows { x: Var, times: usize },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Mse(Var, Var),
    StraightThrough { x: Var, local_grad: Vec<f64> },
    GateRows { x: Var, scores: Var, gate: Vec<f64>, score_coef: Vec<f64> },
    FrameDistance { feat: Var },
    CrossEntropy { logits: Var, residual: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A forward recording that can be differentiated exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
    frozen: bool,
    multiplies: u64,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a recorded value; zeros if nothing flowed to it.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }

    /// Gradient for a parameter; `None` if the parameter was never used.
    pub fn param(&self, id: ParamId) -> Option<Vec<f64>> {
        self.params.get(&id).map(|v| self.wrt(*v))
    }

    /// One gradient per parameter of `store`, zero-filled for unused ones.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .iter()
            .map(|(id, _, t)| self.param(id).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    /// Writes every parameter gradient into the `grad` field of `store`.
    pub fn write_into(&self, store: &mut ParamStore) {
        let grads = self.for_store(store);
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            store.get_mut(id).grad = Some(g);
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn as_matrix(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{op}: expected a matrix, got {s:?}"))),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters are recorded as constants (inference).
    pub fn frozen() -> Self {
        Tape { frozen: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiplications performed by the forward kernels recorded so far.
    pub fn multiplies(&self) -> u64 {
        self.multiplies
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records parameter `id` of `store` (once per tape).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let mut value = store.get(id).clone();
        value.grad = None;
        let rg = !self.frozen;
        let v = self.push(value, Op::Leaf, rg);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.multiplies += data.len() as u64;
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        self.multiplies += data.len() as u64;
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `x + b` with `b` (length `d`) broadcast over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::shape("add_bias on a scalar"))?;
        if self.value(b).numel() != d {
            return Err(Error::shape(format!("add_bias: bias of {} for last axis {d}", self.value(b).numel())));
        }
        let bias = self.data(b);
        let data = self.data(x).chunks(d).flat_map(|row| row.iter().zip(bias).map(|(v, c)| v + c)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    /// `x + b` with `b[c]` added to every element of channel `c` (`x` is `C x ...`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).first().ok_or_else(|| Error::shape("channel bias on a scalar"))?;
        if self.value(b).numel() != c {
            return Err(Error::shape(format!("channel bias of {} for {c} channels", self.value(b).numel())));
        }
        let block = self.value(x).numel() / c.max(1);
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks(block.max(1))
            .zip(bias)
            .flat_map(|(ch, bc)| ch.iter().map(move |v| v + bc))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddChannelBias(x, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a), "matmul")?;
        let (k2, n) = as_matrix(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: inner dimensions {k} vs {k2}")));
        }
        self.value(a).check_finite("matmul lhs")?;
        self.value(b).check_finite("matmul rhs")?;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        self.multiplies += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.value(a), "transpose")?;
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu(x).0, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax over the last axis, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.value(x).check_finite("softmax input")?;
        let n = *self.shape(x).last().ok_or_else(|| Error::shape("softmax on a scalar"))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let d = *self.shape(x).last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(format!("layer_norm: affine params must have length {d}")));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = self.value(x).numel() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Valid strided cross-correlation: `C x T x H x W` with `O x C x kt x kh x kw`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, stride: [usize; 3]) -> Result<Var> {
        let (c, input) = match self.shape(x) {
            [c, t, h, w] => (*c, [*t, *h, *w]),
            s => return Err(Error::shape(format!("conv3d input must be C x T x H x W, got {s:?}"))),
        };
        let (o, kc, k) = match self.shape(kernel) {
            [o, kc, kt, kh, kw] => (*o, *kc, [*kt, *kh, *kw]),
            s => return Err(Error::shape(format!("conv3d kernel must be O x C x kt x kh x kw, got {s:?}"))),
        };
        if kc != c {
            return Err(Error::shape(format!("conv3d: kernel expects {kc} channels, input has {c}")));
        }
        let geom = ConvGeometry::new(c, input, k, stride)?;
        let cols = im2col(self.data(x), &geom);
        let p = geom.positions();
        let ck = geom.patch_len();
        let mut out = vec![0.0; o * p];
        gemm(o, ck, p, self.data(kernel), false, &cols, true, &mut out, false);
        self.multiplies += (o * p * ck) as u64;
        let [ot, oh, ow] = geom.output;
        let value = Tensor::new(vec![o, ot, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(value, Op::Conv3d { x, kernel, geom }, rg))
    }

    /// Transposed convolution (adjoint of [`conv3d`](Self::conv3d) in its input):
    /// `Ci x T x H x W` with kernel `Ci x Co x kt x kh x kw`.
    pub fn conv_transpose3d(&mut self, x: Var, kernel: Var, stride: [usize; 3]) -> Result<Var> {
        let (ci, input) = match self.shape(x) {
            [c, t, h, w] => (*c, [*t, *h, *w]),
            s => return Err(Error::shape(format!("conv_transpose3d input must be C x T x H x W, got {s:?}"))),
        };
        let (kci, co, k) = match self.shape(kernel) {
            [a, b, kt, kh, kw] => (*a, *b, [*kt, *kh, *kw]),
            s => return Err(Error::shape(format!("conv_transpose3d kernel must be rank 5, got {s:?}"))),
        };
        if kci != ci {
            return Err(Error::shape(format!("conv_transpose3d: kernel expects {kci} channels, input has {ci}")));
        }
        let geom = ConvGeometry::transposed(co, input, k, stride)?;
        let p = geom.positions();
        let ck = geom.patch_len();
        let mut cols = vec![0.0; p * ck];
        gemm(p, ci, ck, self.data(x), true, self.data(kernel), false, &mut cols, false);
        self.multiplies += (p * ci * ck) as u64;
        let mut out = vec![0.0; geom.input_len()];
        col2im(&cols, &geom, &mut out);
        let [t, h, w] = geom.input;
        let value = Tensor::new(vec![co, t, h, w], out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(value, Op::ConvTranspose3d { x, kernel, geom }, rg))
    }

    /// Selects rows of a matrix, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = as_matrix(self.value(x), "gather_rows")?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape(format!("gather_rows: row {bad} out of {r}")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(v) => as_matrix(self.value(*v), "concat_rows")?.1,
            None => return Err(Error::invalid("concat_rows of nothing")),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = as_matrix(self.value(p), "concat_rows")?;
            if c != cols {
                return Err(Error::shape(format!("concat_rows: {c} columns vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(v) => as_matrix(self.value(*v), "concat_cols")?.0,
            None => return Err(Error::invalid("concat_cols of nothing")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = as_matrix(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for i in 0..rows {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = as_matrix(self.value(x), "slice_cols")?;
        if start + len > c {
            return Err(Error::shape(format!("slice_cols: {start}+{len} exceeds {c} columns")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Stacks a single row (`d` or `1 x d`) `times` times into `times x d`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let d = self.value(x).numel();
        let row = self.data(x).to_vec();
        let mut out = Vec::with_capacity(times * d);
        for _ in 0..times {
            out.extend_from_slice(&row);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![times, d], out).expect("shape"), Op::RepeatRows { x, times }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Column means of an `n x d` matrix, as `1 x d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = as_matrix(self.value(x), "mean_rows")?;
        if r == 0 {
            return Err(Error::shape("mean_rows of an empty matrix"));
        }
        let mut out = vec![0.0; c];
        for row in self.data(x).chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x), rg))
    }

    /// Mean squared difference of two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mse")?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::shape("mse of empty tensors"));
        }
        let s: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mse(a, b), rg))
    }

    /// Emits precomputed `values` in the forward pass; the backward pass
    /// multiplies the incoming gradient by `local_grad` elementwise.
    pub fn straight_through(&mut self, x: Var, values: Vec<f64>, local_grad: Vec<f64>) -> Result<Var> {
        let n = self.value(x).numel();
        if values.len() != n || local_grad.len() != n {
            return Err(Error::shape("straight_through: values/local_grad length differs from input"));
        }
        let value = Tensor::new(self.shape(x).to_vec(), values)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::StraightThrough { x, local_grad }, rg))
    }

    /// Row gate: `out[i] = gate[i] * x[i]` for `x` of shape `n x d`.
    ///
    /// Backward: `dx[i] = gate[i] * g[i]`, and `dscores[i] = score_coef[i] *
    /// <g[i], x[i]>`, i.e. the scores are treated as if they controlled the
    /// gate through a smooth relaxation with slope `score_coef`.
    pub fn gate_rows(&mut self, x: Var, scores: Var, gate: Vec<f64>, score_coef: Vec<f64>) -> Result<Var> {
        let (r, c) = as_matrix(self.value(x), "gate_rows")?;
        if self.value(scores).numel() != r || gate.len() != r || score_coef.len() != r {
            return Err(Error::shape(format!("gate_rows: expected {r} scores/gates")));
        }
        let mut out = self.data(x).to_vec();
        for (row, g) in out.chunks_mut(c.max(1)).zip(&gate) {
            row.iter_mut().for_each(|v| *v *= g);
        }
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(x) || self.rg(scores);
        Ok(self.push(value, Op::GateRows { x, scores, gate, score_coef }, rg))
    }

    /// Euclidean distance between spatially aligned feature vectors of
    /// adjacent frames: `C x T x H x W` to `T x H x W`, frame 0 set to 0.
    pub fn frame_distance(&mut self, feat: Var) -> Result<Var> {
        let (c, t, h, w) = match self.shape(feat) {
            [c, t, h, w] => (*c, *t, *h, *w),
            s => return Err(Error::shape(format!("frame_distance expects C x T x H x W, got {s:?}"))),
        };
        let plane = h * w;
        let vol = t * plane;
        let f = self.data(feat);
        let mut out = vec![0.0; vol];
        for ti in 1..t {
            for p in 0..plane {
                let mut s = 0.0;
                for ch in 0..c {
                    let d = f[ch * vol + ti * plane + p] - f[ch * vol + (ti - 1) * plane + p];
                    s += d * d;
                }
                out[ti * plane + p] = s.sqrt();
            }
        }
        let rg = self.rg(feat);
        Ok(self.push(Tensor::new(vec![t, h, w], out)?, Op::FrameDistance { feat }, rg))
    }

    /// Mean cross-entropy of `n x k` logits against labels with label smoothing.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let (n, k) = as_matrix(self.value(logits), "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(format!("cross_entropy: {} labels for {n} rows", labels.len())));
        }
        if k < 2 {
            return Err(Error::invalid("cross_entropy needs at least 2 classes"));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid("label smoothing must lie in [0, 1)"));
        }
        self.value(logits).check_finite("logits")?;
        let off = smoothing / k as f64;
        let mut loss = 0.0;
        let mut residual = Vec::with_capacity(n * k);
        for (row, &label) in self.data(logits).chunks(k).zip(labels) {
            if label >= k {
                return Err(Error::invalid(format!("label {label} out of {k} classes")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, v) in row.iter().enumerate() {
                let q = if j == label { 1.0 - smoothing + off } else { off };
                let logp = v - lse;
                loss -= q * logp;
                residual.push((logp.exp() - q) / n as f64);
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss / n as f64), Op::CrossEntropy { logits, residual }, rg))
    }

    /// Reverse sweep from a scalar `loss`. A tape may be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            lens: self.nodes.iter().map(|n| n.value.numel()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(slot);
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(av) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                let d = nodes[b.0].value.numel();
                acc(*b, &mut |s| {
                    for row in g.chunks(d) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::AddChannelBias(x, b) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                let c = nodes[b.0].value.numel();
                let block = g.len() / c.max(1);
                acc(*b, &mut |s| {
                    for (s, ch) in s.iter_mut().zip(g.chunks(block.max(1))) {
                        *s += ch.iter().sum::<f64>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| gemm(m, n, k, g, false, bv, true, s, true));
                acc(*b, &mut |s| gemm(k, m, n, av, true, g, false, s, true));
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        *s += g * gelu(*x).1;
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                    *s += g * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out) {
                    *s += g * (1.0 - y * y);
                }
            }),
            Op::Softmax(x) => {
                let n = *nodes[x.0].value.shape().last().unwrap_or(&1);
                acc(*x, &mut |s| {
                    for ((s, g), y) in s.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            s[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.numel();
                let gm = val(*gamma);
                acc(*x, &mut |s| {
                    for (r, ((s, g), h)) in s.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = g[j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            s[j] += rstd[r] * (g[j] * gm[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (g, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += g[j] * h[j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for g in g.chunks(d) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Conv3d { x, kernel, geom } => {
                let o = nodes[kernel.0].value.shape()[0];
                let (p, ck) = (geom.positions(), geom.patch_len());
                let kv = val(*kernel);
                let xv = val(*x);
                if nodes[kernel.0].requires_grad {
                    let cols = im2col(xv, geom);
                    acc(*kernel, &mut |s| gemm(o, p, ck, g, false, &cols, false, s, true));
                }
                acc(*x, &mut |s| {
                    let mut dcols = vec![0.0; p * ck];
                    gemm(p, o, ck, g, true, kv, false, &mut dcols, false);
                    col2im(&dcols, geom, s);
                });
            }
            Op::ConvTranspose3d { x, kernel, geom } => {
                let ci = nodes[x.0].value.shape()[0];
                let (p, ck) = (geom.positions(), geom.patch_len());
                let dcols = im2col(g, geom);
                let (kv, xv) = (val(*kernel), val(*x));
                acc(*x, &mut |s| gemm(ci, ck, p, kv, false, &dcols, true, s, true));
                acc(*kernel, &mut |s| gemm(ci, p, ck, xv, false, &dcols, false, s, true));
            }
            Op::GatherRows { x, rows } => {
                let c = nodes[x.0].value.shape()[1];
                acc(*x, &mut |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            s[r * c + j] += g[k * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    let src = &g[offset..offset + n];
                    acc(*p, &mut |s| s.iter_mut().zip(src).for_each(|(s, g)| *s += g));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let shape = nodes[i].value.shape();
                let (rows, total) = (shape[0], shape[1]);
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    acc(*p, &mut |s| {
                        for r in 0..rows {
                            for j in 0..w {
                                s[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.shape()[1];
                let (r, len) = (nodes[i].value.shape()[0], nodes[i].value.shape()[1]);
                acc(*x, &mut |s| {
                    for row in 0..r {
                        for j in 0..len {
                            s[row * c + start + j] += g[row * len + j];
                        }
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let d = nodes[x.0].value.numel();
                acc(*x, &mut |s| {
                    for row in g.chunks(d).take(*times) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel().max(1) as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::MeanRows(x) => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                acc(*x, &mut |s| {
                    for row in s.chunks_mut(c) {
                        for j in 0..c {
                            row[j] += g[j] / r as f64;
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scale = 2.0 * g[0] / av.len() as f64;
                acc(*a, &mut |s| {
                    for ((s, x), y) in s.iter_mut().zip(av).zip(bv) {
                        *s += scale * (x - y);
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, x), y) in s.iter_mut().zip(av).zip(bv) {
                        *s -= scale * (x - y);
                    }
                });
            }
            Op::StraightThrough { x, local_grad } => acc(*x, &mut |s| {
                for ((s, g), l) in s.iter_mut().zip(g).zip(local_grad) {
                    *s += g * l;
                }
            }),
            Op::GateRows { x, scores, gate, score_coef } => {
                let c = nodes[x.0].value.shape()[1].max(1);
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((s, g), gate) in s.chunks_mut(c).zip(g.chunks(c)).zip(gate) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += gate * g);
                    }
                });
                acc(*scores, &mut |s| {
                    for (((s, g), x), coef) in s.iter_mut().zip(g.chunks(c)).zip(xv.chunks(c)).zip(score_coef) {
                        if *coef != 0.0 {
                            *s += coef * g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
            }
            Op::FrameDistance { feat } => {
                let sh = nodes[feat.0].value.shape();
                let (c, t, plane) = (sh[0], sh[1], sh[2] * sh[3]);
                let vol = t * plane;
                let f = val(*feat);
                acc(*feat, &mut |s| {
                    for ti in 1..t {
                        for p in 0..plane {
                            let norm = out[ti * plane + p];
                            if norm == 0.0 {
                                continue;
                            }
                            let scale = g[ti * plane + p] / norm;
                            for ch in 0..c {
                                let cur = ch * vol + ti * plane + p;
                                let prev = ch * vol + (ti - 1) * plane + p;
                                let d = scale * (f[cur] - f[prev]);
                                s[cur] += d;
                                s[prev] -= d;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, residual } => acc(*logits, &mut |s| {
                for (s, r) in s.iter_mut().zip(residual) {
                    *s += g[0] * r;
                }
            }),
        }
        Ok(())
    }
}
