//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape once in reverse and returns the
//! gradient of a scalar root with respect to every node that requires one.
//! Nodes are append-only, so a graph is a single evaluation: build a fresh
//! one per forward pass.

mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used for fault injection and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    AvgPool2d,
    GlobalAvgPool,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sigmoid,
    Tanh,
    Relu,
    Concat,
    Reshape,
    Slice,
    Permute,
    L2Normalize,
    LogSoftmax,
    Softmax,
    PairwiseDistance,
    Gather,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 25] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::AvgPool2d,
        OpKind::GlobalAvgPool,
        OpKind::MatMul,
        OpKind::AddBias,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::Slice,
        OpKind::Permute,
        OpKind::L2Normalize,
        OpKind::LogSoftmax,
        OpKind::Softmax,
        OpKind::PairwiseDistance,
        OpKind::Gather,
        OpKind::Sum,
        OpKind::Mean,
    ];

    /// Inverse of [`OpKind::name`].
    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Slice => "slice",
            OpKind::Permute => "permute",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Softmax => "softmax",
            OpKind::PairwiseDistance => "pairwise_distance",
            OpKind::Gather => "gather",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    AvgPool2d { input: Var, dims: (usize, usize, usize, usize), kernel: (usize, usize) },
    GlobalAvgPool { input: Var, hw: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, factor: T },
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat { inputs: Vec<Var>, outer: usize, inner: usize, lens: Vec<usize> },
    Reshape(Var),
    Slice { x: Var, outer: usize, inner: usize, axis_len: usize, start: usize, len: usize },
    Permute { x: Var, axes: Vec<usize> },
    L2Normalize { x: Var, eps: T },
    LogSoftmax { x: Var, temperature: T },
    Softmax { x: Var, temperature: T },
    PairwiseDistance { a: Var, b: Var },
    Gather { x: Var, indices: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Slice { .. } => OpKind::Slice,
            Op::Permute { .. } => OpKind::Permute,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::PairwiseDistance { .. } => OpKind::PairwiseDistance,
            Op::Gather { .. } => OpKind::Gather,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Scales the local derivative of one op family. Test-only sabotage hook
/// used to prove the gradient checker catches broken backward rules.
#[derive(Clone, Copy, Debug)]
pub struct Fault {
    pub kind: OpKind,
    pub factor: f64,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(op: &str, detail: String) -> Result<V> {
    Err(Error::Shape(format!("{op}: {detail}")))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- spatial ops (NHWC, or HWC treated as a batch of one) ----

    fn nhwc(&self, v: Var, op: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(v) {
            [h, w, c] => Ok((1, h, w, c)),
            [n, h, w, c] => Ok((n, h, w, c)),
            ref s => shape_err(op, format!("expected HWC or NHWC input, got {s:?}")),
        }
    }

    fn spatial_out_shape(&self, v: Var, n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
        if self.shape(v).len() == 3 {
            vec![h, w, c]
        } else {
            vec![n, h, w, c]
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (n, h, w, c_in) = self.nhwc(input, "conv2d")?;
        let (kh, kw, kc, c_out) = match *self.shape(kernel) {
            [kh, kw, kc, co] => (kh, kw, kc, co),
            ref s => return shape_err("conv2d", format!("kernel must be 4-D, got {s:?}")),
        };
        if kc != c_in {
            return shape_err(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {kc}"),
            );
        }
        if stride.0 == 0 || stride.1 == 0 {
            return shape_err("conv2d", "stride components must be >= 1".into());
        }
        let (ph, pw) = padding;
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * ph, w + 2 * pw),
            );
        }
        let geom = ConvGeom {
            n,
            h,
            w,
            c_in,
            kh,
            kw,
            c_out,
            sh: stride.0,
            sw: stride.1,
            ph,
            pw,
            oh: (h + 2 * ph - kh) / stride.0 + 1,
            ow: (w + 2 * pw - kw) / stride.1 + 1,
        };
        let data = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let shape = self.spatial_out_shape(input, n, geom.oh, geom.ow, c_out);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    pub fn avg_pool2d(&mut self, input: Var, kernel: (usize, usize)) -> Result<Var> {
        let dims = self.nhwc(input, "avg_pool2d")?;
        let (n, h, w, c) = dims;
        let (kh, kw) = kernel;
        if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
            return shape_err(
                "avg_pool2d",
                format!("kernel {kh}x{kw} does not tile a {h}x{w} map"),
            );
        }
        let data = kernels::avg_pool_forward(self.value(input).data(), dims, kernel);
        let shape = self.spatial_out_shape(input, n, h / kh, w / kw, c);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::AvgPool2d { input, dims, kernel }, &[input]))
    }

    /// `[N, H, W, C] -> [N, C]` (or `[H, W, C] -> [C]`).
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, h, w, c) = self.nhwc(input, "global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let src = self.value(input).data();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for p in 0..hw {
                let off = (b * hw + p) * c;
                for ch in 0..c {
                    out[b * c + ch] += src[off + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let shape = if self.shape(input).len() == 3 { vec![c] } else { vec![n, c] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input, hw }, &[input]))
    }

    // ---- linear algebra ----

    /// `[m, k] x [k, n]`; a 1-D left operand is treated as `[1, k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, vec_in) = match *self.shape(a) {
            [k] => (1, k, true),
            [m, k] => (m, k, false),
            ref s => return shape_err("matmul", format!("left operand must be 1-D or 2-D, got {s:?}")),
        };
        let n = match *self.shape(b) {
            [kb, n] if kb == k => n,
            ref s => return shape_err("matmul", format!("cannot multiply [{m}, {k}] by {s:?}")),
        };
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = if vec_in { vec![n] } else { vec![m, n] };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Adds a `[C]` vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        if self.shape(bias) != [c] {
            return shape_err(
                "add_bias",
                format!("bias {:?} does not match last axis {c}", self.shape(bias)),
            );
        }
        let b = self.value(bias).data();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Affine layer `x W + b`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x).map(|e| e * factor);
        self.push(v, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(T::zero()));
        self.push(v, Op::Relu(x), &[x])
    }

    // ---- structure ----

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, inner)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat", "no inputs".into());
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{s:?} incompatible with {base:?} on axis {axis}"));
            }
            lens.push(s[axis]);
        }
        let (outer, inner) = Self::axis_split(&base, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in inputs.iter().zip(&lens) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                lens,
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            );
        }
        let (outer, inner) = Self::axis_split(&shape, axis);
        let axis_len = shape[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Slice {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
            &[x],
        ))
    }

    /// Index `i` along `axis`, with that axis removed.
    pub fn select(&mut self, x: Var, axis: usize, i: usize) -> Result<Var> {
        let s = self.slice(x, axis, i, 1)?;
        let mut shape = self.shape(s).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.reshape(s, &shape)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return shape_err("permute", format!("{axes:?} is not a permutation of {shape:?}"));
        }
        let data = kernels::permute(self.value(x).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    // ---- normalisation and probabilities (last axis) ----

    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let mut value = self.value(x).clone();
        let d = *value.shape().last().expect("non-empty shape");
        for row in value.data_mut().chunks_mut(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push(value, Op::L2Normalize { x, eps }, &[x])
    }

    /// `log softmax(x / temperature)` per row.
    pub fn log_softmax(&mut self, x: Var, temperature: T) -> Var {
        let mut value = self.value(x).clone();
        let d = *value.shape().last().expect("non-empty shape");
        for row in value.data_mut().chunks_mut(d) {
            row.iter_mut().for_each(|v| *v /= temperature);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(value, Op::LogSoftmax { x, temperature }, &[x])
    }

    /// `softmax(x / temperature)` per row.
    pub fn softmax(&mut self, x: Var, temperature: T) -> Var {
        let mut value = self.value(x).clone();
        let d = *value.shape().last().expect("non-empty shape");
        for row in value.data_mut().chunks_mut(d) {
            softmax_in_place(row, temperature);
        }
        self.push(value, Op::Softmax { x, temperature }, &[x])
    }

    /// Euclidean distances between rows: `[m, d] x [n, d] -> [m, n]`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = match *self.shape(a) {
            [m, d] => (m, d),
            ref s => return shape_err("pairwise_distance", format!("expected 2-D, got {s:?}")),
        };
        let n = match *self.shape(b) {
            [n, db] if db == d => n,
            ref s => return shape_err("pairwise_distance", format!("[{m}, {d}] vs {s:?}")),
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ra = &va[i * d..(i + 1) * d];
            for j in 0..n {
                let rb = &vb[j * d..(j + 1) * d];
                let s: T = ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum();
                out.push(s.sqrt());
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::PairwiseDistance { a, b }, &[a, b]))
    }

    /// Picks flat-index elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return shape_err("gather", format!("index {bad} out of {} elements", src.len()));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        Ok(self.push(value, Op::Gather { x, indices: indices.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    // ---- reverse pass ----

    /// Gradient of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return shape_err(
                "backward",
                format!("root must be a scalar, got {:?}", self.shape(root)),
            );
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(self.shape(root).to_vec(), vec![T::one()])?);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let factor = match self.fault {
                Some(f) if f.kind == node.op.kind() => Some(T::lit(f.factor)),
                _ => None,
            };
            let mut contributions = self.local_grads(node, &g)?;
            if let Some(factor) = factor {
                for (_, t) in contributions.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= factor);
                }
            }
            for (v, t) in contributions {
                accumulate(&mut grads[v.0], t);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn like(&self, v: Var, data: Vec<T>) -> Result<Tensor<T>> {
        Tensor::new(self.shape(v).to_vec(), data)
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let gd = g.data();
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (di, dk) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gd,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                if let Some(di) = di {
                    out.push((*input, self.like(*input, di)?));
                }
                if let Some(dk) = dk {
                    out.push((*kernel, self.like(*kernel, dk)?));
                }
            }
            Op::AvgPool2d { input, dims, kernel } => {
                let d = kernels::avg_pool_backward(gd, *dims, *kernel);
                out.push((*input, self.like(*input, d)?));
            }
            Op::GlobalAvgPool { input, hw } => {
                let c = *g.shape().last().expect("non-empty");
                let inv = T::one() / T::lit(*hw as f64);
                let n_in = self.value(*input).len();
                let mut d = vec![T::zero(); n_in];
                for (i, dv) in d.iter_mut().enumerate() {
                    let b = i / (hw * c);
                    *dv = gd[b * c + i % c] * inv;
                }
                out.push((*input, self.like(*input, d)?));
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let d = kernels::matmul_grad_a(gd, self.value(*b).data(), *m, *k, *n);
                    out.push((*a, self.like(*a, d)?));
                }
                if self.wants(*b) {
                    let d = kernels::matmul_grad_b(self.value(*a).data(), gd, *m, *k, *n);
                    out.push((*b, self.like(*b, d)?));
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    out.push((*x, g.clone()));
                }
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let mut d = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (dv, &gv) in d.iter_mut().zip(row) {
                            *dv += gv;
                        }
                    }
                    out.push((*bias, self.like(*bias, d)?));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(vb).map(|(&gv, &bv)| gv * bv).collect();
                    out.push((*a, self.like(*a, d)?));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va).map(|(&gv, &av)| gv * av).collect();
                    out.push((*b, self.like(*b, d)?));
                }
            }
            Op::Scale { x, factor } => out.push((*x, g.map(|v| v * *factor))),
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                out.push((*x, self.like(*x, d)?));
            }
            Op::Tanh(x) => {
                let d = gd.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t)).collect();
                out.push((*x, self.like(*x, d)?));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((*x, self.like(*x, d)?));
            }
            Op::Concat { inputs, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&v, &len) in inputs.iter().zip(lens) {
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        out.push((v, self.like(v, d)?));
                    }
                    offset += len;
                }
            }
            Op::Reshape(x) => out.push((*x, self.like(*x, gd.to_vec())?)),
            Op::Slice { x, outer, inner, axis_len, start, len } => {
                let mut d = vec![T::zero(); outer * axis_len * inner];
                for o in 0..*outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                out.push((*x, self.like(*x, d)?));
            }
            Op::Permute { x, axes } => {
                let inv = kernels::inverse_axes(axes);
                let d = kernels::permute(gd, g.shape(), &inv);
                out.push((*x, self.like(*x, d)?));
            }
            Op::L2Normalize { x, eps } => {
                let xv = self.value(*x).data();
                let dim = *g.shape().last().expect("non-empty");
                let mut d = Vec::with_capacity(xv.len());
                for ((xr, yr), gr) in xv.chunks(dim).zip(y.chunks(dim)).zip(gd.chunks(dim)) {
                    let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if n > *eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        d.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / n));
                    } else {
                        d.extend(gr.iter().map(|&gv| gv / *eps));
                    }
                }
                out.push((*x, self.like(*x, d)?));
            }
            Op::LogSoftmax { x, temperature } => {
                let dim = *g.shape().last().expect("non-empty");
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(dim).zip(gd.chunks(dim)) {
                    let gs: T = gr.iter().copied().sum();
                    d.extend(yr.iter().zip(gr).map(|(&lp, &gv)| (gv - lp.exp() * gs) / *temperature));
                }
                out.push((*x, self.like(*x, d)?));
            }
            Op::Softmax { x, temperature } => {
                let dim = *g.shape().last().expect("non-empty");
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(dim).zip(gd.chunks(dim)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &gv)| p * gv).sum();
                    d.extend(yr.iter().zip(gr).map(|(&p, &gv)| p * (gv - dot) / *temperature));
                }
                out.push((*x, self.like(*x, d)?));
            }
            Op::PairwiseDistance { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (m, dim) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let mut da = vec![T::zero(); va.len()];
                let mut db = vec![T::zero(); vb.len()];
                for i in 0..m {
                    for j in 0..n {
                        let dist = y[i * n + j];
                        if dist <= T::zero() {
                            continue;
                        }
                        let coef = gd[i * n + j] / dist;
                        for t in 0..dim {
                            let diff = (va[i * dim + t] - vb[j * dim + t]) * coef;
                            da[i * dim + t] += diff;
                            db[j * dim + t] -= diff;
                        }
                    }
                }
                // a and b may be the same node; accumulate handles the sum.
                if self.wants(*a) {
                    out.push((*a, self.like(*a, da)?));
                }
                if self.wants(*b) {
                    out.push((*b, self.like(*b, db)?));
                }
            }
            Op::Gather { x, indices } => {
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (&i, &gv) in indices.iter().zip(gd) {
                    d[i] += gv;
                }
                out.push((*x, self.like(*x, d)?));
            }
            Op::Sum(x) => {
                let gv = gd[0];
                out.push((*x, self.value(*x).map(|_| gv)));
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len() as f64);
                let gv = gd[0] / n;
                out.push((*x, self.value(*x).map(|_| gv)));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        None => *slot = Some(t),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], temperature: T) {
    row.iter_mut().for_each(|v| *v /= temperature);
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    row.iter_mut().for_each(|v| *v = (*v - m).exp());
    let s: T = row.iter().copied().sum();
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![4, 4, 1], 1.0));
        let k = g.constant(Tensor::full(vec![1, 1, 1, 1], 2.0));
        let y = g.conv2d(x, k, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.shape(y), &[4, 4, 1]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_stride_two_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::from_fn(vec![4, 4, 1], |i| i as f64));
        let k = g.constant(Tensor::full(vec![2, 2, 1, 1], 1.0));
        let y = g.conv2d(x, k, (2, 2), (0, 0)).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 1]);
        // top-left window holds 0, 1, 4, 5
        assert_eq!(g.value(y).data()[0], 10.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![4, 4, 2]));
        let k = g.constant(Tensor::zeros(vec![3, 3, 3, 1]));
        assert!(matches!(g.conv2d(x, k, (1, 1), (1, 1)), Err(Error::Shape(_))));
        let k1 = g.constant(Tensor::zeros(vec![3, 3, 2, 1]));
        assert!(g.conv2d(x, k1, (0, 1), (1, 1)).is_err());
    }

    #[test]
    fn avg_pool_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.avg_pool2d(x, (2, 2)).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);

        let rows = g.constant(Tensor::from_fn(vec![16, 8, 1], |i| (i / 8) as f64));
        let p = g.avg_pool2d(rows, (1, 8)).unwrap();
        assert_eq!(g.shape(p), &[16, 1, 1]);
        let expect: Vec<f64> = (0..16).map(f64::from).collect();
        assert_eq!(g.value(p).data(), expect.as_slice());

        let c = g.constant(Tensor::full(vec![16, 8, 3], 0.7));
        let pc = g.avg_pool2d(c, (1, 8)).unwrap();
        assert_eq!(g.shape(pc), &[16, 1, 3]);
        assert!(g.value(pc).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        assert!(g.avg_pool2d(c, (3, 8)).is_err());
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let v = g.constant(t(&[2], &[3.0, 4.0]));
        let n = g.l2_normalize(v, 1e-12);
        assert_eq!(g.value(n).data(), &[0.6, 0.8]);
        let u = g.constant(t(&[2], &[0.6, 0.8]));
        let nu = g.l2_normalize(u, 1e-12);
        assert!(g.value(nu).data().iter().zip([0.6, 0.8]).all(|(a, b)| (a - b).abs() < 1e-15));
        let z = g.constant(Tensor::zeros(vec![3]));
        let nz = g.l2_normalize(z, 1e-12);
        assert_eq!(g.value(nz).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_operand_gradients_accumulate() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let p = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_then_slice_is_lossless() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64));
        let b = g.constant(Tensor::<f64>::from_fn(vec![2, 2], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 3.0, 4.0, 5.0, 12.0, 13.0]);
        let a2 = g.slice(c, 1, 0, 3).unwrap();
        let b2 = g.slice(c, 1, 3, 2).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }
}
