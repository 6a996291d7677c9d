//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Shapes follow a small set of conventions:
//! - matrices are `[rows, cols]`, row-major;
//! - images and activation maps are `[channels, height, width]`;
//! - channel-stacked sequences are `[n, channels, length]`.

use crate::error::{NeuralError, Result};
use crate::robust;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Ln(Var),
    SumAll(Var),
    MeanAll(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    ChannelMean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Stack(Vec<Var>),
    PointwiseConv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    RobustRho {
        x: Var,
        alpha: Var,
        scale: Var,
    },
    LogPartition(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar root with respect to every tracked node.
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

fn shape_err<S: Into<String>>(msg: S) -> NeuralError {
    NeuralError::Shape(msg.into())
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Elementwise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(shape_err("mul_const shape"));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(a, c), &[a]))
    }

    /// `x[m, n] + bias[n]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row_bias")?;
        if self.value(bias).len() != n {
            return Err(shape_err(format!(
                "bias of length {} for {} columns",
                self.value(bias).len(),
                n
            )));
        }
        let xv = self.value(x).data();
        let bv = self.value(bias).data();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            data.extend(xv[r * n..(r + 1) * n].iter().zip(bv).map(|(&a, &b)| a + b));
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err(format!("matmul inner dims {k} vs {k2}")));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let data = transpose(self.value(a).data(), m, n);
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Ln(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        self.push(out, Op::MeanAll(a), &[a])
    }

    /// Row-wise softmax over the trailing dimension of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "softmax_rows")?;
        let x = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for r in 0..m {
            softmax_into(&x[r * n..(r + 1) * n], &mut data[r * n..(r + 1) * n]);
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(shape_err("layer_norm affine length"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut data = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                data[r * n + c] = g[c] * h + b[c];
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// 2-D convolution of a `[C, H, W]` map with `[O, C, K, K]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(shape_err(format!("conv2d input must be [C,H,W], got {s:?}"))),
        };
        let (o, k) = match self.shape(w) {
            [o, ci, k, k2] if *ci == c && k == k2 => (*o, *k),
            s => {
                return Err(shape_err(format!(
                    "conv2d weight {s:?} incompatible with {c} input channels"
                )))
            }
        };
        if self.value(b).len() != o {
            return Err(shape_err("conv2d bias length"));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d kernel larger than padded input"));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(self.value(x).data(), c, h, wd, k, stride, pad, oh, ow);
        let mut data = matmul_nn(self.value(w).data(), &cols, o, c * k * k, oh * ow);
        let bv = self.value(b).data();
        for (oc, chunk) in data.chunks_mut(oh * ow).enumerate() {
            for v in chunk {
                *v = *v + bv[oc];
            }
        }
        let out = Tensor::new(vec![o, oh, ow], data)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            &[x, w, b],
        ))
    }

    /// Mean over the channel axis of a `[C, H, W]` map, giving `[H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(shape_err(format!("channel_mean expects [C,H,W], got {s:?}"))),
        };
        let xv = self.value(x).data();
        let inv = T::one() / T::of(c as f64);
        let mut data = vec![T::zero(); h * w];
        for ch in 0..c {
            for (d, &v) in data.iter_mut().zip(&xv[ch * h * w..(ch + 1) * h * w]) {
                *d = *d + v;
            }
        }
        data.iter_mut().for_each(|d| *d = *d * inv);
        let out = Tensor::new(vec![h, w], data)?;
        Ok(self.push(out, Op::ChannelMean(x), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NeuralError::Empty("concat_rows of nothing".into()));
        }
        let n = self.matrix_dims(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, k) = self.matrix_dims(p, "concat_rows")?;
            if k != n {
                return Err(shape_err(format!("concat_rows widths {n} vs {k}")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NeuralError::Empty("concat_cols of nothing".into()));
        }
        let m = self.matrix_dims(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, k) = self.matrix_dims(p, "concat_cols")?;
            if r != m {
                return Err(shape_err(format!("concat_cols heights {m} vs {r}")));
            }
            widths.push(k);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &k) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * k..(r + 1) * k]);
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "slice_rows")?;
        if start + len > m {
            return Err(shape_err(format!("rows {start}..{} of {m}", start + len)));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "slice_cols")?;
        if start + len > n {
            return Err(shape_err(format!("cols {start}..{} of {n}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Stacks `k` matrices of shape `[n, d]` into channels: `[n, k, d]`.
    pub fn stack_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NeuralError::Empty("stack of nothing".into()));
        }
        let (n, d) = self.matrix_dims(parts[0], "stack_channels")?;
        for &p in parts {
            if self.matrix_dims(p, "stack_channels")? != (n, d) {
                return Err(shape_err("stack_channels members differ in shape"));
            }
        }
        let k = parts.len();
        let mut data = Vec::with_capacity(n * k * d);
        for r in 0..n {
            for &p in parts {
                data.extend_from_slice(&self.value(p).data()[r * d..(r + 1) * d]);
            }
        }
        let out = Tensor::new(vec![n, k, d], data)?;
        Ok(self.push(out, Op::Stack(parts.to_vec()), parts))
    }

    /// Width-1 1-D convolution: `[n, C, L]` with `[O, C]` weights and `[O]` bias.
    pub fn pointwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c, l) = match self.shape(x) {
            [n, c, l] => (*n, *c, *l),
            s => return Err(shape_err(format!("pointwise_conv1d expects [n,C,L], got {s:?}"))),
        };
        let (o, ci) = self.matrix_dims(w, "pointwise_conv1d weight")?;
        if ci != c || self.value(b).len() != o {
            return Err(shape_err("pointwise_conv1d weight/bias shape"));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(n * o * l);
        for s in 0..n {
            let block = matmul_nn(wv, &xv[s * c * l..(s + 1) * c * l], o, c, l);
            for oc in 0..o {
                data.extend(block[oc * l..(oc + 1) * l].iter().map(|&v| v + bv[oc]));
            }
        }
        let out = Tensor::new(vec![n, o, l], data)?;
        Ok(self.push(out, Op::PointwiseConv1d { x, w, b }, &[x, w, b]))
    }

    /// Elementwise general robust penalty with scalar shape `alpha` and scale `scale`.
    pub fn robust_rho(&mut self, x: Var, alpha: Var, scale: Var) -> Result<Var> {
        if self.value(alpha).len() != 1 || self.value(scale).len() != 1 {
            return Err(shape_err("robust_rho alpha and scale must be scalars"));
        }
        let a = self.value(alpha).item();
        let c = self.value(scale).item();
        if !(c > T::zero()) {
            return Err(NeuralError::Config("robust loss scale must be > 0".into()));
        }
        let out = self.value(x).map(|v| robust::rho(v, a, c));
        Ok(self.push(out, Op::RobustRho { x, alpha, scale }, &[x, alpha, scale]))
    }

    /// Log of the robust density normalizer, `log Z(alpha)`, from the quadrature table.
    pub fn log_partition(&mut self, alpha: Var) -> Result<Var> {
        if self.value(alpha).len() != 1 {
            return Err(shape_err("log_partition alpha must be scalar"));
        }
        let a = self.value(alpha).item().as_f64();
        let (v, _) = robust::log_partition_table().eval(a);
        let out = Tensor::scalar(T::of(v));
        Ok(self.push(out, Op::LogPartition(alpha), &[alpha]))
    }

    /// Reverse sweep from a scalar root, seeding `d root = seed`.
    pub fn backward_scaled(&self, root: Var, seed: T) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape(), seed));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    pub fn backward(&self, root: Var) -> Gradients<T> {
        self.backward_scaled(root, T::one())
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        f: impl FnOnce() -> Tensor<T>,
    ) {
        if self.tracked(v) {
            let g = f();
            self.accumulate(grads, v, g);
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate_with(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accumulate_with(grads, *a, || zip(g, val(*b), |x, y| x * y));
                self.accumulate_with(grads, *b, || zip(g, val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate_with(grads, *a, || g.map(|x| x * s));
            }
            Op::MulConst(a, c) => {
                self.accumulate_with(grads, *a, || zip(g, c, |x, y| x * y));
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate_with(grads, *b, || {
                    let n = g.cols();
                    let mut acc = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    Tensor::new(val(*b).shape().to_vec(), acc).expect("bias shape")
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                self.accumulate_with(grads, *a, || {
                    let d = matmul_nt(g.data(), val(*b).data(), m, n, k);
                    Tensor::new(vec![m, k], d).expect("matmul grad")
                });
                self.accumulate_with(grads, *b, || {
                    let d = matmul_tn(val(*a).data(), g.data(), m, k, n);
                    Tensor::new(vec![k, n], d).expect("matmul grad")
                });
            }
            Op::Transpose(a) => {
                self.accumulate_with(grads, *a, || {
                    let (n, m) = (g.shape()[0], g.shape()[1]);
                    Tensor::new(vec![m, n], transpose(g.data(), n, m)).expect("transpose grad")
                });
            }
            Op::Reshape(a) => {
                self.accumulate_with(grads, *a, || {
                    g.clone().reshaped(val(*a).shape()).expect("reshape grad")
                });
            }
            Op::Relu(a) => {
                self.accumulate_with(grads, *a, || {
                    zip(g, val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })
                });
            }
            Op::Gelu(a) => {
                self.accumulate_with(grads, *a, || zip(g, val(*a), |gv, x| gv * gelu_grad(x)));
            }
            Op::Ln(a) => {
                self.accumulate_with(grads, *a, || zip(g, val(*a), |gv, x| gv / x));
            }
            Op::SumAll(a) => {
                let gv = g.item();
                self.accumulate_with(grads, *a, || Tensor::full(val(*a).shape(), gv));
            }
            Op::MeanAll(a) => {
                let gv = g.item() / T::of(val(*a).len() as f64);
                self.accumulate_with(grads, *a, || Tensor::full(val(*a).shape(), gv));
            }
            Op::SoftmaxRows(a) => {
                self.accumulate_with(grads, *a, || {
                    let y = &node.value;
                    let n = y.cols();
                    let mut d = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(d.chunks_mut(n))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    Tensor::new(y.shape().to_vec(), d).expect("softmax grad")
                });
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = g.cols();
                let m = g.rows();
                let gam = val(*gamma).data();
                self.accumulate_with(grads, *gamma, || {
                    let mut acc = vec![T::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            acc[c] = acc[c] + g.data()[r * n + c] * xhat[r * n + c];
                        }
                    }
                    Tensor::new(val(*gamma).shape().to_vec(), acc).expect("gamma grad")
                });
                self.accumulate_with(grads, *beta, || {
                    let mut acc = vec![T::zero(); n];
                    for r in 0..m {
                        for c in 0..n {
                            acc[c] = acc[c] + g.data()[r * n + c];
                        }
                    }
                    Tensor::new(val(*beta).shape().to_vec(), acc).expect("beta grad")
                });
                self.accumulate_with(grads, *x, || {
                    let nf = T::of(n as f64);
                    let mut d = vec![T::zero(); m * n];
                    for r in 0..m {
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for c in 0..n {
                            let dh = gr[c] * gam[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[c];
                        }
                        mean_dh = mean_dh / nf;
                        mean_dh_h = mean_dh_h / nf;
                        for c in 0..n {
                            let dh = gr[c] * gam[c];
                            d[r * n + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    Tensor::new(vec![m, n], d).expect("layer norm grad")
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (c, h, wd) = {
                    let s = val(*x).shape();
                    (s[0], s[1], s[2])
                };
                let ws = val(*w).shape();
                let (o, k) = (ws[0], ws[2]);
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let ckk = c * k * k;
                self.accumulate_with(grads, *b, || {
                    let d = g.data().chunks(oh * ow).map(|ch| ch.iter().copied().sum()).collect();
                    Tensor::new(vec![o], d).expect("conv bias grad")
                });
                self.accumulate_with(grads, *w, || {
                    let d = matmul_nt(g.data(), cols, o, oh * ow, ckk);
                    Tensor::new(ws.to_vec(), d).expect("conv weight grad")
                });
                self.accumulate_with(grads, *x, || {
                    let dcols = matmul_tn(val(*w).data(), g.data(), o, ckk, oh * ow);
                    let d = col2im(&dcols, c, h, wd, k, *stride, *pad, oh, ow);
                    Tensor::new(vec![c, h, wd], d).expect("conv input grad")
                });
            }
            Op::ChannelMean(x) => {
                self.accumulate_with(grads, *x, || {
                    let c = val(*x).shape()[0];
                    let inv = T::one() / T::of(c as f64);
                    let mut d = Vec::with_capacity(val(*x).len());
                    for _ in 0..c {
                        d.extend(g.data().iter().map(|&v| v * inv));
                    }
                    Tensor::new(val(*x).shape().to_vec(), d).expect("channel mean grad")
                });
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let m = val(p).shape()[0];
                    let lo = offset;
                    self.accumulate_with(grads, p, || {
                        Tensor::new(vec![m, n], g.data()[lo * n..(lo + m) * n].to_vec())
                            .expect("concat rows grad")
                    });
                    offset += m;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (g.shape()[0], g.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let k = val(p).shape()[1];
                    let lo = offset;
                    self.accumulate_with(grads, p, || {
                        let mut d = Vec::with_capacity(m * k);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * total + lo..r * total + lo + k]);
                        }
                        Tensor::new(vec![m, k], d).expect("concat cols grad")
                    });
                    offset += k;
                }
            }
            Op::SliceRows(a, start) => {
                self.accumulate_with(grads, *a, || {
                    let n = g.cols();
                    let mut d = Tensor::zeros(val(*a).shape());
                    d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    d
                });
            }
            Op::SliceCols(a, start) => {
                self.accumulate_with(grads, *a, || {
                    let n = val(*a).shape()[1];
                    let (m, len) = (g.shape()[0], g.shape()[1]);
                    let mut d = Tensor::zeros(val(*a).shape());
                    for r in 0..m {
                        d.data_mut()[r * n + start..r * n + start + len]
                            .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                    d
                });
            }
            Op::Stack(parts) => {
                let (n, k, d) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                for (ci, &p) in parts.iter().enumerate() {
                    self.accumulate_with(grads, p, || {
                        let mut out = Vec::with_capacity(n * d);
                        for r in 0..n {
                            let lo = (r * k + ci) * d;
                            out.extend_from_slice(&g.data()[lo..lo + d]);
                        }
                        Tensor::new(vec![n, d], out).expect("stack grad")
                    });
                }
            }
            Op::PointwiseConv1d { x, w, b } => {
                let (n, c, l) = {
                    let s = val(*x).shape();
                    (s[0], s[1], s[2])
                };
                let o = val(*w).shape()[0];
                self.accumulate_with(grads, *b, || {
                    let mut acc = vec![T::zero(); o];
                    for s in 0..n {
                        for (oc, a) in acc.iter_mut().enumerate() {
                            let lo = (s * o + oc) * l;
                            *a = *a + g.data()[lo..lo + l].iter().copied().sum::<T>();
                        }
                    }
                    Tensor::new(val(*b).shape().to_vec(), acc).expect("conv1d bias grad")
                });
                self.accumulate_with(grads, *w, || {
                    let mut acc = vec![T::zero(); o * c];
                    for s in 0..n {
                        let gs = &g.data()[s * o * l..(s + 1) * o * l];
                        let xs = &val(*x).data()[s * c * l..(s + 1) * c * l];
                        let part = matmul_nt(gs, xs, o, l, c);
                        for (a, p) in acc.iter_mut().zip(part) {
                            *a = *a + p;
                        }
                    }
                    Tensor::new(vec![o, c], acc).expect("conv1d weight grad")
                });
                self.accumulate_with(grads, *x, || {
                    let mut d = Vec::with_capacity(n * c * l);
                    for s in 0..n {
                        let gs = &g.data()[s * o * l..(s + 1) * o * l];
                        d.extend(matmul_tn(val(*w).data(), gs, o, c, l));
                    }
                    Tensor::new(vec![n, c, l], d).expect("conv1d input grad")
                });
            }
            Op::RobustRho { x, alpha, scale } => {
                let a = val(*alpha).item();
                let c = val(*scale).item();
                let xs = val(*x);
                let mut dx = Vec::with_capacity(xs.len());
                let mut da = T::zero();
                let mut dc = T::zero();
                for (&xv, &gv) in xs.data().iter().zip(g.data()) {
                    let d = robust::rho_partials(xv, a, c);
                    dx.push(gv * d.dx);
                    da = da + gv * d.dalpha;
                    dc = dc + gv * d.dscale;
                }
                self.accumulate_with(grads, *x, || {
                    Tensor::new(xs.shape().to_vec(), dx).expect("rho grad")
                });
                self.accumulate_with(grads, *alpha, || Tensor::scalar(da));
                self.accumulate_with(grads, *scale, || Tensor::scalar(dc));
            }
            Op::LogPartition(alpha) => {
                let a = val(*alpha).item().as_f64();
                let (_, d) = robust::log_partition_table().eval(a);
                let gv = g.item();
                self.accumulate_with(grads, *alpha, || Tensor::scalar(gv * T::of(d)));
            }
        }
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), d).expect("zip shape")
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::of(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub(crate) fn softmax_into<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// `A[m,k] · B[k,n]`.
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `A[m,k] · B[n,k]ᵀ`.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `A[m,k]ᵀ · B[m,n]`, result `[k, n]`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * k * k * oh * ow];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xi = (ch * h + iy as usize) * w + ix as usize;
                        x[xi] = x[xi] + src[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}
