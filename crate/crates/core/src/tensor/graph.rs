use super::{as_matrix, split_axis, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong adjoint rules, used as a negative control for
/// gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultyAdjoint {
    Sigmoid,
    MatMul,
    LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride_h: usize,
    stride_w: usize,
    pad_h: usize,
    pad_w: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Binary {
        kind: Binary,
        lhs: Var,
        rhs: Var,
        broadcast: bool,
    },
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2d {
        x: Var,
        kernel: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Max {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pick {
        x: Var,
        index: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in execution order, so the
/// record is always topologically sorted.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    fault: Option<FaultyAdjoint>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<(), TensorError> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            fault: None,
        }
    }

    pub fn with_fault(fault: FaultyAdjoint) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    /// Records a leaf; it participates in differentiation when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
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

    /// Adjoint accumulated by the last backward pass. Nodes that do not
    /// require gradients, or are disconnected from the loss, yield zeros.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
        Tensor::new(node.value.shape().to_vec(), data).expect("grad matches value shape")
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (ls, rs) = (self.shape(lhs).to_vec(), self.shape(rhs).to_vec());
        let broadcast = if ls == rs {
            false
        } else if rs.len() == 1 && ls.last() == Some(&rs[0]) {
            true
        } else if kind != Binary::Sub && ls.len() == 1 && rs.last() == Some(&ls[0]) {
            return self.binary(kind, rhs, lhs);
        } else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: ls,
                rhs: rs,
            });
        };
        let (a, b) = (self.data(lhs), self.data(rhs));
        let n = b.len();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<T> = a
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b[if broadcast { i % n } else { i }]))
            .collect();
        self.emit(
            name,
            ls,
            out,
            Op::Binary {
                kind,
                lhs,
                rhs,
                broadcast,
            },
            &[lhs, rhs],
        )
    }

    /// Elementwise sum; `b` may also be a vector broadcast along the last axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, TensorError> {
        let out = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.emit("scale", shape, out, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        let out = self.data(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.emit("add_scalar", shape, out, Op::AddScalar(x), &[x])
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.emit(name, shape, out, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    // ---- linear algebra and layout ------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [m, k] = as_matrix(self.shape(a), "matmul")?;
        let [k2, n] = as_matrix(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        self.emit("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `x · w + b` for a row-major batch `x` of shape `[rows, in]`,
    /// `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x).transpose()?;
        let shape = t.shape().to_vec();
        self.emit("transpose", shape, t.into_data(), Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        self.emit("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = xs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        split_axis(&base, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rank = s.len() == base.len();
            let compatible = same_rank
                && s
                    .iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.emit(
            "concat",
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if start + len > n {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                reason: format!("range {start}..{} exceeds extent {n}", start + len),
            });
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.emit(
            "narrow",
            out_shape,
            out,
            Op::Narrow { x, axis, start },
            &[x],
        )
    }

    /// Element `index` of a flattened tensor, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let d = self.data(x);
        let v = *d.get(index).ok_or(TensorError::InvalidArgument {
            op: "pick",
            reason: format!("index {index} out of {}", d.len()),
        })?;
        self.emit("pick", vec![], vec![v], Op::Pick { x, index }, &[x])
    }

    // ---- reductions and normalizations --------------------------------

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (out, shape) = self.reduce_with(x, axis, "sum", |row| row.iter().copied().sum())?;
        self.emit("sum", shape, out, Op::Sum { x, axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (out, shape) = self.reduce_with(x, axis, "mean", |row| {
            row.iter().copied().sum::<T>() / T::lit(row.len() as f64)
        })?;
        self.emit("mean", shape, out, Op::Mean { x, axis }, &[x])
    }

    /// Maximum along `axis`; the adjoint flows to the first maximal entry.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "max" });
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..n {
                    if d[o * n * inner + j * inner + i] > d[o * n * inner + best * inner + i] {
                        best = j;
                    }
                }
                argmax.push(best);
                out.push(d[o * n * inner + best * inner + i]);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.emit("max", out_shape, out, Op::Max { x, axis, argmax }, &[x])
    }

    /// Sum over every element, producing a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    fn reduce_with(
        &self,
        x: Var,
        axis: usize,
        op: &'static str,
        f: impl Fn(&[T]) -> T,
    ) -> Result<(Vec<T>, Vec<usize>), TensorError> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if n == 0 {
            return Err(TensorError::EmptyAxis { op });
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        let mut row = vec![T::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = d[o * n * inner + j * inner + i];
                }
                out.push(f(&row));
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok((out, out_shape))
    }

    /// Softmax along `axis`, computed after subtracting the axis maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.softmax_data(x, axis, false)?;
        let shape = self.shape(x).to_vec();
        self.emit("softmax", shape, out, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let out = self.softmax_data(x, axis, true)?;
        let shape = self.shape(x).to_vec();
        self.emit("log_softmax", shape, out, Op::LogSoftmax { x, axis }, &[x])
    }

    fn softmax_data(&self, x: Var, axis: usize, log: bool) -> Result<Vec<T>, TensorError> {
        let (outer, n, inner) = split_axis(self.shape(x), axis)?;
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let d = self.data(x);
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let m = (0..n).map(|j| d[idx(j)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..n).map(|j| (d[idx(j)] - m).exp()).sum();
                let log_z = z.ln();
                for j in 0..n {
                    let shifted = d[idx(j)] - m;
                    out[idx(j)] = if log {
                        shifted - log_z
                    } else {
                        shifted.exp() / z
                    };
                }
            }
        }
        Ok(out)
    }

    /// Normalizes the last axis to zero mean and unit (population)
    /// variance, then applies `gain` and `bias` (both shaped like the last
    /// axis). An extent of 1 normalizes to zero.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        if eps <= T::zero() {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                reason: "eps must be positive".into(),
            });
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(TensorError::InvalidArgument {
            op: "layer_norm",
            reason: "rank-0 input".into(),
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if n == 0 {
            return Err(TensorError::EmptyAxis { op: "layer_norm" });
        }
        let d = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = d.len() / n;
        let nf = T::lit(n as f64);
        let mut normalized = vec![T::zero(); d.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); d.len()];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                normalized[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        self.emit(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    // ---- convolution and pooling ---------------------------------------

    /// 1-D cross-correlation. `x: [C, T]`, `weight: [O, C, K]`,
    /// `bias: [O]`. Output length is `(T + 2·pad − K) / stride + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let [c, t] =
            <[usize; 2]>::try_from(xs.as_slice()).map_err(|_| bad_rank("conv1d", &xs))?;
        let [o, c2, k] =
            <[usize; 3]>::try_from(ws.as_slice()).map_err(|_| bad_rank("conv1d", &ws))?;
        let geom = conv_geom("conv1d", (c, 1, t), (o, c2, 1, k), (1, stride), (0, pad))?;
        self.conv(x, weight, bias, geom, "conv1d", vec![o, geom.out_w])
    }

    /// 2-D cross-correlation. `x: [C, H, W]`, `weight: [O, C, KH, KW]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let [c, h, w] =
            <[usize; 3]>::try_from(xs.as_slice()).map_err(|_| bad_rank("conv2d", &xs))?;
        let [o, c2, kh, kw] =
            <[usize; 4]>::try_from(ws.as_slice()).map_err(|_| bad_rank("conv2d", &ws))?;
        let geom = conv_geom(
            "conv2d",
            (c, h, w),
            (o, c2, kh, kw),
            (stride, stride),
            (pad, pad),
        )?;
        self.conv(
            x,
            weight,
            bias,
            geom,
            "conv2d",
            vec![o, geom.out_h, geom.out_w],
        )
    }

    fn conv(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        name: &'static str,
        out_shape: Vec<usize>,
    ) -> Result<Var, TensorError> {
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: vec![geom.out_channels],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let out = conv_forward(
            self.data(x),
            self.data(weight),
            bias.map(|b| self.data(b)),
            &geom,
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.emit(
            name,
            out_shape,
            out,
            Op::Conv {
                x,
                weight,
                bias,
                geom,
            },
            &inputs,
        )
    }

    /// Non-overlapping `kernel × kernel` average pooling over `[C, H, W]`;
    /// trailing rows/columns that do not fill a window are dropped.
    pub fn avg_pool2d(&mut self, x: Var, kernel: usize) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let [c, h, w] =
            <[usize; 3]>::try_from(xs.as_slice()).map_err(|_| bad_rank("avg_pool2d", &xs))?;
        if kernel == 0 || h < kernel || w < kernel {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool2d",
                reason: format!("kernel {kernel} does not fit {h}x{w}"),
            });
        }
        let (oh, ow) = (h / kernel, w / kernel);
        let d = self.data(x);
        let norm = T::one() / T::lit((kernel * kernel) as f64);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh * kernel {
                let row = &d[(ch * h + y) * w..];
                let orow = &mut out[(ch * oh + y / kernel) * ow..(ch * oh + y / kernel + 1) * ow];
                for (ox, o) in orow.iter_mut().enumerate() {
                    let s: T = row[ox * kernel..(ox + 1) * kernel].iter().copied().sum();
                    *o = *o + s * norm;
                }
            }
        }
        self.emit(
            "avg_pool2d",
            vec![c, oh, ow],
            out,
            Op::AvgPool2d { x, kernel },
            &[x],
        )
    }

    // ---- reverse pass --------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node that requires a
    /// gradient. The graph is consumed: further ops or a second backward
    /// fail until [`Graph::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.adjoint(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(cg),
                }
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn faulty(&self, f: FaultyAdjoint) -> T {
        if self.fault == Some(f) {
            T::lit(1.05)
        } else {
            T::one()
        }
    }

    fn adjoint(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                lhs,
                rhs,
                broadcast,
            } => {
                let (a, b) = (self.data(*lhs), self.data(*rhs));
                let n = b.len();
                let bi = |k: usize| if *broadcast { k % n } else { k };
                if rg(*lhs) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(k, &gk)| gk * b[bi(k)]).collect(),
                    };
                    out.push((*lhs, ga));
                }
                if rg(*rhs) {
                    let mut gb = vec![T::zero(); n];
                    for (k, &gk) in g.iter().enumerate() {
                        let c = match kind {
                            Binary::Add => gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * a[k],
                        };
                        gb[bi(k)] = gb[bi(k)] + c;
                    }
                    out.push((*rhs, gb));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.iter().map(|&v| v * *f).collect())),
            Op::AddScalar(x) | Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Sigmoid(x) => {
                let k = self.faulty(FaultyAdjoint::Sigmoid);
                out.push((
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * yi * (T::one() - yi) * k)
                        .collect(),
                ));
            }
            Op::Tanh(x) => out.push((
                *x,
                g.iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                    .collect(),
            )),
            Op::Relu(x) => out.push((
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect(),
            )),
            Op::MatMul(a, b) => {
                let [m, k] = as_matrix(self.shape(*a), "matmul").expect("recorded shape");
                let n = self.shape(*b)[1];
                let fk = self.faulty(FaultyAdjoint::MatMul);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                            ga[r * k + p] = s * fk;
                        }
                    }
                    out.push((*a, ga));
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (o, &gv) in gbrow.iter_mut().zip(grow) {
                                *o = *o + av * gv;
                            }
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let gt = Tensor::new(s.to_vec(), g.to_vec())
                    .and_then(|t| t.transpose())
                    .expect("recorded shape");
                out.push((*x, gt.into_data()));
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("recorded");
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| o * n * inner + j * inner + ii;
                        if log {
                            let gs: T = (0..n).map(|j| g[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] = g[idx(j)] - y[idx(j)].exp() * gs;
                            }
                        } else {
                            let dot: T = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gd = self.data(*gain);
                let n = gd.len();
                let rows = g.len() / n;
                let nf = T::lit(n as f64);
                let fk = self.faulty(FaultyAdjoint::LayerNorm);
                if rg(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let (gr, xh) = (&g[r * n..(r + 1) * n], &normalized[r * n..(r + 1) * n]);
                        let dxh: Vec<T> = gr.iter().zip(gd).map(|(&a, &b)| a * b).collect();
                        let s1: T = dxh.iter().copied().sum();
                        let s2: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] =
                                inv_std[r] / nf * (nf * dxh[j] - s1 - xh[j] * s2) * fk;
                        }
                    }
                    out.push((*x, gx));
                }
                if rg(*gain) {
                    let mut gg = vec![T::zero(); n];
                    for (k, &gk) in g.iter().enumerate() {
                        gg[k % n] = gg[k % n] + gk * normalized[k];
                    }
                    out.push((*gain, gg));
                }
                if rg(*bias) {
                    let mut gb = vec![T::zero(); n];
                    for (k, &gk) in g.iter().enumerate() {
                        gb[k % n] = gb[k % n] + gk;
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Conv {
                x,
                weight,
                bias,
                geom,
            } => {
                let (gx, gw) = conv_backward(self.data(*x), self.data(*weight), g, geom, rg(*x));
                if rg(*x) {
                    out.push((*x, gx));
                }
                if rg(*weight) {
                    out.push((*weight, gw));
                }
                if let Some(b) = bias.filter(|b| rg(*b)) {
                    let plane = geom.out_h * geom.out_w;
                    let gb = (0..geom.out_channels)
                        .map(|oc| g[oc * plane..(oc + 1) * plane].iter().copied().sum())
                        .collect();
                    out.push((b, gb));
                }
            }
            Op::AvgPool2d { x, kernel } => {
                let [c, h, w] = <[usize; 3]>::try_from(self.shape(*x)).expect("recorded");
                let (oh, ow) = (h / kernel, w / kernel);
                let norm = T::one() / T::lit((kernel * kernel) as f64);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for yy in 0..oh * kernel {
                        for xx in 0..ow * kernel {
                            gx[(ch * h + yy) * w + xx] =
                                g[(ch * oh + yy / kernel) * ow + xx / kernel] * norm;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } | Op::Max { x, axis, .. } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis).expect("recorded");
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for ii in 0..inner {
                        let gi = g[o * inner + ii];
                        match &node.op {
                            Op::Max { argmax, .. } => {
                                let j = argmax[o * inner + ii];
                                gx[o * n * inner + j * inner + ii] = gi;
                            }
                            Op::Mean { .. } => {
                                let v = gi / T::lit(n as f64);
                                for j in 0..n {
                                    gx[o * n * inner + j * inner + ii] = v;
                                }
                            }
                            _ => {
                                for j in 0..n {
                                    gx[o * n * inner + j * inner + ii] = gi;
                                }
                            }
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis).expect("recorded");
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if rg(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gv.extend_from_slice(&g[base..base + n * inner]);
                        }
                        out.push((v, gv));
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis).expect("recorded");
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, gx));
            }
            Op::Pick { x, index } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                gx[*index] = g[0];
                out.push((*x, gx));
            }
        }
        out
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn bad_rank(op: &'static str, shape: &[usize]) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: format!("unexpected rank for shape {shape:?}"),
    }
}

fn conv_geom(
    op: &'static str,
    (channels, height, width): (usize, usize, usize),
    (out_channels, wc, kernel_h, kernel_w): (usize, usize, usize, usize),
    (stride_h, stride_w): (usize, usize),
    (pad_h, pad_w): (usize, usize),
) -> Result<ConvGeom, TensorError> {
    if wc != channels {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![channels, height, width],
            rhs: vec![out_channels, wc, kernel_h, kernel_w],
        });
    }
    if stride_h == 0 || stride_w == 0 || kernel_h == 0 || kernel_w == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            reason: "stride and kernel must be positive".into(),
        });
    }
    if kernel_h > height + 2 * pad_h || kernel_w > width + 2 * pad_w {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!(
                "kernel {kernel_h}x{kernel_w} larger than padded input {}x{}",
                height + 2 * pad_h,
                width + 2 * pad_w
            ),
        });
    }
    Ok(ConvGeom {
        channels,
        height,
        width,
        out_channels,
        kernel_h,
        kernel_w,
        stride_h,
        stride_w,
        pad_h,
        pad_w,
        out_h: (height + 2 * pad_h - kernel_h) / stride_h + 1,
        out_w: (width + 2 * pad_w - kernel_w) / stride_w + 1,
    })
}

/// Output positions `o` with `0 <= o*stride + k - pad < extent`.
fn valid_range(extent: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > k {
        ((extent - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.out_channels * plane];
    for oc in 0..g.out_channels {
        let oplane = &mut out[oc * plane..(oc + 1) * plane];
        if let Some(b) = bias {
            oplane.iter_mut().for_each(|v| *v = b[oc]);
        }
        for ic in 0..g.channels {
            for ky in 0..g.kernel_h {
                let (oy_lo, oy_hi) = valid_range(g.height, g.out_h, ky, g.stride_h, g.pad_h);
                for kx in 0..g.kernel_w {
                    let wv = w[((oc * g.channels + ic) * g.kernel_h + ky) * g.kernel_w + kx];
                    let (ox_lo, ox_hi) = valid_range(g.width, g.out_w, kx, g.stride_w, g.pad_w);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride_h + ky - g.pad_h;
                        let row = &x[(ic * g.height + iy) * g.width..(ic * g.height + iy + 1) * g.width];
                        let orow = &mut oplane[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride_w == 1 {
                            let shift = ox_lo + kx - g.pad_w;
                            for (o, &v) in orow[ox_lo..ox_hi]
                                .iter_mut()
                                .zip(&row[shift..shift + (ox_hi - ox_lo)])
                            {
                                *o = *o + wv * v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride_w + kx - g.pad_w;
                                orow[ox] = orow[ox] + wv * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_x: bool,
) -> (Vec<T>, Vec<T>) {
    let plane = g.out_h * g.out_w;
    let mut gx = if need_x {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut gw = vec![T::zero(); w.len()];
    for oc in 0..g.out_channels {
        let gplane = &gout[oc * plane..(oc + 1) * plane];
        for ic in 0..g.channels {
            for ky in 0..g.kernel_h {
                let (oy_lo, oy_hi) = valid_range(g.height, g.out_h, ky, g.stride_h, g.pad_h);
                for kx in 0..g.kernel_w {
                    let widx = ((oc * g.channels + ic) * g.kernel_h + ky) * g.kernel_w + kx;
                    let wv = w[widx];
                    let (ox_lo, ox_hi) = valid_range(g.width, g.out_w, kx, g.stride_w, g.pad_w);
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride_h + ky - g.pad_h;
                        let rbase = (ic * g.height + iy) * g.width;
                        let grow = &gplane[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride_w == 1 {
                            let shift = rbase + ox_lo + kx - g.pad_w;
                            let span = ox_hi - ox_lo;
                            acc = acc
                                + grow[ox_lo..ox_hi]
                                    .iter()
                                    .zip(&x[shift..shift + span])
                                    .map(|(&a, &b)| a * b)
                                    .sum::<T>();
                            if need_x {
                                for (o, &gv) in gx[shift..shift + span].iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                    *o = *o + wv * gv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = rbase + ox * g.stride_w + kx - g.pad_w;
                                acc = acc + grow[ox] * x[ix];
                                if need_x {
                                    gx[ix] = gx[ix] + wv * grow[ox];
                                }
                            }
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    (gx, gw)
}

fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}
