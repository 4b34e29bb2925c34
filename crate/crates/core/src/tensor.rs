//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients into each node.
//! The tape is rebuilt on every forward pass, which keeps recurrent
//! unrolling over variable sequence lengths trivial.
//!
//! Values are row-major `Vec<f64>`. Vectors are `[1, d]` rows, stacks of
//! vectors are `[n, d]`, images and feature maps are `[C, H, W]`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} implies {expected} elements, got {got}")]
    ShapeData {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called twice on the same graph")]
    BackwardTwice,
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Dense n-dimensional value. Standalone tensors hold parameters and
/// constants; inside a [`Graph`] they double as tape nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeData {
                op: "new",
                expected,
                got: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// A `[1, d]` row vector.
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

/// Handle to a node inside one [`Graph`]. Handles from different graphs
/// must not be mixed; indices are graph-local.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    MatMul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    // `kind` selects the forward/backward rule; scalar operands (numel 1)
    // broadcast against the other side.
    Binary {
        kind: BinaryKind,
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Unary {
        kind: UnaryKind,
        x: TensorId,
        out: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
        out: TensorId,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
        out: TensorId,
    },
    MaxPoolRows {
        x: TensorId,
        // winning row per column, lowest index on ties
        argmax: Vec<usize>,
        out: TensorId,
    },
    SumAll {
        x: TensorId,
        out: TensorId,
    },
    Reshape {
        x: TensorId,
        out: TensorId,
    },
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        out: TensorId,
    },
    RoiAlign {
        fm: TensorId,
        /// `[1, 2]` box center as (col, row) in feature-map cell coordinates.
        center: TensorId,
        side_rows: f64,
        side_cols: f64,
        k: usize,
        out: TensorId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Sigmoid,
    Tanh,
    Relu,
}

/// Recording tape: tensors plus the operations that produced them.
/// Confined to one thread for the duration of a forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    backward_done: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn tensor(&mut self, t: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(t);
        id
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> TensorResult<TensorId> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = requires_grad;
        Ok(self.tensor(t))
    }

    /// Constant `[1, d]` row.
    pub fn row(&mut self, values: &[f64]) -> TensorId {
        self.tensor(Tensor::row(values))
    }

    /// Constant zero tensor.
    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        self.tensor(Tensor::zeros(shape))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, make: impl FnOnce(TensorId) -> Op) -> TensorId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by a forward operation"
        );
        let out = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        self.ops.push(make(out));
        out
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ---- operations ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let aip = da[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &db[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push_op(vec![m, n], out, rg, |out| Op::MatMul { a, b, out }))
    }

    fn binary(&mut self, kind: BinaryKind, op_name: &'static str, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (na, nb) = (self.nodes[a.0].numel(), self.nodes[b.0].numel());
        // equal shapes, or scalar on either side
        let out_shape = if sa == sb {
            sa.clone()
        } else if nb == 1 {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else {
            return Err(TensorError::DimMismatch {
                op: op_name,
                left: sa.clone(),
                right: sb.clone(),
            });
        };
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let n = out_shape.iter().product();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let x = da[if na == 1 { 0 } else { i }];
            let y = db[if nb == 1 { 0 } else { i }];
            out.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            });
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push_op(out_shape, out, rg, |out| Op::Binary { kind, a, b, out }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| match kind {
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Relu => v.max(0.0),
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push_op(shape, data, rg, |out| Op::Unary { kind, x, out })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Relu, x)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| c * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push_op(shape, data, rg, |out| Op::Scale { x, c, out })
    }

    /// Concatenate along `axis`. All other dimensions must agree.
    /// A single input is returned unchanged.
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> TensorResult<TensorId> {
        if inputs.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let rank = self.nodes[inputs[0].0].shape.len();
        if axis >= rank {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let base = self.nodes[inputs[0].0].shape.clone();
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = &self.nodes[id.0].shape;
            let compatible = s.len() == rank
                && s.iter()
                    .zip(base.iter())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::DimMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;

        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let out_row = axis_total * inner;
        let mut out = vec![0.0; outer * out_row];
        let mut offset = 0usize;
        for &id in inputs {
            let node = &self.nodes[id.0];
            let span = node.shape[axis] * inner;
            for o in 0..outer {
                let src = &node.data[o * span..(o + 1) * span];
                out[o * out_row + offset..o * out_row + offset + span].copy_from_slice(src);
            }
            offset += span;
        }
        let rg = self.needs_grad(inputs);
        let inputs = inputs.to_vec();
        Ok(self.push_op(out_shape, out, rg, |out| Op::Concat { inputs, axis, out }))
    }

    /// Column-wise max over the rows of an `[n, d]` tensor, producing `[1, d]`.
    /// Gradient routes to the winning row; ties go to the lowest row index.
    pub fn maxpool_rows(&mut self, x: TensorId) -> TensorResult<TensorId> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(TensorError::EmptyInput { op: "maxpool_rows" });
        }
        let (n, d) = (shape[0], shape[1]);
        let data = &self.nodes[x.0].data;
        let mut out = data[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for r in 1..n {
            for c in 0..d {
                let v = data[r * d + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push_op(vec![1, d], out, rg, |out| Op::MaxPoolRows { x, argmax, out }))
    }

    /// Sum of all elements, as a `[1, 1]` scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push_op(vec![1, 1], vec![s], rg, |out| Op::SumAll { x, out })
    }

    /// Lossless reshape; element count must be preserved.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> TensorResult<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].numel() {
            return Err(TensorError::ShapeData {
                op: "reshape",
                expected: n,
                got: self.nodes[x.0].numel(),
                shape,
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push_op(shape, data, rg, |out| Op::Reshape { x, out }))
    }

    /// 2-D convolution: input `[Cin, H, W]`, weight `[Cout, Cin, kh, kw]`,
    /// bias `[Cout]`. Out-of-bounds reads under padding are zero.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> TensorResult<TensorId> {
        let si = self.nodes[input.0].shape.clone();
        let sw = self.nodes[weight.0].shape.clone();
        let sb = self.nodes[bias.0].shape.clone();
        if si.len() != 3 || sw.len() != 4 || si[0] != sw[1] {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                left: si,
                right: sw,
            });
        }
        if sb.iter().product::<usize>() != sw[0] {
            return Err(TensorError::DimMismatch {
                op: "conv2d",
                left: sw,
                right: sb,
            });
        }
        let (cin, h, w) = (si[0], si[1], si[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; cout * ho * wo];
        {
            let din = &self.nodes[input.0].data;
            let dw = &self.nodes[weight.0].data;
            let db = &self.nodes[bias.0].data;
            for co in 0..cout {
                let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
                plane.fill(db[co]);
                for ci in 0..cin {
                    let ip = &din[ci * h * w..(ci + 1) * h * w];
                    let kbase = (co * cin + ci) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = dw[kbase + ky * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let irow = &ip[iy as usize * w..(iy as usize + 1) * w];
                                let orow = &mut plane[oy * wo..(oy + 1) * wo];
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        orow[ox] += wv * irow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push_op(vec![cout, ho, wo], out, rg, |out| Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
            out,
        }))
    }

    /// ROIAlign: bilinearly sample a `k x k` grid of bin centers from a box
    /// on `fm` (`[C, Hc, Wc]`). `center` is a `[1, 2]` tensor holding
    /// (col, row) in feature-map cell coordinates where integer coordinates
    /// are cell centers; samples outside the map read zero. Differentiable
    /// in both the feature map and the box center.
    pub fn roi_align(
        &mut self,
        fm: TensorId,
        center: TensorId,
        side_rows: f64,
        side_cols: f64,
        k: usize,
    ) -> TensorResult<TensorId> {
        let sf = self.nodes[fm.0].shape.clone();
        let sc = self.nodes[center.0].shape.clone();
        if sf.len() != 3 || self.nodes[center.0].numel() != 2 {
            return Err(TensorError::DimMismatch {
                op: "roi_align",
                left: sf,
                right: sc,
            });
        }
        if k == 0 {
            return Err(TensorError::EmptyInput { op: "roi_align" });
        }
        let (c, hc, wc) = (sf[0], sf[1], sf[2]);
        let cx = self.nodes[center.0].data[0];
        let cy = self.nodes[center.0].data[1];
        let top = cy - side_rows / 2.0;
        let left = cx - side_cols / 2.0;
        let mut out = vec![0.0; c * k * k];
        {
            let dfm = &self.nodes[fm.0].data;
            for a in 0..k {
                let y = top + (a as f64 + 0.5) * side_rows / k as f64;
                for b in 0..k {
                    let x = left + (b as f64 + 0.5) * side_cols / k as f64;
                    for ch in 0..c {
                        out[(ch * k + a) * k + b] =
                            bilinear(&dfm[ch * hc * wc..(ch + 1) * hc * wc], hc, wc, y, x);
                    }
                }
            }
        }
        let rg = self.needs_grad(&[fm, center]);
        Ok(self.push_op(vec![c, k, k], out, rg, |out| Op::RoiAlign {
            fm,
            center,
            side_rows,
            side_cols,
            k,
            out,
        }))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Populates `grad` on every node
    /// reachable from `loss` that requires gradients. May be called once
    /// per graph.
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if !self.nodes[loss.0].is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.backward_done = true;
        // grad buffers for the whole tape; cheap relative to the values
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.numel()]).collect();
        grads[loss.0][0] = 1.0;

        for op in self.ops.clone().iter().rev() {
            self.backprop_op(op, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.grad = Some(g);
            }
        }
        Ok(())
    }

    fn backprop_op(&self, op: &Op, grads: &mut [Vec<f64>]) {
        match op {
            Op::MatMul { a, b, out } => {
                let m = self.nodes[a.0].shape[0];
                let k = self.nodes[a.0].shape[1];
                let n = self.nodes[b.0].shape[1];
                let go = std::mem::take(&mut grads[out.0]);
                let da = &self.nodes[a.0].data;
                let db = &self.nodes[b.0].data;
                let sign = if fault::matmul_fault_enabled() { -1.0 } else { 1.0 };
                // dA = dC . B^T
                {
                    let ga = &mut grads[a.0];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += go[i * n + j] * db[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                // dB = A^T . dC
                {
                    let gb = &mut grads[b.0];
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += da[i * k + p] * go[i * n + j];
                            }
                            gb[p * n + j] += sign * s;
                        }
                    }
                }
                grads[out.0] = go;
            }
            Op::Binary { kind, a, b, out } => {
                let go = std::mem::take(&mut grads[out.0]);
                let na = self.nodes[a.0].numel();
                let nb = self.nodes[b.0].numel();
                match kind {
                    BinaryKind::Add => {
                        accumulate(&mut grads[a.0], &go, na, 1.0);
                        accumulate(&mut grads[b.0], &go, nb, 1.0);
                    }
                    BinaryKind::Sub => {
                        accumulate(&mut grads[a.0], &go, na, 1.0);
                        accumulate(&mut grads[b.0], &go, nb, -1.0);
                    }
                    BinaryKind::Mul => {
                        let db = &self.nodes[b.0].data;
                        let da = &self.nodes[a.0].data;
                        for (i, &g) in go.iter().enumerate() {
                            let bi = db[if nb == 1 { 0 } else { i }];
                            grads[a.0][if na == 1 { 0 } else { i }] += g * bi;
                        }
                        for (i, &g) in go.iter().enumerate() {
                            let ai = da[if na == 1 { 0 } else { i }];
                            grads[b.0][if nb == 1 { 0 } else { i }] += g * ai;
                        }
                    }
                }
                grads[out.0] = go;
            }
            Op::Unary { kind, x, out } => {
                let go = std::mem::take(&mut grads[out.0]);
                {
                    let dout = &self.nodes[out.0].data;
                    let din = &self.nodes[x.0].data;
                    let gx = &mut grads[x.0];
                    for i in 0..go.len() {
                        let d = match kind {
                            UnaryKind::Sigmoid => dout[i] * (1.0 - dout[i]),
                            UnaryKind::Tanh => 1.0 - dout[i] * dout[i],
                            UnaryKind::Relu => {
                                if din[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        gx[i] += go[i] * d;
                    }
                }
                grads[out.0] = go;
            }
            Op::Scale { x, c, out } => {
                let go = std::mem::take(&mut grads[out.0]);
                for (g, &v) in grads[x.0].iter_mut().zip(go.iter()) {
                    *g += c * v;
                }
                grads[out.0] = go;
            }
            Op::Concat { inputs, axis, out } => {
                let go = std::mem::take(&mut grads[out.0]);
                let out_shape = &self.nodes[out.0].shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_row = out_shape[*axis] * inner;
                let mut offset = 0usize;
                for &id in inputs {
                    let span = self.nodes[id.0].shape[*axis] * inner;
                    for o in 0..outer {
                        let src = &go[o * out_row + offset..o * out_row + offset + span];
                        for (g, &v) in grads[id.0][o * span..(o + 1) * span].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                    offset += span;
                }
                grads[out.0] = go;
            }
            Op::MaxPoolRows { x, argmax, out } => {
                let go = std::mem::take(&mut grads[out.0]);
                let d = argmax.len();
                for (c, &row) in argmax.iter().enumerate() {
                    grads[x.0][row * d + c] += go[c];
                }
                grads[out.0] = go;
            }
            Op::SumAll { x, out } => {
                let g = grads[out.0][0];
                for v in grads[x.0].iter_mut() {
                    *v += g;
                }
            }
            Op::Reshape { x, out } => {
                let go = std::mem::take(&mut grads[out.0]);
                for (g, &v) in grads[x.0].iter_mut().zip(go.iter()) {
                    *g += v;
                }
                grads[out.0] = go;
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                out,
            } => {
                let go = std::mem::take(&mut grads[out.0]);
                let si = &self.nodes[input.0].shape;
                let sw = &self.nodes[weight.0].shape;
                let so = &self.nodes[out.0].shape;
                let (cin, h, w) = (si[0], si[1], si[2]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ho, wo) = (so[1], so[2]);
                let din = &self.nodes[input.0].data;
                let dw = &self.nodes[weight.0].data;
                let (s, p) = (*stride, *pad);
                for co in 0..cout {
                    let gplane = &go[co * ho * wo..(co + 1) * ho * wo];
                    grads[bias.0][co] += gplane.iter().sum::<f64>();
                    for ci in 0..cin {
                        let kbase = (co * cin + ci) * kh * kw;
                        let ibase = ci * h * w;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = dw[kbase + ky * kw + kx];
                                let mut gw = 0.0;
                                for oy in 0..ho {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let iy = iy as usize;
                                    for ox in 0..wo {
                                        let ix = (ox * s + kx) as isize - p as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let g = gplane[oy * wo + ox];
                                        gw += g * din[ibase + iy * w + ix as usize];
                                        grads[input.0][ibase + iy * w + ix as usize] += g * wv;
                                    }
                                }
                                grads[weight.0][kbase + ky * kw + kx] += gw;
                            }
                        }
                    }
                }
                grads[out.0] = go;
            }
            Op::RoiAlign {
                fm,
                center,
                side_rows,
                side_cols,
                k,
                out,
            } => {
                let go = std::mem::take(&mut grads[out.0]);
                let sf = &self.nodes[fm.0].shape;
                let (c, hc, wc) = (sf[0], sf[1], sf[2]);
                let cx = self.nodes[center.0].data[0];
                let cy = self.nodes[center.0].data[1];
                let top = cy - side_rows / 2.0;
                let left = cx - side_cols / 2.0;
                let dfm = &self.nodes[fm.0].data;
                let k = *k;
                let (mut gcx, mut gcy) = (0.0, 0.0);
                for a in 0..k {
                    let y = top + (a as f64 + 0.5) * side_rows / k as f64;
                    for b in 0..k {
                        let x = left + (b as f64 + 0.5) * side_cols / k as f64;
                        let y0 = y.floor();
                        let x0 = x.floor();
                        let dy = y - y0;
                        let dx = x - x0;
                        let (y0, x0) = (y0 as isize, x0 as isize);
                        let read = |plane: &[f64], yy: isize, xx: isize| -> f64 {
                            if yy >= 0 && yy < hc as isize && xx >= 0 && xx < wc as isize {
                                plane[yy as usize * wc + xx as usize]
                            } else {
                                0.0
                            }
                        };
                        for ch in 0..c {
                            let g = go[(ch * k + a) * k + b];
                            if g == 0.0 {
                                continue;
                            }
                            let plane_vals = &dfm[ch * hc * wc..(ch + 1) * hc * wc];
                            let f00 = read(plane_vals, y0, x0);
                            let f01 = read(plane_vals, y0, x0 + 1);
                            let f10 = read(plane_vals, y0 + 1, x0);
                            let f11 = read(plane_vals, y0 + 1, x0 + 1);
                            // d(value)/d(x), d(value)/d(y) of the bilinear form
                            gcx += g * ((1.0 - dy) * (f01 - f00) + dy * (f11 - f10));
                            gcy += g * ((1.0 - dx) * (f10 - f00) + dx * (f11 - f01));
                            let gf = &mut grads[fm.0][ch * hc * wc..(ch + 1) * hc * wc];
                            let mut scatter = |yy: isize, xx: isize, wgt: f64| {
                                if yy >= 0 && yy < hc as isize && xx >= 0 && xx < wc as isize {
                                    gf[yy as usize * wc + xx as usize] += g * wgt;
                                }
                            };
                            scatter(y0, x0, (1.0 - dy) * (1.0 - dx));
                            scatter(y0, x0 + 1, (1.0 - dy) * dx);
                            scatter(y0 + 1, x0, dy * (1.0 - dx));
                            scatter(y0 + 1, x0 + 1, dy * dx);
                        }
                    }
                }
                grads[center.0][0] += gcx;
                grads[center.0][1] += gcy;
                grads[out.0] = go;
            }
        }
    }
}

/// Bilinear read at continuous (row y, col x); integer coordinates are cell
/// centers and anything outside the grid reads zero.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let read = |yy: isize, xx: isize| -> f64 {
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            plane[yy as usize * w + xx as usize]
        } else {
            0.0
        }
    };
    (1.0 - dy) * (1.0 - dx) * read(y0, x0)
        + (1.0 - dy) * dx * read(y0, x0 + 1)
        + dy * (1.0 - dx) * read(y0 + 1, x0)
        + dy * dx * read(y0 + 1, x0 + 1)
}

fn accumulate(dst: &mut [f64], go: &[f64], numel: usize, sign: f64) {
    if numel == 1 {
        dst[0] += sign * go.iter().sum::<f64>();
    } else {
        for (d, &g) in dst.iter_mut().zip(go.iter()) {
            *d += sign * g;
        }
    }
}

/// Fault-injection hook for verifying that the gradient checker catches a
/// broken backward rule. Only the `gradcheck --inject-fault` path sets it.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static MATMUL_SIGN_FAULT: Cell<bool> = const { Cell::new(false) };
    }

    pub fn set_matmul_backward_sign_fault(on: bool) {
        MATMUL_SIGN_FAULT.with(|f| f.set(on));
    }

    pub(super) fn matmul_fault_enabled() -> bool {
        MATMUL_SIGN_FAULT.with(|f| f.get())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.leaf(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
        let v = g.leaf(vec![2, 1], vec![3.0, 4.0], false).unwrap();
        let out = g.matmul(i2, v).unwrap();
        assert_eq!(g.data(out), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_zero() {
        let mut g = Graph::new();
        let a = g.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
        let z = g.leaf(vec![2, 1], vec![0.0, 0.0], false).unwrap();
        let out = g.matmul(a, z).unwrap();
        assert_eq!(g.data(out), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(vec![2, 3], vec![0.0; 6], false).unwrap();
        let b = g.leaf(vec![2, 2], vec![0.0; 4], false).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn concat_axis0_axis1() {
        let mut g = Graph::new();
        let a = g.row(&[1.0, 2.0]);
        let b = g.row(&[3.0, 4.0]);
        let c0 = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape(c0), &[2, 2]);
        assert_eq!(g.data(c0), &[1.0, 2.0, 3.0, 4.0]);
        let c1 = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c1), &[1, 4]);
        assert_eq!(g.data(c1), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_single_input_is_identity() {
        let mut g = Graph::new();
        let a = g.row(&[5.0, 6.0]);
        let c = g.concat(&[a], 0).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn maxpool_rows_basic() {
        let mut g = Graph::new();
        let x = g.leaf(vec![2, 2], vec![1.0, 5.0, 3.0, 2.0], false).unwrap();
        let out = g.maxpool_rows(x).unwrap();
        assert_eq!(g.data(out), &[3.0, 5.0]);
    }

    #[test]
    fn maxpool_single_row_is_identity() {
        let mut g = Graph::new();
        let x = g.row(&[7.0, 8.0]);
        let out = g.maxpool_rows(x).unwrap();
        assert_eq!(g.data(out), &[7.0, 8.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.row(&[0.0]);
        let y = g.sigmoid(x);
        assert_eq!(g.data(y), &[0.5]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut g = Graph::new();
        let x = g.row(&[1.5, -2.0, 0.25]);
        let ones = g.row(&[1.0, 1.0, 1.0]);
        let y = g.mul(x, ones).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g
            .leaf(vec![1, 3], vec![1.0, 2.0, 3.0], true)
            .unwrap();
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1, 3], vec![1.0, 2.0, 3.0], true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1, 1], vec![2.0], true).unwrap();
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn backward_non_scalar_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1, 2], vec![2.0, 1.0], true).unwrap();
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn maxpool_backward_routes_to_lowest_tied_row() {
        let mut g = Graph::new();
        let x = g
            .leaf(vec![3, 2], vec![5.0, 1.0, 5.0, 2.0, 0.0, 2.0], true)
            .unwrap();
        let p = g.maxpool_rows(x).unwrap();
        let s = g.sum_all(p);
        g.backward(s).unwrap();
        // col 0 ties rows 0 and 1 -> lowest index 0; col 1 ties rows 1 and 2 -> row 1
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_backward_preserves_column_mass() {
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..24).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let x = g.leaf(vec![6, 4], vals, true).unwrap();
        let p = g.maxpool_rows(x).unwrap();
        let w = g.row(&[1.0, -2.0, 3.0, 0.5]);
        let weighted = g.mul(p, w).unwrap();
        let s = g.sum_all(weighted);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        let mass: f64 = grad.iter().map(|v| v.abs()).sum();
        assert!(close(mass, 1.0 + 2.0 + 3.0 + 0.5, 1e-12));
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1, 3], vec![1.0, 2.0, 3.0], true).unwrap();
        let c = g.tensor(Tensor::scalar(2.0));
        let y = g.mul(x, c).unwrap();
        assert_eq!(g.data(y), &[2.0, 4.0, 6.0]);
        let z = g.add(y, c).unwrap();
        assert_eq!(g.data(z), &[4.0, 6.0, 8.0]);
        let mismatch = g.row(&[1.0, 2.0]);
        assert!(g.add(x, mismatch).is_err());
    }

    #[test]
    fn conv2d_shape_and_zero_bias_linearity() {
        let mut g = Graph::new();
        let img = g.leaf(vec![1, 8, 8], vec![0.0; 64], false).unwrap();
        let w = g.leaf(vec![2, 1, 3, 3], vec![0.3; 18], false).unwrap();
        let b = g.leaf(vec![2], vec![0.0, 0.0], false).unwrap();
        let out = g.conv2d(img, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(out), &[2, 4, 4]);
        assert!(g.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn roi_align_constant_map() {
        let mut g = Graph::new();
        let fm = g.leaf(vec![1, 4, 4], vec![3.5; 16], false).unwrap();
        let center = g.row(&[1.5, 1.5]);
        let out = g.roi_align(fm, center, 2.0, 2.0, 2).unwrap();
        for &v in g.data(out) {
            assert!(close(v, 3.5, 1e-15));
        }
    }

    #[test]
    fn roi_align_k1_center_between_four_cells() {
        let mut g = Graph::new();
        // 2x2 map with values {0,0,0,4}; a K=1 box centered between the four
        // cells samples their bilinear average
        let fm = g
            .leaf(vec![1, 2, 2], vec![0.0, 0.0, 0.0, 4.0], false)
            .unwrap();
        let center = g.row(&[0.5, 0.5]);
        let out = g.roi_align(fm, center, 1.0, 1.0, 1).unwrap();
        assert!(close(g.data(out)[0], 1.0, 1e-15));
    }

    #[test]
    fn sum_mul_chain_matches_hand_gradient() {
        // loss = sum((x - y) .* (x - y)) -> d/dx = 2(x - y)
        let mut g = Graph::new();
        let x = g.leaf(vec![1, 2], vec![3.0, -1.0], true).unwrap();
        let y = g.row(&[1.0, 1.0]);
        let d = g.sub(x, y).unwrap();
        let sq = g.mul(d, d).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, -4.0]);
    }
}
