//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Every forward operation appends a node to a [`Tape`]; node ids are handed
//! out as [`Var`] handles. Because a node can only reference nodes that
//! already exist, insertion order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Values are immutable once recorded. `backward` takes `&self` and returns a
//! fresh [`Gradients`] table, so repeated backward passes over the same tape
//! are bit-identical.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} has a zero-sized dimension"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for reporting and for the gradient-check fault hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Conv2d,
    Relu,
    Softmax,
    LayerNorm,
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
    Abs,
    Scale,
    AddScalar,
    Sum,
    Reshape,
    AddBias,
    AddChannelBias,
    SliceCols,
    ConcatCols,
    SliceRows,
    ConcatRows,
    SliceFlat,
    ConcatFlat,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<Self> {
        Self::all().iter().copied().find(|k| k.name() == name.trim())
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Maximum => "maximum",
            OpKind::Minimum => "minimum",
            OpKind::Abs => "abs",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
            OpKind::AddBias => "add_bias",
            OpKind::AddChannelBias => "add_channel_bias",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceFlat => "slice_flat",
            OpKind::ConcatFlat => "concat_flat",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }

    pub fn all() -> &'static [OpKind] {
        &ALL_OPS
    }
}

const ALL_OPS: [OpKind; 26] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Conv2d,
    OpKind::Relu,
    OpKind::Softmax,
    OpKind::LayerNorm,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Maximum,
    OpKind::Minimum,
    OpKind::Abs,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::Sum,
    OpKind::Reshape,
    OpKind::AddBias,
    OpKind::AddChannelBias,
    OpKind::SliceCols,
    OpKind::ConcatCols,
    OpKind::SliceRows,
    OpKind::ConcatRows,
    OpKind::SliceFlat,
    OpKind::ConcatFlat,
];

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad_lo: usize,
    h_out: usize,
    w_out: usize,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Conv2d { input: Var, weight: Var, geom: ConvGeom, cols: Vec<f64> },
    Relu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Maximum { a: Var, b: Var },
    Minimum { a: Var, b: Var },
    Abs { x: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    Sum { x: Var },
    Reshape { x: Var },
    AddBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    SliceFlat { x: Var, start: usize },
    ConcatFlat { parts: Vec<Var> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Div { .. } => OpKind::Div,
            Op::Maximum { .. } => OpKind::Maximum,
            Op::Minimum { .. } => OpKind::Minimum,
            Op::Abs { .. } => OpKind::Abs,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Sum { .. } => OpKind::Sum,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::AddChannelBias { .. } => OpKind::AddChannelBias,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::SliceFlat { .. } => OpKind::SliceFlat,
            Op::ConcatFlat { .. } => OpKind::ConcatFlat,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not require grad or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but yields zeros for unreachable nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    corrupt: Option<OpKind>,
    branches: Option<Vec<bool>>,
    replay: Option<(Vec<bool>, usize)>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!("{what} expects a matrix, got shape {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * p];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad_lo as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &input[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad_lo as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let p = g.h_out * g.w_out;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad_lo as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad_lo as isize;
                        if ix >= 0 && ix < g.w as isize {
                            out[base + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output side length of a convolution, or a configuration error when the
/// stride does not tile the padded input exactly.
pub fn conv_output_size(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    conv_output_size_asym(size, k, stride, padding, padding)
}

fn conv_output_size_asym(size: usize, k: usize, stride: usize, lo: usize, hi: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let padded = size + lo + hi;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d output size ({size} + {lo} + {hi} − {k})/{stride} + 1 is not a positive integer"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: perturb the backward rule of one primitive so that gradient
    /// checks can demonstrate they catch a broken rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupt = Some(kind);
    }

    /// Starts logging the branch taken by every element of `relu`,
    /// `maximum`, `minimum` and `abs`, in evaluation order.
    pub fn record_branches(&mut self) {
        self.branches = Some(Vec::new());
    }

    /// Branches taken so far; empty unless recording.
    pub fn branch_pattern(&self) -> &[bool] {
        self.branches.as_deref().unwrap_or(&[])
    }

    /// Forces piecewise ops to follow `pattern` instead of comparing their
    /// inputs, so the tape evaluates one fixed smooth piece. The recorded
    /// pattern still reflects the natural comparisons.
    pub fn replay_branches(&mut self, pattern: Vec<bool>) {
        self.replay = Some((pattern, 0));
    }

    fn take_branches(&mut self, natural: Vec<bool>) -> Vec<bool> {
        if let Some(log) = &mut self.branches {
            log.extend_from_slice(&natural);
        }
        match &mut self.replay {
            Some((pattern, pos)) => {
                let end = (*pos + natural.len()).min(pattern.len());
                let mut forced = pattern[*pos..end].to_vec();
                forced.extend_from_slice(&natural[forced.len()..]);
                *pos += natural.len();
                forced
            }
            None => natural,
        }
    }

    fn tracks_branches(&self) -> bool {
        self.branches.is_some() || self.replay.is_some()
    }

    fn piecewise(&mut self, a: Var, b: Var, what: &str, natural: impl Fn(f64, f64) -> bool) -> Result<Tensor> {
        if !self.tracks_branches() {
            return self.binary(a, b, what, |x, y| if natural(x, y) { x } else { y });
        }
        same_shape(self.value(a), self.value(b), what)?;
        let pick: Vec<bool> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| natural(x, y))
            .collect();
        let pick = self.take_branches(pick);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .zip(pick)
            .map(|((&x, &y), p)| if p { x } else { y })
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    fn unary_piecewise(&mut self, x: Var, natural: fn(f64) -> bool, on: fn(f64) -> f64, off: fn(f64) -> f64) -> Tensor {
        let pick: Vec<bool> = self.value(x).data().iter().map(|&v| natural(v)).collect();
        let pick = if self.tracks_branches() { self.take_branches(pick) } else { pick };
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .zip(pick)
            .map(|(&v, p)| if p { on(v) } else { off(v) })
            .collect();
        Tensor {
            shape: src.shape().to_vec(),
            data,
        }
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}: inner dimensions {k} and {k2} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose { x }, &[x]))
    }

    /// Cross-correlation of a `C_in×H×W` input with a `C_out×C_in×k×k` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_padded(input, weight, stride, padding, padding)
    }

    /// [`conv2d`](Self::conv2d) with `pad_lo` rows/columns of zeros before the
    /// image and `pad_hi` after it. `(0, 1)` gives exact halving for a 3×3
    /// stride-2 kernel on even sizes.
    pub fn conv2d_padded(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        pad_lo: usize,
        pad_hi: usize,
    ) -> Result<Var> {
        let (c_in, h, w) = match self.value(input).shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::Dimension(format!("conv2d input must be C×H×W, got {s:?}"))),
        };
        let (c_out, wc_in, k) = match self.value(weight).shape() {
            [o, i, kh, kw] if kh == kw => (*o, *i, *kh),
            s => {
                return Err(Error::Dimension(format!(
                    "conv2d weight must be C_out×C_in×k×k, got {s:?}"
                )))
            }
        };
        if wc_in != c_in {
            return Err(Error::Dimension(format!(
                "conv2d weight {:?} does not match input {:?}",
                self.value(weight).shape(),
                self.value(input).shape()
            )));
        }
        if k != 1 && k != 3 {
            return Err(Error::Config(format!("conv2d kernel size must be 1 or 3, got {k}")));
        }
        let h_out = conv_output_size_asym(h, k, stride, pad_lo, pad_hi)?;
        let w_out = conv_output_size_asym(w, k, stride, pad_lo, pad_hi)?;
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad_lo,
            h_out,
            w_out,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let p = h_out * w_out;
        let mut out = vec![0.0; c_out * p];
        gemm_nn(self.value(weight).data(), &cols, &mut out, c_out, c_in * k * k, p);
        let t = Tensor::new(vec![c_out, h_out, w_out], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            },
            &[input, weight],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary_piecewise(x, |v| v > 0.0, |v| v, |_| 0.0);
        self.push(t, Op::Relu { x }, &[x])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = src.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(out[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization over the last axis with per-feature gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap_or(&0);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Dimension(format!(
                "layer_norm over {shape:?} needs gain/shift of length {c}"
            )));
        }
        let rows = self.value(x).numel() / c;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div { a, b }, &[a, b]))
    }

    /// Elementwise max; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.piecewise(a, b, "maximum", |x, y| x >= y)?;
        Ok(self.push(t, Op::Maximum { a, b }, &[a, b]))
    }

    /// Elementwise min; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.piecewise(a, b, "minimum", |x, y| x <= y)?;
        Ok(self.push(t, Op::Minimum { a, b }, &[a, b]))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.unary_piecewise(x, |v| v >= 0.0, |v| v, |v| -v);
        self.push(t, Op::Abs { x }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|v| v * factor).collect(),
        };
        self.push(t, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|v| v + c).collect(),
        };
        self.push(t, Op::AddScalar { x }, &[x])
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// `x[..., C] + bias[C]`, broadcasting over all leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.value(x).shape().last().unwrap_or(&0);
        if self.value(bias).numel() != c {
            return Err(Error::Dimension(format!(
                "bias of {} values cannot be added over trailing axis of {:?}",
                self.value(bias).numel(),
                self.value(x).shape()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let src = self.value(x);
        let data = src.data().iter().enumerate().map(|(i, v)| v + b[i % c]).collect();
        let t = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x[C, ...] + bias[C]`: per-channel convolution bias.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).shape()[0];
        if self.value(bias).numel() != c {
            return Err(Error::Dimension(format!(
                "channel bias of {} values does not match {:?}",
                self.value(bias).numel(),
                self.value(x).shape()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let src = self.value(x);
        let per = src.numel() / c;
        let data = src.data().iter().enumerate().map(|(i, v)| v + b[i / per]).collect();
        let t = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        Ok(self.push(t, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Dimension(format!("column slice {start}..{end} of width {c}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::Dimension("concat_cols: row counts differ".into()));
            }
            widths.push(c);
        }
        let r = rows.ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &c) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let t = Tensor::new(vec![r, total], out)?;
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_rows")?;
        if start >= end || end > r {
            return Err(Error::Dimension(format!("row slice {start}..{end} of height {r}")));
        }
        let out = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::new(vec![end - start, c], out)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_rows")?;
            if *cols.get_or_insert(c) != c {
                return Err(Error::Dimension("concat_rows: column counts differ".into()));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let c = cols.ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let t = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Elements `start..start+len` of the flattened tensor, as a vector.
    pub fn slice_flat(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!("flat slice {start}+{len} of {n} elements")));
        }
        let out = self.value(x).data()[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(out), Op::SliceFlat { x, start }, &[x]))
    }

    /// Flattened concatenation into a vector.
    pub fn concat_flat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_flat of nothing".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::vector(out), Op::ConcatFlat { parts: parts.to_vec() }, parts))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_from(loss, &Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: reverse sweep seeded with `seed` at `output`.
    pub fn backward_from(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.numel() != self.value(output).numel() {
            return Err(Error::Dimension(format!(
                "seed of {} elements for output of shape {:?}",
                seed.numel(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.data().to_vec());
        for idx in (0..=output.0).rev() {
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if self.corrupt == Some(node.op.kind()) {
                for v in &mut g {
                    *v *= 1.5;
                }
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => Some(Tensor {
                    shape: n.value.shape().to_vec(),
                    data: g,
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| gemm_nt(g, bv, ga, m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn(av, g, gb, k, m, n));
            }
            Op::Transpose { x } => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => {
                let p = geom.h_out * geom.w_out;
                let kk = geom.c_in * geom.k * geom.k;
                self.accumulate(grads, *weight, |gw| gemm_nt(g, cols, gw, geom.c_out, p, kk));
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; kk * p];
                    gemm_tn(self.value(*weight).data(), g, &mut dcols, kk, geom.c_out, p);
                    self.accumulate(grads, *input, |gi| col2im(&dcols, geom, gi));
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).numel();
                let rows = xhat.len() / c;
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let cf = c as f64;
                    for r in 0..rows {
                        let gxh: Vec<f64> = (0..c).map(|j| g[r * c + j] * gam[j]).collect();
                        let mean_g = gxh.iter().sum::<f64>() / cf;
                        let mean_gx = (0..c).map(|j| gxh[j] * xhat[r * c + j]).sum::<f64>() / cf;
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] * (gxh[j] - mean_g - xhat[r * c + j] * mean_gx);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Maximum { a, b } | Op::Minimum { a, b } => {
                let is_max = matches!(node.op, Op::Maximum { .. });
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let pick_a: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| if is_max { x >= y } else { x <= y })
                    .collect();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if pick_a[i] {
                            ga[i] += g[i];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        if !pick_a[i] {
                            gb[i] += g[i];
                        }
                    }
                });
            }
            Op::Abs { x } => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        } else if xv[i] < 0.0 {
                            gx[i] -= g[i];
                        }
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |gx| {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s * factor;
                    }
                });
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let c = self.value(*bias).numel();
                self.accumulate(grads, *bias, |gb| {
                    for (i, s) in g.iter().enumerate() {
                        gb[i % c] += s;
                    }
                });
            }
            Op::AddChannelBias { x, bias } => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let c = self.value(*bias).numel();
                let per = g.len() / c;
                self.accumulate(grads, *bias, |gb| {
                    for (i, s) in g.iter().enumerate() {
                        gb[i / per] += s;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape()[1];
                let (r, w) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..w {
                            gx[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let (r, total) = (out.shape()[0], out.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    self.accumulate(grads, p, |gp| {
                        for i in 0..r {
                            for j in 0..c {
                                gp[i * c + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.shape()[1];
                self.accumulate(grads, *x, |gx| add_into(&mut gx[start * c..start * c + g.len()], g));
            }
            Op::ConcatRows { parts } | Op::ConcatFlat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceFlat { x, start } => {
                self.accumulate(grads, *x, |gx| add_into(&mut gx[*start..*start + g.len()], g));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut rng = SeededRng::new(1);
        let mut tape = Tape::new();
        let a = tape.constant(random_tensor(&mut rng, &[3, 3]));
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let eye = tape.constant(eye);
        let prod = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(prod), tape.value(a));

        let m = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let r = tape.matmul(m, v).unwrap();
        assert_eq!(tape.value(r).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn conv_identity_and_constant_field() {
        let mut rng = SeededRng::new(2);
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&mut rng, &[1, 5, 5]));
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let ones = tape.constant(Tensor::ones(&[1, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(ones, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 6, 6]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 2, 0), Err(Error::Config(_))));
        let w5 = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(x, w5, 1, 2), Err(Error::Config(_))));
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let neg = tape.constant(Tensor::full(&[4], -3.0));
        let z = tape.relu(neg);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut rng = SeededRng::new(3);
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&mut rng, &[2, 3, 4]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| v[(o * 3 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(tape.softmax(x, 3).is_err());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![0.3, -2.0, 5.0]));
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut rng = SeededRng::new(4);
        let mut tape = Tape::new();
        let a = tape.param(random_tensor(&mut rng, &[3, 4]));
        let b = tape.param(random_tensor(&mut rng, &[4, 2]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c, 1).unwrap();
        let r = tape.relu(s);
        let l = tape.sum(r);
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in ALL_OPS {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
