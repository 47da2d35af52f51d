//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every primitive as a node holding its forward value and
//! whatever it needs to replay the adjoint. [`Var`] is a plain index into the
//! tape, so it is `Copy` and cheap to pass around. [`Tape::backward`] seeds the
//! scalar loss with 1 and walks the nodes in reverse, accumulating (`+=`) into
//! each parent's gradient.
//!
//! Nodes that do not depend on any trainable leaf are marked as not needing a
//! gradient and are skipped during the reverse sweep.
//!
//! Most ops interpret their operand as a matrix whose row width is the last
//! extent and whose row count is the product of the leading extents.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::{inverse_sigmoid, MAX_EXTENT, MIN_EXTENT};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Name of a primitive; used by gradient-check reports and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddBias,
    Scale,
    Relu,
    Sigmoid,
    Softmax,
    LogSoftmax,
    LayerNorm,
    L2Normalize,
    Attention,
    ConcatRows,
    SliceRows,
    GatherRows,
    RowMix,
    Reshape,
    Conv2d,
    ApplyDelta,
    GiouLoss,
    L1Loss,
    FocalLoss,
    Sum,
    Pick,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::L2Normalize,
        OpKind::Attention,
        OpKind::ConcatRows,
        OpKind::SliceRows,
        OpKind::GatherRows,
        OpKind::RowMix,
        OpKind::Reshape,
        OpKind::Conv2d,
        OpKind::ApplyDelta,
        OpKind::GiouLoss,
        OpKind::L1Loss,
        OpKind::FocalLoss,
        OpKind::Sum,
        OpKind::Pick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBias => "add_bias",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Attention => "attention",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows => "slice_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::RowMix => "row_mix",
            OpKind::Reshape => "reshape",
            OpKind::Conv2d => "conv2d",
            OpKind::ApplyDelta => "apply_delta",
            OpKind::GiouLoss => "giou_loss",
            OpKind::L1Loss => "l1_loss",
            OpKind::FocalLoss => "focal_loss",
            OpKind::Sum => "sum",
            OpKind::Pick => "pick",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Geometry of a 2-D convolution over an `H×W×C` (channels-last) input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }
}

/// Sparse linear map from input rows to output rows: output row `r` is
/// `sum_i w_i * input[src_i]` over `entries[offsets[r]..offsets[r + 1]]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMixPlan<T> {
    pub offsets: Vec<usize>,
    pub entries: Vec<(usize, T)>,
}

impl<T: Scalar> RowMixPlan<T> {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    pub fn push_row(&mut self, taps: impl IntoIterator<Item = (usize, T)>) {
        self.entries.extend(taps);
        self.offsets.push(self.entries.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn extend(&mut self, other: &RowMixPlan<T>) {
        for r in 0..other.rows() {
            self.push_row(other.entries[other.offsets[r]..other.offsets[r + 1]].iter().copied());
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddBias {
        a: usize,
        b: usize,
        cols: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Softmax {
        a: usize,
        cols: usize,
    },
    LogSoftmax {
        a: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        cols: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        a: usize,
        cols: usize,
        norms: Vec<T>,
    },
    Attention(Box<AttentionSaved<T>>),
    ConcatRows {
        parts: Vec<(usize, usize)>,
    },
    SliceRows {
        a: usize,
        start: usize,
        cols: usize,
    },
    GatherRows {
        a: usize,
        idx: Vec<usize>,
        cols: usize,
    },
    RowMix {
        a: usize,
        cols: usize,
        plan: RowMixPlan<T>,
    },
    Reshape {
        a: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        col: Vec<T>,
    },
    ApplyDelta {
        delta: usize,
        clamped: Vec<bool>,
    },
    GiouLoss {
        pred: usize,
        target: Vec<T>,
    },
    L1Loss {
        pred: usize,
        target: Vec<T>,
    },
    FocalLoss {
        logits: usize,
        target: Vec<T>,
        alpha: T,
        gamma: T,
    },
    Sum {
        a: usize,
    },
    Pick {
        a: usize,
        idx: Vec<usize>,
    },
}

struct AttentionSaved<T> {
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    ranges: Vec<(usize, usize)>,
    probs: Vec<T>,
    prob_offsets: Vec<usize>,
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Attention(_) => OpKind::Attention,
            Op::ConcatRows { .. } => OpKind::ConcatRows,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::RowMix { .. } => OpKind::RowMix,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ApplyDelta { .. } => OpKind::ApplyDelta,
            Op::GiouLoss { .. } => OpKind::GiouLoss,
            Op::L1Loss { .. } => OpKind::L1Loss,
            Op::FocalLoss { .. } => OpKind::FocalLoss,
            Op::Sum { .. } => OpKind::Sum,
            Op::Pick { .. } => OpKind::Pick,
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when `v` is off the loss path.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}

/// Single-threaded recording of a forward computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    fault: Cell<Option<OpKind>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (n / cols.max(1), cols)
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

// out[m×n] += a[m×k] · b[k×n]
fn gemm<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[k×n] += aᵀ · g, with a[m×k], g[m×n]
fn gemm_tn<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

// out[m×k] += g · bᵀ, with g[m×n], b[k×n]
fn gemm_nt<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    let mut col = vec![T::zero(); oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut col[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let dst = (ky * g.kernel + kx) * g.in_c;
                    row[dst..dst + g.in_c].copy_from_slice(&x[src..src + g.in_c]);
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(dcol: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcol[(oy * ow + ox) * patch..(oy * ow + ox + 1) * patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let src = (ky * g.kernel + kx) * g.in_c;
                    for c in 0..g.in_c {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

struct GiouParts<T> {
    loss: T,
    grad: [T; 4],
}

// 1 - GIoU for cxcywh boxes and its gradient w.r.t. the predicted box.
fn giou_loss_and_grad<T: Scalar>(p: &[T], t: &[T]) -> GiouParts<T> {
    let half = T::from_f64(0.5);
    let (pcx, pcy, pw, ph) = (p[0], p[1], p[2], p[3]);
    let (px1, px2, py1, py2) = (pcx - half * pw, pcx + half * pw, pcy - half * ph, pcy + half * ph);
    let (tx1, tx2, ty1, ty2) = (
        t[0] - half * t[2],
        t[0] + half * t[2],
        t[1] - half * t[3],
        t[1] + half * t[3],
    );
    let zero = T::zero();
    let one = T::one();
    let iw_raw = px2.min(tx2) - px1.max(tx1);
    let ih_raw = py2.min(ty2) - py1.max(ty1);
    let iw = iw_raw.max(zero);
    let ih = ih_raw.max(zero);
    let inter = iw * ih;
    let ap = pw * ph;
    let at = t[2] * t[3];
    let union = ap + at - inter;
    let ew = px2.max(tx2) - px1.min(tx1);
    let eh = py2.max(ty2) - py1.min(ty1);
    let encl = ew * eh;
    let loss = T::from_f64(2.0) - inter / union - union / encl;

    // Partials of L = 2 - I/U - U/E with U = Ap + At - I.
    let d_u = inter / (union * union) - one / encl;
    let d_i = -one / union - d_u;
    let d_ap = d_u;
    let d_e = union / (encl * encl);

    let ind = |c: bool| if c { one } else { zero };
    // Intersection extents.
    let (diw_dx1, diw_dx2) = if iw_raw > zero {
        (-ind(px1 >= tx1), ind(px2 <= tx2))
    } else {
        (zero, zero)
    };
    let (dih_dy1, dih_dy2) = if ih_raw > zero {
        (-ind(py1 >= ty1), ind(py2 <= ty2))
    } else {
        (zero, zero)
    };
    // Enclosure extents.
    let (dew_dx1, dew_dx2) = (-ind(px1 <= tx1), ind(px2 >= tx2));
    let (deh_dy1, deh_dy2) = (-ind(py1 <= ty1), ind(py2 >= ty2));

    let g_x1 = d_i * ih * diw_dx1 + d_e * eh * dew_dx1;
    let g_x2 = d_i * ih * diw_dx2 + d_e * eh * dew_dx2;
    let g_y1 = d_i * iw * dih_dy1 + d_e * ew * deh_dy1;
    let g_y2 = d_i * iw * dih_dy2 + d_e * ew * deh_dy2;
    let g_cx = g_x1 + g_x2;
    let g_cy = g_y1 + g_y2;
    let g_w = half * (g_x2 - g_x1) + d_ap * ph;
    let g_h = half * (g_y2 - g_y1) + d_ap * pw;
    GiouParts {
        loss,
        grad: [g_cx, g_cy, g_w, g_h],
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    /// Test hook: the adjoint of every node of `kind` is scaled by 1.5.
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn ng(&self, vars: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|&v| nodes[v].needs_grad)
    }

    /// Trainable leaf holding a copy of `t`.
    pub fn param(&self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Ref<'_, [T]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn to_vec(&self, v: Var) -> Vec<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        Tensor::new(&nodes[v.0].shape, nodes[v.0].value.clone()).expect("node shape invariant")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value[0]
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes.borrow()[v.0].op.kind()
    }

    // ---------------------------------------------------------------- algebra

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        {
            let nodes = self.nodes.borrow();
            gemm(&nodes[a.0].value, &nodes[b.0].value, &mut out, m, k, n);
        }
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![T::zero(); rows * cols];
        {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = x[r * cols + c];
                }
            }
        }
        let ng = self.ng(&[a.0]);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a: a.0, rows, cols }, ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let nodes = self.nodes.borrow();
        nodes[a.0]
            .value
            .iter()
            .zip(&nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Vec<T> {
        self.nodes.borrow()[a.0].value.iter().map(|&x| f(x)).collect()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, ng))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::Sub { a: a.0, b: b.0 }, ng))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    /// `a[.., d] + b[d]`, broadcasting `b` over rows.
    pub fn add_bias(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (_, cols) = rows_cols(&sa);
        if sb.iter().product::<usize>() != cols {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let bias = &nodes[b.0].value;
            nodes[a.0]
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bias[i % cols])
                .collect()
        };
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(sa, out, Op::AddBias { a: a.0, b: b.0, cols }, ng))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.map(a, |x| x * c);
        let ng = self.ng(&[a.0]);
        self.push(self.shape(a), out, Op::Scale { a: a.0, c }, ng)
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(T::zero()));
        let ng = self.ng(&[a.0]);
        self.push(self.shape(a), out, Op::Relu { a: a.0 }, ng)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        let ng = self.ng(&[a.0]);
        self.push(self.shape(a), out, Op::Sigmoid { a: a.0 }, ng)
    }

    fn check_finite(&self, op: &str, a: Var) -> Result<()> {
        if self.nodes.borrow()[a.0].value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{op} input is not finite")));
        }
        Ok(())
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let shape = self.shape(a);
        let (rows, cols) = rows_cols(&shape);
        let mut out = self.to_vec(a);
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.ng(&[a.0]);
        Ok(self.push(shape, out, Op::Softmax { a: a.0, cols }, ng))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        self.check_finite("log_softmax", a)?;
        let shape = self.shape(a);
        let (rows, cols) = rows_cols(&shape);
        let mut out = self.to_vec(a);
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let ng = self.ng(&[a.0]);
        Ok(self.push(shape, out, Op::LogSoftmax { a: a.0, cols }, ng))
    }

    /// Row-wise layer normalisation with affine gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x);
        let (rows, cols) = rows_cols(&shape);
        if cols < 2 {
            return Err(Error::Config("layer_norm needs at least 2 features".into()));
        }
        for p in [gain, bias] {
            let sp = self.shape(p);
            if sp.iter().product::<usize>() != cols {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: sp,
                });
            }
        }
        let eps = T::from_f64(eps);
        let n = T::from_f64(cols as f64);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let g = &nodes[gain.0].value;
            let b = &nodes[bias.0].value;
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..cols {
                    let h = (row[c] - mean) * rs;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = h * g[c] + b[c];
                }
            }
        }
        let ng = self.ng(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                cols,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let (rows, cols) = rows_cols(&shape);
        let mut out = self.to_vec(a);
        let mut norms = vec![T::zero(); rows];
        let floor = T::from_f64(1e-12);
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms[r] = nrm;
            for v in row.iter_mut() {
                *v /= nrm;
            }
        }
        let ng = self.ng(&[a.0]);
        self.push(shape, out, Op::L2Normalize { a: a.0, cols, norms }, ng)
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q[nq×d]`, `k[nk×d]`, `v[nk×d]`. Query row `r` attends to the key rows
    /// `ranges[r].0 .. ranges[r].0 + ranges[r].1`; heads split the feature
    /// axis into contiguous blocks of `d / heads`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, ranges: Vec<(usize, usize)>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(Error::Dimension {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let (nq, d, nk) = (sq[0], sq[1], sk[0]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("feature dim {d} not divisible by {heads} heads")));
        }
        if ranges.len() != nq || ranges.iter().any(|&(s, l)| l == 0 || s + l > nk) {
            return Err(Error::Config("attention key ranges invalid".into()));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut prob_offsets = Vec::with_capacity(nq + 1);
        let mut total = 0;
        for &(_, l) in &ranges {
            prob_offsets.push(total);
            total += l * heads;
        }
        prob_offsets.push(total);
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); nq * d];
        {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            for r in 0..nq {
                let (start, len) = ranges[r];
                for h in 0..heads {
                    let hs = h * dh;
                    let qrow = &qv[r * d + hs..r * d + hs + dh];
                    let p = &mut probs[prob_offsets[r] + h * len..prob_offsets[r] + (h + 1) * len];
                    let mut mx = T::neg_infinity();
                    for j in 0..len {
                        let krow = &kv[(start + j) * d + hs..(start + j) * d + hs + dh];
                        let mut s = T::zero();
                        for (&a, &b) in qrow.iter().zip(krow) {
                            s += a * b;
                        }
                        p[j] = s * scale;
                        mx = mx.max(p[j]);
                    }
                    let mut z = T::zero();
                    for pj in p.iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    for pj in p.iter_mut() {
                        *pj /= z;
                    }
                    let orow = &mut out[r * d + hs..r * d + hs + dh];
                    for j in 0..len {
                        let vrow = &vv[(start + j) * d + hs..(start + j) * d + hs + dh];
                        let w = p[j];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[q.0, k.0, v.0]);
        Ok(self.push(
            vec![nq, d],
            out,
            Op::Attention(Box::new(AttentionSaved {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                ranges,
                probs,
                prob_offsets,
            })),
            ng,
        ))
    }

    // ------------------------------------------------------------- structural

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat_rows needs at least one part".into()));
        }
        let cols = rows_cols(&self.shape(parts[0])).1;
        let mut out = Vec::new();
        let mut meta = Vec::with_capacity(parts.len());
        {
            let nodes = self.nodes.borrow();
            for p in parts {
                let (r, c) = rows_cols(&nodes[p.0].shape);
                if c != cols {
                    return Err(Error::Dimension {
                        op: "concat_rows",
                        lhs: nodes[parts[0].0].shape.clone(),
                        rhs: nodes[p.0].shape.clone(),
                    });
                }
                out.extend_from_slice(&nodes[p.0].value);
                meta.push((p.0, r * c));
            }
        }
        let rows = out.len() / cols;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows { parts: meta }, ng))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        let (rows, cols) = rows_cols(&s);
        if len == 0 || start + len > rows {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let out = self.nodes.borrow()[a.0].value[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(&[a.0]);
        Ok(self.push(vec![len, cols], out, Op::SliceRows { a: a.0, start, cols }, ng))
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        let (rows, cols) = rows_cols(&s);
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: s,
                rhs: idx.to_vec(),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            for &i in idx {
                out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
            }
        }
        let ng = self.ng(&[a.0]);
        Ok(self.push(
            vec![idx.len(), cols],
            out,
            Op::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
                cols,
            },
            ng,
        ))
    }

    /// Applies a sparse row-mixing plan (bilinear sampling, pooling).
    pub fn row_mix(&self, a: Var, plan: RowMixPlan<T>) -> Result<Var> {
        let s = self.shape(a);
        let (rows, cols) = rows_cols(&s);
        if plan.rows() == 0 || plan.entries.iter().any(|&(src, _)| src >= rows) {
            return Err(Error::Dimension {
                op: "row_mix",
                lhs: s,
                rhs: vec![plan.rows()],
            });
        }
        let mut out = vec![T::zero(); plan.rows() * cols];
        {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            for r in 0..plan.rows() {
                let orow = &mut out[r * cols..(r + 1) * cols];
                for &(src, w) in &plan.entries[plan.offsets[r]..plan.offsets[r + 1]] {
                    for (o, &xv) in orow.iter_mut().zip(&x[src * cols..(src + 1) * cols]) {
                        *o += w * xv;
                    }
                }
            }
        }
        let ng = self.ng(&[a.0]);
        Ok(self.push(vec![plan.rows(), cols], out, Op::RowMix { a: a.0, cols, plan }, ng))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: s,
                rhs: shape.to_vec(),
            });
        }
        let out = self.to_vec(a);
        let ng = self.ng(&[a.0]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a: a.0 }, ng))
    }

    /// Channels-last convolution; `w` is `[k·k·C_in × C_out]`, `b` is `[C_out]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 2 {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let geom = ConvGeom {
            in_h: sx[0],
            in_w: sx[1],
            in_c: sx[2],
            out_c: sw[1],
            kernel,
            stride,
            pad,
        };
        if sw[0] != geom.patch() || sb.iter().product::<usize>() != geom.out_c {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sx[0] + 2 * pad < kernel || sx[1] + 2 * pad < kernel {
            return Err(Error::Config("conv2d kernel larger than padded input".into()));
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (col, out) = {
            let nodes = self.nodes.borrow();
            let col = im2col(&nodes[x.0].value, &geom);
            let bias = &nodes[b.0].value;
            let mut out: Vec<T> = (0..oh * ow * geom.out_c).map(|i| bias[i % geom.out_c]).collect();
            gemm(&col, &nodes[w.0].value, &mut out, oh * ow, geom.patch(), geom.out_c);
            (col, out)
        };
        let ng = self.ng(&[x.0, w.0, b.0]);
        Ok(self.push(
            vec![oh, ow, geom.out_c],
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
                col,
            },
            ng,
        ))
    }

    // ------------------------------------------------------- box and losses

    /// Refines constant `base` boxes (`[n×4]` cxcywh) by logit-space offsets.
    pub fn apply_delta(&self, delta: Var, base: &[T]) -> Result<Var> {
        let s = self.shape(delta);
        if s.len() != 2 || s[1] != 4 || base.len() != s[0] * 4 {
            return Err(Error::Dimension {
                op: "apply_delta",
                lhs: s,
                rhs: vec![base.len()],
            });
        }
        let lo = T::from_f64(MIN_EXTENT);
        let hi = T::from_f64(MAX_EXTENT);
        let mut clamped = vec![false; base.len()];
        let mut out = vec![T::zero(); base.len()];
        {
            let nodes = self.nodes.borrow();
            let d = &nodes[delta.0].value;
            for i in 0..base.len() {
                let z = T::from_f64(inverse_sigmoid(base[i].as_f64())) + d[i];
                let mut y = sigmoid(z);
                if i % 4 >= 2 && (y < lo || y > hi) {
                    y = y.max(lo).min(hi);
                    clamped[i] = true;
                }
                out[i] = y;
            }
        }
        let ng = self.ng(&[delta.0]);
        Ok(self.push(
            s,
            out,
            Op::ApplyDelta {
                delta: delta.0,
                clamped,
            },
            ng,
        ))
    }

    fn box_target_check(&self, op: &'static str, pred: Var, target: &[T]) -> Result<Vec<usize>> {
        let s = self.shape(pred);
        if s.len() != 2 || s[1] != 4 || target.len() != s[0] * 4 {
            return Err(Error::Dimension {
                op,
                lhs: s,
                rhs: vec![target.len()],
            });
        }
        Ok(s)
    }

    /// Per-row `1 - GIoU(pred, target)` for cxcywh boxes; output `[n]`.
    pub fn giou_loss(&self, pred: Var, target: &[T]) -> Result<Var> {
        let s = self.box_target_check("giou_loss", pred, target)?;
        let out = {
            let nodes = self.nodes.borrow();
            let p = &nodes[pred.0].value;
            (0..s[0])
                .map(|i| giou_loss_and_grad(&p[i * 4..i * 4 + 4], &target[i * 4..i * 4 + 4]).loss)
                .collect()
        };
        let ng = self.ng(&[pred.0]);
        Ok(self.push(
            vec![s[0]],
            out,
            Op::GiouLoss {
                pred: pred.0,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// Per-row sum of absolute coordinate differences; output `[n]`.
    pub fn l1_loss(&self, pred: Var, target: &[T]) -> Result<Var> {
        let s = self.box_target_check("l1_loss", pred, target)?;
        let out = {
            let nodes = self.nodes.borrow();
            let p = &nodes[pred.0].value;
            (0..s[0])
                .map(|i| (0..4).map(|c| (p[i * 4 + c] - target[i * 4 + c]).abs()).sum())
                .collect()
        };
        let ng = self.ng(&[pred.0]);
        Ok(self.push(
            vec![s[0]],
            out,
            Op::L1Loss {
                pred: pred.0,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// Element-wise sigmoid focal loss against 0/1 targets.
    pub fn focal_loss(&self, logits: Var, target: &[T], alpha: f64, gamma: f64) -> Result<Var> {
        let s = self.shape(logits);
        if s.iter().product::<usize>() != target.len() {
            return Err(Error::Dimension {
                op: "focal_loss",
                lhs: s,
                rhs: vec![target.len()],
            });
        }
        let (alpha, gamma) = (T::from_f64(alpha), T::from_f64(gamma));
        let out = {
            let nodes = self.nodes.borrow();
            nodes[logits.0]
                .value
                .iter()
                .zip(target)
                .map(|(&x, &t)| focal_value(x, t, alpha, gamma))
                .collect()
        };
        let ng = self.ng(&[logits.0]);
        Ok(self.push(
            s,
            out,
            Op::FocalLoss {
                logits: logits.0,
                target: target.to_vec(),
                alpha,
                gamma,
            },
            ng,
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let total = self.nodes.borrow()[a.0].value.iter().copied().sum();
        let ng = self.ng(&[a.0]);
        self.push(vec![1], vec![total], Op::Sum { a: a.0 }, ng)
    }

    /// Gathers single elements at flat indices; output `[idx.len()]`.
    pub fn pick(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        let n: usize = s.iter().product();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::Dimension {
                op: "pick",
                lhs: s,
                rhs: idx.to_vec(),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            idx.iter().map(|&i| nodes[a.0].value[i]).collect()
        };
        let ng = self.ng(&[a.0]);
        Ok(self.push(
            vec![idx.len()],
            out,
            Op::Pick {
                a: a.0,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    // ------------------------------------------------------------ composites

    /// `x · w + b` for `x[n×i]`, `w[i×o]`, `b[o]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: nodes[loss.0].shape.clone(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let fault = self.fault.get();
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if fault == Some(node.op.kind()) {
                let k = T::from_f64(1.5);
                g.iter_mut().for_each(|v| *v *= k);
            }
            propagate(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn focal_value<T: Scalar>(x: T, t: T, alpha: T, gamma: T) -> T {
    let p = sigmoid(x);
    if t > T::from_f64(0.5) {
        alpha * (T::one() - p).powf(gamma) * softplus(-x)
    } else {
        (T::one() - alpha) * p.powf(gamma) * softplus(x)
    }
}

fn focal_grad<T: Scalar>(x: T, t: T, alpha: T, gamma: T) -> T {
    let p = sigmoid(x);
    let q = T::one() - p;
    if t > T::from_f64(0.5) {
        -alpha * q.powf(gamma) * (gamma * p * softplus(-x) + q)
    } else {
        (T::one() - alpha) * p.powf(gamma) * (gamma * q * softplus(x) + p)
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], i: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[i].needs_grad {
        return None;
    }
    let len = nodes[i].value.len();
    Some(grads[i].get_or_insert_with(|| vec![T::zero(); len]))
}

fn propagate<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(ga) = slot(grads, nodes, a) {
                gemm_nt(g, &nodes[b].value, ga, m, n, k);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                gemm_tn(&nodes[a].value, g, gb, m, k, n);
            }
        }
        &Op::Transpose { a, rows, cols } => {
            if let Some(ga) = slot(grads, nodes, a) {
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            for p in [a, b] {
                if let Some(gp) = slot(grads, nodes, p) {
                    gp.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
        }
        &Op::Sub { a, b } => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
            }
        }
        &Op::Mul { a, b } => {
            if let Some(ga) = slot(grads, nodes, a) {
                for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(&nodes[b].value) {
                    *x += y * bv;
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for ((x, &y), &av) in gb.iter_mut().zip(g).zip(&nodes[a].value) {
                    *x += y * av;
                }
            }
        }
        &Op::AddBias { a, b, cols } => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for (idx, &y) in g.iter().enumerate() {
                    gb[idx % cols] += y;
                }
            }
        }
        &Op::Scale { a, c } => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c);
            }
        }
        &Op::Relu { a } => {
            if let Some(ga) = slot(grads, nodes, a) {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(&nodes[a].value) {
                    if v > T::zero() {
                        *x += y;
                    }
                }
            }
        }
        &Op::Sigmoid { a } => {
            if let Some(ga) = slot(grads, nodes, a) {
                for ((x, &y), &s) in ga.iter_mut().zip(g).zip(&node.value) {
                    *x += y * s * (T::one() - s);
                }
            }
        }
        &Op::Softmax { a, cols } => {
            if let Some(ga) = slot(grads, nodes, a) {
                let y = &node.value;
                for r in 0..y.len() / cols {
                    let rg = &g[r * cols..(r + 1) * cols];
                    let ry = &y[r * cols..(r + 1) * cols];
                    let dot: T = rg.iter().zip(ry).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        ga[r * cols + c] += ry[c] * (rg[c] - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax { a, cols } => {
            if let Some(ga) = slot(grads, nodes, a) {
                let y = &node.value;
                for r in 0..y.len() / cols {
                    let rg = &g[r * cols..(r + 1) * cols];
                    let total: T = rg.iter().copied().sum();
                    for c in 0..cols {
                        ga[r * cols + c] += rg[c] - y[r * cols + c].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            cols,
            xhat,
            rstd,
        } => {
            let (x, gain, bias, cols) = (*x, *gain, *bias, *cols);
            let rows = xhat.len() / cols;
            if let Some(gg) = slot(grads, nodes, gain) {
                for r in 0..rows {
                    for c in 0..cols {
                        gg[c] += g[r * cols + c] * xhat[r * cols + c];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, bias) {
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g[r * cols + c];
                    }
                }
            }
            let gain_v = nodes[gain].value.clone();
            if let Some(gx) = slot(grads, nodes, x) {
                let n = T::from_f64(cols as f64);
                let mut dh = vec![T::zero(); cols];
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..cols {
                        dh[c] = g[r * cols + c] * gain_v[c];
                        m1 += dh[c];
                        m2 += dh[c] * xhat[r * cols + c];
                    }
                    m1 /= n;
                    m2 /= n;
                    for c in 0..cols {
                        gx[r * cols + c] += rstd[r] * (dh[c] - m1 - xhat[r * cols + c] * m2);
                    }
                }
            }
        }
        Op::L2Normalize { a, cols, norms } => {
            let (a, cols) = (*a, *cols);
            if let Some(ga) = slot(grads, nodes, a) {
                let y = &node.value;
                for (r, &nrm) in norms.iter().enumerate() {
                    let rg = &g[r * cols..(r + 1) * cols];
                    let ry = &y[r * cols..(r + 1) * cols];
                    let dot: T = rg.iter().zip(ry).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        ga[r * cols + c] += (rg[c] - ry[c] * dot) / nrm;
                    }
                }
            }
        }
        Op::Attention(saved) => attention_backward(nodes, saved, g, grads),
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &(p, len) in parts {
                if let Some(gp) = slot(grads, nodes, p) {
                    gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, &y)| *x += y);
                }
                offset += len;
            }
        }
        &Op::SliceRows { a, start, cols } => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga[start * cols..start * cols + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(x, &y)| *x += y);
            }
        }
        Op::GatherRows { a, idx, cols } => {
            let (a, cols) = (*a, *cols);
            if let Some(ga) = slot(grads, nodes, a) {
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga[src * cols + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::RowMix { a, cols, plan } => {
            let (a, cols) = (*a, *cols);
            if let Some(ga) = slot(grads, nodes, a) {
                for r in 0..plan.rows() {
                    let grow = &g[r * cols..(r + 1) * cols];
                    for &(src, w) in &plan.entries[plan.offsets[r]..plan.offsets[r + 1]] {
                        for (x, &y) in ga[src * cols..(src + 1) * cols].iter_mut().zip(grow) {
                            *x += w * y;
                        }
                    }
                }
            }
        }
        &Op::Reshape { a } => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Conv2d { x, w, b, geom, col } => {
            let (x, w, b) = (*x, *w, *b);
            let rows = geom.out_h() * geom.out_w();
            if let Some(gb) = slot(grads, nodes, b) {
                for (idx, &y) in g.iter().enumerate() {
                    gb[idx % geom.out_c] += y;
                }
            }
            if let Some(gw) = slot(grads, nodes, w) {
                gemm_tn(col, g, gw, rows, geom.patch(), geom.out_c);
            }
            if nodes[x].needs_grad {
                let mut dcol = vec![T::zero(); rows * geom.patch()];
                gemm_nt(g, &nodes[w].value, &mut dcol, rows, geom.out_c, geom.patch());
                if let Some(gx) = slot(grads, nodes, x) {
                    col2im(&dcol, geom, gx);
                }
            }
        }
        Op::ApplyDelta { delta, clamped } => {
            if let Some(gd) = slot(grads, nodes, *delta) {
                for (idx, &y) in node.value.iter().enumerate() {
                    if !clamped[idx] {
                        gd[idx] += g[idx] * y * (T::one() - y);
                    }
                }
            }
        }
        Op::GiouLoss { pred, target } => {
            let pred = *pred;
            let p = nodes[pred].value.clone();
            if let Some(gp) = slot(grads, nodes, pred) {
                for r in 0..g.len() {
                    let parts = giou_loss_and_grad(&p[r * 4..r * 4 + 4], &target[r * 4..r * 4 + 4]);
                    for c in 0..4 {
                        gp[r * 4 + c] += g[r] * parts.grad[c];
                    }
                }
            }
        }
        Op::L1Loss { pred, target } => {
            let pred = *pred;
            let p = nodes[pred].value.clone();
            if let Some(gp) = slot(grads, nodes, pred) {
                for r in 0..g.len() {
                    for c in 0..4 {
                        let diff = p[r * 4 + c] - target[r * 4 + c];
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        gp[r * 4 + c] += g[r] * sign;
                    }
                }
            }
        }
        Op::FocalLoss {
            logits,
            target,
            alpha,
            gamma,
        } => {
            let logits = *logits;
            let x = nodes[logits].value.clone();
            if let Some(gl) = slot(grads, nodes, logits) {
                for idx in 0..x.len() {
                    gl[idx] += g[idx] * focal_grad(x[idx], target[idx], *alpha, *gamma);
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Pick { a, idx } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (r, &i) in idx.iter().enumerate() {
                    ga[i] += g[r];
                }
            }
        }
    }
}

fn attention_backward<T: Scalar>(nodes: &[Node<T>], s: &AttentionSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let d = nodes[s.q].shape[1];
    let nk = nodes[s.k].shape[0];
    let dh = d / s.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let (qv, kv, vv) = (&nodes[s.q].value, &nodes[s.k].value, &nodes[s.v].value);
    let mut dq = vec![T::zero(); qv.len()];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let max_len = s.ranges.iter().map(|r| r.1).max().unwrap_or(0);
    let mut dp = vec![T::zero(); max_len];
    for (r, &(start, len)) in s.ranges.iter().enumerate() {
        for h in 0..s.heads {
            let hs = h * dh;
            let p = &s.probs[s.prob_offsets[r] + h * len..s.prob_offsets[r] + (h + 1) * len];
            let grow = &g[r * d + hs..r * d + hs + dh];
            let mut dot = T::zero();
            for j in 0..len {
                let base = (start + j) * d + hs;
                let mut acc = T::zero();
                for c in 0..dh {
                    acc += grow[c] * vv[base + c];
                    dv[base + c] += p[j] * grow[c];
                }
                dp[j] = acc;
                dot += acc * p[j];
            }
            let qrow = &qv[r * d + hs..r * d + hs + dh];
            for j in 0..len {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == T::zero() {
                    continue;
                }
                let base = (start + j) * d + hs;
                for c in 0..dh {
                    dq[r * d + hs + c] += ds * kv[base + c];
                    dk[base + c] += ds * qrow[c];
                }
            }
        }
    }
    for (p, delta) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
        if let Some(gp) = slot(grads, nodes, p) {
            gp.iter_mut().zip(&delta).for_each(|(x, &y)| *x += y);
        }
    }
}
