//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a parameter or a gradient-tracked input.
//! Operations with bespoke kernels (deformable sampling, masked attention,
//! box losses) plug in through [`CustomOp`].

use std::fmt;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule of an operation whose forward value is computed by the caller.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` means zero.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    /// Right operand is `[1, cols]`.
    Row,
    /// Right operand is `[rows, 1]`.
    Col,
}

/// Geometry of a channels-last 2-D convolution lowered to `im2col`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Sum(Var),
    Im2Col(Var, ConvGeom),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// One forward pass. Borrows the parameter store read-only.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl fmt::Debug for Graph<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.tracked(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Gradient-tracked leaf that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ra, _) = self.shape(a);
        let (_, cb) = self.shape(b);
        let mut out = Tensor::zeros(ra, cb);
        gemm(1.0, self.value(a), false, self.value(b), false, 0.0, &mut out);
        let t = self.any_tracked(&[a, b]);
        self.push(out, Op::MatMul(a, b), t)
    }

    /// `x * w + b` with `w: [in, out]` and `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (rx, _) = self.shape(x);
        let (_, cw) = self.shape(w);
        let mut out = Tensor::zeros(rx, cw);
        gemm(1.0, self.value(x), false, self.value(w), false, 0.0, &mut out);
        let mut t = self.any_tracked(&[x, w]);
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, cw), "bias shape mismatch");
            for r in 0..rx {
                for (o, bv) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
            t |= self.tracked(b);
        }
        self.push(out, Op::Linear(x, w, b), t)
    }

    fn broadcast_kind(&self, a: Var, b: Var) -> Broadcast {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Broadcast::None
        } else if sb == (1, sa.1) {
            Broadcast::Row
        } else if sb == (sa.0, 1) {
            Broadcast::Col
        } else {
            panic!("incompatible shapes {sa:?} and {sb:?}");
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Tensor, Broadcast) {
        let kind = self.broadcast_kind(a, b);
        let va = self.value(a);
        let vb = self.value(b);
        let (rows, cols) = va.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let ra = va.row(r);
            let o = out.row_mut(r);
            match kind {
                Broadcast::None => {
                    for ((o, x), y) in o.iter_mut().zip(ra).zip(vb.row(r)) {
                        *o = f(*x, *y);
                    }
                }
                Broadcast::Row => {
                    for ((o, x), y) in o.iter_mut().zip(ra).zip(vb.data()) {
                        *o = f(*x, *y);
                    }
                }
                Broadcast::Col => {
                    let y = vb.get(r, 0);
                    for (o, x) in o.iter_mut().zip(ra) {
                        *o = f(*x, y);
                    }
                }
            }
        }
        (out, kind)
    }

    /// Elementwise sum; `b` may be a broadcast row `[1, c]` or column `[r, 1]`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (out, kind) = self.binary(a, b, |x, y| x + y);
        let t = self.any_tracked(&[a, b]);
        self.push(out, Op::Add(a, b, kind), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (out, kind) = self.binary(a, b, |x, y| x - y);
        let t = self.any_tracked(&[a, b]);
        self.push(out, Op::Sub(a, b, kind), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (out, kind) = self.binary(a, b, |x, y| x * y);
        let t = self.any_tracked(&[a, b]);
        self.push(out, Op::Mul(a, b, kind), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let t = self.tracked(a);
        self.push(out, Op::Scale(a, s), t)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        let t = self.tracked(a);
        self.push(out, Op::AddScalar(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let t = self.tracked(a);
        self.push(out, Op::Relu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let t = self.tracked(a);
        self.push(out, Op::Sigmoid(a), t)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let t = self.tracked(a);
        self.push(out, Op::Abs(a), t)
    }

    /// Softmax over consecutive chunks of `group` columns in every row.
    pub fn softmax(&mut self, a: Var, group: usize) -> Var {
        let va = self.value(a);
        assert!(group > 0 && va.cols() % group == 0, "softmax group must divide cols");
        let mut out = va.clone();
        for r in 0..out.rows() {
            for chunk in out.row_mut(r).chunks_mut(group) {
                softmax_in_place(chunk);
            }
        }
        let t = self.tracked(a);
        self.push(out, Op::Softmax(a, group), t)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1, cols]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + EPS).sqrt();
            rstd.push(s);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * s;
            }
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = xhat.get(r, c) * g[c] + b[c];
            }
        }
        let t = self.any_tracked(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            t,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + src.cols()].copy_from_slice(src.row(r));
                off += src.cols();
            }
        }
        let t = self.any_tracked(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(src.data());
            rows += src.rows();
        }
        let t = self.any_tracked(parts);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let t = self.tracked(a);
        self.push(out, Op::SliceCols(a, start), t)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let c = va.cols();
        let out = Tensor::from_vec(len, c, va.data()[start * c..(start + len) * c].to_vec());
        let t = self.tracked(a);
        self.push(out, Op::SliceRows(a, start), t)
    }

    /// `out[i] = a[idx[i]]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(idx.len(), va.cols());
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(va.row(j));
        }
        let t = self.tracked(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), t)
    }

    /// `out[idx[i]] = a[i]` into `rows` zero rows; `idx` entries must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), idx.len(), "scatter_rows index length");
        let mut out = Tensor::zeros(rows, va.cols());
        for (i, &j) in idx.iter().enumerate() {
            out.row_mut(j).copy_from_slice(va.row(i));
        }
        let t = self.tracked(a);
        self.push(out, Op::ScatterRows(a, idx.to_vec()), t)
    }

    /// `out[:, j] = a[:, idx[j]]`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows(), idx.len());
        for r in 0..va.rows() {
            let src = va.row(r);
            for (o, &j) in out.row_mut(r).iter_mut().zip(idx) {
                *o = src[j];
            }
        }
        let t = self.tracked(a);
        self.push(out, Op::GatherCols(a, idx.to_vec()), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let t = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Unfolds `[H * W, C]` into `[Ho * Wo, k * k * C]` patches, zero padded.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), (geom.height * geom.width, geom.channels), "im2col input shape");
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let c = geom.channels;
        let mut out = Tensor::zeros(ho * wo, geom.patch_len());
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = out.row_mut(oy * wo + ox);
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        let src = vx.row(iy as usize * geom.width + ix as usize);
                        let off = (ky * geom.kernel + kx) * c;
                        orow[off..off + c].copy_from_slice(src);
                    }
                }
            }
        }
        let t = self.tracked(x);
        self.push(out, Op::Im2Col(x, geom), t)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let t = self.any_tracked(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), op), t)
    }

    /// Reverse pass seeded with ones at `root` (normally a 1x1 loss).
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = self.value(root);
        grads[root.0] = Some(Tensor::full(seed.rows(), seed.cols(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(pid, v)| v.map(|v| (ParamId(pid), v)))
            .collect();
        Gradients { grads, params }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    let vb = self.value(*b);
                    let mut ga = Tensor::zeros(g.rows(), vb.rows());
                    gemm(1.0, g, false, vb, true, 0.0, &mut ga);
                    accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let va = self.value(*a);
                    let mut gb = Tensor::zeros(va.cols(), g.cols());
                    gemm(1.0, va, true, g, false, 0.0, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Linear(x, w, b) => {
                if self.tracked(*x) {
                    let vw = self.value(*w);
                    let mut gx = Tensor::zeros(g.rows(), vw.rows());
                    gemm(1.0, g, false, vw, true, 0.0, &mut gx);
                    accumulate(grads, *x, gx);
                }
                if self.tracked(*w) {
                    let vx = self.value(*x);
                    let mut gw = Tensor::zeros(vx.cols(), g.cols());
                    gemm(1.0, vx, true, g, false, 0.0, &mut gw);
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.tracked(*b) {
                        accumulate(grads, *b, g.col_sums());
                    }
                }
            }
            Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.tracked(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.tracked(*b) {
                    let mut gb = reduce_broadcast(g, *kind);
                    if sign < 0.0 {
                        gb.scale_assign(-1.0);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, kind) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.tracked(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let row = ga.row_mut(r);
                        match kind {
                            Broadcast::None => {
                                for (x, y) in row.iter_mut().zip(vb.row(r)) {
                                    *x *= y;
                                }
                            }
                            Broadcast::Row => {
                                for (x, y) in row.iter_mut().zip(vb.data()) {
                                    *x *= y;
                                }
                            }
                            Broadcast::Col => {
                                let y = vb.get(r, 0);
                                for x in row.iter_mut() {
                                    *x *= y;
                                }
                            }
                        }
                    }
                    accumulate(grads, *a, ga);
                }
                if self.tracked(*b) {
                    let mut prod = g.clone();
                    for (x, y) in prod.data_mut().iter_mut().zip(va.data()) {
                        *x *= y;
                    }
                    accumulate(grads, *b, reduce_broadcast(&prod, *kind));
                }
            }
            Op::Scale(a, s) => {
                if self.tracked(*a) {
                    accumulate(grads, *a, g.map(|v| v * s));
                }
            }
            Op::AddScalar(a) => {
                if self.tracked(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::Relu(a) => {
                if self.tracked(*a) {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::Sigmoid(a) => {
                if self.tracked(*a) {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= y * (1.0 - y);
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::Abs(a) => {
                if self.tracked(*a) {
                    let mut ga = g.clone();
                    for (x, v) in ga.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *x *= if *v > 0.0 {
                            1.0
                        } else if *v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::Softmax(a, group) => {
                if self.tracked(*a) {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let out = ga.row_mut(r);
                        for start in (0..yr.len()).step_by(*group) {
                            let end = start + group;
                            let dot: f64 = (start..end).map(|j| yr[j] * gr[j]).sum();
                            for j in start..end {
                                out[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                if self.tracked(*gamma) {
                    let mut gg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for ((o, gv), h) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gv * h;
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if self.tracked(*beta) {
                    accumulate(grads, *beta, g.col_sums());
                }
                if self.tracked(*x) {
                    let gam = self.value(*gamma).data();
                    let mut gx = Tensor::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            out[c] = rstd[r] * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.tracked(p) {
                        let mut gp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        accumulate(grads, p, gp);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.tracked(p) {
                        let gp = Tensor::from_vec(
                            rows,
                            cols,
                            g.data()[off * cols..(off + rows) * cols].to_vec(),
                        );
                        accumulate(grads, p, gp);
                    }
                    off += rows;
                }
            }
            Op::SliceCols(a, start) => {
                if self.tracked(*a) {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::SliceRows(a, start) => {
                if self.tracked(*a) {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    ga.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                    accumulate(grads, *a, ga);
                }
            }
            Op::GatherRows(a, idx) => {
                if self.tracked(*a) {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for (i, &j) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::ScatterRows(a, idx) => {
                if self.tracked(*a) {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for (i, &j) in idx.iter().enumerate() {
                        ga.row_mut(i).copy_from_slice(g.row(j));
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::GatherCols(a, idx) => {
                if self.tracked(*a) {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let out = ga.row_mut(r);
                        for (k, &j) in idx.iter().enumerate() {
                            out[j] += gr[k];
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::Sum(a) => {
                if self.tracked(*a) {
                    let (rows, cols) = self.shape(*a);
                    accumulate(grads, *a, Tensor::full(rows, cols, g.item()));
                }
            }
            Op::Im2Col(x, geom) => {
                if self.tracked(*x) {
                    accumulate(grads, *x, col2im(g, geom));
                }
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = op.backward(&values, &node.value, g);
                assert_eq!(input_grads.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (&v, gi) in inputs.iter().zip(input_grads) {
                    if let Some(gi) = gi {
                        if self.tracked(v) {
                            assert_eq!(gi.shape(), self.shape(v), "{} gradient shape", op.name());
                            accumulate(grads, v, gi);
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter that took part in the pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(pid, v)| self.grads[v.0].as_ref().map(|g| (pid, g)))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn reduce_broadcast(g: &Tensor, kind: Broadcast) -> Tensor {
    match kind {
        Broadcast::None => g.clone(),
        Broadcast::Row => g.col_sums(),
        Broadcast::Col => {
            let sums = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
            Tensor::from_vec(g.rows(), 1, sums)
        }
    }
}

fn col2im(g: &Tensor, geom: &ConvGeom) -> Tensor {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let c = geom.channels;
    let mut gx = Tensor::zeros(geom.height * geom.width, c);
    for oy in 0..ho {
        for ox in 0..wo {
            let grow = g.row(oy * wo + ox);
            for ky in 0..geom.kernel {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..geom.kernel {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    let off = (ky * geom.kernel + kx) * c;
                    let dst = gx.row_mut(iy as usize * geom.width + ix as usize);
                    for (d, s) in dst.iter_mut().zip(&grow[off..off + c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    gx
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit with the argument clamped to `[eps, 1 - eps]`.
#[inline]
pub fn inverse_sigmoid(x: f64, eps: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    let a = x.max(eps);
    let b = (1.0 - x).max(eps);
    (a / b).ln()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}
