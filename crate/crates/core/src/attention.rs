//! Multi-scale deformable attention, its class-guided decoder variant, and
//! group-masked multi-head self-attention.
//!
//! Sampling follows the usual deformable-attention layout: for query `q`,
//! head `m`, level `l` and point `k` the flat sample index is
//! `(m * L + l) * K + k`; locations hold `(x, y)` pairs in normalized
//! image coordinates and bilinear taps outside a map read zero.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::Point2D;
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamStore};
use crate::prompt_codec::PromptParts;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
}

impl LevelShape {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Multi-scale features flattened level by level into `[sum(H_l * W_l), d]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub shapes: Vec<LevelShape>,
    pub tokens: Var,
}

impl FeaturePyramid {
    /// Checks the level shapes against the token matrix.
    pub fn new(g: &Graph<'_>, shapes: Vec<LevelShape>, tokens: Var) -> Result<Self> {
        let total: usize = shapes.iter().map(LevelShape::len).sum();
        let rows = g.shape(tokens).0;
        if total != rows {
            return Err(Error::Config(format!(
                "pyramid shapes cover {total} tokens but features have {rows} rows"
            )));
        }
        if shapes.windows(2).any(|w| w[1].len() >= w[0].len()) {
            return Err(Error::Config("pyramid levels must strictly decrease in size".into()));
        }
        Ok(Self { shapes, tokens })
    }

    pub fn level_starts(&self) -> Vec<usize> {
        level_starts(&self.shapes)
    }

    pub fn num_tokens(&self) -> usize {
        self.shapes.iter().map(LevelShape::len).sum()
    }

    /// Normalized center of every token, level by level.
    pub fn token_centers(&self) -> Vec<Point2D> {
        let mut out = Vec::with_capacity(self.num_tokens());
        for s in &self.shapes {
            for y in 0..s.height {
                for x in 0..s.width {
                    out.push(Point2D::new(
                        (x as f64 + 0.5) / s.width as f64,
                        (y as f64 + 0.5) / s.height as f64,
                    ));
                }
            }
        }
        out
    }
}

pub fn level_starts(shapes: &[LevelShape]) -> Vec<usize> {
    let mut starts = Vec::with_capacity(shapes.len());
    let mut acc = 0;
    for s in shapes {
        starts.push(acc);
        acc += s.len();
    }
    starts
}

/// Bilinear read of a `[H * W, d]` map at a normalized location, with
/// cell centers at `((i + 0.5) / W, (j + 0.5) / H)` and zero padding.
pub fn bilinear_sample(map: &Tensor, shape: LevelShape, loc: Point2D) -> Vec<f64> {
    let d = map.cols();
    let mut out = vec![0.0; d];
    for (row, w) in bilinear_taps(shape, loc.x, loc.y).into_iter().flatten() {
        for (o, v) in out.iter_mut().zip(map.row(row)) {
            *o += w * v;
        }
    }
    out
}

/// Up to four `(row, weight)` taps; order is (x0,y0), (x1,y0), (x0,y1), (x1,y1).
#[inline]
fn bilinear_taps(shape: LevelShape, x: f64, y: f64) -> [Option<(usize, f64)>; 4] {
    let px = x * shape.width as f64 - 0.5;
    let py = y * shape.height as f64 - 0.5;
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let tap = |xi: isize, yi: isize, w: f64| {
        if xi >= 0 && yi >= 0 && (xi as usize) < shape.width && (yi as usize) < shape.height {
            Some((yi as usize * shape.width + xi as usize, w))
        } else {
            None
        }
    };
    [
        tap(x0, y0, (1.0 - fx) * (1.0 - fy)),
        tap(x0 + 1, y0, fx * (1.0 - fy)),
        tap(x0, y0 + 1, (1.0 - fx) * fy),
        tap(x0 + 1, y0 + 1, fx * fy),
    ]
}

/// Sizes of one deformable attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsdaDims {
    pub dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl MsdaDims {
    pub fn samples(&self) -> usize {
        self.heads * self.levels * self.points
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Core sampling kernel: `value [N_tok, d]`, `loc [N_q, 2S]`,
/// `attn [N_q, S]` with `S = M * L * K` (already softmax normalized).
pub fn msda_sample(value: &Tensor, shapes: &[LevelShape], loc: &Tensor, attn: &Tensor, dims: MsdaDims) -> Tensor {
    let nq = loc.rows();
    let dh = dims.head_dim();
    let starts = level_starts(shapes);
    let mut out = Tensor::zeros(nq, dims.dim);
    for q in 0..nq {
        let lq = loc.row(q);
        let aq = attn.row(q);
        let oq = out.row_mut(q);
        for m in 0..dims.heads {
            let o = &mut oq[m * dh..(m + 1) * dh];
            for l in 0..dims.levels {
                for k in 0..dims.points {
                    let s = (m * dims.levels + l) * dims.points + k;
                    let w = aq[s];
                    for (row, cw) in bilinear_taps(shapes[l], lq[2 * s], lq[2 * s + 1]).into_iter().flatten() {
                        let v = &value.row(starts[l] + row)[m * dh..(m + 1) * dh];
                        let f = w * cw;
                        for (oo, vv) in o.iter_mut().zip(v) {
                            *oo += f * vv;
                        }
                    }
                }
            }
        }
    }
    out
}

struct MsdaOp {
    shapes: Vec<LevelShape>,
    dims: MsdaDims,
}

impl CustomOp for MsdaOp {
    fn name(&self) -> &'static str {
        "msda"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (value, loc, attn) = (inputs[0], inputs[1], inputs[2]);
        let dims = self.dims;
        let dh = dims.head_dim();
        let starts = level_starts(&self.shapes);
        let mut g_value = Tensor::zeros(value.rows(), value.cols());
        let mut g_loc = Tensor::zeros(loc.rows(), loc.cols());
        let mut g_attn = Tensor::zeros(attn.rows(), attn.cols());
        for q in 0..loc.rows() {
            let lq = loc.row(q);
            let aq = attn.row(q);
            let gq = grad.row(q);
            for m in 0..dims.heads {
                let go = &gq[m * dh..(m + 1) * dh];
                for l in 0..dims.levels {
                    let shape = self.shapes[l];
                    for k in 0..dims.points {
                        let s = (m * dims.levels + l) * dims.points + k;
                        let w = aq[s];
                        let (x, y) = (lq[2 * s], lq[2 * s + 1]);
                        let px = x * shape.width as f64 - 0.5;
                        let py = y * shape.height as f64 - 0.5;
                        let fx = px - px.floor();
                        let fy = py - py.floor();
                        let taps = bilinear_taps(shape, x, y);
                        let mut dots = [0.0; 4];
                        let mut g_w = 0.0;
                        for (c, tap) in taps.iter().enumerate() {
                            if let Some((row, cw)) = *tap {
                                let r = starts[l] + row;
                                let v = &value.row(r)[m * dh..(m + 1) * dh];
                                let dot: f64 = go.iter().zip(v).map(|(a, b)| a * b).sum();
                                dots[c] = dot;
                                g_w += cw * dot;
                                let gv = &mut g_value.row_mut(r)[m * dh..(m + 1) * dh];
                                let f = w * cw;
                                for (a, b) in gv.iter_mut().zip(go) {
                                    *a += f * b;
                                }
                            }
                        }
                        g_attn.row_mut(q)[s] += g_w;
                        let d_px = (1.0 - fy) * (dots[1] - dots[0]) + fy * (dots[3] - dots[2]);
                        let d_py = (1.0 - fx) * (dots[2] - dots[0]) + fx * (dots[3] - dots[1]);
                        let gl = g_loc.row_mut(q);
                        gl[2 * s] += w * d_px * shape.width as f64;
                        gl[2 * s + 1] += w * d_py * shape.height as f64;
                    }
                }
            }
        }
        vec![Some(g_value), Some(g_loc), Some(g_attn)]
    }
}

/// Differentiable [`msda_sample`].
pub fn msda(g: &mut Graph<'_>, value: Var, shapes: &[LevelShape], loc: Var, attn: Var, dims: MsdaDims) -> Var {
    let out = msda_sample(g.value(value), shapes, g.value(loc), g.value(attn), dims);
    g.custom(
        &[value, loc, attn],
        out,
        Box::new(MsdaOp {
            shapes: shapes.to_vec(),
            dims,
        }),
    )
}

/// Per-query reference: `[N_q, 2]` points or `[N_q, 4]` center-form boxes.
#[derive(Clone, Copy, Debug)]
pub enum ReferenceBatch {
    Points(Var),
    Boxes(Var),
}

/// Offset, weight, value and output projections of one deformable block.
#[derive(Clone, Debug)]
pub struct DeformableAttention {
    pub dims: MsdaDims,
    pub value_proj: Linear,
    pub offset_proj: Linear,
    pub weight_proj: Linear,
    pub output_proj: Linear,
}

impl DeformableAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dims: MsdaDims) -> Result<Self> {
        if dims.dim % dims.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                dims.dim, dims.heads
            )));
        }
        let s = dims.samples();
        let value_proj = Linear::new(&mut pb.sub("value_proj"), dims.dim, dims.dim);
        let weight_proj = {
            let mut sub = pb.sub("weight_proj");
            Linear {
                weight: sub.zeros("weight", dims.dim, s),
                bias: Some(sub.zeros("bias", 1, s)),
                in_dim: dims.dim,
                out_dim: s,
            }
        };
        // Offsets start on a ring: head m looks along angle 2πm/M, point k at distance k + 1.
        let offset_proj = {
            let mut sub = pb.sub("offset_proj");
            let mut bias = Tensor::zeros(1, 2 * s);
            for m in 0..dims.heads {
                let theta = 2.0 * PI * m as f64 / dims.heads as f64;
                let (dx, dy) = (theta.cos(), theta.sin());
                let norm = dx.abs().max(dy.abs());
                for l in 0..dims.levels {
                    for k in 0..dims.points {
                        let idx = (m * dims.levels + l) * dims.points + k;
                        bias.data_mut()[2 * idx] = dx / norm * (k + 1) as f64;
                        bias.data_mut()[2 * idx + 1] = dy / norm * (k + 1) as f64;
                    }
                }
            }
            Linear {
                weight: sub.zeros("weight", dims.dim, 2 * s),
                bias: Some(sub.tensor("bias", bias)),
                in_dim: dims.dim,
                out_dim: 2 * s,
            }
        };
        let output_proj = Linear::new(&mut pb.sub("output_proj"), dims.dim, dims.dim);
        Ok(Self {
            dims,
            value_proj,
            offset_proj,
            weight_proj,
            output_proj,
        })
    }

    fn expand_columns(&self, base: usize) -> Vec<usize> {
        (0..self.dims.samples()).flat_map(|_| [base, base + 1]).collect()
    }

    /// Normalized sampling locations `[N_q, 2S]` and softmaxed weights `[N_q, S]`.
    pub fn sampling(&self, g: &mut Graph<'_>, query: Var, reference: ReferenceBatch, shapes: &[LevelShape]) -> (Var, Var) {
        let dims = self.dims;
        let offsets = self.offset_proj.forward(g, query);
        let logits = self.weight_proj.forward(g, query);
        let weights = g.softmax(logits, dims.levels * dims.points);
        let loc = match reference {
            ReferenceBatch::Points(r) => {
                let mut scale = Tensor::zeros(1, 2 * dims.samples());
                for m in 0..dims.heads {
                    for l in 0..dims.levels {
                        for k in 0..dims.points {
                            let idx = (m * dims.levels + l) * dims.points + k;
                            scale.data_mut()[2 * idx] = 1.0 / shapes[l].width as f64;
                            scale.data_mut()[2 * idx + 1] = 1.0 / shapes[l].height as f64;
                        }
                    }
                }
                let scale = g.constant(scale);
                let centers = g.gather_cols(r, &self.expand_columns(0));
                let shift = g.mul(offsets, scale);
                g.add(centers, shift)
            }
            ReferenceBatch::Boxes(r) => {
                let centers = g.gather_cols(r, &self.expand_columns(0));
                let extents = g.gather_cols(r, &self.expand_columns(2));
                let extents = g.scale(extents, 0.5 / dims.points as f64);
                let shift = g.mul(offsets, extents);
                g.add(centers, shift)
            }
        };
        (loc, weights)
    }

    /// `query [N_q, d]` attends into `values` (pre-projection pyramid tokens).
    pub fn forward(&self, g: &mut Graph<'_>, query: Var, reference: ReferenceBatch, pyramid: &FeaturePyramid) -> Result<Var> {
        let qd = g.shape(query).1;
        let vd = g.shape(pyramid.tokens).1;
        if qd != self.dims.dim || vd != self.dims.dim {
            return Err(Error::WidthMismatch {
                expected: self.dims.dim,
                actual: if qd != self.dims.dim { qd } else { vd },
            });
        }
        if pyramid.shapes.len() != self.dims.levels {
            return Err(Error::Config(format!(
                "attention expects {} levels, pyramid has {}",
                self.dims.levels,
                pyramid.shapes.len()
            )));
        }
        let value = self.value_proj.forward(g, pyramid.tokens);
        let (loc, weights) = self.sampling(g, query, reference, &pyramid.shapes);
        let sampled = msda(g, value, &pyramid.shapes, loc, weights, self.dims);
        Ok(self.output_proj.forward(g, sampled))
    }
}

/// Which embedding steers the decoder's cross-attention sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Guidance {
    /// Offsets and weights read content plus the full class-aware prompt.
    ClassGuided,
    /// Offsets and weights read content plus the class-free positional
    /// part; the class part is added to the output afterwards.
    Vanilla,
}

/// Decoder cross-attention from prompt-bound queries.
pub fn prompt_cross_attention(
    g: &mut Graph<'_>,
    attn: &DeformableAttention,
    content: Var,
    prompt: &PromptParts,
    guidance: Guidance,
    reference: ReferenceBatch,
    pyramid: &FeaturePyramid,
) -> Result<Var> {
    let steer = match guidance {
        Guidance::ClassGuided => prompt.full,
        Guidance::Vanilla => prompt.positional,
    };
    let query = g.add(content, steer);
    let out = attn.forward(g, query, reference, pyramid)?;
    Ok(match guidance {
        Guidance::ClassGuided => out,
        Guidance::Vanilla => g.add(out, prompt.categorical),
    })
}

/// Dense `n x m` attendance mask; `true` permits attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// `M[i, j]` is permitted iff `group(i) == group(j)`.
    pub fn from_groups(groups: &[usize]) -> Self {
        let n = groups.len();
        let allowed = (0..n * n).map(|ij| groups[ij / n] == groups[ij % n]).collect();
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn identity(n: usize) -> Self {
        let allowed = (0..n * n).map(|ij| ij / n == ij % n).collect();
        Self { rows: n, cols: n, allowed }
    }

    /// Appends always-visible key columns (e.g. a shared learnable slot).
    pub fn with_extra_columns(&self, extra: usize) -> Self {
        let cols = self.cols + extra;
        let mut allowed = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            allowed.extend_from_slice(&self.allowed[i * self.cols..(i + 1) * self.cols]);
            allowed.extend(std::iter::repeat_n(true, extra));
        }
        Self {
            rows: self.rows,
            cols,
            allowed,
        }
    }

    /// Appends query rows that see every key.
    pub fn with_extra_rows(&self, extra: usize) -> Self {
        let mut allowed = self.allowed.clone();
        allowed.extend(std::iter::repeat_n(true, extra * self.cols));
        Self {
            rows: self.rows + extra,
            cols: self.cols,
            allowed,
        }
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

struct MhaOp {
    heads: usize,
    probs: Vec<f64>,
}

/// Scaled dot-product attention over `heads` column blocks, returning the
/// output and the `[heads, n, m]` probabilities. Masked pairs contribute
/// exactly nothing; a row with no permitted key yields zeros.
pub fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: Option<&AttentionMask>) -> (Tensor, Vec<f64>) {
    let (n, d) = q.shape();
    let m = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(n, d);
    let mut probs = vec![0.0; heads * n * m];
    let mut scores = vec![0.0; m];
    for h in 0..heads {
        let cs = h * dh..(h + 1) * dh;
        for i in 0..n {
            let qi = &q.row(i)[cs.clone()];
            let mut any = false;
            for j in 0..m {
                if mask.is_none_or(|mk| mk.allows(i, j)) {
                    let kj = &k.row(j)[cs.clone()];
                    scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    any = true;
                } else {
                    scores[j] = f64::NEG_INFINITY;
                }
            }
            if !any {
                continue;
            }
            softmax_in_place(&mut scores);
            let p = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
            p.copy_from_slice(&scores);
            let o = &mut out.row_mut(i)[cs.clone()];
            for (j, &pj) in p.iter().enumerate() {
                if pj == 0.0 {
                    continue;
                }
                for (oo, vv) in o.iter_mut().zip(&v.row(j)[cs.clone()]) {
                    *oo += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

impl CustomOp for MhaOp {
    fn name(&self) -> &'static str {
        "multi_head_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (n, d) = q.shape();
        let m = k.rows();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(n, d);
        let mut gk = Tensor::zeros(m, d);
        let mut gv = Tensor::zeros(m, d);
        let mut dp = vec![0.0; m];
        for h in 0..self.heads {
            let cs = h * dh..(h + 1) * dh;
            for i in 0..n {
                let p = &self.probs[(h * n + i) * m..(h * n + i + 1) * m];
                let go = &grad.row(i)[cs.clone()];
                let mut dot = 0.0;
                for j in 0..m {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &v.row(j)[cs.clone()];
                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += dp[j] * p[j];
                    for (a, b) in gv.row_mut(j)[cs.clone()].iter_mut().zip(go) {
                        *a += p[j] * b;
                    }
                }
                for j in 0..m {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = k.row(j)[cs.clone()].to_vec();
                    for (a, b) in gq.row_mut(i)[cs.clone()].iter_mut().zip(&kj) {
                        *a += ds * b;
                    }
                    let qi = q.row(i)[cs.clone()].to_vec();
                    for (a, b) in gk.row_mut(j)[cs.clone()].iter_mut().zip(&qi) {
                        *a += ds * b;
                    }
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}

/// Differentiable [`attention_forward`].
pub fn multi_head_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttentionMask>) -> Var {
    let (out, probs) = attention_forward(g.value(q), g.value(k), g.value(v), heads, mask);
    g.custom(&[q, k, v], out, Box::new(MhaOp { heads, probs }))
}

/// Multi-head self-attention with an optional positional term added to
/// queries and keys.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub heads: usize,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
}

impl SelfAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            heads,
            q_proj: Linear::new(&mut pb.sub("q_proj"), dim, dim),
            k_proj: Linear::new(&mut pb.sub("k_proj"), dim, dim),
            v_proj: Linear::new(&mut pb.sub("v_proj"), dim, dim),
            out_proj: Linear::new(&mut pb.sub("out_proj"), dim, dim),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, pos: Option<Var>, mask: Option<&AttentionMask>) -> Var {
        let qk_in = match pos {
            Some(p) => g.add(x, p),
            None => x,
        };
        let q = self.q_proj.forward(g, qk_in);
        let k = self.k_proj.forward(g, qk_in);
        let v = self.v_proj.forward(g, x);
        let a = multi_head_attention(g, q, k, v, self.heads, mask);
        self.out_proj.forward(g, a)
    }
}

/// Self-attention restricted to same-group queries, returning the
/// attention output (before any residual) for every query's content.
/// An empty query list is returned unchanged.
pub fn grouped_self_attention(
    g: &mut Graph<'_>,
    layer: &SelfAttention,
    contents: Var,
    prompt: Var,
    groups: &[usize],
) -> Var {
    if groups.is_empty() {
        return contents;
    }
    let mask = AttentionMask::from_groups(groups);
    layer.forward(g, contents, Some(prompt), Some(&mask))
}

/// Convenience wrapper for data-level callers: runs [`grouped_self_attention`]
/// on plain matrices and returns the updated contents.
pub fn grouped_self_attention_values(
    store: &ParamStore,
    layer: &SelfAttention,
    contents: &Tensor,
    prompt: &Tensor,
    groups: &[usize],
) -> Tensor {
    let mut g = Graph::with_params(store);
    let c = g.constant(contents.clone());
    let p = g.constant(prompt.clone());
    let out = grouped_self_attention(&mut g, layer, c, p, groups);
    g.value(out).clone()
}
