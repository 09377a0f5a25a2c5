//! Point and box prompt encoders.
//!
//! A point `(x, y, c)` becomes `proj_point([sine(x), sine(y), e_cat[c]])`
//! and a box `(x, y, w, h, c)` becomes
//! `proj_box([sine(x), sine(y), sine(w), sine(h), e_cat[c]])`. Both
//! encoders read the same class embedding table but own separate
//! projections. Each sine block holds `d / 2` interleaved sin/cos values,
//! so the class embedding is `d` wide and the positional part is `d` for
//! points and `2d` for boxes.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point2D};
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;

const TEMPERATURE: f64 = 10_000.0;

/// Interleaved `[sin(2πc/t_0), cos(2πc/t_0), sin(2πc/t_1), ...]` with
/// `t_i = 10000^(2i/dim)`. Coordinates outside `[0, 1]` are encoded as-is.
pub fn sine_embed(coord: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::OddDimension(dim));
    }
    let mut out = vec![0.0; dim];
    sine_embed_into(coord, &mut out);
    Ok(out)
}

fn sine_embed_into(coord: f64, out: &mut [f64]) {
    let dim = out.len();
    let scaled = coord * TAU;
    for i in 0..dim / 2 {
        let freq = TEMPERATURE.powf(2.0 * i as f64 / dim as f64);
        let a = scaled / freq;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
}

/// `[n, coords.len() * per_coord]` constant positional block.
pub fn sine_embed_rows(rows: &[Vec<f64>], per_coord: usize) -> Tensor {
    let width = rows.first().map_or(0, |r| r.len() * per_coord);
    let mut out = Tensor::zeros(rows.len(), width);
    for (i, coords) in rows.iter().enumerate() {
        let row = out.row_mut(i);
        for (k, &c) in coords.iter().enumerate() {
            sine_embed_into(c, &mut row[k * per_coord..(k + 1) * per_coord]);
        }
    }
    out
}

/// Trainable `[C, d]` class embedding shared by both encoders.
#[derive(Clone, Debug)]
pub struct ClassEmbeddingTable {
    pub weight: ParamId,
    pub num_classes: usize,
    pub dim: usize,
}

impl ClassEmbeddingTable {
    pub fn new(pb: &mut ParamBuilder<'_>, num_classes: usize, dim: usize) -> Self {
        Self {
            weight: pb.uniform("weight", num_classes, dim, 1.0),
            num_classes,
            dim,
        }
    }

    pub fn check(&self, c: usize) -> Result<()> {
        if c < self.num_classes {
            Ok(())
        } else {
            Err(Error::CategoryOutOfRange {
                index: c,
                count: self.num_classes,
            })
        }
    }

    pub fn lookup(&self, g: &mut Graph<'_>, categories: &[usize]) -> Result<Var> {
        for &c in categories {
            self.check(c)?;
        }
        let table = g.param(self.weight);
        Ok(g.gather_rows(table, categories))
    }
}

/// Where a query currently points: a bare point (stage 1) or a box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Reference {
    Point(Point2D),
    /// Always center form.
    Box(BBox),
}

impl Reference {
    pub fn center(&self) -> Point2D {
        match self {
            Reference::Point(p) => *p,
            Reference::Box(b) => b.center_point(),
        }
    }
}

/// A decoder query bound to one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptQuery {
    pub content: Vec<f64>,
    pub prompt_embedding: Vec<f64>,
    pub category: usize,
    pub group: usize,
    pub reference: Reference,
}

/// Prompt embedding split into its positional and class contributions:
/// `full = positional + categorical`; the bias sits in the positional part.
#[derive(Clone, Copy, Debug)]
pub struct PromptParts {
    pub full: Var,
    pub positional: Var,
    pub categorical: Var,
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    pub table: ClassEmbeddingTable,
    pub point_proj: Linear,
    pub box_proj: Linear,
    pub dim: usize,
}

impl PromptEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, num_classes: usize, dim: usize) -> Result<Self> {
        if dim % 4 != 0 {
            // dim / 2 per coordinate must itself be even
            return Err(Error::Config(format!("model width {dim} must be a multiple of 4")));
        }
        let table = ClassEmbeddingTable::new(&mut pb.sub("class_embed"), num_classes, dim);
        let point_proj = Linear::new(&mut pb.sub("point_proj"), dim + dim, dim);
        let box_proj = Linear::new(&mut pb.sub("box_proj"), 2 * dim + dim, dim);
        Ok(Self {
            table,
            point_proj,
            box_proj,
            dim,
        })
    }

    pub fn per_coord(&self) -> usize {
        self.dim / 2
    }

    /// Batched point encoding: `[n, d]`.
    pub fn encode_points(&self, g: &mut Graph<'_>, points: &[Point2D], categories: &[usize]) -> Result<PromptParts> {
        let coords: Vec<Vec<f64>> = points.iter().map(|p| vec![p.x, p.y]).collect();
        self.encode(g, &coords, categories, &self.point_proj)
    }

    /// Batched box encoding from center-form boxes: `[n, d]`.
    pub fn encode_boxes(&self, g: &mut Graph<'_>, boxes: &[BBox], categories: &[usize]) -> Result<PromptParts> {
        let coords: Vec<Vec<f64>> = boxes.iter().map(|b| b.to_center().coords.to_vec()).collect();
        self.encode(g, &coords, categories, &self.box_proj)
    }

    fn encode(
        &self,
        g: &mut Graph<'_>,
        coords: &[Vec<f64>],
        categories: &[usize],
        proj: &Linear,
    ) -> Result<PromptParts> {
        assert_eq!(coords.len(), categories.len(), "one category per prompt");
        let pos = g.constant(sine_embed_rows(coords, self.per_coord()));
        let cat = self.table.lookup(g, categories)?;
        let pos_width = g.shape(pos).1;
        let w = g.param(proj.weight);
        let w_pos = g.slice_rows(w, 0, pos_width);
        let w_cat = g.slice_rows(w, pos_width, self.table.dim);
        let bias = proj.bias.map(|b| g.param(b));
        let positional = g.linear(pos, w_pos, bias);
        let categorical = g.linear(cat, w_cat, None);
        let full = g.add(positional, categorical);
        Ok(PromptParts {
            full,
            positional,
            categorical,
        })
    }

    pub fn encode_point(&self, store: &ParamStore, p: Point2D, c: usize) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(store);
        let parts = self.encode_points(&mut g, &[p], &[c])?;
        Ok(g.value(parts.full).row(0).to_vec())
    }

    pub fn encode_box(&self, store: &ParamStore, b: BBox, c: usize) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(store);
        let parts = self.encode_boxes(&mut g, &[b], &[c])?;
        Ok(g.value(parts.full).row(0).to_vec())
    }

    /// Stage-1 query: reference is the point, content starts at zero.
    pub fn point_query(&self, store: &ParamStore, p: Point2D, c: usize, group: usize) -> Result<PromptQuery> {
        Ok(PromptQuery {
            content: vec![0.0; self.dim],
            prompt_embedding: self.encode_point(store, p, c)?,
            category: c,
            group,
            reference: Reference::Point(p),
        })
    }

    /// Replaces the reference with the stage's predicted box and re-encodes
    /// the prompt with the box encoder; content, category and group carry over.
    pub fn reencode_for_stage(&self, store: &ParamStore, q: &PromptQuery, predicted_box: BBox) -> Result<PromptQuery> {
        let b = predicted_box.to_center();
        Ok(PromptQuery {
            content: q.content.clone(),
            prompt_embedding: self.encode_box(store, b, q.category)?,
            category: q.category,
            group: q.group,
            reference: Reference::Box(b),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::param_grad_report;
    use crate::params::derived_rng;
    use proptest::prelude::*;

    fn encoder(dim: usize, classes: usize) -> (ParamStore, PromptEncoder) {
        let mut store = ParamStore::new();
        let enc = PromptEncoder::new(&mut ParamBuilder::new(&mut store, 5).sub("prompt"), classes, dim).unwrap();
        (store, enc)
    }

    #[test]
    fn sine_embed_at_zero() {
        let e = sine_embed(0.0, 16).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        assert!(matches!(sine_embed(0.3, 7), Err(Error::OddDimension(7))));
    }

    #[test]
    fn full_scale_embedding_widths() {
        let xy = sine_embed_rows(&[vec![0.2, 0.7]], 128);
        assert_eq!(xy.cols(), 256);
        let xywh = sine_embed_rows(&[vec![0.2, 0.7, 0.1, 0.3]], 128);
        assert_eq!(xywh.cols(), 512);
        let (store, enc) = encoder(256, 3);
        let w = store.get(enc.box_proj.weight);
        assert_eq!(w.rows(), 768);
        assert_eq!(enc.encode_point(&store, Point2D::new(0.1, 0.2), 1).unwrap().len(), 256);
    }

    #[test]
    fn category_changes_pre_projection_input() {
        let (store, enc) = encoder(16, 3);
        let mut g = Graph::with_params(&store);
        let a = enc.table.lookup(&mut g, &[0]).unwrap();
        let b = enc.table.lookup(&mut g, &[1]).unwrap();
        assert_ne!(g.value(a), g.value(b));
        let p = Point2D::new(0.4, 0.4);
        assert_ne!(enc.encode_point(&store, p, 0).unwrap(), enc.encode_point(&store, p, 1).unwrap());
    }

    #[test]
    fn identity_projection_yields_positional_embedding() {
        let d = 16;
        let (mut store, enc) = encoder(d, 2);
        let mut w = Tensor::zeros(2 * d, d);
        for i in 0..d {
            w.set(i, i, 1.0);
        }
        *store.get_mut(enc.point_proj.weight) = w;
        let p = Point2D::new(0.3, 0.8);
        let out = enc.encode_point(&store, p, 1).unwrap();
        let mut expected = sine_embed(0.3, d / 2).unwrap();
        expected.extend(sine_embed(0.8, d / 2).unwrap());
        for (o, e) in out.iter().zip(&expected) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn box_and_point_encoders_differ_and_zero_projection_is_zero() {
        let (mut store, enc) = encoder(16, 2);
        let p = Point2D::new(0.5, 0.5);
        let b = BBox::center(0.5, 0.5, 0.0, 0.0);
        assert_ne!(enc.encode_point(&store, p, 0).unwrap(), enc.encode_box(&store, b, 0).unwrap());
        let shape = store.get(enc.box_proj.weight).shape();
        *store.get_mut(enc.box_proj.weight) = Tensor::zeros(shape.0, shape.1);
        assert!(enc.encode_box(&store, b, 0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_category_rejected() {
        let (store, enc) = encoder(16, 2);
        let err = enc.encode_point(&store, Point2D::new(0.1, 0.1), 2).unwrap_err();
        assert!(matches!(err, Error::CategoryOutOfRange { index: 2, count: 2 }));
    }

    #[test]
    fn reencoding_preserves_identity_fields() {
        let (store, enc) = encoder(16, 3);
        let q = enc.point_query(&store, Point2D::new(0.2, 0.6), 2, 5).unwrap();
        assert!(matches!(q.reference, Reference::Point(_)));
        let b = BBox::center(0.25, 0.55, 0.2, 0.1);
        let r1 = enc.reencode_for_stage(&store, &q, b).unwrap();
        let r2 = enc.reencode_for_stage(&store, &q, b).unwrap();
        assert_eq!((r1.category, r1.group), (2, 5));
        assert_eq!(r1.content, q.content);
        assert_eq!(r1.reference, Reference::Box(b));
        assert_eq!(r1.prompt_embedding, r2.prompt_embedding);
        assert_eq!(r1.prompt_embedding, enc.encode_box(&store, b, 2).unwrap());
    }

    #[test]
    fn shared_table_row_affects_both_encoders() {
        let (mut store, enc) = encoder(16, 3);
        let p = Point2D::new(0.3, 0.3);
        let b = BBox::center(0.3, 0.3, 0.2, 0.2);
        let before = (enc.encode_point(&store, p, 1).unwrap(), enc.encode_box(&store, b, 1).unwrap());
        store.get_mut(enc.table.weight).row_mut(1)[0] += 0.5;
        let after = (enc.encode_point(&store, p, 1).unwrap(), enc.encode_box(&store, b, 1).unwrap());
        assert_ne!(before.0, after.0);
        assert_ne!(before.1, after.1);
        // other categories untouched
        store.get_mut(enc.table.weight).row_mut(1)[0] -= 0.5;
        assert_eq!(enc.encode_point(&store, p, 1).unwrap(), before.0);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (store, enc) = encoder(8, 3);
        let mut rng = derived_rng(1, "prompt-gc");
        let report = param_grad_report(&store, 40, &mut rng, |g| {
            let pts = [Point2D::new(0.1, 0.9), Point2D::new(0.7, 0.2)];
            let boxes = [BBox::center(0.4, 0.5, 0.2, 0.3), BBox::center(0.6, 0.3, 0.1, 0.2)];
            let a = enc.encode_points(g, &pts, &[0, 2]).unwrap().full;
            let b = enc.encode_boxes(g, &boxes, &[2, 1]).unwrap().full;
            let s = g.mul(a, b);
            let s = g.sigmoid(s);
            g.sum(s)
        });
        assert!(report.passed(), "{:?}", report.failures);
    }

    proptest! {
        #[test]
        fn sine_embed_lipschitz(a in -1.0..2.0f64, b in -1.0..2.0f64) {
            let ea = sine_embed(a, 32).unwrap();
            let eb = sine_embed(b, 32).unwrap();
            for (x, y) in ea.iter().zip(&eb) {
                prop_assert!((x - y).abs() <= TAU * (a - b).abs() + 1e-12);
            }
            prop_assert_eq!(ea, sine_embed(a, 32).unwrap());
        }
    }
}
