//! Prompt-free student detector: learned queries, deformable decoder with
//! box refinement, one-to-one matching loss.

use serde::{Deserialize, Serialize};

use crate::attention::{DeformableAttention, FeaturePyramid, MsdaDims, ReferenceBatch, SelfAttention};
use crate::autograd::{inverse_sigmoid, softmax_in_place, Graph, Var};
use crate::datasets::Image;
use crate::error::{Error, Result};
use crate::geometry::{iou_giou, BBox};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;

use super::backbone::{Backbone, BackboneConfig, VisualEncoder, NUM_LEVELS};
use super::hungarian::hungarian_match;
use super::loss::{box_loss_sum, weighted_cross_entropy, GIOU_WEIGHT, L1_WEIGHT, NO_OBJECT_WEIGHT};
use super::teacher::{BoxHead, REFERENCE_EPS};

/// Weight of the class term in the matching cost.
pub const CLASS_COST: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub dim: usize,
    pub queries: usize,
    pub decoder_stages: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub num_classes: usize,
    pub ffn_hidden: usize,
    pub encoder_hidden: usize,
    pub backbone: BackboneConfig,
}

impl StudentConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self {
            dim: 64,
            queries: 20,
            decoder_stages: 3,
            encoder_layers: 2,
            heads: 4,
            points: 2,
            num_classes,
            ffn_hidden: 256,
            encoder_hidden: 128,
            backbone: BackboneConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_stages == 0 || self.queries == 0 || self.num_classes == 0 {
            return Err(Error::Config("student needs stages, queries and categories".into()));
        }
        if self.dim % 4 != 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("student width {} incompatible with {} heads", self.dim, self.heads)));
        }
        Ok(())
    }

    /// Matching needs a query for every target.
    pub fn check_capacity(&self, max_instances: usize) -> Result<()> {
        if max_instances > self.queries {
            return Err(Error::Config(format!(
                "{} student queries cannot cover {max_instances} instances in one image",
                self.queries
            )));
        }
        Ok(())
    }
}

/// Normalized center-form target box and category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub bbox: BBox,
    pub category: usize,
}

/// Normalized center-form detection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
struct StudentStage {
    self_attn: SelfAttention,
    norm1: LayerNorm,
    cross_attn: DeformableAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
    class_head: Linear,
    box_head: BoxHead,
}

/// Class logits `[Q, C + 1]` (last column is no-object) and boxes `[Q, 4]`.
#[derive(Clone, Copy, Debug)]
pub struct StudentStageOutput {
    pub logits: Var,
    pub boxes: Var,
}

pub struct StudentLoss {
    pub total: Var,
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

#[derive(Clone, Debug)]
pub struct Student {
    pub cfg: StudentConfig,
    backbone: Backbone,
    encoder: VisualEncoder,
    query_content: ParamId,
    query_pos: ParamId,
    ref_proj: Linear,
    stages: Vec<StudentStage>,
}

impl Student {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: StudentConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = MsdaDims {
            dim: cfg.dim,
            heads: cfg.heads,
            levels: NUM_LEVELS,
            points: cfg.points,
        };
        let backbone = Backbone::new(&mut pb.sub("backbone"), &cfg.backbone, cfg.dim);
        let encoder = VisualEncoder::new(&mut pb.sub("encoder"), dims, cfg.encoder_layers, cfg.encoder_hidden)?;
        let query_content = pb.uniform("query_content", cfg.queries, cfg.dim, 1.0);
        let query_pos = pb.uniform("query_pos", cfg.queries, cfg.dim, 1.0);
        let ref_proj = Linear::new(&mut pb.sub("ref_proj"), cfg.dim, 2);
        let mut dp = pb.sub("decoder");
        let mut stages = Vec::with_capacity(cfg.decoder_stages);
        for s in 0..cfg.decoder_stages {
            let mut sp = dp.sub(s);
            stages.push(StudentStage {
                self_attn: SelfAttention::new(&mut sp.sub("self_attn"), cfg.dim, cfg.heads)?,
                norm1: LayerNorm::new(&mut sp.sub("norm1"), cfg.dim),
                cross_attn: DeformableAttention::new(&mut sp.sub("cross_attn"), dims)?,
                norm2: LayerNorm::new(&mut sp.sub("norm2"), cfg.dim),
                ffn: FeedForward::new(&mut sp.sub("ffn"), cfg.dim, cfg.ffn_hidden),
                norm3: LayerNorm::new(&mut sp.sub("norm3"), cfg.dim),
                class_head: Linear::new(&mut sp.sub("class_head"), cfg.dim, cfg.num_classes + 1),
                box_head: BoxHead::new(&mut sp.sub("box_head"), cfg.dim),
            });
        }
        Ok(Self {
            cfg,
            backbone,
            encoder,
            query_content,
            query_pos,
            ref_proj,
            stages,
        })
    }

    pub fn init(cfg: StudentConfig, seed: u64) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new();
        let model = Student::new(&mut ParamBuilder::new(&mut store, seed).sub("student"), cfg)?;
        Ok((store, model))
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: &Image) -> Result<Vec<StudentStageOutput>> {
        let p = self.backbone.forward(g, image)?;
        let memory: FeaturePyramid = self.encoder.forward(g, p)?;
        let q = self.cfg.queries;
        let pos = g.param(self.query_pos);
        let mut content = g.param(self.query_content);
        let ref_logits = self.ref_proj.forward(g, pos);
        let mut reference = ReferenceBatch::Points(g.sigmoid(ref_logits));
        let zeros = g.constant(Tensor::zeros(q, 2));
        let mut anchor = g.concat_cols(&[ref_logits, zeros]);
        let mut out = Vec::with_capacity(self.stages.len());
        for (s, st) in self.stages.iter().enumerate() {
            let a = st.self_attn.forward(g, content, Some(pos), None);
            let x = g.add(content, a);
            let x = st.norm1.forward(g, x);
            let query = g.add(x, pos);
            let c = st.cross_attn.forward(g, query, reference, &memory)?;
            let x = g.add(x, c);
            let x = st.norm2.forward(g, x);
            let f = st.ffn.forward(g, x);
            let x = g.add(x, f);
            content = st.norm3.forward(g, x);
            let logits = st.class_head.forward(g, content);
            let deltas = st.box_head.forward(g, content);
            let z = g.add(deltas, anchor);
            let boxes = g.sigmoid(z);
            out.push(StudentStageOutput { logits, boxes });
            if s + 1 < self.stages.len() {
                let b = g.value(boxes).clone();
                anchor = g.constant(b.map(|v| inverse_sigmoid(v, REFERENCE_EPS)));
                reference = ReferenceBatch::Boxes(g.constant(b));
            }
        }
        Ok(out)
    }

    /// Matching cost `[Q, T]`: `-p(class) + 5 * L1 - 2 * GIoU`.
    pub fn matching_cost(&self, logits: &Tensor, boxes: &Tensor, targets: &[Target]) -> Vec<f64> {
        let q = logits.rows();
        let mut cost = vec![0.0; q * targets.len()];
        for i in 0..q {
            let mut p = logits.row(i).to_vec();
            softmax_in_place(&mut p);
            let b = boxes.row(i);
            let pred = BBox::center(b[0], b[1], b[2], b[3]);
            for (j, t) in targets.iter().enumerate() {
                let tc = t.bbox.to_center();
                let l1: f64 = b.iter().zip(&tc.coords).map(|(x, y)| (x - y).abs()).sum();
                let (_, giou) = iou_giou(&pred, &tc);
                cost[i * targets.len() + j] = -CLASS_COST * p[t.category] + L1_WEIGHT * l1 - GIOU_WEIGHT * giou;
            }
        }
        cost
    }

    /// Stage-averaged set loss. Box terms are summed over matched pairs and
    /// divided by `max(1, |targets|)`.
    pub fn loss(&self, g: &mut Graph<'_>, outputs: &[StudentStageOutput], targets: &[Target]) -> Result<StudentLoss> {
        self.cfg.check_capacity(targets.len())?;
        for t in targets {
            if t.category >= self.cfg.num_classes {
                return Err(Error::CategoryOutOfRange {
                    index: t.category,
                    count: self.cfg.num_classes,
                });
            }
        }
        let q = self.cfg.queries;
        let none = self.cfg.num_classes;
        let norm = targets.len().max(1) as f64;
        let mut acc: Option<Var> = None;
        let (mut class_sum, mut l1_sum, mut giou_sum) = (0.0, 0.0, 0.0);
        for out in outputs {
            let cost = self.matching_cost(g.value(out.logits), g.value(out.boxes), targets);
            let pairs = hungarian_match(&cost, q, targets.len());
            let mut labels = vec![none; q];
            let mut weights = vec![NO_OBJECT_WEIGHT; q];
            for &(i, j) in &pairs {
                labels[i] = targets[j].category;
                weights[i] = 1.0;
            }
            let ce = weighted_cross_entropy(g, out.logits, &labels, &weights);
            class_sum += g.value(ce).item();
            let mut stage = ce;
            if !pairs.is_empty() {
                let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
                let pred = g.gather_rows(out.boxes, &rows);
                let tgt = Tensor::from_rows(&pairs.iter().map(|p| targets[p.1].bbox.to_center().coords.to_vec()).collect::<Vec<_>>());
                let tgt = g.constant(tgt);
                let sums = box_loss_sum(g, pred, tgt);
                l1_sum += sums.l1 / norm;
                giou_sum += sums.giou / norm;
                let b = g.scale(sums.total, 1.0 / norm);
                stage = g.add(stage, b);
            }
            acc = Some(match acc {
                Some(a) => g.add(a, stage),
                None => stage,
            });
        }
        let k = outputs.len() as f64;
        let total = g.scale(acc.expect("at least one stage"), 1.0 / k);
        Ok(StudentLoss {
            total,
            class: class_sum / k,
            l1: l1_sum / k,
            giou: giou_sum / k,
        })
    }

    /// Final-stage detections: one per query, best non-background class.
    pub fn detect(&self, store: &ParamStore, image: &Image) -> Result<Vec<Detection>> {
        let mut g = Graph::with_params(store);
        let outputs = self.forward(&mut g, image)?;
        let last = outputs.last().expect("at least one stage");
        let (logits, boxes) = (g.value(last.logits), g.value(last.boxes));
        Ok((0..logits.rows())
            .map(|i| {
                let mut p = logits.row(i).to_vec();
                softmax_in_place(&mut p);
                let (category, score) = p[..self.cfg.num_classes]
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, v)| if v > best.1 { (c, v) } else { best });
                let b = boxes.row(i);
                Detection {
                    bbox: BBox::center(b[0], b[1], b[2], b[3]),
                    category,
                    score: score.clamp(0.0, 1.0),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::param_grad_report;
    use crate::network::checkpoint::Checkpoint;
    use crate::network::teacher::tests::{jitter, noise_image};
    use crate::params::derived_rng;

    fn tiny(stages: usize) -> StudentConfig {
        StudentConfig {
            dim: 8,
            queries: 5,
            decoder_stages: stages,
            encoder_layers: 1,
            heads: 2,
            points: 1,
            num_classes: 3,
            ffn_hidden: 8,
            encoder_hidden: 8,
            backbone: BackboneConfig { channels: [2, 3, 4, 4] },
        }
    }

    fn targets() -> Vec<Target> {
        vec![
            Target { bbox: BBox::center(0.3, 0.3, 0.2, 0.2), category: 0 },
            Target { bbox: BBox::center(0.7, 0.6, 0.3, 0.1), category: 2 },
        ]
    }

    #[test]
    fn output_shapes_and_detections() {
        let (store, model) = Student::init(tiny(2), 1).unwrap();
        let image = noise_image(32, 1);
        let mut g = Graph::with_params(&store);
        let out = model.forward(&mut g, &image).unwrap();
        assert_eq!(out.len(), 2);
        for o in &out {
            assert_eq!(g.shape(o.logits), (5, 4));
            assert_eq!(g.shape(o.boxes), (5, 4));
        }
        let dets = model.detect(&store, &image).unwrap();
        assert_eq!(dets.len(), 5);
        assert!(dets.iter().all(|d| d.category < 3 && (0.0..=1.0).contains(&d.score)));
    }

    #[test]
    fn empty_targets_leave_only_the_class_term() {
        let (store, model) = Student::init(tiny(2), 2).unwrap();
        let image = noise_image(32, 2);
        let mut g = Graph::with_params(&store);
        let out = model.forward(&mut g, &image).unwrap();
        let l = model.loss(&mut g, &out, &[]).unwrap();
        assert_eq!((l.l1, l.giou), (0.0, 0.0));
        assert!((g.value(l.total).item() - l.class).abs() < 1e-12);
    }

    #[test]
    fn matched_loss_equals_optimal_assignment_terms() {
        let (store, model) = Student::init(tiny(1), 3).unwrap();
        let image = noise_image(32, 3);
        let mut g = Graph::with_params(&store);
        let out = model.forward(&mut g, &image).unwrap();
        let t = targets();
        let l = model.loss(&mut g, &out, &t).unwrap();
        // brute force over injective assignments of 2 targets to 5 queries
        let cost = model.matching_cost(g.value(out[0].logits), g.value(out[0].boxes), &t);
        let best = (0..5)
            .flat_map(|a| (0..5).filter(move |&b| b != a).map(move |b| (a, b)))
            .min_by(|x, y| (cost[x.0 * 2] + cost[x.1 * 2 + 1]).total_cmp(&(cost[y.0 * 2] + cost[y.1 * 2 + 1])))
            .unwrap();
        let boxes = g.value(out[0].boxes);
        let mut l1 = 0.0;
        for (q, tg) in [(best.0, t[0]), (best.1, t[1])] {
            l1 += boxes.row(q).iter().zip(tg.bbox.coords).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
        assert!((l.l1 - l1 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn capacity_and_category_errors() {
        let (store, model) = Student::init(tiny(1), 4).unwrap();
        let image = noise_image(32, 4);
        let mut g = Graph::with_params(&store);
        let out = model.forward(&mut g, &image).unwrap();
        let many = vec![targets()[0]; 6];
        assert!(matches!(model.loss(&mut g, &out, &many), Err(Error::Config(_))));
        let bad = vec![Target { category: 3, ..targets()[0] }];
        assert!(matches!(model.loss(&mut g, &out, &bad), Err(Error::CategoryOutOfRange { .. })));
    }

    #[test]
    fn every_parameter_receives_gradient_and_matches_finite_differences() {
        let (mut store, model) = Student::init(tiny(1), 5).unwrap();
        jitter(&mut store, 5);
        let image = noise_image(32, 5);
        let t = targets();
        let mut g = Graph::with_params(&store);
        let out = model.forward(&mut g, &image).unwrap();
        let l = model.loss(&mut g, &out, &t).unwrap();
        let grads = g.backward(l.total);
        let live: Vec<bool> = {
            let mut v = vec![false; store.len()];
            for (id, t) in grads.params() {
                v[id.index()] = t.max_abs() > 0.0;
            }
            v
        };
        let dead: Vec<&str> = store.ids().filter(|id| !live[id.index()]).map(|id| store.name(id)).collect();
        assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
        let mut rng = derived_rng(5, "student-fd");
        // finite-difference steps are too small to change the matching
        let report = param_grad_report(&store, 2, &mut rng, |g| {
            let out = model.forward(g, &image).unwrap();
            model.loss(g, &out, &t).unwrap().total
        });
        assert!(report.passed(), "{:#?}", report.failures);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (store, model) = Student::init(tiny(2), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.json");
        let mut ck = Checkpoint::new("student", model.cfg.clone(), store.clone());
        ck.epoch = 3;
        ck.step = 17;
        ck.save(&path).unwrap();
        let back: Checkpoint<StudentConfig> = Checkpoint::load(&path, "student").unwrap();
        assert_eq!(back.params, store);
        assert_eq!((back.epoch, back.step), (3, 17));
        assert_eq!(back.config, model.cfg);
        let image = noise_image(32, 6);
        let rebuilt = Student::init(back.config.clone(), 99).unwrap().1;
        assert_eq!(rebuilt.detect(&back.params, &image).unwrap(), model.detect(&store, &image).unwrap());
        assert!(matches!(Checkpoint::<StudentConfig>::load(&path, "teacher"), Err(Error::Checkpoint(_))));
    }
}
