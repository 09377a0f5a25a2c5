//! Point-to-box teacher: backbone, deformable encoder and a stack of
//! prompt-driven decoder stages with per-stage box refinement.

use serde::{Deserialize, Serialize};

use crate::attention::{
    prompt_cross_attention, AttentionMask, DeformableAttention, FeaturePyramid, Guidance, MsdaDims, ReferenceBatch,
    SelfAttention,
};
use crate::autograd::{inverse_sigmoid, sigmoid, Graph, Var};
use crate::click_moe::{ExpertBank, ExpertMode};
use crate::datasets::Image;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point2D};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamBuilder, ParamStore};
use crate::prompt_codec::{PromptEncoder, PromptParts, Reference};
use crate::tensor::Tensor;

use super::backbone::{Backbone, BackboneConfig, VisualEncoder, NUM_LEVELS};

/// Clamp applied before taking logits of reference coordinates.
pub const REFERENCE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub dim: usize,
    pub decoder_stages: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub num_classes: usize,
    pub class_guided: bool,
    pub experts: ExpertMode,
    /// Hidden width of every expert.
    pub expert_hidden: usize,
    pub encoder_hidden: usize,
    pub backbone: BackboneConfig,
}

impl TeacherConfig {
    /// Desk-scale defaults.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            dim: 64,
            decoder_stages: 3,
            encoder_layers: 2,
            heads: 4,
            points: 2,
            num_classes,
            class_guided: true,
            experts: ExpertMode::default(),
            expert_hidden: 256,
            encoder_hidden: 128,
            backbone: BackboneConfig::default(),
        }
    }

    pub fn guidance(&self) -> Guidance {
        if self.class_guided {
            Guidance::ClassGuided
        } else {
            Guidance::Vanilla
        }
    }

    pub fn msda_dims(&self) -> MsdaDims {
        MsdaDims {
            dim: self.dim,
            heads: self.heads,
            levels: NUM_LEVELS,
            points: self.points,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_stages == 0 {
            return Err(Error::Config("decoder needs at least one stage".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("at least one category is required".into()));
        }
        if self.dim % 4 != 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a multiple of 4 and of {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// One prompt: normalized point, category, group index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherPrompt {
    pub point: Point2D,
    pub category: usize,
    pub group: usize,
}

/// Center-form boxes per stage, one per prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePrediction {
    pub stages: Vec<Vec<BBox>>,
}

impl StagePrediction {
    pub fn final_boxes(&self) -> &[BBox] {
        self.stages.last().expect("at least one stage")
    }
}

/// Logit-space anchor of a reference: the full box, or the point with a
/// zero size prior.
pub fn delta_anchor(reference: &Reference) -> [f64; 4] {
    match reference {
        Reference::Point(p) => [
            inverse_sigmoid(p.x, REFERENCE_EPS),
            inverse_sigmoid(p.y, REFERENCE_EPS),
            0.0,
            0.0,
        ],
        Reference::Box(b) => b.to_center().coords.map(|v| inverse_sigmoid(v, REFERENCE_EPS)),
    }
}

/// `sigmoid(anchor + deltas)` in center form, clamped to the unit square.
pub fn apply_box_deltas(reference: Reference, deltas: [f64; 4]) -> BBox {
    let a = delta_anchor(&reference);
    let c: [f64; 4] = std::array::from_fn(|i| sigmoid(a[i] + deltas[i]).clamp(0.0, 1.0));
    BBox::center(c[0], c[1], c[2], c[3])
}

/// Graph form of [`apply_box_deltas`] for `[n, 4]` deltas and anchors.
pub fn apply_box_deltas_graph(g: &mut Graph<'_>, deltas: Var, anchors: &Tensor) -> Var {
    let a = g.constant(anchors.clone());
    let z = g.add(deltas, a);
    g.sigmoid(z)
}

/// Two-layer MLP from query content to box deltas.
#[derive(Clone, Debug)]
pub struct BoxHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl BoxHead {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Self {
        let hidden = Linear::new(&mut pb.sub("hidden"), dim, dim);
        let mut sub = pb.sub("output");
        let output = Linear {
            weight: sub.uniform("weight", dim, 4, 1e-3),
            bias: Some(sub.zeros("bias", 1, 4)),
            in_dim: dim,
            out_dim: 4,
        };
        Self { hidden, output }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub self_attn: SelfAttention,
    pub norm1: LayerNorm,
    pub cross_attn: DeformableAttention,
    pub norm2: LayerNorm,
    pub experts: ExpertBank,
    pub norm3: LayerNorm,
    pub head: BoxHead,
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub cfg: TeacherConfig,
    pub backbone: Backbone,
    pub encoder: VisualEncoder,
    pub prompt: PromptEncoder,
    pub stages: Vec<DecoderStage>,
}

impl Teacher {
    /// Builds the module tree, registering parameters under `pb`.
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: TeacherConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.msda_dims();
        let backbone = Backbone::new(&mut pb.sub("backbone"), &cfg.backbone, cfg.dim);
        let encoder = VisualEncoder::new(&mut pb.sub("encoder"), dims, cfg.encoder_layers, cfg.encoder_hidden)?;
        let prompt = PromptEncoder::new(&mut pb.sub("prompt"), cfg.num_classes, cfg.dim)?;
        let mut dp = pb.sub("decoder");
        let mut stages = Vec::with_capacity(cfg.decoder_stages);
        for s in 0..cfg.decoder_stages {
            let mut sp = dp.sub(s);
            stages.push(DecoderStage {
                self_attn: SelfAttention::new(&mut sp.sub("self_attn"), cfg.dim, cfg.heads)?,
                norm1: LayerNorm::new(&mut sp.sub("norm1"), cfg.dim),
                cross_attn: DeformableAttention::new(&mut sp.sub("cross_attn"), dims)?,
                norm2: LayerNorm::new(&mut sp.sub("norm2"), cfg.dim),
                experts: ExpertBank::new(
                    &mut sp.sub("experts"),
                    cfg.experts,
                    cfg.dim,
                    cfg.expert_hidden,
                    cfg.num_classes,
                    cfg.heads,
                )?,
                norm3: LayerNorm::new(&mut sp.sub("norm3"), cfg.dim),
                head: BoxHead::new(&mut sp.sub("head"), cfg.dim),
            });
        }
        Ok(Self {
            cfg,
            backbone,
            encoder,
            prompt,
            stages,
        })
    }

    /// Fresh parameter store and model for a seed.
    pub fn init(cfg: TeacherConfig, seed: u64) -> Result<(ParamStore, Self)> {
        let mut store = ParamStore::new();
        let model = Teacher::new(&mut ParamBuilder::new(&mut store, seed).sub("teacher"), cfg)?;
        Ok((store, model))
    }

    pub fn encode_image(&self, g: &mut Graph<'_>, image: &Image) -> Result<FeaturePyramid> {
        let p = self.backbone.forward(g, image)?;
        self.encoder.forward(g, p)
    }

    /// Per-stage `[n, 4]` center-form boxes for the prompts.
    pub fn decode(&self, g: &mut Graph<'_>, memory: &FeaturePyramid, prompts: &[TeacherPrompt]) -> Result<Vec<Var>> {
        if prompts.is_empty() {
            return Err(Error::Config("teacher needs at least one prompt".into()));
        }
        let n = prompts.len();
        let categories: Vec<usize> = prompts.iter().map(|p| p.category).collect();
        let groups: Vec<usize> = prompts.iter().map(|p| p.group).collect();
        let points: Vec<Point2D> = prompts.iter().map(|p| p.point).collect();
        let mask = AttentionMask::from_groups(&groups);
        let guidance = self.cfg.guidance();

        let mut parts: PromptParts = self.prompt.encode_points(g, &points, &categories)?;
        let mut refs: Vec<Reference> = points.iter().map(|&p| Reference::Point(p)).collect();
        let mut reference =
            ReferenceBatch::Points(g.constant(Tensor::from_rows(&points.iter().map(|p| vec![p.x, p.y]).collect::<Vec<_>>())));
        let mut content = g.constant(Tensor::zeros(n, self.cfg.dim));
        let mut outputs = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            // values carry the prompt too: zero stage-one content would
            // otherwise make every value row the bias
            let sa_in = g.add(content, parts.full);
            let a = stage.self_attn.forward(g, sa_in, None, Some(&mask));
            let x = g.add(content, a);
            let x = stage.norm1.forward(g, x);
            let c = prompt_cross_attention(g, &stage.cross_attn, x, &parts, guidance, reference, memory)?;
            let x = g.add(x, c);
            let x = stage.norm2.forward(g, x);
            let x = stage.experts.forward(g, x, &categories, Some(&mask))?;
            content = stage.norm3.forward(g, x);

            let deltas = stage.head.forward(g, content);
            let anchors = Tensor::from_rows(&refs.iter().map(|r| delta_anchor(r).to_vec()).collect::<Vec<_>>());
            let boxes = apply_box_deltas_graph(g, deltas, &anchors);
            outputs.push(boxes);

            if s + 1 < self.stages.len() {
                // references are detached between stages
                let b = g.value(boxes).clone();
                let next: Vec<BBox> = (0..n)
                    .map(|r| {
                        let v = b.row(r);
                        BBox::center(v[0], v[1], v[2], v[3])
                    })
                    .collect();
                parts = self.prompt.encode_boxes(g, &next, &categories)?;
                refs = next.iter().map(|&b| Reference::Box(b)).collect();
                reference = ReferenceBatch::Boxes(g.constant(b));
            }
        }
        Ok(outputs)
    }

    /// Full forward returning the graph handles of every stage.
    pub fn forward(&self, g: &mut Graph<'_>, image: &Image, prompts: &[TeacherPrompt]) -> Result<Vec<Var>> {
        let memory = self.encode_image(g, image)?;
        self.decode(g, &memory, prompts)
    }

    /// Plain-value forward.
    pub fn predict(&self, store: &ParamStore, image: &Image, prompts: &[TeacherPrompt]) -> Result<StagePrediction> {
        let mut g = Graph::with_params(store);
        let vars = self.forward(&mut g, image, prompts)?;
        let stages = vars
            .iter()
            .map(|&v| {
                let t = g.value(v);
                (0..t.rows())
                    .map(|r| {
                        let b = t.row(r);
                        BBox::center(b[0], b[1], b[2], b[3])
                    })
                    .collect()
            })
            .collect();
        Ok(StagePrediction { stages })
    }
}

/// Anything that maps point prompts on an image to one normalized
/// center-form box per prompt.
pub trait BoxPredictor {
    fn predict_boxes(&self, image: &Image, prompts: &[TeacherPrompt]) -> Result<Vec<BBox>>;
}

/// A teacher bound to its parameters.
#[derive(Clone, Debug)]
pub struct TrainedTeacher {
    pub model: Teacher,
    pub store: ParamStore,
}

impl BoxPredictor for TrainedTeacher {
    fn predict_boxes(&self, image: &Image, prompts: &[TeacherPrompt]) -> Result<Vec<BBox>> {
        Ok(self.model.predict(&self.store, image, prompts)?.final_boxes().to_vec())
    }
}
