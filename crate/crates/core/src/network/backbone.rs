//! Strided convolutional pyramid and deformable encoder.

use serde::{Deserialize, Serialize};

use crate::attention::{DeformableAttention, FeaturePyramid, LevelShape, MsdaDims, ReferenceBatch};
use crate::autograd::Graph;
use crate::datasets::Image;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, FeedForward, LayerNorm, Linear};
use crate::params::{ParamBuilder, ParamId};
use crate::prompt_codec::sine_embed_rows;
use crate::tensor::Tensor;

/// Total stride of the deepest level.
pub const MAX_STRIDE: usize = 32;
pub const NUM_LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Widths of the stride-4, 8, 16 and 32 blocks.
    pub channels: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 64],
        }
    }
}

/// `[H * W, 1]` input with pixels mapped to `(v / 255 - 0.5) / 0.25`.
pub fn image_tensor(image: &Image) -> Tensor {
    let data = image.pixels.iter().map(|&p| (p as f64 / 255.0 - 0.5) / 0.25).collect();
    Tensor::from_vec(image.width * image.height, 1, data)
}

/// A 4x4 stride-4 stem followed by three 3x3 stride-2 blocks; the last
/// three blocks feed the pyramid after a 1x1 projection to width `d`.
#[derive(Clone, Debug)]
pub struct Backbone {
    blocks: Vec<(Conv2d, LayerNorm)>,
    projections: Vec<(Linear, LayerNorm)>,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &BackboneConfig, dim: usize) -> Self {
        let c = cfg.channels;
        let mut blocks = Vec::new();
        let mut b = pb.sub("blocks");
        for (i, (cin, cout)) in [(1, c[0]), (c[0], c[1]), (c[1], c[2]), (c[2], c[3])].into_iter().enumerate() {
            let mut sub = b.sub(i);
            let conv = if i == 0 {
                Conv2d::new(&mut sub.sub("conv"), cin, cout, 4, 4, 0)
            } else {
                Conv2d::new(&mut sub.sub("conv"), cin, cout, 3, 2, 1)
            };
            blocks.push((conv, LayerNorm::new(&mut sub.sub("norm"), cout)));
        }
        drop(b);
        let mut p = pb.sub("proj");
        let projections = (0..NUM_LEVELS)
            .map(|l| {
                let mut sub = p.sub(l);
                (Linear::new(&mut sub.sub("linear"), c[l + 1], dim), LayerNorm::new(&mut sub.sub("norm"), dim))
            })
            .collect();
        Self { blocks, projections }
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: &Image) -> Result<FeaturePyramid> {
        if image.height % MAX_STRIDE != 0 || image.width % MAX_STRIDE != 0 || image.height == 0 || image.width == 0 {
            return Err(Error::IndivisibleInput {
                height: image.height,
                width: image.width,
                stride: MAX_STRIDE,
            });
        }
        let mut x = g.constant(image_tensor(image));
        let (mut h, mut w) = (image.height, image.width);
        let mut levels = Vec::new();
        let mut shapes = Vec::new();
        for (i, (conv, norm)) in self.blocks.iter().enumerate() {
            let (y, ho, wo) = conv.forward(g, x, h, w);
            let y = norm.forward(g, y);
            x = g.relu(y);
            h = ho;
            w = wo;
            if i >= 1 {
                let (lin, ln) = &self.projections[i - 1];
                let p = lin.forward(g, x);
                levels.push(ln.forward(g, p));
                shapes.push(LevelShape::new(h, w));
            }
        }
        let tokens = g.concat_rows(&levels);
        FeaturePyramid::new(g, shapes, tokens)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attention: DeformableAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

/// Deformable self-attention over pyramid tokens; each token samples
/// around its own grid center.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    layers: Vec<EncoderLayer>,
    level_embed: ParamId,
    dim: usize,
}

impl VisualEncoder {
    pub fn new(pb: &mut ParamBuilder<'_>, dims: MsdaDims, layers: usize, hidden: usize) -> Result<Self> {
        let level_embed = pb.uniform("level_embed", dims.levels, dims.dim, 1.0);
        let mut lp = pb.sub("layers");
        let layers = (0..layers)
            .map(|i| {
                let mut sub = lp.sub(i);
                Ok(EncoderLayer {
                    attention: DeformableAttention::new(&mut sub.sub("attention"), dims)?,
                    norm1: LayerNorm::new(&mut sub.sub("norm1"), dims.dim),
                    ffn: FeedForward::new(&mut sub.sub("ffn"), dims.dim, hidden),
                    norm2: LayerNorm::new(&mut sub.sub("norm2"), dims.dim),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            level_embed,
            dim: dims.dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, pyramid: FeaturePyramid) -> Result<FeaturePyramid> {
        let centers = pyramid.token_centers();
        let coords: Vec<Vec<f64>> = centers.iter().map(|p| vec![p.x, p.y]).collect();
        let sine = g.constant(sine_embed_rows(&coords, self.dim / 2));
        let level_of: Vec<usize> = pyramid
            .shapes
            .iter()
            .enumerate()
            .flat_map(|(l, s)| std::iter::repeat_n(l, s.len()))
            .collect();
        let table = g.param(self.level_embed);
        let lvl = g.gather_rows(table, &level_of);
        let pos = g.add(sine, lvl);
        let reference = g.constant(Tensor::from_rows(&coords));
        let mut x = pyramid.tokens;
        for layer in &self.layers {
            let q = g.add(x, pos);
            let current = FeaturePyramid {
                shapes: pyramid.shapes.clone(),
                tokens: x,
            };
            let a = layer.attention.forward(g, q, ReferenceBatch::Points(reference), &current)?;
            let y = g.add(x, a);
            let y = layer.norm1.forward(g, y);
            let f = layer.ffn.forward(g, y);
            let z = g.add(y, f);
            x = layer.norm2.forward(g, z);
        }
        Ok(FeaturePyramid {
            shapes: pyramid.shapes,
            tokens: x,
        })
    }
}
