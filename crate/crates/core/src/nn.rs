//! Small parameterized layers on top of the autograd graph.

use crate::autograd::{ConvGeom, Graph, Var};
use crate::params::{ParamBuilder, ParamId};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: pb.xavier("weight", in_dim, out_dim),
            bias: Some(pb.zeros("bias", 1, out_dim)),
            in_dim,
            out_dim,
        }
    }

    pub fn no_bias(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: pb.xavier("weight", in_dim, out_dim),
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Self {
        Self {
            gamma: pb.ones("gamma", 1, dim),
            beta: pb.zeros("beta", 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer feed-forward map with a ReLU after the first layer.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(&mut pb.sub("hidden"), dim, hidden),
            output: Linear::new(&mut pb.sub("output"), hidden, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

/// Channels-last convolution: `[H * W, C_in] -> [H' * W', C_out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub proj: Linear,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            kernel,
            stride,
            pad,
            in_channels,
            proj: Linear::new(pb, kernel * kernel * in_channels, out_channels),
        }
    }

    /// Returns the output and its spatial shape.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, height: usize, width: usize) -> (Var, usize, usize) {
        let geom = ConvGeom {
            height,
            width,
            channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let cols = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x
        } else {
            g.im2col(x, geom)
        };
        (self.proj.forward(g, cols), geom.out_height(), geom.out_width())
    }
}
