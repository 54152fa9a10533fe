//! Parameterized layers. A layer only knows its parameter names and
//! geometry; the values live in a [`ParamTree`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::kernels::PadMode;
use super::params::ParamTree;
use super::tensor::Tensor;
use crate::error::Result;

/// Negative slope used by every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Where a forward pass reads its parameters from, and whether they
/// receive gradients.
#[derive(Clone, Copy)]
pub struct Params<'a> {
    tree: &'a ParamTree,
    trainable: bool,
}

impl<'a> Params<'a> {
    pub fn trainable(tree: &'a ParamTree) -> Self {
        Params {
            tree,
            trainable: true,
        }
    }

    pub fn frozen(tree: &'a ParamTree) -> Self {
        Params {
            tree,
            trainable: false,
        }
    }

    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(self.tree, name, self.trainable)
    }

    pub fn tree(&self) -> &'a ParamTree {
        self.tree
    }
}

/// Kaiming-normal (fan-in) weights times `scale`, zero bias.
fn kaiming(shape: &[usize], fan_in: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt() * scale;
    Tensor::randn(shape, std, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    /// A "same"-padded stride-1 convolution.
    pub fn same(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn strided(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        Conv2d {
            stride,
            ..Conv2d::same(name, in_channels, out_channels, 3)
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    pub fn init(&self, tree: &mut ParamTree, scale: f64, rng: &mut impl Rng) -> Result<()> {
        let shape = [
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ];
        let fan_in = self.in_channels * self.kernel * self.kernel;
        tree.register(self.weight_name(), kaiming(&shape, fan_in, scale, rng))?;
        tree.register(self.bias_name(), Tensor::zeros(&[self.out_channels]))
    }

    pub fn forward(&self, g: &mut Graph, p: Params, x: Var) -> Result<Var> {
        let w = p.var(g, &self.weight_name())?;
        let b = p.var(g, &self.bias_name())?;
        g.conv2d(x, w, Some(b), self.stride, self.padding, self.pad_mode)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Dense {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn init(&self, tree: &mut ParamTree, scale: f64, rng: &mut impl Rng) -> Result<()> {
        let w = kaiming(
            &[self.out_features, self.in_features],
            self.in_features,
            scale,
            rng,
        );
        tree.register(format!("{}.weight", self.name), w)?;
        tree.register(
            format!("{}.bias", self.name),
            Tensor::zeros(&[self.out_features]),
        )
    }

    pub fn forward(&self, g: &mut Graph, p: Params, x: Var) -> Result<Var> {
        let w = p.var(g, &format!("{}.weight", self.name))?;
        let b = p.var(g, &format!("{}.bias", self.name))?;
        g.dense(x, w, Some(b))
    }
}
