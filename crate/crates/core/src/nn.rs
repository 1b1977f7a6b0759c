//! Parameter registration and layer helpers shared by the detection and
//! segmentation branches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, NodeId, ParamStore};

/// Parameter source for a forward pass. With `track_grad == false` weights
/// enter the graph as constants.
#[derive(Clone, Copy, Debug)]
pub struct Weights<'a> {
    pub store: &'a ParamStore,
    pub track_grad: bool,
}

impl<'a> Weights<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, track_grad: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, track_grad: false }
    }

    pub fn node(&self, graph: &mut Graph, name: &str) -> Result<NodeId> {
        if self.track_grad {
            graph.param(self.store, name)
        } else {
            graph.frozen_param(self.store, name)
        }
    }
}

pub fn register_conv<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Result<()> {
    register_conv_with(store, rng, name, c_in, c_out, k, Init::FanInUniform { fan_in: c_in * k * k })
}

/// Small-weight init for prediction layers so initial outputs sit near zero.
pub const OUTPUT_INIT: Init = Init::Uniform { bound: 0.01 };

pub fn register_conv_with<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    init: Init,
) -> Result<()> {
    store.add(format!("{name}.weight"), [c_out, c_in, k, k], init, rng)?;
    store.add(format!("{name}.bias"), [c_out, 1, 1, 1], Init::Zeros, rng)?;
    Ok(())
}

/// Convolution with padding chosen to preserve spatial size at stride 1.
pub fn conv(
    graph: &mut Graph,
    weights: Weights<'_>,
    name: &str,
    x: NodeId,
    stride: usize,
    dilation: usize,
) -> Result<NodeId> {
    let w = weights.node(graph, &format!("{name}.weight"))?;
    let b = weights.node(graph, &format!("{name}.bias"))?;
    let k = graph.value(w).shape()[2];
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("{name}: even kernel {k} has no centred padding")));
    }
    let padding = dilation * (k - 1) / 2;
    graph.conv2d(x, w, Some(b), stride, dilation, padding)
}

pub fn conv_relu(
    graph: &mut Graph,
    weights: Weights<'_>,
    name: &str,
    x: NodeId,
    stride: usize,
    dilation: usize,
) -> Result<NodeId> {
    let y = conv(graph, weights, name, x, stride, dilation)?;
    Ok(graph.relu(y))
}
