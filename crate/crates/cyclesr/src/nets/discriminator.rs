//! Convolutional critic: nine 3x3 convolutions with batch normalization and
//! leaky ReLU, global average pooling and a linear head producing one raw
//! score per sample (no final sigmoid — relativistic losses squash later).

use serde::{Deserialize, Serialize};

use super::{add_bn, add_conv, bn_layer, conv_layer, Arch, BoundNet, Mode, NetHandle, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const N_CONVS: usize = 9;
pub const LEAKY_SLOPE: f64 = 0.2;
const STRIDES: [usize; N_CONVS] = [1, 2, 1, 2, 1, 2, 1, 2, 1];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscSpec {
    pub in_channels: usize,
    /// Output channels of each of the nine convolutions.
    pub channels: [usize; N_CONVS],
    /// Smallest accepted input side. The 32-pixel default keeps the full
    /// receptive footprint; desk-scale configs may lower it explicitly.
    pub min_input: usize,
}

impl DiscSpec {
    /// Default width plan: doubling every other layer, 64 -> 512 at base 64.
    pub fn new(in_channels: usize, base_channels: usize) -> Self {
        let b = base_channels;
        Self {
            in_channels,
            channels: [b, b, 2 * b, 2 * b, 4 * b, 4 * b, 8 * b, 8 * b, 8 * b],
            min_input: 32,
        }
    }

    pub fn with_min_input(mut self, min_input: usize) -> Self {
        self.min_input = min_input;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArgument("discriminator channels must be >= 1".into()));
        }
        if self.min_input == 0 {
            return Err(Error::InvalidArgument("min_input must be >= 1".into()));
        }
        Ok(())
    }
}

/// Builds the nine-conv critic. Batch norm on every conv except the first.
pub fn build_conv_discriminator(spec: &DiscSpec, seed: u64) -> Result<NetHandle> {
    spec.validate()?;
    let mut rng = Rng64::stream(seed, "disc");
    let mut store = ParamStore::new();
    let mut prev = spec.in_channels;
    for (i, &c) in spec.channels.iter().enumerate() {
        add_conv(&mut store, &mut rng, &format!("conv{i}"), c, prev, 3);
        if i > 0 {
            add_bn(&mut store, &format!("conv{i}.bn"), c);
        }
        prev = c;
    }
    store.add("head.w", super::he_linear(&mut rng, 1, prev));
    store.add("head.b", Tensor::zeros(&[1]));
    Ok(NetHandle::from_parts(Arch::Discriminator(spec.clone()), store, false))
}

pub(super) fn forward(
    bound: &mut BoundNet,
    g: &mut Graph,
    spec: &DiscSpec,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let (b, c, h, w) = g.value(x).dims4();
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "discriminator expects {} channels, got {c}",
            spec.in_channels
        )));
    }
    if h < spec.min_input || w < spec.min_input {
        return Err(Error::InvalidArgument(format!(
            "discriminator input {h}x{w} below the {0}x{0} minimum",
            spec.min_input
        )));
    }
    let mut cur = x;
    for i in 0..N_CONVS {
        cur = conv_layer(bound, g, &format!("conv{i}"), cur, STRIDES[i], 1);
        if i > 0 {
            cur = bn_layer(bound, g, &format!("conv{i}.bn"), cur, mode);
        }
        cur = g.leaky_relu(cur, LEAKY_SLOPE);
    }
    let pooled = g.global_avg_pool(cur);
    let wv = bound.var("head.w");
    let bv = bound.var("head.b");
    let score = g.linear(pooled, wv, Some(bv));
    Ok(g.reshape(score, &[b]))
}
