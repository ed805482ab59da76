//! U-Net domain translator: encoder/decoder with skip concatenation,
//! channel doubling per level, transposed-conv upsampling and a sigmoid
//! head so outputs stay in `[0, 1]`. Resolution is preserved.

use serde::{Deserialize, Serialize};

use super::{add_conv, conv_layer, Arch, BoundNet, NetHandle, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl UNetSpec {
    pub fn new(in_channels: usize, base_channels: usize, depth: usize) -> Self {
        Self { in_channels, base_channels, depth }
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidArgument("unet depth must be >= 1".into()));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::InvalidArgument("unet channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Builds a resolution-preserving U-Net translator.
pub fn build_unet_generator(
    in_channels: usize,
    base_channels: usize,
    depth: usize,
    seed: u64,
) -> Result<NetHandle> {
    let spec = UNetSpec::new(in_channels, base_channels, depth);
    spec.validate()?;
    let mut rng = Rng64::stream(seed, "unet");
    let mut store = ParamStore::new();
    let mut prev = in_channels;
    for lvl in 0..depth {
        let c = spec.level_channels(lvl);
        add_conv(&mut store, &mut rng, &format!("enc{lvl}.conv"), c, prev, 3);
        add_conv(&mut store, &mut rng, &format!("enc{lvl}.down"), c, c, 3);
        prev = c;
    }
    let mid = prev * 2;
    add_conv(&mut store, &mut rng, "mid", mid, prev, 3);
    let mut up_in = mid;
    for lvl in (0..depth).rev() {
        let c = spec.level_channels(lvl);
        store.add(&format!("dec{lvl}.up.w"), super::he_conv_t(&mut rng, up_in, c));
        store.add(&format!("dec{lvl}.up.b"), Tensor::zeros(&[c]));
        add_conv(&mut store, &mut rng, &format!("dec{lvl}.fuse"), c, 2 * c, 3);
        up_in = c;
    }
    add_conv(&mut store, &mut rng, "out", in_channels, up_in, 3);
    Ok(NetHandle::from_parts(Arch::UNet(spec), store, false))
}

pub(super) fn forward(bound: &mut BoundNet, g: &mut Graph, spec: &UNetSpec, x: Var) -> Result<Var> {
    let (_, c, h, w) = g.value(x).dims4();
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "unet expects {} channels, got {c}",
            spec.in_channels
        )));
    }
    let div = 1usize << spec.depth;
    if h % div != 0 || w % div != 0 {
        return Err(Error::InvalidArgument(format!(
            "unet depth {} needs spatial dims divisible by {div}, got {h}x{w}",
            spec.depth
        )));
    }
    let mut skips = Vec::with_capacity(spec.depth);
    let mut cur = x;
    for lvl in 0..spec.depth {
        let conv = conv_layer(bound, g, &format!("enc{lvl}.conv"), cur, 1, 1);
        let act = g.leaky_relu(conv, LEAKY_SLOPE);
        skips.push(act);
        let down = conv_layer(bound, g, &format!("enc{lvl}.down"), act, 2, 1);
        cur = g.leaky_relu(down, LEAKY_SLOPE);
    }
    let mid = conv_layer(bound, g, "mid", cur, 1, 1);
    cur = g.leaky_relu(mid, LEAKY_SLOPE);
    for lvl in (0..spec.depth).rev() {
        let w_up = bound.var(&format!("dec{lvl}.up.w"));
        let b_up = bound.var(&format!("dec{lvl}.up.b"));
        let up = g.conv_transpose2x2(cur, w_up, Some(b_up));
        let cat = g.concat_channels(up, skips[lvl]);
        let fuse = conv_layer(bound, g, &format!("dec{lvl}.fuse"), cat, 1, 1);
        cur = g.leaky_relu(fuse, LEAKY_SLOPE);
    }
    let out = conv_layer(bound, g, "out", cur, 1, 1);
    Ok(g.sigmoid(out))
}
