//! Frozen perceptual encoders.
//!
//! [`FeatureExtractorSpec`] describes a VGG-style stack of 3x3 conv + ReLU
//! blocks separated by 2x2 max pooling, addressed by `(q, r)`: the feature
//! map of the `q`-th convolution (after activation) of block `r`, before the
//! `r`-th pooling. The same scheme serves the cycle-perceptual extractors and
//! the content extractor.
//!
//! [`SemanticEncoderSpec`] is the embedded-semantics encoder: a shared conv
//! trunk behind a parameter-free resolution adapter (the HR variant
//! average-pools by the scale factor first), global pooling and a linear
//! projection to a fixed semantics width, so both variants emit vectors of
//! identical length.
//!
//! Both default to seed-reproducible random parameters; `pretrained` mode
//! loads weights from a parameter file in the crate's checkpoint format.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{add_conv, conv_layer, Arch, BoundNet, NetHandle, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtractorMode {
    FixedRandom { seed: u64 },
    Pretrained { path: PathBuf },
}

impl Default for ExtractorMode {
    fn default() -> Self {
        ExtractorMode::FixedRandom { seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureExtractorSpec {
    /// Convolution index within the block (1-based `q`).
    pub conv_index: usize,
    /// Block index (1-based `r`); block `r` ends before its max pool.
    pub block_index: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// Convolutions per block; the VGG-16-style default is `[2, 2, 3, 3]`.
    pub convs_per_block: Vec<usize>,
    pub mode: ExtractorMode,
}

impl FeatureExtractorSpec {
    pub fn fixed_random(conv_index: usize, block_index: usize, base_channels: usize, seed: u64) -> Self {
        Self {
            conv_index,
            block_index,
            in_channels: 3,
            base_channels,
            convs_per_block: vec![2, 2, 3, 3],
            mode: ExtractorMode::FixedRandom { seed },
        }
    }

    fn block_channels(&self, block: usize) -> usize {
        self.base_channels << block.min(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_index == 0 || self.block_index > self.convs_per_block.len() {
            return Err(Error::InvalidArgument(format!(
                "block index {} outside 1..={}",
                self.block_index,
                self.convs_per_block.len()
            )));
        }
        let max_q = self.convs_per_block[self.block_index - 1];
        if self.conv_index == 0 || self.conv_index > max_q {
            return Err(Error::InvalidArgument(format!(
                "conv index {} outside 1..={max_q} for block {}",
                self.conv_index, self.block_index
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::InvalidArgument("extractor channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Builds the frozen feature extractor addressed by `(q, r)`.
pub fn build_feature_extractor(spec: &FeatureExtractorSpec) -> Result<NetHandle> {
    spec.validate()?;
    let seed = match &spec.mode {
        ExtractorMode::FixedRandom { seed } => *seed,
        ExtractorMode::Pretrained { .. } => 0,
    };
    let mut rng = Rng64::stream(seed, "feature_extractor");
    let mut store = ParamStore::new();
    let mut prev = spec.in_channels;
    for block in 0..spec.block_index {
        let c = spec.block_channels(block);
        let n_convs = if block + 1 == spec.block_index {
            spec.conv_index
        } else {
            spec.convs_per_block[block]
        };
        for conv in 0..n_convs {
            add_conv(&mut store, &mut rng, &format!("b{block}.c{conv}"), c, prev, 3);
            prev = c;
        }
    }
    let mut net = NetHandle::from_parts(Arch::FeatureExtractor(spec.clone()), store, true);
    if let ExtractorMode::Pretrained { path } = &spec.mode {
        load_pretrained(&mut net, path)?;
    }
    Ok(net)
}

fn load_pretrained(net: &mut NetHandle, path: &std::path::Path) -> Result<()> {
    let tensors = crate::checkpoint::read_named_tensors(path)?;
    let names: Vec<String> = net.params().entries().iter().map(|e| e.name.clone()).collect();
    for name in names {
        let tensor = tensors
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| {
                Error::Checkpoint(format!("pretrained file missing parameter {name}"))
            })?;
        net.load_param(&name, tensor)?;
    }
    Ok(())
}

pub(super) fn forward_features(
    bound: &mut BoundNet,
    g: &mut Graph,
    spec: &FeatureExtractorSpec,
    x: Var,
) -> Result<Var> {
    let (_, c, mut h, mut w) = g.value(x).dims4();
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "extractor expects {} channels, got {c}",
            spec.in_channels
        )));
    }
    let mut cur = x;
    for block in 0..spec.block_index {
        if block > 0 {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "extractor pooling needs even dims, got {h}x{w}"
                )));
            }
            cur = g.max_pool2(cur);
            h /= 2;
            w /= 2;
        }
        let n_convs = if block + 1 == spec.block_index {
            spec.conv_index
        } else {
            spec.convs_per_block[block]
        };
        for conv in 0..n_convs {
            let c = conv_layer(bound, g, &format!("b{block}.c{conv}"), cur, 1, 1);
            cur = g.relu(c);
        }
    }
    Ok(cur)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SemanticEncoderSpec {
    /// Length of the embedded-semantics vector.
    pub d_sem: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    /// Pooling factor of the HR-variant resolution adapter.
    pub hr_scale: usize,
    /// True for the HR-side encoder, false for the LR side; the trunk layout
    /// (and hence the manifest) is identical either way.
    pub hr_variant: bool,
    pub mode: ExtractorMode,
}

impl SemanticEncoderSpec {
    pub fn fixed_random(d_sem: usize, base_channels: usize, hr_scale: usize, seed: u64) -> Self {
        Self {
            d_sem,
            in_channels: 3,
            base_channels,
            hr_scale,
            hr_variant: false,
            mode: ExtractorMode::FixedRandom { seed },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_sem == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArgument("semantic encoder sizes must be >= 1".into()));
        }
        if self.hr_scale == 0 {
            return Err(Error::InvalidArgument("hr_scale must be >= 1".into()));
        }
        Ok(())
    }
}

/// Builds one of the two side-by-side semantic encoders. Same spec and seed
/// give identical trunk parameters, which realizes the shared trunk.
pub fn build_semantic_encoder(spec: &SemanticEncoderSpec, hr_variant: bool) -> Result<NetHandle> {
    spec.validate()?;
    let mut spec = spec.clone();
    spec.hr_variant = hr_variant;
    let seed = match &spec.mode {
        ExtractorMode::FixedRandom { seed } => *seed,
        ExtractorMode::Pretrained { .. } => 0,
    };
    let mut rng = Rng64::stream(seed, "semantic_encoder");
    let mut store = ParamStore::new();
    let b = spec.base_channels;
    add_conv(&mut store, &mut rng, "b0.c0", b, spec.in_channels, 3);
    add_conv(&mut store, &mut rng, "b0.c1", b, b, 3);
    add_conv(&mut store, &mut rng, "b1.c0", 2 * b, b, 3);
    store.add("proj.w", super::he_linear(&mut rng, spec.d_sem, 2 * b));
    store.add("proj.b", Tensor::zeros(&[spec.d_sem]));
    let mut net = NetHandle::from_parts(Arch::SemanticEncoder(spec.clone()), store, true);
    if let ExtractorMode::Pretrained { path } = &spec.mode {
        load_pretrained(&mut net, path)?;
    }
    Ok(net)
}

pub(super) fn forward_semantics(
    bound: &mut BoundNet,
    g: &mut Graph,
    spec: &SemanticEncoderSpec,
    x: Var,
) -> Result<Var> {
    let (_, c, h, w) = g.value(x).dims4();
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "semantic encoder expects {} channels, got {c}",
            spec.in_channels
        )));
    }
    let mut cur = x;
    if spec.hr_variant {
        if h % spec.hr_scale != 0 || w % spec.hr_scale != 0 {
            return Err(Error::InvalidArgument(format!(
                "HR adapter pool {} does not divide {h}x{w}",
                spec.hr_scale
            )));
        }
        cur = g.avg_pool(cur, spec.hr_scale);
    }
    let (_, _, h, w) = g.value(cur).dims4();
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "semantic encoder needs even dims >= 2 after the adapter, got {h}x{w}"
        )));
    }
    let c0 = conv_layer(bound, g, "b0.c0", cur, 1, 1);
    let a0 = g.relu(c0);
    let c1 = conv_layer(bound, g, "b0.c1", a0, 1, 1);
    let a1 = g.relu(c1);
    let pooled = g.max_pool2(a1);
    let c2 = conv_layer(bound, g, "b1.c0", pooled, 1, 1);
    let a2 = g.relu(c2);
    let gap = g.global_avg_pool(a2);
    let w_proj = bound.var("proj.w");
    let b_proj = bound.var("proj.b");
    Ok(g.linear(gap, w_proj, Some(b_proj)))
}
