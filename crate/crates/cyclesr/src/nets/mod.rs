//! Network constructors and the machinery shared by all of them.
//!
//! A network is data: an architecture descriptor plus a flat, ordered store
//! of named parameter tensors (and running-statistic buffers). Forward
//! evaluation binds the store onto a [`Graph`](crate::graph::Graph) — as
//! gradient-tracked leaves for trainable nets, as constants for frozen ones —
//! and builds the computation from the architecture. Parameter manifests are
//! therefore deterministic, serializable and independent of any forward pass.

pub mod discriminator;
pub mod extractor;
pub mod joint;
pub mod relativistic;
pub mod sr_generator;
pub mod unet;

pub use discriminator::{build_conv_discriminator, DiscSpec};
pub use extractor::{
    build_feature_extractor, build_semantic_encoder, ExtractorMode, FeatureExtractorSpec,
    SemanticEncoderSpec,
};
pub use joint::{build_joint_discriminator, JointDiscSpec};
pub use relativistic::{relativistic_logits, relativistic_logits_g, RelativisticLogits};
pub use sr_generator::{build_sr_generator, SrGeneratorSpec};
pub use unet::{build_unet_generator, UNetSpec};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng64;
use crate::tensor::Tensor;

/// Momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running buffers are updated by the owning step.
    Train,
    /// Running statistics; fully deterministic given parameters and input.
    Eval,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers (running statistics) never receive gradients.
    pub buffer: bool,
}

/// Ordered, name-indexed collection of tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, tensor: Tensor, buffer: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), tensor, buffer });
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) {
        self.insert(name, tensor, false);
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) {
        self.insert(name, tensor, true);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn set_by_index(&mut self, idx: usize, tensor: Tensor) -> Result<()> {
        let entry = &mut self.entries[idx];
        if entry.tensor.dims() != tensor.dims() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {} has shape {:?}, got {:?}",
                entry.name,
                entry.tensor.dims(),
                tensor.dims()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    fn set_by_name(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        self.set_by_index(idx, tensor)
    }

    /// Total element count of trainable (non-buffer) entries.
    pub fn param_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.buffer).map(|e| e.tensor.numel()).sum()
    }
}

/// Architecture descriptor; together with a seed it determines the parameter
/// manifest exactly.
#[derive(Debug, Clone)]
pub enum Arch {
    UNet(UNetSpec),
    Discriminator(DiscSpec),
    FeatureExtractor(FeatureExtractorSpec),
    SrGenerator(SrGeneratorSpec),
    SemanticEncoder(SemanticEncoderSpec),
    JointDiscriminator(JointDiscSpec),
    /// Parameter-free identity map; a stub for wiring tests and ablations.
    Identity,
}

/// Parameter-free stub whose forward is the identity map.
pub fn identity_net() -> NetHandle {
    NetHandle::from_parts(Arch::Identity, ParamStore::new(), false)
}

/// An opaque trainable (or frozen) network: forward evaluation plus parameter
/// access.
#[derive(Debug, Clone)]
pub struct NetHandle {
    arch: Arch,
    params: ParamStore,
    frozen: bool,
}

impl NetHandle {
    pub(crate) fn from_parts(arch: Arch, params: ParamStore, frozen: bool) -> Self {
        Self { arch, params, frozen }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Updates one parameter; rejected for frozen networks.
    pub fn set_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidArgument(format!(
                "network is frozen; refusing to update {name}"
            )));
        }
        self.params.set_by_name(name, tensor)
    }

    /// Overwrites a tensor regardless of frozen state. This is the loading
    /// path used by checkpoints and pretrained weights, not a training path.
    pub fn load_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.params.set_by_name(name, tensor)
    }

    pub(crate) fn set_param_by_index(&mut self, idx: usize, tensor: Tensor) -> Result<()> {
        self.params.set_by_index(idx, tensor)
    }

    /// Zeroes every entry whose name matches the predicate. Used by the
    /// structural-ablation tooling and tests.
    pub fn zero_params_matching(&mut self, pred: impl Fn(&str) -> bool) {
        for entry in &mut self.params.entries {
            if pred(&entry.name) {
                entry.tensor = Tensor::zeros(entry.tensor.dims());
            }
        }
    }

    /// Binds the parameters onto a graph. `trainable = true` creates
    /// gradient-tracked leaves (unless the net is frozen — frozen parameters
    /// are always bound as constants); buffers are always constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundNet {
        let as_leaves = trainable && !self.frozen;
        let vars = self
            .params
            .entries
            .iter()
            .map(|e| {
                if as_leaves && !e.buffer {
                    g.leaf(e.tensor.clone())
                } else {
                    g.constant(e.tensor.clone())
                }
            })
            .collect();
        BoundNet {
            arch: self.arch.clone(),
            vars,
            index: self.params.index.clone(),
            buffer_shadow: BTreeMap::new(),
        }
    }

    /// Inference-mode forward on a fresh binding.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut bound = self.bind(g, false);
        bound.forward(g, x, Mode::Eval)
    }

    /// Applies queued running-buffer updates produced by train-mode forwards.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(usize, Tensor)>) {
        for (idx, tensor) in updates {
            debug_assert!(self.params.entries[idx].buffer, "buffer update on non-buffer");
            self.params.entries[idx].tensor = tensor;
        }
    }
}

/// A network bound onto a graph: parameter [`Var`]s plus pending buffer
/// updates from train-mode forwards.
pub struct BoundNet {
    arch: Arch,
    vars: Vec<Var>,
    index: BTreeMap<String, usize>,
    buffer_shadow: BTreeMap<usize, Tensor>,
}

impl BoundNet {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub(crate) fn entry_index(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Current buffer value: the queued update if one exists (so consecutive
    /// train-mode forwards chain correctly), otherwise the bound constant.
    pub(crate) fn buffer_value(&self, g: &Graph, name: &str) -> Tensor {
        let idx = self.entry_index(name);
        self.buffer_shadow
            .get(&idx)
            .cloned()
            .unwrap_or_else(|| g.value(self.vars[idx]).clone())
    }

    pub(crate) fn queue_buffer_update(&mut self, name: &str, value: Tensor) {
        let idx = self.entry_index(name);
        self.buffer_shadow.insert(idx, value);
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(usize, Tensor)> {
        std::mem::take(&mut self.buffer_shadow).into_iter().collect()
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        match self.arch.clone() {
            Arch::UNet(spec) => unet::forward(self, g, &spec, x),
            Arch::Discriminator(spec) => discriminator::forward(self, g, &spec, x, mode),
            Arch::FeatureExtractor(spec) => extractor::forward_features(self, g, &spec, x),
            Arch::SrGenerator(spec) => sr_generator::forward(self, g, &spec, x),
            Arch::SemanticEncoder(spec) => extractor::forward_semantics(self, g, &spec, x),
            Arch::JointDiscriminator(_) => Err(Error::InvalidArgument(
                "joint discriminator consumes (image, semantics) tuples; use forward_pair".into(),
            )),
            Arch::Identity => Ok(x),
        }
    }

    /// Tuple forward for the joint discriminator.
    pub fn forward_pair(
        &mut self,
        g: &mut Graph,
        image: Var,
        semantics: Var,
        mode: Mode,
    ) -> Result<Var> {
        match self.arch.clone() {
            Arch::JointDiscriminator(spec) => joint::forward(self, g, &spec, image, semantics, mode),
            _ => Err(Error::InvalidArgument("forward_pair requires a joint discriminator".into())),
        }
    }
}

// ---- shared layer helpers -------------------------------------------------

pub(crate) fn he_conv(rng: &mut Rng64, co: usize, ci: usize, kh: usize, kw: usize) -> Tensor {
    let std = (2.0 / (ci * kh * kw) as f64).sqrt();
    let mut t = Tensor::zeros(&[co, ci, kh, kw]);
    t.fill_with(|| rng.next_normal() * std);
    t
}

pub(crate) fn he_conv_t(rng: &mut Rng64, ci: usize, co: usize) -> Tensor {
    let std = (2.0 / (ci * 4) as f64).sqrt();
    let mut t = Tensor::zeros(&[ci, co, 2, 2]);
    t.fill_with(|| rng.next_normal() * std);
    t
}

pub(crate) fn he_linear(rng: &mut Rng64, o: usize, f: usize) -> Tensor {
    let std = (2.0 / f as f64).sqrt();
    let mut t = Tensor::zeros(&[o, f]);
    t.fill_with(|| rng.next_normal() * std);
    t
}

pub(crate) fn add_conv(
    store: &mut ParamStore,
    rng: &mut Rng64,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
) {
    store.add(&format!("{name}.w"), he_conv(rng, co, ci, k, k));
    store.add(&format!("{name}.b"), Tensor::zeros(&[co]));
}

pub(crate) fn add_bn(store: &mut ParamStore, name: &str, c: usize) {
    store.add(&format!("{name}.gamma"), Tensor::full(&[c], 1.0));
    store.add(&format!("{name}.beta"), Tensor::zeros(&[c]));
    store.add_buffer(&format!("{name}.mean"), Tensor::zeros(&[c]));
    store.add_buffer(&format!("{name}.var"), Tensor::full(&[c], 1.0));
}

/// Conv + bias from the store.
pub(crate) fn conv_layer(
    bound: &BoundNet,
    g: &mut Graph,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let w = bound.var(&format!("{name}.w"));
    let b = bound.var(&format!("{name}.b"));
    g.conv2d(x, w, Some(b), stride, pad)
}

/// Batch-norm layer from the store; queues running-stat updates in train mode.
pub(crate) fn bn_layer(bound: &mut BoundNet, g: &mut Graph, name: &str, x: Var, mode: Mode) -> Var {
    let gamma = bound.var(&format!("{name}.gamma"));
    let beta = bound.var(&format!("{name}.beta"));
    let rm = bound.buffer_value(g, &format!("{name}.mean"));
    let rv = bound.buffer_value(g, &format!("{name}.var"));
    let train = mode == Mode::Train;
    let (y, batch_mean, batch_var) = g.batch_norm(x, gamma, beta, &rm, &rv, train);
    if train {
        let new_mean = rm.zip_map(&batch_mean, |r, b| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b);
        let new_var = rv.zip_map(&batch_var, |r, b| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b);
        bound.queue_buffer_update(&format!("{name}.mean"), new_mean);
        bound.queue_buffer_update(&format!("{name}.var"), new_var);
    }
    y
}
