//! Optimizer, three-stage training schedule, configuration and checkpoints.
//!
//! Stage one pretrains the domain-transfer networks on unpaired degraded/real
//! LR batches. Stage two pretrains the SR networks on (real-like LR, HR)
//! pairs with the domain transfer frozen. Stage three trains everything
//! jointly; the logged joint total is the sum of the two subsystem totals at
//! every step. In deterministic mode the whole trajectory is a pure function
//! of (config, data order, seed).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointFile, Dtype};
use crate::cycle::{
    backward_terms_g, forward_terms_g, ragan_d_loss_g, report_from_graph, BackwardWeights,
    CycleBatch, CycleBundle, CycleRole, ForwardWeights, LossOpts, LossReport, PixelMetric,
    Reduction, TermMask,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imaging::{
    degrade, hstack, nearest_upsample, save_image, DegradationSpec, ImageTensor, MetricSpace,
};
use crate::nets::{
    build_conv_discriminator, build_feature_extractor, build_joint_discriminator,
    build_semantic_encoder, build_sr_generator, build_unet_generator, relativistic_logits_g,
    DiscSpec, ExtractorMode, FeatureExtractorSpec, JointDiscSpec, Mode, NetHandle,
    SemanticEncoderSpec, SrGeneratorSpec,
};
use crate::rng::Rng64;
use crate::srnet::{rals_d_loss_g, sr_generator_terms_g, SrBundle, SrLossWeights, SrRole};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    /// Discriminators step at `lr * disc_lr_mult`; 1.0 keeps the single
    /// shared rate.
    pub disc_lr_mult: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, batch_size: 8, disc_lr_mult: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps_pretrain_ubcdtn: usize,
    pub steps_pretrain_sesrn: usize,
    pub steps_joint: usize,
    /// Learning-rate multiplier for the joint stage; optimizer moments
    /// restart at every stage boundary either way.
    pub joint_lr_mult: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps_pretrain_ubcdtn: 500,
            steps_pretrain_sesrn: 500,
            steps_joint: 200,
            joint_lr_mult: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSettings {
    pub reduction: Reduction,
    pub log_eps: f64,
    pub pixel_metric: PixelMetric,
}

impl Default for LossSettings {
    fn default() -> Self {
        let d = LossOpts::default();
        Self { reduction: d.reduction, log_eps: d.log_eps, pixel_metric: d.pixel_metric }
    }
}

impl LossSettings {
    pub fn opts(&self) -> LossOpts {
        LossOpts {
            reduction: self.reduction,
            log_eps: self.log_eps,
            pixel_metric: self.pixel_metric,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationConfig {
    /// `bicubic`, `box` or `identity`.
    pub kernel: String,
    pub noise_sigma: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self { kernel: "bicubic".into(), noise_sigma: 0.0 }
    }
}

impl DegradationConfig {
    pub fn to_spec(&self, scale: usize) -> Result<DegradationSpec> {
        let spec = match self.kernel.as_str() {
            "bicubic" => DegradationSpec::bicubic(scale),
            "box" => DegradationSpec::box_filter(scale),
            "identity" => DegradationSpec::identity(scale),
            other => {
                return Err(Error::Config(format!(
                    "unknown degradation kernel `{other}` (expected bicubic|box|identity)"
                )))
            }
        };
        Ok(spec.with_noise(self.noise_sigma))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// `toy` (procedural textures) or `folders`.
    pub kind: String,
    /// Training crop side in LR pixels.
    pub patch_size: usize,
    pub scale: usize,
    pub toy_n_train: usize,
    pub toy_n_val: usize,
    pub hr_dir: Option<PathBuf>,
    pub lr_dir: Option<PathBuf>,
    /// Half-open index ranges into the sorted file lists; HR and LR
    /// selections must be disjoint by file stem (the unpaired guarantee).
    pub hr_range: Option<(usize, usize)>,
    pub lr_range: Option<(usize, usize)>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: "toy".into(),
            patch_size: 8,
            scale: 4,
            toy_n_train: 48,
            toy_n_val: 12,
            hr_dir: None,
            lr_dir: None,
            hr_range: None,
            lr_range: None,
        }
    }
}

impl DatasetConfig {
    pub fn hr_patch(&self) -> usize {
        self.patch_size * self.scale
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.scale == 0 {
            return Err(Error::Config("patch_size and scale must be >= 1".into()));
        }
        match self.kind.as_str() {
            "toy" => {
                if self.toy_n_train == 0 || self.toy_n_val == 0 {
                    return Err(Error::Config("toy dataset needs train and val images".into()));
                }
            }
            "folders" => {
                if self.hr_dir.is_none() || self.lr_dir.is_none() {
                    return Err(Error::Config("folders dataset needs hr_dir and lr_dir".into()));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset kind `{other}` (expected toy|folders)"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetsConfig {
    pub unet_base: usize,
    pub unet_depth: usize,
    pub disc_base: usize,
    pub disc_min_input: usize,
    pub fe_base: usize,
    /// Extractor layer address: conv `q` of block `r`.
    pub fe_conv_index: usize,
    pub fe_block_index: usize,
    pub sr_n_dnb: usize,
    pub sr_base: usize,
    pub sr_residual_scale: f64,
    pub d_sem: usize,
    pub se_base: usize,
    pub joint_base: usize,
    /// Share the semantic-encoder trunk between the HR and LR variants.
    pub shared_trunk: bool,
}

impl Default for NetsConfig {
    fn default() -> Self {
        Self {
            unet_base: 32,
            unet_depth: 3,
            disc_base: 64,
            disc_min_input: 32,
            fe_base: 16,
            fe_conv_index: 3,
            fe_block_index: 3,
            sr_n_dnb: 4,
            sr_base: 32,
            sr_residual_scale: 0.2,
            d_sem: 128,
            se_base: 16,
            joint_base: 32,
            shared_trunk: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub space: MetricSpace,
    pub border_crop: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { space: MetricSpace::Rgb, border_crop: 0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightsConfig {
    pub forward: ForwardWeights,
    pub backward: BackwardWeights,
    pub sr: SrLossWeights,
}

/// Full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub deterministic: bool,
    /// Compute hint; this build is CPU-only.
    pub device: String,
    pub log_every: usize,
    /// Dump a sample panel every N steps; 0 disables.
    pub sample_every: usize,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub weights: WeightsConfig,
    pub loss: LossSettings,
    pub degradation: DegradationConfig,
    pub dataset: DatasetConfig,
    pub nets: NetsConfig,
    pub metrics: MetricsConfig,
    /// Let SR losses backpropagate into the domain transfer during joint
    /// training (the default treats real-like inputs as detached).
    pub coupled_gradients: bool,
    /// Alternative reading of ablation variant B: keep the full forward
    /// cycle (cycle/identity/perceptual terms) instead of adversarial-only.
    pub variant_b_full_forward_cycle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            device: "cpu".into(),
            log_every: 1,
            sample_every: 0,
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            weights: WeightsConfig::default(),
            loss: LossSettings::default(),
            degradation: DegradationConfig::default(),
            dataset: DatasetConfig::default(),
            nets: NetsConfig::default(),
            metrics: MetricsConfig::default(),
            coupled_gradients: false,
            variant_b_full_forward_cycle: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optim.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0 <= self.optim.beta1
            && self.optim.beta1 < self.optim.beta2
            && self.optim.beta2 < 1.0)
        {
            return Err(Error::Config("need 0 <= beta1 < beta2 < 1".into()));
        }
        if self.optim.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.optim.disc_lr_mult <= 0.0 {
            return Err(Error::Config("disc_lr_mult must be positive".into()));
        }
        if self.schedule.joint_lr_mult <= 0.0 {
            return Err(Error::Config("joint_lr_mult must be positive".into()));
        }
        self.dataset.validate()?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn config_hash(&self) -> Result<u64> {
        let text = self.to_toml_string()?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Ok(h)
    }

    pub fn degradation_spec(&self) -> Result<DegradationSpec> {
        self.degradation.to_spec(self.dataset.scale)
    }

    /// Seed actually used for streams; non-deterministic mode draws fresh
    /// entropy from the clock.
    pub fn effective_seed(&self) -> u64 {
        if self.deterministic {
            self.seed
        } else {
            use std::time::{SystemTime, UNIX_EPOCH};
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_nanos() as u64)
                .unwrap_or(1)
        }
    }
}

// ---------------------------------------------------------------------------
// Networks of the full system
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SystemNets {
    pub cycle: CycleBundle,
    pub sr: SrBundle,
}

impl SystemNets {
    pub const KEYS: [&'static str; 11] =
        ["g_a", "g_b", "d_a", "d_b", "fe_a", "fe_b", "g_sr", "se_hr", "se_lr", "d_sr", "phi"];

    pub fn net(&self, key: &str) -> Option<&NetHandle> {
        match key {
            "g_a" => Some(&self.cycle.g_a),
            "g_b" => Some(&self.cycle.g_b),
            "d_a" => Some(&self.cycle.d_a),
            "d_b" => Some(&self.cycle.d_b),
            "fe_a" => Some(&self.cycle.fe_a),
            "fe_b" => Some(&self.cycle.fe_b),
            "g_sr" => Some(&self.sr.g_sr),
            "se_hr" => Some(&self.sr.se_hr),
            "se_lr" => Some(&self.sr.se_lr),
            "d_sr" => Some(&self.sr.d_sr),
            "phi" => Some(&self.sr.phi),
            _ => None,
        }
    }

    fn net_mut(&mut self, key: &str) -> Option<&mut NetHandle> {
        match key {
            "g_a" => Some(&mut self.cycle.g_a),
            "g_b" => Some(&mut self.cycle.g_b),
            "d_a" => Some(&mut self.cycle.d_a),
            "d_b" => Some(&mut self.cycle.d_b),
            "fe_a" => Some(&mut self.cycle.fe_a),
            "fe_b" => Some(&mut self.cycle.fe_b),
            "g_sr" => Some(&mut self.sr.g_sr),
            "se_hr" => Some(&mut self.sr.se_hr),
            "se_lr" => Some(&mut self.sr.se_lr),
            "d_sr" => Some(&mut self.sr.d_sr),
            "phi" => Some(&mut self.sr.phi),
            _ => None,
        }
    }
}

/// Constructs every network of the system from the configuration; all
/// parameters derive from per-role streams of the effective seed.
pub fn build_system(cfg: &TrainConfig) -> Result<SystemNets> {
    cfg.validate()?;
    let seed = cfg.effective_seed();
    let n = &cfg.nets;
    let sub = |label: &str| Rng64::stream(seed, label).next_u64();
    let disc_spec = DiscSpec::new(3, n.disc_base).with_min_input(n.disc_min_input);
    let fe_spec = |s: u64| FeatureExtractorSpec {
        conv_index: n.fe_conv_index,
        block_index: n.fe_block_index,
        in_channels: 3,
        base_channels: n.fe_base,
        convs_per_block: vec![2, 2, 3, 3],
        mode: ExtractorMode::FixedRandom { seed: s },
    };
    let cycle = CycleBundle {
        g_a: build_unet_generator(3, n.unet_base, n.unet_depth, sub("g_a"))?,
        g_b: build_unet_generator(3, n.unet_base, n.unet_depth, sub("g_b"))?,
        d_a: build_conv_discriminator(&disc_spec, sub("d_a"))?,
        d_b: build_conv_discriminator(&disc_spec, sub("d_b"))?,
        fe_a: build_feature_extractor(&fe_spec(sub("fe_a")))?,
        fe_b: build_feature_extractor(&fe_spec(sub("fe_b")))?,
    };
    let mut sr_spec = SrGeneratorSpec::new(3, n.sr_n_dnb, n.sr_base, cfg.dataset.scale);
    sr_spec.residual_scale = n.sr_residual_scale;
    let se_seed = sub("se");
    let se_spec = |variant_seed: u64| SemanticEncoderSpec {
        d_sem: n.d_sem,
        in_channels: 3,
        base_channels: n.se_base,
        hr_scale: cfg.dataset.scale,
        hr_variant: false,
        mode: ExtractorMode::FixedRandom { seed: variant_seed },
    };
    let (se_hr_seed, se_lr_seed) =
        if n.shared_trunk { (se_seed, se_seed) } else { (se_seed, sub("se_lr")) };
    let hr_side = cfg.dataset.hr_patch();
    let sr = SrBundle {
        g_sr: build_sr_generator(&sr_spec, sub("g_sr"))?,
        se_hr: build_semantic_encoder(&se_spec(se_hr_seed), true)?,
        se_lr: build_semantic_encoder(&se_spec(se_lr_seed), false)?,
        d_sr: build_joint_discriminator(
            &JointDiscSpec::new(3, n.joint_base, n.d_sem, (hr_side, hr_side)),
            sub("d_sr"),
        )?,
        phi: build_feature_extractor(&fe_spec(sub("phi")))?,
    };
    Ok(SystemNets { cycle, sr })
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam state for one network, aligned with its parameter entries.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl AdamState {
    pub fn new(net: &NetHandle) -> Self {
        let zero = |e: &crate::nets::ParamEntry| {
            if e.buffer {
                None
            } else {
                Some(Tensor::zeros(e.tensor.dims()))
            }
        };
        Self {
            m: net.params().entries().iter().map(zero).collect(),
            v: net.params().entries().iter().map(zero).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update from the gradients of a bound forward pass. Missing
    /// gradients count as zero.
    pub fn step(
        &mut self,
        net: &mut NetHandle,
        bound_vars: &[Var],
        grads: &crate::graph::Gradients,
        opt: &OptimConfig,
    ) {
        assert_eq!(bound_vars.len(), self.m.len(), "optimizer/net entry mismatch");
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - opt.beta1.powi(t);
        let bc2 = 1.0 - opt.beta2.powi(t);
        for idx in 0..bound_vars.len() {
            let (m_slot, v_slot) = (&mut self.m[idx], &mut self.v[idx]);
            let (Some(m), Some(v)) = (m_slot.as_mut(), v_slot.as_mut()) else {
                continue;
            };
            let grad = grads.get(bound_vars[idx]);
            let numel = m.numel();
            let mut updated = net.params().entries()[idx].tensor.clone();
            {
                let p = updated.data_mut();
                let md = m.data_mut();
                let vd = v.data_mut();
                for i in 0..numel {
                    let g = grad.map(|t| t.data()[i]).unwrap_or(0.0);
                    md[i] = opt.beta1 * md[i] + (1.0 - opt.beta1) * g;
                    vd[i] = opt.beta2 * vd[i] + (1.0 - opt.beta2) * g * g;
                    let m_hat = md[i] / bc1;
                    let v_hat = vd[i] / bc2;
                    p[i] -= opt.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
            net.set_param_by_index(idx, updated).expect("aligned entry");
        }
    }

    fn export(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}/t"), Tensor::scalar(self.t as f64)));
        for (i, m) in self.m.iter().enumerate() {
            if let Some(m) = m {
                out.push((format!("{prefix}/m{i}"), m.clone()));
            }
        }
        for (i, v) in self.v.iter().enumerate() {
            if let Some(v) = v {
                out.push((format!("{prefix}/v{i}"), v.clone()));
            }
        }
    }

    fn import(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let t = tensors
            .get(&format!("{prefix}/t"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}/t")))?;
        self.t = t.scalar_value() as u64;
        for (i, slot) in self.m.iter_mut().enumerate() {
            if slot.is_some() {
                let t = tensors
                    .get(&format!("{prefix}/m{i}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}/m{i}")))?;
                *slot = Some(t.clone());
            }
        }
        for (i, slot) in self.v.iter_mut().enumerate() {
            if slot.is_some() {
                let t = tensors
                    .get(&format!("{prefix}/v{i}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}/v{i}")))?;
                *slot = Some(t.clone());
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainUbcdtn,
    PretrainSesrn,
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainUbcdtn => "pretrain_ubcdtn",
            Stage::PretrainSesrn => "pretrain_sesrn",
            Stage::Joint => "joint",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain_ubcdtn" => Ok(Stage::PretrainUbcdtn),
            "pretrain_sesrn" => Ok(Stage::PretrainSesrn),
            "joint" => Ok(Stage::Joint),
            other => Err(Error::Checkpoint(format!("unknown stage {other}"))),
        }
    }
}

/// Optimizer state for every trainable network.
#[derive(Debug, Clone)]
pub struct OptState {
    pub per_net: BTreeMap<String, AdamState>,
}

impl OptState {
    pub fn new(nets: &SystemNets) -> Self {
        let mut per_net = BTreeMap::new();
        for key in ["g_a", "g_b", "d_a", "d_b", "g_sr", "d_sr"] {
            per_net.insert(key.to_string(), AdamState::new(nets.net(key).unwrap()));
        }
        Self { per_net }
    }
}

/// Persisted state of the whole experiment: all network parameters and
/// buffers, optimizer moments, step counter, stage tag and the config that
/// built them.
#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub stage: Stage,
    pub step: u64,
    pub config: TrainConfig,
    pub nets: SystemNets,
    pub opt: OptState,
}

pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    let config_text = bundle.config.to_toml_string()?;
    let mut meta = BTreeMap::new();
    meta.insert("stage".to_string(), bundle.stage.as_str().to_string());
    meta.insert("step".to_string(), bundle.step.to_string());
    meta.insert("config_hash".to_string(), format!("{:016x}", bundle.config.config_hash()?));
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for key in SystemNets::KEYS {
        let net = bundle.nets.net(key).unwrap();
        for entry in net.params().entries() {
            tensors.push((format!("net/{key}/{}", entry.name), entry.tensor.clone()));
        }
    }
    for (key, adam) in &bundle.opt.per_net {
        adam.export(&format!("opt/{key}"), &mut tensors);
    }
    let file = CheckpointFile { meta, config_text, tensors };
    checkpoint::write_checkpoint_file(path, &file, Dtype::F64)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let file = checkpoint::read_checkpoint_file(path)?;
    let config = TrainConfig::from_toml_str(&file.config_text)?;
    let stage = Stage::parse(
        file.meta.get("stage").ok_or_else(|| Error::Checkpoint("missing stage".into()))?,
    )?;
    let step: u64 = file
        .meta
        .get("step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing step".into()))?;
    let mut nets = build_system(&config)?;
    let by_name: BTreeMap<String, Tensor> = file.tensors.into_iter().collect();
    for key in SystemNets::KEYS {
        let names: Vec<String> = nets
            .net(key)
            .unwrap()
            .params()
            .entries()
            .iter()
            .map(|e| e.name.clone())
            .collect();
        let net = nets.net_mut(key).unwrap();
        for name in names {
            let stored = by_name
                .get(&format!("net/{key}/{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor net/{key}/{name}")))?;
            net.load_param(&name, stored.clone())?;
        }
    }
    let mut opt = OptState::new(&nets);
    for (key, adam) in opt.per_net.iter_mut() {
        adam.import(&format!("opt/{key}"), &by_name)?;
    }
    Ok(CheckpointBundle { stage, step, config, nets, opt })
}

// ---------------------------------------------------------------------------
// Data interface
// ---------------------------------------------------------------------------

/// One training draw: HR crops and unpaired real-LR crops.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub hr: ImageTensor,
    pub lr_real: ImageTensor,
}

/// Stream of training batches; the harness provides folder- and
/// procedural-toy-backed implementations. Draws are keyed by the step
/// counter so a resumed run continues the exact data order.
pub trait BatchSource {
    fn batch_at(&mut self, step: u64, batch_size: usize) -> Result<TrainBatch>;
}

// ---------------------------------------------------------------------------
// Wiring masks (full system vs ablation variants)
// ---------------------------------------------------------------------------

/// Which parts of the domain-transfer objective are active.
#[derive(Debug, Clone, Copy)]
pub struct CycleWiring {
    /// False removes the domain transfer entirely (SR trains on degraded LR).
    pub enabled: bool,
    pub forward_mask: TermMask,
    /// None removes the backward module.
    pub backward_mask: Option<TermMask>,
    pub d_a_active: bool,
    pub d_b_active: bool,
}

impl CycleWiring {
    pub fn full() -> Self {
        Self {
            enabled: true,
            forward_mask: TermMask::ALL,
            backward_mask: Some(TermMask::ALL),
            d_a_active: true,
            d_b_active: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct LossCsv {
    file: std::fs::File,
}

impl LossCsv {
    fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "step,term,value")?;
        Ok(Self { file })
    }

    fn log(&mut self, step: u64, term: &str, value: f64) -> Result<()> {
        writeln!(self.file, "{step},{term},{value:.12}")?;
        Ok(())
    }

    fn log_report(&mut self, step: u64, report: &LossReport, total_name: &str) -> Result<()> {
        for t in &report.terms {
            self.log(step, &t.name, t.value)?;
        }
        self.log(step, total_name, report.total)
    }
}

/// Joint-step outcome: both subsystem reports plus their additive total.
#[derive(Debug, Clone)]
pub struct JointReport {
    pub ubcdtn: LossReport,
    pub sesrn: LossReport,
    pub total: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: SystemNets,
    pub opt: OptState,
    pub step: u64,
    pub stage: Stage,
    wiring: CycleWiring,
    degradation: DegradationSpec,
    stream_seed: u64,
    loss_opts: LossOpts,
    csv: Option<LossCsv>,
    sample_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nets = build_system(&cfg)?;
        let opt = OptState::new(&nets);
        Self::assemble(cfg, nets, opt, 0, Stage::PretrainUbcdtn)
    }

    pub fn from_checkpoint(bundle: CheckpointBundle) -> Result<Self> {
        let CheckpointBundle { stage, step, config, nets, opt } = bundle;
        Self::assemble(config, nets, opt, step, stage)
    }

    fn assemble(
        cfg: TrainConfig,
        nets: SystemNets,
        opt: OptState,
        step: u64,
        stage: Stage,
    ) -> Result<Self> {
        let degradation = cfg.degradation_spec()?;
        let seed = cfg.effective_seed();
        let loss_opts = cfg.loss.opts();
        Ok(Self {
            cfg,
            nets,
            opt,
            step,
            stage,
            wiring: CycleWiring::full(),
            degradation,
            stream_seed: seed,
            loss_opts,
            csv: None,
            sample_dir: None,
        })
    }

    pub fn with_wiring(mut self, wiring: CycleWiring) -> Self {
        self.wiring = wiring;
        self
    }

    pub fn wiring(&self) -> CycleWiring {
        self.wiring
    }

    /// Attaches an output directory: loss CSV stream plus optional panels.
    pub fn attach_output(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.csv = Some(LossCsv::create(&dir.join("losses.csv"))?);
        self.sample_dir = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn checkpoint(&self, stage: Stage) -> CheckpointBundle {
        CheckpointBundle {
            stage,
            step: self.step,
            config: self.cfg.clone(),
            nets: self.nets.clone(),
            opt: self.opt.clone(),
        }
    }

    /// Degradation noise is a pure function of (seed, stage, step), so a
    /// resumed run redraws exactly what the uninterrupted run would have.
    fn degrade_batch(&self, hr: &ImageTensor) -> Result<ImageTensor> {
        let label = format!("degrade/{}/{}", self.stage.as_str(), self.step);
        let mut rng = Rng64::stream(self.stream_seed, &label);
        degrade(hr, &self.degradation, Some(&mut rng))
    }

    /// Inference-mode domain transfer producing detached real-like LR.
    fn real_like(&self, lr_degraded: &ImageTensor) -> Result<ImageTensor> {
        let mut g = Graph::new();
        let x = g.constant(lr_degraded.tensor().clone());
        let y = self.nets.cycle.g_a.forward(&mut g, x)?;
        ImageTensor::new(g.value(y).clone())
    }

    fn adam(&mut self, key: &str, vars: &[Var], grads: &crate::graph::Gradients) {
        let mut opt_cfg = self.cfg.optim.clone();
        if matches!(key, "d_a" | "d_b" | "d_sr") {
            opt_cfg.lr *= opt_cfg.disc_lr_mult;
        }
        if self.stage == Stage::Joint {
            opt_cfg.lr *= self.cfg.schedule.joint_lr_mult;
        }
        let adam = self.opt.per_net.get_mut(key).expect("known optimizer key");
        let net = self.nets.net_mut(key).expect("known net key");
        adam.step(net, vars, grads, &opt_cfg);
    }

    /// One discriminator update for either cycle direction.
    fn cycle_disc_step(&mut self, which: CycleRole, batch: &CycleBatch) -> Result<f64> {
        let mut g = Graph::new();
        let lr_deg = g.constant(batch.lr_degraded.tensor().clone());
        let lr_real = g.constant(batch.lr_real.tensor().clone());
        let mut bc = self.nets.cycle.bind(&mut g, which);
        // The opposing generator's parameters are constants in this graph;
        // its output is this iteration's, not a stale one.
        let (key, real_input, fake) = match which {
            CycleRole::DiscB => {
                let fake = bc.g_a.forward(&mut g, lr_deg, Mode::Train)?;
                ("d_b", lr_real, fake)
            }
            CycleRole::DiscA => {
                let fake = bc.g_b.forward(&mut g, lr_real, Mode::Train)?;
                ("d_a", lr_deg, fake)
            }
            _ => unreachable!("cycle_disc_step takes a discriminator role"),
        };
        let disc = match which {
            CycleRole::DiscB => &mut bc.d_b,
            _ => &mut bc.d_a,
        };
        let c_real = disc.forward(&mut g, real_input, Mode::Train)?;
        let c_fake = disc.forward(&mut g, fake, Mode::Train)?;
        let (d_real, d_fake) = relativistic_logits_g(&mut g, c_real, c_fake, true);
        let loss = ragan_d_loss_g(&mut g, d_real, d_fake, self.loss_opts.log_eps);
        let grads = g.backward(loss);
        let vars = disc.vars().to_vec();
        let updates = disc.take_buffer_updates();
        self.adam(key, &vars, &grads);
        self.nets.net_mut(key).unwrap().apply_buffer_updates(updates);
        Ok(g.value(loss).scalar_value())
    }

    /// Generator update over both cycle directions; returns the merged
    /// domain-transfer report.
    fn cycle_gen_step(&mut self, batch: &CycleBatch) -> Result<LossReport> {
        let mut g = Graph::new();
        let lr_deg = g.constant(batch.lr_degraded.tensor().clone());
        let lr_real = g.constant(batch.lr_real.tensor().clone());
        let mut bc = self.nets.cycle.bind(&mut g, CycleRole::Generators);
        let weights = self.cfg.weights.clone();
        let (fwd_terms, fwd_total) = forward_terms_g(
            &mut g,
            &mut bc,
            lr_deg,
            lr_real,
            &weights.forward,
            &self.loss_opts,
            Mode::Train,
            self.wiring.forward_mask,
        )?;
        let mut total = fwd_total;
        let mut bwd = None;
        if let Some(mask) = self.wiring.backward_mask {
            let (bwd_terms, bwd_total) = backward_terms_g(
                &mut g,
                &mut bc,
                lr_deg,
                lr_real,
                &weights.backward,
                &self.loss_opts,
                Mode::Train,
                mask,
            )?;
            total = g.add(fwd_total, bwd_total);
            bwd = Some((bwd_terms, bwd_total));
        }
        let grads = g.backward(total);
        let ga_vars = bc.g_a.vars().to_vec();
        let gb_vars = bc.g_b.vars().to_vec();
        self.adam("g_a", &ga_vars, &grads);
        self.adam("g_b", &gb_vars, &grads);
        let fwd_report = report_from_graph(&g, &fwd_terms, fwd_total);
        let report = match &bwd {
            Some((terms, bwd_total)) => {
                let bwd_report = report_from_graph(&g, terms, *bwd_total);
                crate::cycle::ubcdtn_total(&fwd_report, &bwd_report)?
            }
            None => fwd_report,
        };
        Ok(report)
    }

    /// One full domain-transfer iteration: discriminators, then generators.
    pub fn ubcdtn_step(&mut self, batch: &TrainBatch) -> Result<LossReport> {
        if !self.wiring.enabled {
            return Ok(LossReport::default());
        }
        let lr_degraded = self.degrade_batch(&batch.hr)?;
        let cycle_batch = CycleBatch { lr_degraded, lr_real: batch.lr_real.clone() };
        cycle_batch.validate()?;
        let mut d_losses = Vec::new();
        if self.wiring.d_b_active {
            d_losses.push(("adv_d_b", self.cycle_disc_step(CycleRole::DiscB, &cycle_batch)?));
        }
        if self.wiring.d_a_active && self.wiring.backward_mask.is_some() {
            d_losses.push(("adv_d_a", self.cycle_disc_step(CycleRole::DiscA, &cycle_batch)?));
        }
        if let Some((name, _)) = d_losses.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { term: (*name).to_string(), step: self.step });
        }
        let report = self.cycle_gen_step(&cycle_batch)?;
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFiniteLoss { term: term.to_string(), step: self.step });
        }
        if let Some(csv) = &mut self.csv {
            for (name, v) in &d_losses {
                csv.log(self.step, name, *v)?;
            }
            csv.log_report(self.step, &report, "total_ubcdtn")?;
        }
        Ok(report)
    }

    fn sr_input(&mut self, hr: &ImageTensor) -> Result<(ImageTensor, ImageTensor)> {
        let lr_degraded = self.degrade_batch(hr)?;
        let lr_input = if self.wiring.enabled {
            self.real_like(&lr_degraded)?
        } else {
            lr_degraded.clone()
        };
        Ok((lr_degraded, lr_input))
    }

    fn sr_disc_step(&mut self, hr: &ImageTensor, lr_input: &ImageTensor) -> Result<f64> {
        let mut g = Graph::new();
        let hr_v = g.constant(hr.tensor().clone());
        let lr_v = g.constant(lr_input.tensor().clone());
        let mut bs = self.nets.sr.bind(&mut g, SrRole::Discriminator);
        let sr = bs.g_sr.forward(&mut g, lr_v, Mode::Train)?;
        let sem_real = bs.se_hr.forward(&mut g, hr_v, Mode::Train)?;
        let sem_fake = bs.se_lr.forward(&mut g, lr_v, Mode::Train)?;
        let c_real = bs.d_sr.forward_pair(&mut g, hr_v, sem_real, Mode::Train)?;
        let c_fake = bs.d_sr.forward_pair(&mut g, sr, sem_fake, Mode::Train)?;
        let (d_real, d_fake) = relativistic_logits_g(&mut g, c_real, c_fake, false);
        let loss = rals_d_loss_g(&mut g, d_real, d_fake);
        let grads = g.backward(loss);
        let vars = bs.d_sr.vars().to_vec();
        let updates = bs.d_sr.take_buffer_updates();
        self.adam("d_sr", &vars, &grads);
        self.nets.net_mut("d_sr").unwrap().apply_buffer_updates(updates);
        Ok(g.value(loss).scalar_value())
    }

    fn sr_gen_step(
        &mut self,
        hr: &ImageTensor,
        lr_degraded: &ImageTensor,
        lr_input: &ImageTensor,
        couple_into_g_a: bool,
    ) -> Result<LossReport> {
        let mut g = Graph::new();
        let hr_v = g.constant(hr.tensor().clone());
        let mut bs = self.nets.sr.bind(&mut g, SrRole::Generator);
        let mut coupled_ga = None;
        let lr_v = if couple_into_g_a {
            let lr_deg_v = g.constant(lr_degraded.tensor().clone());
            let mut ga = self.nets.cycle.g_a.bind(&mut g, true);
            let out = ga.forward(&mut g, lr_deg_v, Mode::Train)?;
            coupled_ga = Some(ga);
            out
        } else {
            g.constant(lr_input.tensor().clone())
        };
        let weights = self.cfg.weights.sr;
        let (terms, total, _) = sr_generator_terms_g(
            &mut g,
            &mut bs,
            hr_v,
            lr_v,
            &weights,
            &self.loss_opts,
            Mode::Train,
        )?;
        let grads = g.backward(total);
        let vars = bs.g_sr.vars().to_vec();
        self.adam("g_sr", &vars, &grads);
        if let Some(ga) = coupled_ga {
            let vars = ga.vars().to_vec();
            self.adam("g_a", &vars, &grads);
        }
        Ok(report_from_graph(&g, &terms, total))
    }

    /// One SR iteration: the joint discriminator, then the SR generator.
    /// `allow_coupling` lets joint training respect `coupled_gradients`.
    pub fn sesrn_step(&mut self, batch: &TrainBatch, allow_coupling: bool) -> Result<LossReport> {
        let (lr_degraded, lr_input) = self.sr_input(&batch.hr)?;
        let d_loss = self.sr_disc_step(&batch.hr, &lr_input)?;
        if !d_loss.is_finite() {
            return Err(Error::NonFiniteLoss { term: "rals_d_sr".into(), step: self.step });
        }
        let couple = allow_coupling && self.cfg.coupled_gradients && self.wiring.enabled;
        let report = self.sr_gen_step(&batch.hr, &lr_degraded, &lr_input, couple)?;
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFiniteLoss { term: term.to_string(), step: self.step });
        }
        if let Some(csv) = &mut self.csv {
            csv.log(self.step, "rals_d_sr", d_loss)?;
            csv.log_report(self.step, &report, "total_sesrn")?;
        }
        Ok(report)
    }

    /// One joint iteration in the configured update order: domain-transfer
    /// discriminators and generators, then the SR pair. The returned total is
    /// the sum of the two subsystem totals.
    pub fn joint_step(&mut self, batch: &TrainBatch) -> Result<JointReport> {
        let ubcdtn = self.ubcdtn_step(batch)?;
        let sesrn = self.sesrn_step(batch, true)?;
        let total = ubcdtn.total + sesrn.total;
        if let Some(csv) = &mut self.csv {
            csv.log(self.step, "total_joint", total)?;
        }
        Ok(JointReport { ubcdtn, sesrn, total })
    }

    fn dump_panels(&mut self, batch: &TrainBatch, with_sr: bool) -> Result<()> {
        let Some(dir) = self.sample_dir.clone() else { return Ok(()) };
        let scale = self.cfg.dataset.scale;
        let hr0 = batch.hr.select(0);
        let lr_degraded = self.degrade_batch(&batch.hr)?;
        let lr0 = lr_degraded.select(0);
        let real_like = self.real_like(&lr_degraded)?;
        let mut panels = vec![
            nearest_upsample(&lr0, scale),
            nearest_upsample(&real_like.select(0), scale),
        ];
        if with_sr {
            let sr = crate::srnet::super_resolve(&self.nets.sr, &real_like.select(0))?;
            panels.push(sr);
        }
        panels.push(hr0);
        let grid = hstack(&panels)?;
        save_image(&dir.join(format!("step_{:06}.png", self.step)), &grid)
    }

    fn maybe_dump(&mut self, batch: &TrainBatch, with_sr: bool) -> Result<()> {
        if self.sample_dir.is_some()
            && self.cfg.sample_every > 0
            && self.step % self.cfg.sample_every as u64 == 0
        {
            self.dump_panels(batch, with_sr)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stage drivers
// ---------------------------------------------------------------------------

/// A finished stage: its checkpoint plus the per-step loss history.
pub struct StageOutput {
    pub checkpoint: CheckpointBundle,
    pub history: Vec<LossReport>,
}

/// Stage one: domain-transfer pretraining on unpaired batches.
pub fn pretrain_ubcdtn(
    cfg: &TrainConfig,
    data: &mut dyn BatchSource,
    out_dir: Option<&Path>,
) -> Result<StageOutput> {
    pretrain_ubcdtn_wired(cfg, CycleWiring::full(), data, out_dir)
}

pub fn pretrain_ubcdtn_wired(
    cfg: &TrainConfig,
    wiring: CycleWiring,
    data: &mut dyn BatchSource,
    out_dir: Option<&Path>,
) -> Result<StageOutput> {
    let mut trainer = Trainer::new(cfg.clone())?.with_wiring(wiring);
    if let Some(dir) = out_dir {
        trainer.attach_output(dir)?;
    }
    let steps = if wiring.enabled { cfg.schedule.steps_pretrain_ubcdtn } else { 0 };
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        trainer.step += 1;
        let batch = data.batch_at(trainer.step, trainer.cfg.optim.batch_size)?;
        let report = trainer.ubcdtn_step(&batch)?;
        trainer.maybe_dump(&batch, false)?;
        history.push(report);
    }
    Ok(StageOutput { checkpoint: trainer.checkpoint(Stage::PretrainUbcdtn), history })
}

/// Stage two: SR pretraining on (real-like LR, HR) pairs produced by the
/// frozen stage-one domain transfer. Optimizer moments restart at the stage
/// boundary.
pub fn pretrain_sesrn(
    cfg: &TrainConfig,
    ubcdtn_ckpt: &CheckpointBundle,
    data: &mut dyn BatchSource,
    out_dir: Option<&Path>,
) -> Result<StageOutput> {
    pretrain_sesrn_wired(cfg, CycleWiring::full(), ubcdtn_ckpt, data, out_dir)
}

pub fn pretrain_sesrn_wired(
    cfg: &TrainConfig,
    wiring: CycleWiring,
    ubcdtn_ckpt: &CheckpointBundle,
    data: &mut dyn BatchSource,
    out_dir: Option<&Path>,
) -> Result<StageOutput> {
    let mut trainer = Trainer::from_checkpoint(CheckpointBundle {
        stage: Stage::PretrainSesrn,
        step: 0,
        config: cfg.clone(),
        nets: ubcdtn_ckpt.nets.clone(),
        opt: OptState::new(&ubcdtn_ckpt.nets),
    })?
    .with_wiring(wiring);
    if let Some(dir) = out_dir {
        trainer.attach_output(dir)?;
    }
    let mut history = Vec::new();
    for _ in 0..cfg.schedule.steps_pretrain_sesrn {
        trainer.step += 1;
        let batch = data.batch_at(trainer.step, trainer.cfg.optim.batch_size)?;
        // The domain transfer stays frozen in this stage: only the SR pair
        // updates, with no coupling back into it.
        let report = trainer.sesrn_step(&batch, false)?;
        trainer.maybe_dump(&batch, true)?;
        history.push(report);
    }
    Ok(StageOutput { checkpoint: trainer.checkpoint(Stage::PretrainSesrn), history })
}

/// Stage three: joint end-to-end training from the stage-two checkpoint.
pub fn train_joint(
    cfg: &TrainConfig,
    ckpt: &CheckpointBundle,
    data: &mut dyn BatchSource,
    out_dir: Option<&Path>,
) -> Result<(StageOutput, Vec<JointReport>)> {
    train_joint_wired(cfg, CycleWiring::full(), ckpt, data, out_dir)
}

pub fn train_joint_wired(
    cfg: &TrainConfig,
    wiring: CycleWiring,
    ckpt: &CheckpointBundle,
    data: &mut dyn BatchSource,
    out_dir: Option<&Path>,
) -> Result<(StageOutput, Vec<JointReport>)> {
    let mut trainer = Trainer::from_checkpoint(CheckpointBundle {
        stage: Stage::Joint,
        step: 0,
        config: cfg.clone(),
        nets: ckpt.nets.clone(),
        opt: OptState::new(&ckpt.nets),
    })?
    .with_wiring(wiring);
    if let Some(dir) = out_dir {
        trainer.attach_output(dir)?;
    }
    let mut history = Vec::new();
    let mut joint_reports = Vec::new();
    for _ in 0..cfg.schedule.steps_joint {
        trainer.step += 1;
        let batch = data.batch_at(trainer.step, trainer.cfg.optim.batch_size)?;
        let report = trainer.joint_step(&batch)?;
        trainer.maybe_dump(&batch, true)?;
        let merged = LossReport {
            terms: report
                .ubcdtn
                .terms
                .iter()
                .chain(report.sesrn.terms.iter())
                .cloned()
                .collect(),
            total: report.total,
        };
        history.push(merged);
        joint_reports.push(report);
    }
    Ok((StageOutput { checkpoint: trainer.checkpoint(Stage::Joint), history }, joint_reports))
}

/// Runs all three stages back to back, returning the final checkpoint.
pub fn run_pipeline(
    cfg: &TrainConfig,
    wiring: CycleWiring,
    data: &mut dyn BatchSource,
    out_dir: Option<&Path>,
) -> Result<(CheckpointBundle, Vec<JointReport>)> {
    let sub = |name: &str| out_dir.map(|d| d.join(name));
    let stage1 = pretrain_ubcdtn_wired(cfg, wiring, data, sub("stage1_ubcdtn").as_deref())?;
    let stage2 =
        pretrain_sesrn_wired(cfg, wiring, &stage1.checkpoint, data, sub("stage2_sesrn").as_deref())?;
    let (stage3, joint) =
        train_joint_wired(cfg, wiring, &stage2.checkpoint, data, sub("stage3_joint").as_deref())?;
    Ok((stage3.checkpoint, joint))
}

#[cfg(test)]
pub(crate) fn tiny_nets_config() -> NetsConfig {
    NetsConfig {
        unet_base: 4,
        unet_depth: 2,
        disc_base: 4,
        disc_min_input: 8,
        fe_base: 4,
        fe_conv_index: 2,
        fe_block_index: 2,
        sr_n_dnb: 1,
        sr_base: 6,
        sr_residual_scale: 0.2,
        d_sem: 8,
        se_base: 4,
        joint_base: 4,
        shared_trunk: true,
    }
}
