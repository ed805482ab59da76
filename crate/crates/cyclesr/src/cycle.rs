//! Bi-directional cycle domain-transfer network: the forward module maps
//! artificially degraded LR images toward the real-world LR domain, the
//! backward module maps real LR images back toward the degraded domain.
//! Each direction combines a relativistic-average adversarial loss, an L1
//! cycle-consistency loss, an L1 identity loss and an L2 cycle-perceptual
//! loss into a weighted total; the network total is their sum.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imaging::ImageTensor;
use crate::nets::{relativistic_logits_g, BoundNet, Mode, NetHandle, RelativisticLogits};

/// The six networks of the domain-transfer system.
#[derive(Debug, Clone)]
pub struct CycleBundle {
    /// Degraded -> real-like translator.
    pub g_a: NetHandle,
    /// Real -> synthetic-degraded translator.
    pub g_b: NetHandle,
    /// Critic of the degraded domain.
    pub d_a: NetHandle,
    /// Critic of the real domain.
    pub d_b: NetHandle,
    /// Frozen perceptual extractor for the forward direction.
    pub fe_a: NetHandle,
    /// Frozen perceptual extractor for the backward direction.
    pub fe_b: NetHandle,
}

impl CycleBundle {
    pub fn validate(&self) -> Result<()> {
        if !self.fe_a.frozen() || !self.fe_b.frozen() {
            return Err(Error::InvalidArgument(
                "perceptual extractors must be frozen".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ForwardWeights {
    pub adv: f64,
    pub cycle: f64,
    pub identity: f64,
    pub perceptual: f64,
}

impl Default for ForwardWeights {
    fn default() -> Self {
        Self { adv: 1.0, cycle: 10.0, identity: 1.0, perceptual: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BackwardWeights {
    pub adv: f64,
    pub cycle: f64,
    pub identity: f64,
    pub perceptual: f64,
}

impl Default for BackwardWeights {
    fn default() -> Self {
        Self { adv: 1.0, cycle: 10.0, identity: 1.0, perceptual: 1.0 }
    }
}

/// Which formula a loss term implements, by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    AdversarialGenerator,
    AdversarialDiscriminator,
    CycleConsistency,
    Identity,
    CyclePerceptual,
    Content,
    Pixel,
}

#[derive(Debug, Clone)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
    pub kind: LossKind,
}

/// Named scalar loss terms plus their weighted total.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn from_terms(terms: Vec<LossTerm>) -> Self {
        let total = terms.iter().map(|t| t.weight * t.value).sum();
        Self { terms, total }
    }

    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn term_names(&self) -> BTreeSet<String> {
        self.terms.iter().map(|t| t.name.clone()).collect()
    }

    /// Merges two reports with disjoint term names; the total is the sum of
    /// the totals.
    pub fn merged(a: &LossReport, b: &LossReport) -> Result<LossReport> {
        let names = a.term_names();
        if b.terms.iter().any(|t| names.contains(&t.name)) {
            return Err(Error::InvalidArgument("merged loss reports share term names".into()));
        }
        let mut terms = a.terms.clone();
        terms.extend(b.terms.clone());
        Ok(LossReport { terms, total: a.total + b.total })
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.terms
            .iter()
            .find(|t| !t.value.is_finite())
            .map(|t| t.name.as_str())
            .or(if self.total.is_finite() { None } else { Some("total") })
    }
}

/// Reduction convention for the image- and feature-space losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Mean over batch, channels and pixels; weights stay resolution-independent.
    #[default]
    MeanAll,
    /// Per-sample sums/norms, averaged over the batch only.
    PaperExact,
}

/// How the pixel loss reads its Euclidean norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelMetric {
    #[default]
    Squared,
    Root,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossOpts {
    pub reduction: Reduction,
    /// Stabilizer inside adversarial logs: `log(max(x, log_eps))`.
    pub log_eps: f64,
    pub pixel_metric: PixelMetric,
}

impl Default for LossOpts {
    fn default() -> Self {
        Self { reduction: Reduction::MeanAll, log_eps: 1e-12, pixel_metric: PixelMetric::Squared }
    }
}

// ---- graph-level losses ----------------------------------------------------

/// L1 distance under the configured reduction.
pub fn l1_loss_g(g: &mut Graph, a: Var, b: Var, reduction: Reduction) -> Var {
    let diff = g.sub(a, b);
    let abs = g.abs(diff);
    match reduction {
        Reduction::MeanAll => g.mean_all(abs),
        Reduction::PaperExact => {
            let per = g.sum_per_sample(abs);
            g.mean_all(per)
        }
    }
}

/// Euclidean feature distance: per-sample RMS (default) or per-sample L2
/// norm (paper-exact), averaged over the batch.
pub fn l2_feature_loss_g(g: &mut Graph, a: Var, b: Var, reduction: Reduction) -> Var {
    let diff = g.sub(a, b);
    let sq = g.square(diff);
    let per = match reduction {
        Reduction::MeanAll => g.mean_per_sample(sq),
        Reduction::PaperExact => g.sum_per_sample(sq),
    };
    let root = g.sqrt(per);
    g.mean_all(root)
}

/// Squared Euclidean distance, mean over all elements (default) or
/// per-sample sum averaged over the batch (paper-exact).
pub fn l2_squared_loss_g(g: &mut Graph, a: Var, b: Var, reduction: Reduction) -> Var {
    let diff = g.sub(a, b);
    let sq = g.square(diff);
    match reduction {
        Reduction::MeanAll => g.mean_all(sq),
        Reduction::PaperExact => {
            let per = g.sum_per_sample(sq);
            g.mean_all(per)
        }
    }
}

/// Discriminator side of the relativistic-average GAN loss:
/// `-E[log D(real)] - E[log(1 - D(fake))]` on squashed logits.
pub fn ragan_d_loss_g(g: &mut Graph, d_real: Var, d_fake: Var, eps: f64) -> Var {
    let log_real = g.log_clamped(d_real, eps);
    let one_minus_fake = g.one_minus(d_fake);
    let log_fake = g.log_clamped(one_minus_fake, eps);
    let m_real = g.mean_all(log_real);
    let m_fake = g.mean_all(log_fake);
    let sum = g.add(m_real, m_fake);
    g.mul_scalar(sum, -1.0)
}

/// Generator side: `-E[log(1 - D(real))] - E[log D(fake)]`.
pub fn ragan_g_loss_g(g: &mut Graph, d_real: Var, d_fake: Var, eps: f64) -> Var {
    let one_minus_real = g.one_minus(d_real);
    let log_real = g.log_clamped(one_minus_real, eps);
    let log_fake = g.log_clamped(d_fake, eps);
    let m_real = g.mean_all(log_real);
    let m_fake = g.mean_all(log_fake);
    let sum = g.add(m_real, m_fake);
    g.mul_scalar(sum, -1.0)
}

// ---- value-level operations -------------------------------------------------

fn image_pair_check(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::ShapeMismatch(format!(
            "loss inputs {:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    Ok(())
}

/// Mean L1 distance between a reconstruction and its original.
pub fn cycle_loss(recon: &ImageTensor, original: &ImageTensor) -> Result<f64> {
    cycle_loss_with(recon, original, Reduction::MeanAll)
}

pub fn cycle_loss_with(
    recon: &ImageTensor,
    original: &ImageTensor,
    reduction: Reduction,
) -> Result<f64> {
    image_pair_check(recon, original)?;
    let mut g = Graph::new();
    let a = g.constant(recon.tensor().clone());
    let b = g.constant(original.tensor().clone());
    let l = l1_loss_g(&mut g, a, b, reduction);
    Ok(g.value(l).scalar_value())
}

/// Identical contract to [`cycle_loss`]; keeps a generator near-identity on
/// images already in its output domain.
pub fn identity_loss(idt: &ImageTensor, original: &ImageTensor) -> Result<f64> {
    cycle_loss(idt, original)
}

/// Euclidean distance between frozen-extractor feature maps.
pub fn cycle_perceptual_loss(
    fe: &NetHandle,
    recon: &ImageTensor,
    original: &ImageTensor,
) -> Result<f64> {
    cycle_perceptual_loss_with(fe, recon, original, Reduction::MeanAll)
}

pub fn cycle_perceptual_loss_with(
    fe: &NetHandle,
    recon: &ImageTensor,
    original: &ImageTensor,
    reduction: Reduction,
) -> Result<f64> {
    if !fe.frozen() {
        return Err(Error::InvalidArgument("perceptual extractor must be frozen".into()));
    }
    image_pair_check(recon, original)?;
    let mut g = Graph::new();
    let a = g.constant(recon.tensor().clone());
    let b = g.constant(original.tensor().clone());
    let fa = fe.forward(&mut g, a)?;
    let fb = fe.forward(&mut g, b)?;
    let l = l2_feature_loss_g(&mut g, fa, fb, reduction);
    Ok(g.value(l).scalar_value())
}

fn squashed_check(logits: &RelativisticLogits) -> Result<()> {
    if !logits.squashed {
        return Err(Error::InvalidArgument(
            "relativistic-average GAN losses need squashed logits".into(),
        ));
    }
    if logits.d_real.is_empty() || logits.d_fake.is_empty() {
        return Err(Error::InvalidArgument("empty logit batch".into()));
    }
    Ok(())
}

pub fn ragan_d_loss(logits: &RelativisticLogits) -> Result<f64> {
    ragan_d_loss_with(logits, LossOpts::default().log_eps)
}

pub fn ragan_d_loss_with(logits: &RelativisticLogits, eps: f64) -> Result<f64> {
    squashed_check(logits)?;
    let mean_log = |xs: &[f64], f: &dyn Fn(f64) -> f64| {
        xs.iter().map(|&x| f(x).max(eps).ln()).sum::<f64>() / xs.len() as f64
    };
    Ok(-mean_log(&logits.d_real, &|x| x) - mean_log(&logits.d_fake, &|x| 1.0 - x))
}

pub fn ragan_g_loss(logits: &RelativisticLogits) -> Result<f64> {
    ragan_g_loss_with(logits, LossOpts::default().log_eps)
}

pub fn ragan_g_loss_with(logits: &RelativisticLogits, eps: f64) -> Result<f64> {
    squashed_check(logits)?;
    let mean_log = |xs: &[f64], f: &dyn Fn(f64) -> f64| {
        xs.iter().map(|&x| f(x).max(eps).ln()).sum::<f64>() / xs.len() as f64
    };
    Ok(-mean_log(&logits.d_real, &|x| 1.0 - x) - mean_log(&logits.d_fake, &|x| x))
}

// ---- total objectives --------------------------------------------------------

/// An unpaired minibatch: degraded-domain LR crops and real-domain LR crops.
#[derive(Debug, Clone)]
pub struct CycleBatch {
    pub lr_degraded: ImageTensor,
    pub lr_real: ImageTensor,
}

impl CycleBatch {
    pub fn validate(&self) -> Result<()> {
        if self.lr_degraded.tensor().dims() != self.lr_real.tensor().dims() {
            return Err(Error::ShapeMismatch(
                "unpaired batch halves must share shapes".into(),
            ));
        }
        Ok(())
    }
}

/// Bound instances of the six cycle networks.
pub struct BoundCycle {
    pub g_a: BoundNet,
    pub g_b: BoundNet,
    pub d_a: BoundNet,
    pub d_b: BoundNet,
    pub fe_a: BoundNet,
    pub fe_b: BoundNet,
}

/// Which nets of the bundle train in the step being built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleRole {
    Generators,
    DiscA,
    DiscB,
    None,
}

impl CycleBundle {
    pub fn bind(&self, g: &mut Graph, role: CycleRole) -> BoundCycle {
        BoundCycle {
            g_a: self.g_a.bind(g, role == CycleRole::Generators),
            g_b: self.g_b.bind(g, role == CycleRole::Generators),
            d_a: self.d_a.bind(g, role == CycleRole::DiscA),
            d_b: self.d_b.bind(g, role == CycleRole::DiscB),
            fe_a: self.fe_a.bind(g, false),
            fe_b: self.fe_b.bind(g, false),
        }
    }
}

pub struct TermVar {
    pub name: &'static str,
    pub kind: LossKind,
    pub weight: f64,
    pub var: Var,
}

/// Weighted scalar combination of term vars.
pub fn weighted_total_g(g: &mut Graph, terms: &[TermVar]) -> Var {
    let mut acc: Option<Var> = None;
    for t in terms {
        let scaled = g.mul_scalar(t.var, t.weight);
        acc = Some(match acc {
            Some(a) => g.add(a, scaled),
            None => scaled,
        });
    }
    acc.unwrap_or_else(|| g.constant(crate::tensor::Tensor::scalar(0.0)))
}

/// Mask over the four per-direction loss terms; ablation variants switch
/// parts of the objective off.
#[derive(Debug, Clone, Copy)]
pub struct TermMask {
    pub adv: bool,
    pub cycle: bool,
    pub identity: bool,
    pub perceptual: bool,
}

impl TermMask {
    pub const ALL: TermMask =
        TermMask { adv: true, cycle: true, identity: true, perceptual: true };
}

/// Builds the forward-module generator objective on the graph. Emits the
/// intermediate real-like translation alongside the loss terms.
#[allow(clippy::too_many_arguments)]
pub fn forward_terms_g(
    g: &mut Graph,
    bc: &mut BoundCycle,
    lr_degraded: Var,
    lr_real: Var,
    weights: &ForwardWeights,
    opts: &LossOpts,
    mode: Mode,
    mask: TermMask,
) -> Result<(Vec<TermVar>, Var)> {
    let mut terms = Vec::new();
    let fake_real = bc.g_a.forward(g, lr_degraded, mode)?;
    if mask.adv {
        let c_real = bc.d_b.forward(g, lr_real, mode)?;
        let c_fake = bc.d_b.forward(g, fake_real, mode)?;
        let (d_real, d_fake) = relativistic_logits_g(g, c_real, c_fake, true);
        let adv = ragan_g_loss_g(g, d_real, d_fake, opts.log_eps);
        terms.push(TermVar {
            name: "adv_g_a",
            kind: LossKind::AdversarialGenerator,
            weight: weights.adv,
            var: adv,
        });
    }
    if mask.cycle || mask.perceptual {
        let recon = bc.g_b.forward(g, fake_real, mode)?;
        if mask.cycle {
            let cyc = l1_loss_g(g, recon, lr_degraded, opts.reduction);
            terms.push(TermVar {
                name: "cyc_g_b",
                kind: LossKind::CycleConsistency,
                weight: weights.cycle,
                var: cyc,
            });
        }
        if mask.perceptual {
            let f_recon = bc.fe_a.forward(g, recon, mode)?;
            let f_orig = bc.fe_a.forward(g, lr_degraded, mode)?;
            let percep = l2_feature_loss_g(g, f_recon, f_orig, opts.reduction);
            terms.push(TermVar {
                name: "percep_fe_a",
                kind: LossKind::CyclePerceptual,
                weight: weights.perceptual,
                var: percep,
            });
        }
    }
    if mask.identity {
        let idt = bc.g_b.forward(g, lr_degraded, mode)?;
        let idt_loss = l1_loss_g(g, idt, lr_degraded, opts.reduction);
        terms.push(TermVar {
            name: "idt_degraded",
            kind: LossKind::Identity,
            weight: weights.identity,
            var: idt_loss,
        });
    }
    let total = weighted_total_g(g, &terms);
    Ok((terms, total))
}

/// Backward-module mirror: real -> synthetic-degraded, judged by the
/// degraded-domain critic.
#[allow(clippy::too_many_arguments)]
pub fn backward_terms_g(
    g: &mut Graph,
    bc: &mut BoundCycle,
    lr_degraded: Var,
    lr_real: Var,
    weights: &BackwardWeights,
    opts: &LossOpts,
    mode: Mode,
    mask: TermMask,
) -> Result<(Vec<TermVar>, Var)> {
    let mut terms = Vec::new();
    let syn = bc.g_b.forward(g, lr_real, mode)?;
    if mask.adv {
        let c_real = bc.d_a.forward(g, lr_degraded, mode)?;
        let c_fake = bc.d_a.forward(g, syn, mode)?;
        let (d_real, d_fake) = relativistic_logits_g(g, c_real, c_fake, true);
        let adv = ragan_g_loss_g(g, d_real, d_fake, opts.log_eps);
        terms.push(TermVar {
            name: "adv_g_b",
            kind: LossKind::AdversarialGenerator,
            weight: weights.adv,
            var: adv,
        });
    }
    if mask.cycle || mask.perceptual {
        let recon = bc.g_a.forward(g, syn, mode)?;
        if mask.cycle {
            let cyc = l1_loss_g(g, recon, lr_real, opts.reduction);
            terms.push(TermVar {
                name: "cyc_g_a",
                kind: LossKind::CycleConsistency,
                weight: weights.cycle,
                var: cyc,
            });
        }
        if mask.perceptual {
            let f_recon = bc.fe_b.forward(g, recon, mode)?;
            let f_orig = bc.fe_b.forward(g, lr_real, mode)?;
            let percep = l2_feature_loss_g(g, f_recon, f_orig, opts.reduction);
            terms.push(TermVar {
                name: "percep_fe_b",
                kind: LossKind::CyclePerceptual,
                weight: weights.perceptual,
                var: percep,
            });
        }
    }
    if mask.identity {
        let idt = bc.g_a.forward(g, lr_real, mode)?;
        let idt_loss = l1_loss_g(g, idt, lr_real, opts.reduction);
        terms.push(TermVar {
            name: "idt_real",
            kind: LossKind::Identity,
            weight: weights.identity,
            var: idt_loss,
        });
    }
    let total = weighted_total_g(g, &terms);
    Ok((terms, total))
}

pub(crate) fn report_from_graph(g: &Graph, terms: &[TermVar], total: Var) -> LossReport {
    LossReport {
        terms: terms
            .iter()
            .map(|t| LossTerm {
                name: t.name.to_string(),
                value: g.value(t.var).scalar_value(),
                weight: t.weight,
                kind: t.kind,
            })
            .collect(),
        total: g.value(total).scalar_value(),
    }
}

/// Forward-module objective over an unpaired batch, evaluated with frozen
/// parameters (inference-mode loss inspection).
pub fn forward_total(
    bundle: &CycleBundle,
    weights: &ForwardWeights,
    batch: &CycleBatch,
    opts: &LossOpts,
) -> Result<LossReport> {
    bundle.validate()?;
    batch.validate()?;
    let mut g = Graph::new();
    let lr_deg = g.constant(batch.lr_degraded.tensor().clone());
    let lr_real = g.constant(batch.lr_real.tensor().clone());
    let mut bc = bundle.bind(&mut g, CycleRole::None);
    let (terms, total) =
        forward_terms_g(&mut g, &mut bc, lr_deg, lr_real, weights, opts, Mode::Eval, TermMask::ALL)?;
    Ok(report_from_graph(&g, &terms, total))
}

/// Backward-module mirror of [`forward_total`].
pub fn backward_total(
    bundle: &CycleBundle,
    weights: &BackwardWeights,
    batch: &CycleBatch,
    opts: &LossOpts,
) -> Result<LossReport> {
    bundle.validate()?;
    batch.validate()?;
    let mut g = Graph::new();
    let lr_deg = g.constant(batch.lr_degraded.tensor().clone());
    let lr_real = g.constant(batch.lr_real.tensor().clone());
    let mut bc = bundle.bind(&mut g, CycleRole::None);
    let (terms, total) = backward_terms_g(
        &mut g,
        &mut bc,
        lr_deg,
        lr_real,
        weights,
        opts,
        Mode::Eval,
        TermMask::ALL,
    )?;
    Ok(report_from_graph(&g, &terms, total))
}

/// Sum of the forward and backward module objectives.
pub fn ubcdtn_total(forward: &LossReport, backward: &LossReport) -> Result<LossReport> {
    LossReport::merged(forward, backward)
}
