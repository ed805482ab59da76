//! Semantic-encoder-guided super-resolution network: the SR generator maps
//! real-like LR images to HR, a frozen semantic encoder pair embeds HR and
//! LR inputs into one semantics space, and a joint discriminator scores
//! (image, semantics) tuples under a relativistic least-squares loss.
//! Content and pixel losses complete the generator objective.

use serde::{Deserialize, Serialize};

use crate::cycle::{
    l2_feature_loss_g, l2_squared_loss_g, report_from_graph, weighted_total_g, LossKind, LossOpts,
    LossReport, PixelMetric, Reduction, TermVar,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imaging::ImageTensor;
use crate::nets::{relativistic_logits_g, Arch, BoundNet, Mode, NetHandle, RelativisticLogits};
use crate::tensor::Tensor;

/// The five networks of the SR system.
#[derive(Debug, Clone)]
pub struct SrBundle {
    pub g_sr: NetHandle,
    /// Frozen HR-side semantic encoder.
    pub se_hr: NetHandle,
    /// Frozen LR-side semantic encoder.
    pub se_lr: NetHandle,
    /// Joint discriminator over (image, semantics) tuples.
    pub d_sr: NetHandle,
    /// Frozen content extractor.
    pub phi: NetHandle,
}

impl SrBundle {
    pub fn validate(&self) -> Result<()> {
        if !self.se_hr.frozen() || !self.se_lr.frozen() || !self.phi.frozen() {
            return Err(Error::InvalidArgument(
                "semantic encoders and the content extractor must be frozen".into(),
            ));
        }
        Ok(())
    }

    pub fn upscale(&self) -> usize {
        match self.g_sr.arch() {
            Arch::SrGenerator(spec) => spec.upscale,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SrLossWeights {
    pub content: f64,
    pub adv: f64,
    pub pixel: f64,
}

impl Default for SrLossWeights {
    fn default() -> Self {
        Self { content: 1.0, adv: 1e-3, pixel: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Fake,
}

/// Input tuple of the joint discriminator.
#[derive(Debug, Clone)]
pub struct DiscriminationTuple {
    pub image: ImageTensor,
    /// `[B, d_sem]` embedded semantics.
    pub semantics: Tensor,
    pub provenance: Provenance,
}

/// Runs the SR generator in inference mode.
pub fn super_resolve(bundle: &SrBundle, lr: &ImageTensor) -> Result<ImageTensor> {
    let mut g = Graph::new();
    let x = g.constant(lr.tensor().clone());
    let y = bundle.g_sr.forward(&mut g, x)?;
    ImageTensor::new(g.value(y).clone())
}

/// Builds the real tuple `(hr, SE_hr(hr))` and the fake tuple
/// `(sr, SE_lr(lr_real_like))`.
pub fn make_tuples(
    bundle: &SrBundle,
    hr: &ImageTensor,
    sr: &ImageTensor,
    lr_real_like: &ImageTensor,
) -> Result<(DiscriminationTuple, DiscriminationTuple)> {
    bundle.validate()?;
    if hr.tensor().dims() != sr.tensor().dims() {
        return Err(Error::ShapeMismatch(format!(
            "SR output {:?} must match HR shape {:?}",
            sr.tensor().dims(),
            hr.tensor().dims()
        )));
    }
    let mut g = Graph::new();
    let hr_v = g.constant(hr.tensor().clone());
    let lr_v = g.constant(lr_real_like.tensor().clone());
    let sem_real = bundle.se_hr.forward(&mut g, hr_v)?;
    let sem_fake = bundle.se_lr.forward(&mut g, lr_v)?;
    let (sr_d, sf_d) = (g.value(sem_real).dims2(), g.value(sem_fake).dims2());
    if sr_d.1 != sf_d.1 {
        return Err(Error::ShapeMismatch(format!(
            "semantics widths differ: {} vs {}",
            sr_d.1, sf_d.1
        )));
    }
    Ok((
        DiscriminationTuple {
            image: hr.clone(),
            semantics: g.value(sem_real).clone(),
            provenance: Provenance::Real,
        },
        DiscriminationTuple {
            image: sr.clone(),
            semantics: g.value(sem_fake).clone(),
            provenance: Provenance::Fake,
        },
    ))
}

fn raw_check(logits: &RelativisticLogits) -> Result<()> {
    if logits.squashed {
        return Err(Error::InvalidArgument(
            "relativistic least-squares losses need raw (non-squashed) logits".into(),
        ));
    }
    if logits.d_real.is_empty() || logits.d_fake.is_empty() {
        return Err(Error::InvalidArgument("empty logit batch".into()));
    }
    Ok(())
}

/// Discriminator side: `E[(C̃(real) - 1)^2] + E[(C̃(fake) + 1)^2]`.
pub fn rals_d_loss(logits: &RelativisticLogits) -> Result<f64> {
    raw_check(logits)?;
    let mean_sq = |xs: &[f64], target: f64| {
        xs.iter().map(|&x| (x - target) * (x - target)).sum::<f64>() / xs.len() as f64
    };
    Ok(mean_sq(&logits.d_real, 1.0) + mean_sq(&logits.d_fake, -1.0))
}

/// Generator side: `E[(C̃(fake) - 1)^2] + E[(C̃(real) + 1)^2]`.
pub fn rals_g_loss(logits: &RelativisticLogits) -> Result<f64> {
    raw_check(logits)?;
    let mean_sq = |xs: &[f64], target: f64| {
        xs.iter().map(|&x| (x - target) * (x - target)).sum::<f64>() / xs.len() as f64
    };
    Ok(mean_sq(&logits.d_fake, 1.0) + mean_sq(&logits.d_real, -1.0))
}

/// Graph version of [`rals_d_loss`] over raw relativistic logits.
pub fn rals_d_loss_g(g: &mut Graph, d_real: Var, d_fake: Var) -> Var {
    let r = g.add_scalar(d_real, -1.0);
    let rs = g.square(r);
    let rm = g.mean_all(rs);
    let f = g.add_scalar(d_fake, 1.0);
    let fs = g.square(f);
    let fm = g.mean_all(fs);
    g.add(rm, fm)
}

/// Graph version of [`rals_g_loss`].
pub fn rals_g_loss_g(g: &mut Graph, d_real: Var, d_fake: Var) -> Var {
    let f = g.add_scalar(d_fake, -1.0);
    let fs = g.square(f);
    let fm = g.mean_all(fs);
    let r = g.add_scalar(d_real, 1.0);
    let rs = g.square(r);
    let rm = g.mean_all(rs);
    g.add(fm, rm)
}

/// Squared Euclidean distance between content-extractor features of the HR
/// and SR images.
pub fn content_loss(phi: &NetHandle, hr: &ImageTensor, sr: &ImageTensor) -> Result<f64> {
    content_loss_with(phi, hr, sr, Reduction::MeanAll)
}

pub fn content_loss_with(
    phi: &NetHandle,
    hr: &ImageTensor,
    sr: &ImageTensor,
    reduction: Reduction,
) -> Result<f64> {
    if !phi.frozen() {
        return Err(Error::InvalidArgument("content extractor must be frozen".into()));
    }
    if hr.tensor().dims() != sr.tensor().dims() {
        return Err(Error::ShapeMismatch("content loss inputs differ in shape".into()));
    }
    let mut g = Graph::new();
    let a = g.constant(hr.tensor().clone());
    let b = g.constant(sr.tensor().clone());
    let fa = phi.forward(&mut g, a)?;
    let fb = phi.forward(&mut g, b)?;
    let l = l2_squared_loss_g(&mut g, fa, fb, reduction);
    Ok(g.value(l).scalar_value())
}

/// Intensity similarity between the SR and HR images; mean squared error by
/// default, with a root-norm reading behind [`PixelMetric::Root`].
pub fn pixel_loss(sr: &ImageTensor, hr: &ImageTensor) -> Result<f64> {
    pixel_loss_with(sr, hr, &LossOpts::default())
}

pub fn pixel_loss_with(sr: &ImageTensor, hr: &ImageTensor, opts: &LossOpts) -> Result<f64> {
    if sr.tensor().dims() != hr.tensor().dims() {
        return Err(Error::ShapeMismatch("pixel loss inputs differ in shape".into()));
    }
    let mut g = Graph::new();
    let a = g.constant(sr.tensor().clone());
    let b = g.constant(hr.tensor().clone());
    let l = pixel_loss_g(&mut g, a, b, opts);
    Ok(g.value(l).scalar_value())
}

pub fn pixel_loss_g(g: &mut Graph, sr: Var, hr: Var, opts: &LossOpts) -> Var {
    match opts.pixel_metric {
        PixelMetric::Squared => l2_squared_loss_g(g, sr, hr, opts.reduction),
        PixelMetric::Root => l2_feature_loss_g(g, sr, hr, opts.reduction),
    }
}

/// Weighted sum of the three generator terms from already-computed scalars.
pub fn sesrn_total(
    weights: &SrLossWeights,
    content: f64,
    adv_g: f64,
    pixel: f64,
) -> Result<LossReport> {
    for (name, v) in [("content", content), ("adv_g_sr", adv_g), ("pixel", pixel)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term: name.into(), step: 0 });
        }
    }
    Ok(LossReport::from_terms(vec![
        crate::cycle::LossTerm {
            name: "content".into(),
            value: content,
            weight: weights.content,
            kind: LossKind::Content,
        },
        crate::cycle::LossTerm {
            name: "adv_g_sr".into(),
            value: adv_g,
            weight: weights.adv,
            kind: LossKind::AdversarialGenerator,
        },
        crate::cycle::LossTerm {
            name: "pixel".into(),
            value: pixel,
            weight: weights.pixel,
            kind: LossKind::Pixel,
        },
    ]))
}

/// Bound instances of the five SR networks.
pub struct BoundSr {
    pub g_sr: BoundNet,
    pub se_hr: BoundNet,
    pub se_lr: BoundNet,
    pub d_sr: BoundNet,
    pub phi: BoundNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrRole {
    Generator,
    Discriminator,
    None,
}

impl SrBundle {
    pub fn bind(&self, g: &mut Graph, role: SrRole) -> BoundSr {
        BoundSr {
            g_sr: self.g_sr.bind(g, role == SrRole::Generator),
            se_hr: self.se_hr.bind(g, false),
            se_lr: self.se_lr.bind(g, false),
            d_sr: self.d_sr.bind(g, role == SrRole::Discriminator),
            phi: self.phi.bind(g, false),
        }
    }
}

/// Builds the SR generator objective on the graph: content, relativistic
/// least-squares adversarial and pixel terms against the HR reference.
pub fn sr_generator_terms_g(
    g: &mut Graph,
    bs: &mut BoundSr,
    hr: Var,
    lr_real_like: Var,
    weights: &SrLossWeights,
    opts: &LossOpts,
    mode: Mode,
) -> Result<(Vec<TermVar>, Var, Var)> {
    let sr = bs.g_sr.forward(g, lr_real_like, mode)?;
    let sem_real = bs.se_hr.forward(g, hr, mode)?;
    let sem_fake = bs.se_lr.forward(g, lr_real_like, mode)?;
    let c_real = bs.d_sr.forward_pair(g, hr, sem_real, mode)?;
    let c_fake = bs.d_sr.forward_pair(g, sr, sem_fake, mode)?;
    let (d_real, d_fake) = relativistic_logits_g(g, c_real, c_fake, false);
    let adv = rals_g_loss_g(g, d_real, d_fake);
    let f_hr = bs.phi.forward(g, hr, mode)?;
    let f_sr = bs.phi.forward(g, sr, mode)?;
    let content = l2_squared_loss_g(g, f_hr, f_sr, opts.reduction);
    let pixel = pixel_loss_g(g, sr, hr, opts);
    let terms = vec![
        TermVar { name: "content", kind: LossKind::Content, weight: weights.content, var: content },
        TermVar {
            name: "adv_g_sr",
            kind: LossKind::AdversarialGenerator,
            weight: weights.adv,
            var: adv,
        },
        TermVar { name: "pixel", kind: LossKind::Pixel, weight: weights.pixel, var: pixel },
    ];
    let total = weighted_total_g(g, &terms);
    Ok((terms, total, sr))
}

/// Full SR objective over a batch, evaluated with frozen parameters.
pub fn sr_total(
    bundle: &SrBundle,
    weights: &SrLossWeights,
    hr: &ImageTensor,
    lr_real_like: &ImageTensor,
    opts: &LossOpts,
) -> Result<LossReport> {
    bundle.validate()?;
    let mut g = Graph::new();
    let hr_v = g.constant(hr.tensor().clone());
    let lr_v = g.constant(lr_real_like.tensor().clone());
    let mut bs = bundle.bind(&mut g, SrRole::None);
    let (terms, total, _) =
        sr_generator_terms_g(&mut g, &mut bs, hr_v, lr_v, weights, opts, Mode::Eval)?;
    Ok(report_from_graph(&g, &terms, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{
        build_joint_discriminator, build_semantic_encoder, build_sr_generator,
        extractor::build_feature_extractor, relativistic_logits, FeatureExtractorSpec,
        JointDiscSpec, SemanticEncoderSpec, SrGeneratorSpec,
    };
    use crate::rng::Rng64;

    pub(crate) fn tiny_sr_bundle(seed: u64) -> SrBundle {
        let se_spec = SemanticEncoderSpec::fixed_random(8, 2, 4, seed);
        SrBundle {
            g_sr: build_sr_generator(&SrGeneratorSpec::new(3, 1, 4, 4), seed).unwrap(),
            se_hr: build_semantic_encoder(&se_spec, true).unwrap(),
            se_lr: build_semantic_encoder(&se_spec, false).unwrap(),
            d_sr: build_joint_discriminator(&JointDiscSpec::new(3, 2, 8, (32, 32)), seed + 1)
                .unwrap(),
            phi: build_feature_extractor(&FeatureExtractorSpec::fixed_random(3, 3, 2, seed + 2))
                .unwrap(),
        }
    }

    fn random_image(dims: &[usize], seed: u64) -> ImageTensor {
        let mut rng = Rng64::new(seed);
        let mut t = Tensor::zeros(dims);
        t.fill_with(|| rng.next_f64());
        ImageTensor::new(t).unwrap()
    }

    #[test]
    fn super_resolve_shape_range_and_determinism() {
        let bundle = tiny_sr_bundle(1);
        let lr = random_image(&[1, 3, 8, 8], 2);
        let sr1 = super_resolve(&bundle, &lr).unwrap();
        let sr2 = super_resolve(&bundle, &lr).unwrap();
        assert_eq!(sr1.tensor().dims(), &[1, 3, 32, 32]);
        assert_eq!(sr1.tensor(), sr2.tensor());
        assert!(sr1.tensor().data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        // 16x16 -> 64x64 at the default 4x factor.
        let lr16 = random_image(&[1, 3, 16, 16], 3);
        assert_eq!(super_resolve(&bundle, &lr16).unwrap().tensor().dims(), &[1, 3, 64, 64]);
    }

    #[test]
    fn tuples_carry_provenance_sr_image_and_shared_width() {
        let bundle = tiny_sr_bundle(5);
        let hr = random_image(&[2, 3, 32, 32], 6);
        let lr = random_image(&[2, 3, 8, 8], 7);
        let sr = super_resolve(&bundle, &lr).unwrap();
        let (real, fake) = make_tuples(&bundle, &hr, &sr, &lr).unwrap();
        assert_eq!(real.provenance, Provenance::Real);
        assert_eq!(fake.provenance, Provenance::Fake);
        assert_eq!(real.semantics.dims(), fake.semantics.dims());
        // The fake tuple carries the HR-sized SR output, not the LR input.
        assert_eq!(fake.image.tensor().dims(), hr.tensor().dims());

        // SR shape must match HR.
        assert!(make_tuples(&bundle, &hr, &lr, &lr).is_err());
    }

    #[test]
    fn rals_losses_at_the_unit_points() {
        // c_real = [1], c_fake = [0]: raw logits are exactly +1 / -1.
        let l = relativistic_logits(&[1.0], &[0.0], false).unwrap();
        assert!((rals_d_loss(&l).unwrap() - 0.0).abs() < 1e-12);
        assert!((rals_g_loss(&l).unwrap() - 8.0).abs() < 1e-12);

        // Equal populations: both raw logits vanish, both losses are 2.
        let sym = relativistic_logits(&[0.3, 0.3], &[0.3, 0.3], false).unwrap();
        assert!((rals_d_loss(&sym).unwrap() - 2.0).abs() < 1e-12);
        assert!((rals_g_loss(&sym).unwrap() - 2.0).abs() < 1e-12);

        // Squashed logits are rejected.
        let sq = relativistic_logits(&[1.0], &[0.0], true).unwrap();
        assert!(rals_d_loss(&sq).is_err());
    }

    #[test]
    fn rals_matches_scalar_loop_oracle_and_shift_invariance() {
        let mut rng = Rng64::new(9);
        for _ in 0..50 {
            let n = 1 + rng.next_below(5);
            let cr: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
            let cf: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
            let l = relativistic_logits(&cr, &cf, false).unwrap();
            let mut oracle = 0.0;
            for &x in &l.d_real {
                oracle += (x - 1.0) * (x - 1.0) / l.d_real.len() as f64;
            }
            for &x in &l.d_fake {
                oracle += (x + 1.0) * (x + 1.0) / l.d_fake.len() as f64;
            }
            assert!((rals_d_loss(&l).unwrap() - oracle).abs() < 1e-7);

            let shift = rng.next_normal() * 7.0;
            let cr2: Vec<f64> = cr.iter().map(|v| v + shift).collect();
            let cf2: Vec<f64> = cf.iter().map(|v| v + shift).collect();
            let l2 = relativistic_logits(&cr2, &cf2, false).unwrap();
            assert!((rals_d_loss(&l).unwrap() - rals_d_loss(&l2).unwrap()).abs() < 1e-9);
            assert!((rals_g_loss(&l).unwrap() - rals_g_loss(&l2).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn content_loss_zero_monotone_and_oracle() {
        let bundle = tiny_sr_bundle(11);
        let hr = random_image(&[1, 3, 32, 32], 12);
        assert_eq!(content_loss(&bundle.phi, &hr, &hr).unwrap(), 0.0);

        // Monotonicity probe under growing perturbation of a fixed direction.
        let mut rng = Rng64::new(13);
        let mut noise = Tensor::zeros(&[1, 3, 32, 32]);
        noise.fill_with(|| rng.next_normal());
        let perturbed = |delta: f64| {
            ImageTensor::new(
                hr.tensor().zip_map(&noise, |v, n| (v + delta * n).clamp(0.0, 1.0)),
            )
            .unwrap()
        };
        let small = content_loss(&bundle.phi, &hr, &perturbed(0.01)).unwrap();
        let large = content_loss(&bundle.phi, &hr, &perturbed(0.1)).unwrap();
        assert!(large > small && small > 0.0, "{small} -> {large}");

        // Feature-space brute-force oracle.
        let sr = random_image(&[1, 3, 32, 32], 14);
        let mut g = Graph::new();
        let a = g.constant(hr.tensor().clone());
        let b = g.constant(sr.tensor().clone());
        let fa = bundle.phi.forward(&mut g, a).unwrap();
        let fb = bundle.phi.forward(&mut g, b).unwrap();
        let (fa, fb) = (g.value(fa).clone(), g.value(fb).clone());
        let mut acc = 0.0;
        for (x, y) in fa.data().iter().zip(fb.data().iter()) {
            acc += (x - y) * (x - y);
        }
        acc /= fa.numel() as f64;
        assert!((content_loss(&bundle.phi, &hr, &sr).unwrap() - acc).abs() < 1e-6);

        // Symmetry.
        assert!(
            (content_loss(&bundle.phi, &hr, &sr).unwrap()
                - content_loss(&bundle.phi, &sr, &hr).unwrap())
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn pixel_loss_zero_offset_and_oracle() {
        let a = random_image(&[2, 3, 8, 8], 15);
        assert_eq!(pixel_loss(&a, &a).unwrap(), 0.0);

        let lo = ImageTensor::constant(1, 3, 4, 4, 0.2).unwrap();
        let hi = ImageTensor::constant(1, 3, 4, 4, 0.7).unwrap();
        // Constant offset 0.5 under the squared-mean convention.
        assert!((pixel_loss(&hi, &lo).unwrap() - 0.25).abs() < 1e-12);

        let b = random_image(&[2, 3, 8, 8], 16);
        let mut acc = 0.0;
        for (x, y) in a.tensor().data().iter().zip(b.tensor().data().iter()) {
            acc += (x - y) * (x - y);
        }
        acc /= a.tensor().numel() as f64;
        assert!((pixel_loss(&a, &b).unwrap() - acc).abs() < 1e-7);
        assert!((pixel_loss(&a, &b).unwrap() - pixel_loss(&b, &a).unwrap()).abs() < 1e-12);

        // Root reading is available behind the flag.
        let opts = LossOpts { pixel_metric: PixelMetric::Root, ..LossOpts::default() };
        let root = pixel_loss_with(&hi, &lo, &opts).unwrap();
        assert!((root - 0.5).abs() < 1e-12);
    }

    #[test]
    fn total_report_unit_terms_and_consistency() {
        let report = sesrn_total(&SrLossWeights::default(), 1.0, 1.0, 1.0).unwrap();
        assert!((report.total - 2.001).abs() < 1e-12);
        let zero = sesrn_total(&SrLossWeights::default(), 0.0, 0.0, 0.0).unwrap();
        assert_eq!(zero.total, 0.0);
        assert!(sesrn_total(&SrLossWeights::default(), f64::NAN, 0.0, 0.0).is_err());

        let bundle = tiny_sr_bundle(17);
        let hr = random_image(&[2, 3, 32, 32], 18);
        let lr = random_image(&[2, 3, 8, 8], 19);
        let full =
            sr_total(&bundle, &SrLossWeights::default(), &hr, &lr, &LossOpts::default()).unwrap();
        assert_eq!(full.terms.len(), 3);
        assert!((full.total - full.weighted_sum()).abs() < 1e-9);
    }
}
