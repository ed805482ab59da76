//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with output visible:
//!
//! ```text
//! cargo test -p cyclesr --test acceptance -- --nocapture
//! ```

use std::collections::BTreeSet;

use cyclesr::cycle::{
    backward_terms_g, cycle_loss, cycle_perceptual_loss, forward_terms_g, identity_loss,
    ragan_d_loss, ragan_g_loss, BackwardWeights, CycleBundle, CycleRole, ForwardWeights, LossKind,
    LossOpts, LossReport, LossTerm, TermMask,
};
use cyclesr::graph::Graph;
use cyclesr::harness::{
    bicubic_resolver, evaluate_pairs, model_resolver, toy_eval_pairs, AblationVariant, ToySource,
    VariantId,
};
use cyclesr::imaging::{psnr, ssim, ImageTensor, MetricOpts};
use cyclesr::nets::{
    build_conv_discriminator, build_feature_extractor, build_joint_discriminator,
    build_semantic_encoder, build_sr_generator, build_unet_generator, relativistic_logits,
    BoundNet, DiscSpec, ExtractorMode, FeatureExtractorSpec, JointDiscSpec, Mode, NetHandle,
    SemanticEncoderSpec, SrGeneratorSpec,
};
use cyclesr::rng::Rng64;
use cyclesr::srnet::{
    rals_d_loss, rals_g_loss, sesrn_total, sr_generator_terms_g, SrBundle, SrLossWeights, SrRole,
};
use cyclesr::tensor::Tensor;
use cyclesr::training::{
    load_checkpoint, pretrain_sesrn, pretrain_ubcdtn, save_checkpoint, train_joint, BatchSource,
    TrainConfig,
};

fn pass(name: &str) {
    println!("ACCEPTANCE {name}: PASS");
}

fn random_image(dims: &[usize], seed: u64) -> ImageTensor {
    let mut rng = Rng64::new(seed);
    let mut t = Tensor::zeros(dims);
    t.fill_with(|| rng.next_f64());
    ImageTensor::new(t).unwrap()
}

// ---------------------------------------------------------------------------
// Criterion 1 — closed-form loss suite (tolerance 1e-6, < 10 s)
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_closed_form_loss_suite() {
    let tol = 1e-6;

    // Cycle / identity losses: zero, constant offset, constant difference.
    let a = random_image(&[2, 3, 6, 6], 1);
    assert!(cycle_loss(&a, &a).unwrap().abs() < tol);
    let lo = ImageTensor::constant(1, 3, 4, 4, 0.25).unwrap();
    let hi = ImageTensor::constant(1, 3, 4, 4, 0.75).unwrap();
    assert!((cycle_loss(&hi, &lo).unwrap() - 0.5).abs() < tol);
    let c2 = ImageTensor::constant(1, 3, 4, 4, 0.2).unwrap();
    let c9 = ImageTensor::constant(1, 3, 4, 4, 0.9).unwrap();
    assert!((identity_loss(&c9, &c2).unwrap() - 0.7).abs() < tol);

    // Cycle-perceptual loss vanishes on identical inputs.
    let fe = build_feature_extractor(&FeatureExtractorSpec::fixed_random(2, 2, 4, 3)).unwrap();
    let img = random_image(&[1, 3, 8, 8], 2);
    assert!(cycle_perceptual_loss(&fe, &img, &img).unwrap().abs() < tol);

    // Relativistic average GAN at the sigmoid(0) symmetric point: 2 ln 2.
    let sym = relativistic_logits(&[0.4; 4], &[0.4; 4], true).unwrap();
    let two_ln2 = 2.0 * std::f64::consts::LN_2;
    assert!((ragan_d_loss(&sym).unwrap() - two_ln2).abs() < tol);
    assert!((ragan_g_loss(&sym).unwrap() - two_ln2).abs() < tol);

    // Relativistic least squares at raw logits +1 / -1: D 0, G 8.
    let unit = relativistic_logits(&[1.0], &[0.0], false).unwrap();
    assert!(rals_d_loss(&unit).unwrap().abs() < tol);
    assert!((rals_g_loss(&unit).unwrap() - 8.0).abs() < tol);

    // Weighted totals with unit terms and the configured default weights.
    let term = |name: &str, kind, weight| LossTerm { name: name.into(), value: 1.0, weight, kind };
    let fw = ForwardWeights::default();
    let fwd = LossReport::from_terms(vec![
        term("adv_g_a", LossKind::AdversarialGenerator, fw.adv),
        term("cyc_g_b", LossKind::CycleConsistency, fw.cycle),
        term("idt_degraded", LossKind::Identity, fw.identity),
        term("percep_fe_a", LossKind::CyclePerceptual, fw.perceptual),
    ]);
    assert!((fwd.total - 13.0).abs() < tol);
    let bw = BackwardWeights::default();
    let bwd = LossReport::from_terms(vec![
        term("adv_g_b", LossKind::AdversarialGenerator, bw.adv),
        term("cyc_g_a", LossKind::CycleConsistency, bw.cycle),
        term("idt_real", LossKind::Identity, bw.identity),
        term("percep_fe_b", LossKind::CyclePerceptual, bw.perceptual),
    ]);
    assert!((bwd.total - 13.0).abs() < tol);
    let merged = cyclesr::cycle::ubcdtn_total(&fwd, &bwd).unwrap();
    assert!((merged.total - 26.0).abs() < tol);
    let sr = sesrn_total(&SrLossWeights::default(), 1.0, 1.0, 1.0).unwrap();
    assert!((sr.total - 2.001).abs() < tol);

    pass("criterion 1 (closed-form loss suite)");
}

// ---------------------------------------------------------------------------
// Criterion 2 — relativistic invariances over >= 1000 random batches (< 30 s)
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_relativistic_invariances() {
    let mut rng = Rng64::new(22);
    for _ in 0..1000 {
        let n = 1 + rng.next_below(8);
        let m = 1 + rng.next_below(8);
        let c_real: Vec<f64> = (0..n).map(|_| rng.next_normal() * 2.0).collect();
        let c_fake: Vec<f64> = (0..m).map(|_| rng.next_normal() * 2.0).collect();
        let shift = rng.next_normal() * 10.0;
        let sr: Vec<f64> = c_real.iter().map(|v| v + shift).collect();
        let sf: Vec<f64> = c_fake.iter().map(|v| v + shift).collect();

        // Translation invariance, both flavors (exact up to float rounding).
        let (g0, g1) = (
            relativistic_logits(&c_real, &c_fake, true).unwrap(),
            relativistic_logits(&sr, &sf, true).unwrap(),
        );
        assert!((ragan_d_loss(&g0).unwrap() - ragan_d_loss(&g1).unwrap()).abs() < 1e-9);
        assert!((ragan_g_loss(&g0).unwrap() - ragan_g_loss(&g1).unwrap()).abs() < 1e-9);
        let (l0, l1) = (
            relativistic_logits(&c_real, &c_fake, false).unwrap(),
            relativistic_logits(&sr, &sf, false).unwrap(),
        );
        assert!((rals_d_loss(&l0).unwrap() - rals_d_loss(&l1).unwrap()).abs() < 1e-9);
        assert!((rals_g_loss(&l0).unwrap() - rals_g_loss(&l1).unwrap()).abs() < 1e-9);

        // Role-swap symmetry: exchanging populations maps D-loss to G-loss.
        let swapped = relativistic_logits(&c_fake, &c_real, true).unwrap();
        assert!((ragan_d_loss(&swapped).unwrap() - ragan_g_loss(&g0).unwrap()).abs() < 1e-12);
        assert!((ragan_g_loss(&swapped).unwrap() - ragan_d_loss(&g0).unwrap()).abs() < 1e-12);

        // Least-squares symmetric point: equal constant populations give 2.
        let v = rng.next_normal();
        let k = 1 + rng.next_below(8);
        let point = relativistic_logits(&vec![v; k], &vec![v; k], false).unwrap();
        assert!((rals_d_loss(&point).unwrap() - 2.0).abs() < 1e-12);
        assert!((rals_g_loss(&point).unwrap() - 2.0).abs() < 1e-12);
    }
    pass("criterion 2 (relativistic invariances, 1000 random batches)");
}

// ---------------------------------------------------------------------------
// Criterion 3 — gradient verification on <= 1k-parameter networks (< 5 min)
// ---------------------------------------------------------------------------

fn tiny_cycle_bundle(seed: u64) -> CycleBundle {
    let disc = DiscSpec { in_channels: 3, channels: [2; 9], min_input: 8 };
    CycleBundle {
        g_a: build_unet_generator(3, 2, 1, seed).unwrap(),
        g_b: build_unet_generator(3, 2, 1, seed + 1).unwrap(),
        d_a: build_conv_discriminator(&disc, seed + 2).unwrap(),
        d_b: build_conv_discriminator(&disc, seed + 3).unwrap(),
        fe_a: build_feature_extractor(&FeatureExtractorSpec {
            conv_index: 1,
            block_index: 1,
            in_channels: 3,
            base_channels: 2,
            convs_per_block: vec![2, 2],
            mode: ExtractorMode::FixedRandom { seed: seed + 4 },
        })
        .unwrap(),
        fe_b: build_feature_extractor(&FeatureExtractorSpec {
            conv_index: 1,
            block_index: 1,
            in_channels: 3,
            base_channels: 2,
            convs_per_block: vec![2, 2],
            mode: ExtractorMode::FixedRandom { seed: seed + 5 },
        })
        .unwrap(),
    }
}

fn tiny_sr_bundle(seed: u64) -> SrBundle {
    let mut g_sr_spec = SrGeneratorSpec::new(3, 1, 1, 4);
    g_sr_spec.residual_scale = 0.2;
    let se_spec = SemanticEncoderSpec {
        d_sem: 4,
        in_channels: 3,
        base_channels: 2,
        hr_scale: 4,
        hr_variant: false,
        mode: ExtractorMode::FixedRandom { seed: seed + 1 },
    };
    SrBundle {
        g_sr: build_sr_generator(&g_sr_spec, seed).unwrap(),
        se_hr: build_semantic_encoder(&se_spec, true).unwrap(),
        se_lr: build_semantic_encoder(&se_spec, false).unwrap(),
        d_sr: build_joint_discriminator(&JointDiscSpec::new(3, 1, 4, (32, 32)), seed + 2).unwrap(),
        phi: build_feature_extractor(&FeatureExtractorSpec {
            conv_index: 1,
            block_index: 1,
            in_channels: 3,
            base_channels: 2,
            convs_per_block: vec![2, 2],
            mode: ExtractorMode::FixedRandom { seed: seed + 3 },
        })
        .unwrap(),
    }
}

struct GradCheck {
    checked: usize,
    within: usize,
}

impl GradCheck {
    fn new() -> Self {
        Self { checked: 0, within: 0 }
    }

    fn compare(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        self.checked += 1;
        if rel <= 1e-4 {
            self.within += 1;
        }
    }

    fn assert_pass(&self, what: &str) {
        let frac = self.within as f64 / self.checked.max(1) as f64;
        assert!(
            frac >= 0.95,
            "{what}: only {:.2}% of {} coordinates within 1e-4 relative error",
            frac * 100.0,
            self.checked
        );
        println!("  {what}: {}/{} coordinates within 1e-4", self.within, self.checked);
    }
}

/// Central finite difference of `f` with respect to one named parameter
/// coordinate of one network inside a cloneable system.
fn fd_for_net(
    net_template: &NetHandle,
    apply: &mut dyn FnMut(NetHandle) -> f64,
    check: &mut GradCheck,
    analytic_for: &dyn Fn(usize, usize) -> f64,
) {
    let h = 1e-5;
    for (entry_idx, entry) in net_template.params().entries().iter().enumerate() {
        if entry.buffer {
            continue;
        }
        for coord in 0..entry.tensor.numel() {
            let mut plus_net = net_template.clone();
            let mut plus = entry.tensor.clone();
            plus.data_mut()[coord] += h;
            plus_net.load_param(&entry.name, plus).unwrap();
            let f_plus = apply(plus_net);

            let mut minus_net = net_template.clone();
            let mut minus = entry.tensor.clone();
            minus.data_mut()[coord] -= h;
            minus_net.load_param(&entry.name, minus).unwrap();
            let f_minus = apply(minus_net);

            let numeric = (f_plus - f_minus) / (2.0 * h);
            check.compare(analytic_for(entry_idx, coord), numeric);
        }
    }
}

fn grads_by_entry(
    grads: &cyclesr::graph::Gradients,
    bound: &BoundNet,
) -> Vec<Option<Tensor>> {
    bound.vars().iter().map(|v| grads.get(*v).cloned()).collect()
}

#[test]
fn criterion_3_gradient_verification() {
    let opts = LossOpts::default();
    let fw = ForwardWeights::default();
    let bw = BackwardWeights::default();
    let lr_deg = random_image(&[2, 3, 8, 8], 31);
    let lr_real = random_image(&[2, 3, 8, 8], 32);
    let bundle = tiny_cycle_bundle(40);
    for net in ["g_a", "g_b"] {
        let count = match net {
            "g_a" => bundle.g_a.param_count(),
            _ => bundle.g_b.param_count(),
        };
        assert!(count <= 1000, "{net} has {count} parameters");
    }

    // ---- forward and backward totals over the domain-transfer system ----
    for direction in ["forward", "backward"] {
        let mut g = Graph::new();
        let deg_v = g.constant(lr_deg.tensor().clone());
        let real_v = g.constant(lr_real.tensor().clone());
        let mut bc = bundle.bind(&mut g, CycleRole::Generators);
        let (_, total) = if direction == "forward" {
            forward_terms_g(&mut g, &mut bc, deg_v, real_v, &fw, &opts, Mode::Train, TermMask::ALL)
                .unwrap()
        } else {
            backward_terms_g(&mut g, &mut bc, deg_v, real_v, &bw, &opts, Mode::Train, TermMask::ALL)
                .unwrap()
        };
        let grads = g.backward(total);

        // Frozen extractors receive exactly zero gradient (structurally).
        for fe in [&bc.fe_a, &bc.fe_b] {
            for var in fe.vars() {
                assert!(grads.get(*var).is_none(), "frozen extractor got a gradient");
            }
        }

        let value_of = |b: &CycleBundle| -> f64 {
            let mut g = Graph::new();
            let deg_v = g.constant(lr_deg.tensor().clone());
            let real_v = g.constant(lr_real.tensor().clone());
            let mut bc = b.bind(&mut g, CycleRole::None);
            let (_, total) = if direction == "forward" {
                forward_terms_g(
                    &mut g, &mut bc, deg_v, real_v, &fw, &opts, Mode::Train, TermMask::ALL,
                )
                .unwrap()
            } else {
                backward_terms_g(
                    &mut g, &mut bc, deg_v, real_v, &bw, &opts, Mode::Train, TermMask::ALL,
                )
                .unwrap()
            };
            g.value(total).scalar_value()
        };

        for which in ["g_a", "g_b"] {
            let (template, bound) = match which {
                "g_a" => (&bundle.g_a, &bc.g_a),
                _ => (&bundle.g_b, &bc.g_b),
            };
            let entry_grads = grads_by_entry(&grads, bound);
            assert!(
                entry_grads.iter().any(|g| g.is_some()),
                "{which} received no gradient at all"
            );
            let mut check = GradCheck::new();
            let mut apply = |net: NetHandle| -> f64 {
                let mut b = bundle.clone();
                match which {
                    "g_a" => b.g_a = net,
                    _ => b.g_b = net,
                }
                value_of(&b)
            };
            fd_for_net(template, &mut apply, &mut check, &|entry_idx, coord| {
                entry_grads[entry_idx].as_ref().map(|t| t.data()[coord]).unwrap_or(0.0)
            });
            check.assert_pass(&format!("{direction}_total d/d {which}"));
        }
    }

    // ---- SR total over the semantic-guided system ----
    let sr_bundle = tiny_sr_bundle(50);
    assert!(sr_bundle.g_sr.param_count() <= 1000);
    let hr = random_image(&[2, 3, 32, 32], 33);
    let lr_like = random_image(&[2, 3, 8, 8], 34);
    let weights = SrLossWeights::default();

    let mut g = Graph::new();
    let hr_v = g.constant(hr.tensor().clone());
    let lr_v = g.constant(lr_like.tensor().clone());
    let mut bs = sr_bundle.bind(&mut g, SrRole::Generator);
    let (_, total, _) =
        sr_generator_terms_g(&mut g, &mut bs, hr_v, lr_v, &weights, &opts, Mode::Train).unwrap();
    let grads = g.backward(total);
    for frozen in [&bs.se_hr, &bs.se_lr, &bs.phi] {
        for var in frozen.vars() {
            assert!(grads.get(*var).is_none(), "frozen SR-side net got a gradient");
        }
    }
    let entry_grads = grads_by_entry(&grads, &bs.g_sr);
    let value_of = |b: &SrBundle| -> f64 {
        let mut g = Graph::new();
        let hr_v = g.constant(hr.tensor().clone());
        let lr_v = g.constant(lr_like.tensor().clone());
        let mut bs = b.bind(&mut g, SrRole::None);
        let (_, total, _) =
            sr_generator_terms_g(&mut g, &mut bs, hr_v, lr_v, &weights, &opts, Mode::Train)
                .unwrap();
        g.value(total).scalar_value()
    };
    let mut check = GradCheck::new();
    let mut apply = |net: NetHandle| -> f64 {
        let mut b = sr_bundle.clone();
        b.g_sr = net;
        value_of(&b)
    };
    fd_for_net(&sr_bundle.g_sr, &mut apply, &mut check, &|entry_idx, coord| {
        entry_grads[entry_idx].as_ref().map(|t| t.data()[coord]).unwrap_or(0.0)
    });
    check.assert_pass("sesrn_total d/d g_sr");

    pass("criterion 3 (analytic gradients vs central finite differences)");
}

// ---------------------------------------------------------------------------
// Criterion 4 — metric oracles (< 10 s)
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_metric_oracles() {
    // PSNR against an independent scalar-loop implementation.
    let a = random_image(&[1, 3, 13, 11], 41);
    let b = random_image(&[1, 3, 13, 11], 42);
    let mut mse = 0.0;
    for (x, y) in a.tensor().data().iter().zip(b.tensor().data().iter()) {
        mse += (x - y) * (x - y);
    }
    mse /= a.tensor().numel() as f64;
    let reference = 10.0 * (1.0f64 / mse).log10();
    assert!((psnr(&a, &b).unwrap() - reference).abs() < 1e-6);

    // Constant-offset case: 20 log10(255) dB.
    let base = ImageTensor::constant(1, 3, 8, 8, 0.3).unwrap();
    let offset = ImageTensor::new(base.tensor().map(|v| v + 1.0 / 255.0)).unwrap();
    let got = psnr(&base, &offset).unwrap();
    assert!((got - 48.1308).abs() < 1e-3, "offset PSNR {got}");

    // SSIM against a hand-rolled per-window oracle.
    let x = random_image(&[1, 3, 16, 14], 43);
    let y = random_image(&[1, 3, 16, 14], 44);
    let oracle = ssim_window_oracle(&x, &y);
    assert!((ssim(&x, &y).unwrap() - oracle).abs() < 1e-4);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);

    pass("criterion 4 (PSNR within 1e-6 dB, SSIM within 1e-4, offset case)");
}

/// Brute-force windowed SSIM, written independently of the library path.
fn ssim_window_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (bs, c, h, w) = a.tensor().dims4();
    let mut win = vec![0.0; 121];
    let mut norm = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            win[i * 11 + j] = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            norm += win[i * 11 + j];
        }
    }
    for v in &mut win {
        *v /= norm;
    }
    let (mut acc, mut count) = (0.0, 0);
    for bi in 0..bs {
        for cc in 0..c {
            for wy in 0..=h - 11 {
                for wx in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = win[i * 11 + j];
                            let xv = a.get(bi, cc, wy + i, wx + j);
                            let yv = b.get(bi, cc, wy + i, wx + j);
                            mx += wt * xv;
                            my += wt * yv;
                            sxx += wt * xv * xv;
                            syy += wt * yv * yv;
                            sxy += wt * xv * yv;
                        }
                    }
                    let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
                    acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    acc / count as f64
}

// ---------------------------------------------------------------------------
// Criteria 5–7 — toy schedule: convergence, additive identity, determinism
// ---------------------------------------------------------------------------

/// Desk-scale acceptance configuration: the checked-in toy experiment file,
/// shared with the CLI. Every threshold the toy criteria use is pinned in
/// this test file.
fn toy_acceptance_config() -> TrainConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    TrainConfig::from_file(&path).expect("toy config parses")
}

#[test]
fn criterion_5_toy_convergence() {
    let cfg = toy_acceptance_config();
    let mut source = ToySource::new(&cfg).unwrap();

    // (a) 500 steps into domain-transfer pretraining the training total has
    // halved: mean of steps 491-500 <= 0.5 x the step-1 value.
    let stage1 = pretrain_ubcdtn(&cfg, &mut source, None).unwrap();
    assert!(stage1.history.len() >= 500);
    let first = stage1.history.first().unwrap().total;
    let at_500: f64 = stage1.history[490..500].iter().map(|r| r.total).sum::<f64>() / 10.0;
    println!("  stage-1 total: step 1 = {first:.4}, steps 491-500 mean = {at_500:.4}");
    assert!(
        at_500 <= 0.5 * first,
        "domain-transfer total fell only to {at_500:.4} from {first:.4} after 500 steps"
    );

    // (b) After the full three-stage schedule the system beats the bicubic
    // baseline through the same evaluation path.
    let stage2 = pretrain_sesrn(&cfg, &stage1.checkpoint, &mut source, None).unwrap();
    let (stage3, _) = train_joint(&cfg, &stage2.checkpoint, &mut source, None).unwrap();
    let pairs = toy_eval_pairs(&source);
    // The config is the metric protocol; both resolvers run through it.
    let opts = MetricOpts { space: cfg.metrics.space, border_crop: cfg.metrics.border_crop };
    let mut model = model_resolver(&stage3.checkpoint.nets.sr);
    let model_report = evaluate_pairs(&mut model, &pairs, &opts, None).unwrap().unwrap();
    let mut bicubic = bicubic_resolver(cfg.dataset.scale);
    let bicubic_report = evaluate_pairs(&mut bicubic, &pairs, &opts, None).unwrap().unwrap();
    println!(
        "  toy validation PSNR: model {:.3} dB vs bicubic {:.3} dB",
        model_report.summary.psnr_db, bicubic_report.summary.psnr_db
    );
    assert!(
        model_report.summary.psnr_db > bicubic_report.summary.psnr_db,
        "model {:.3} dB did not beat bicubic {:.3} dB",
        model_report.summary.psnr_db,
        bicubic_report.summary.psnr_db
    );

    pass("criterion 5 (toy convergence: 50% loss drop and bicubic baseline beaten)");
}

#[test]
fn criterion_6_joint_additive_identity() {
    let mut cfg = toy_acceptance_config();
    cfg.schedule.steps_pretrain_ubcdtn = 4;
    cfg.schedule.steps_pretrain_sesrn = 4;
    cfg.schedule.steps_joint = 8;
    let mut source = ToySource::new(&cfg).unwrap();
    let s1 = pretrain_ubcdtn(&cfg, &mut source, None).unwrap();
    let s2 = pretrain_sesrn(&cfg, &s1.checkpoint, &mut source, None).unwrap();
    let (_, joint_reports) = train_joint(&cfg, &s2.checkpoint, &mut source, None).unwrap();
    assert_eq!(joint_reports.len(), 8);
    for (i, report) in joint_reports.iter().enumerate() {
        let recomputed = report.ubcdtn.total + report.sesrn.total;
        assert!(
            (report.total - recomputed).abs() <= 1e-9,
            "step {i}: joint total {} vs subsystem sum {recomputed}",
            report.total
        );
        // Each subsystem total also matches its own weighted term sum.
        assert!((report.ubcdtn.total - report.ubcdtn.weighted_sum()).abs() <= 1e-9);
        assert!((report.sesrn.total - report.sesrn.weighted_sum()).abs() <= 1e-9);
    }
    pass("criterion 6 (joint-step additive identity at every logged step)");
}

#[test]
fn criterion_7_determinism_and_resume() {
    let mut cfg = toy_acceptance_config();
    cfg.schedule.steps_pretrain_ubcdtn = 10;

    // Identical seeds reproduce the 10-step trajectory bitwise.
    let run = |cfg: &TrainConfig| -> Vec<u64> {
        let mut source = ToySource::new(cfg).unwrap();
        let out = pretrain_ubcdtn(cfg, &mut source, None).unwrap();
        out.history.iter().map(|r| r.total.to_bits()).collect()
    };
    let t1 = run(&cfg);
    let t2 = run(&cfg);
    assert_eq!(t1, t2, "same-seed trajectories diverged");
    let mut other = cfg.clone();
    other.seed = 8;
    assert_ne!(t1, run(&other), "different seeds produced identical trajectories");

    // Checkpoint resume: 5 + 5 steps equal 10 uninterrupted steps bitwise.
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("resume.ckpt");
    let mut cfg5 = cfg.clone();
    cfg5.schedule.steps_pretrain_ubcdtn = 5;
    let mut source = ToySource::new(&cfg5).unwrap();
    let first_half = pretrain_ubcdtn(&cfg5, &mut source, None).unwrap();
    save_checkpoint(&first_half.checkpoint, &ckpt_path).unwrap();
    let restored = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(restored.step, 5);

    let mut trainer = cyclesr::training::Trainer::from_checkpoint(restored).unwrap();
    let mut resumed_bits = Vec::new();
    for _ in 0..5 {
        trainer.step += 1;
        let batch = source.batch_at(trainer.step, cfg.optim.batch_size).unwrap();
        let report = trainer.ubcdtn_step(&batch).unwrap();
        resumed_bits.push(report.total.to_bits());
    }
    assert_eq!(&t1[5..], resumed_bits.as_slice(), "resumed trajectory diverged");

    // Saved files round-trip byte-identically.
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&load_checkpoint(&ckpt_path).unwrap(), &again).unwrap();
    assert_eq!(std::fs::read(&ckpt_path).unwrap(), std::fs::read(&again).unwrap());

    pass("criterion 7 (bitwise determinism and checkpoint resume)");
}

// ---------------------------------------------------------------------------
// Criterion 8 — ablation wiring matches the tick matrix (no training)
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_ablation_wiring() {
    let expected: [(&str, &[&str]); 5] = [
        ("A", &["content", "adv_g_sr", "pixel"]),
        ("B", &["adv_g_a", "content", "adv_g_sr", "pixel"]),
        (
            "C",
            &[
                "cyc_g_b",
                "idt_degraded",
                "percep_fe_a",
                "cyc_g_a",
                "idt_real",
                "percep_fe_b",
                "content",
                "adv_g_sr",
                "pixel",
            ],
        ),
        (
            "D",
            &[
                "adv_g_a",
                "cyc_g_b",
                "idt_degraded",
                "adv_g_b",
                "cyc_g_a",
                "idt_real",
                "content",
                "adv_g_sr",
                "pixel",
            ],
        ),
        (
            "E",
            &[
                "adv_g_a",
                "cyc_g_b",
                "idt_degraded",
                "percep_fe_a",
                "adv_g_b",
                "cyc_g_a",
                "idt_real",
                "percep_fe_b",
                "content",
                "adv_g_sr",
                "pixel",
            ],
        ),
    ];
    let mut seen = Vec::new();
    for (id, terms) in expected {
        let variant = AblationVariant::new(id.parse().unwrap());
        let want: BTreeSet<String> = terms.iter().map(|s| s.to_string()).collect();
        let got = variant.active_generator_terms(false);
        assert_eq!(got, want, "variant {id} term set");
        seen.push(got);
    }
    for i in 0..seen.len() {
        for j in i + 1..seen.len() {
            assert_ne!(seen[i], seen[j], "variants share a term set");
        }
    }

    // The runtime reports agree with the structural sets: run one joint step
    // per variant at tiny scale and compare emitted term names.
    let mut cfg = toy_acceptance_config();
    cfg.dataset.toy_n_train = 4;
    cfg.dataset.toy_n_val = 2;
    cfg.optim.batch_size = 2;
    for (id, _) in expected {
        let variant = AblationVariant::new(id.parse::<VariantId>().unwrap());
        let wiring = variant.wiring(false);
        let mut source = ToySource::new(&cfg).unwrap();
        let mut trainer = cyclesr::training::Trainer::new(cfg.clone())
            .unwrap()
            .with_wiring(wiring);
        trainer.step = 1;
        let batch = source.batch_at(1, 2).unwrap();
        let report = trainer.joint_step(&batch).unwrap();
        let mut got: BTreeSet<String> = report.ubcdtn.term_names();
        got.extend(report.sesrn.term_names());
        assert_eq!(got, variant.active_generator_terms(false), "runtime terms for {id}");
    }

    pass("criterion 8 (five variants match the component matrix structurally)");
}

// ---------------------------------------------------------------------------
// Criterion 9 — full-scale protocol documented, not reproduced
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_full_scale_documented_not_reproduced() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let cfg = TrainConfig::from_file(&root.join("configs/full_scale.toml")).unwrap();
    // The documented full-scale settings: constant 1e-4 Adam, batch 8,
    // 4x scale, 50k/50k/100k iterations, folder-backed unpaired corpora.
    assert!((cfg.optim.lr - 1e-4).abs() < 1e-18);
    assert_eq!(cfg.optim.batch_size, 8);
    assert!((cfg.optim.beta1 - 0.9).abs() < 1e-12 && (cfg.optim.beta2 - 0.999).abs() < 1e-12);
    assert_eq!(cfg.dataset.scale, 4);
    assert_eq!(cfg.dataset.kind, "folders");
    assert_eq!(cfg.schedule.steps_pretrain_ubcdtn, 50_000);
    assert_eq!(cfg.schedule.steps_pretrain_sesrn, 50_000);
    assert_eq!(cfg.schedule.steps_joint, 100_000);

    let readme = std::fs::read_to_string(root.join("README.md")).unwrap();
    assert!(
        readme.contains("full-scale") || readme.contains("full scale"),
        "README must state the desk-scale limitation"
    );

    println!(
        "  full-scale benchmark numbers require training on the real corpora; \
         this suite asserts the property criteria only"
    );
    pass("criterion 9 (full-scale protocol documented, properties asserted)");
}
