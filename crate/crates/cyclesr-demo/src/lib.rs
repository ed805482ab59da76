//! Browser demo bindings: three interactive views over the core toolkit.
//!
//! - [`DegradeExplorer`] — the synthetic degradation operator with kernel,
//!   scale and noise controls, scored against bicubic upsampling.
//! - [`MetricPlayground`] — PSNR/SSIM under adjustable distortions.
//! - [`TrainingDemo`] — the three-stage toy training loop, stepped from the
//!   page, with loss history and validation panels.
//!
//! All images cross the boundary as RGBA byte buffers the page paints onto
//! canvases; no DOM access happens on the Rust side.

use wasm_bindgen::prelude::*;

use cyclesr::harness::{toy_eval_pairs, toy_hr_image, EvalPair, ToySource};
use cyclesr::imaging::{
    bicubic_upsample, degrade, nearest_upsample, psnr, ssim, DegradationSpec, ImageTensor,
    MetricOpts,
};
use cyclesr::rng::Rng64;
use cyclesr::srnet::super_resolve;
use cyclesr::training::{
    BatchSource, CheckpointBundle, NetsConfig, OptState, Stage, TrainConfig, Trainer,
};

fn to_rgba(img: &ImageTensor) -> Vec<u8> {
    let (_, c, h, w) = img.tensor().dims4();
    let mut out = Vec::with_capacity(4 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = img.get(0, ch.min(c - 1), y, x);
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
            out.push(255);
        }
    }
    out
}

fn finite_or_cap(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        99.0
    }
}

/// Degradation explorer: one seeded texture, adjustable operator.
#[wasm_bindgen]
pub struct DegradeExplorer {
    hr: ImageTensor,
    lr: ImageTensor,
    upsampled: ImageTensor,
    scale: usize,
}

#[wasm_bindgen]
impl DegradeExplorer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32) -> DegradeExplorer {
        let size = (size as usize).clamp(16, 128) & !7;
        let hr = toy_hr_image(u64::from(seed), size);
        let mut explorer = DegradeExplorer {
            lr: hr.clone(),
            upsampled: hr.clone(),
            hr,
            scale: 4,
        };
        explorer.apply(0, 4, 0.0, seed);
        explorer
    }

    /// Re-runs the operator. `kernel`: 0 bicubic, 1 box, 2 identity.
    pub fn apply(&mut self, kernel: u8, scale: u32, noise_sigma: f64, noise_seed: u32) {
        let scale = match scale {
            2 => 2,
            _ => 4,
        };
        let spec = match kernel {
            1 => DegradationSpec::box_filter(scale),
            2 => DegradationSpec::identity(scale),
            _ => DegradationSpec::bicubic(scale),
        }
        .with_noise(noise_sigma.clamp(0.0, 0.3));
        let mut rng = Rng64::stream(u64::from(noise_seed), "demo_degrade");
        self.scale = scale;
        self.lr = degrade(&self.hr, &spec, Some(&mut rng)).expect("toy sizes divide the scale");
        self.upsampled = bicubic_upsample(&self.lr, scale);
    }

    pub fn size(&self) -> u32 {
        self.hr.height() as u32
    }

    pub fn hr_rgba(&self) -> Vec<u8> {
        to_rgba(&self.hr)
    }

    /// LR panel upscaled (nearest) to HR size for display.
    pub fn lr_rgba(&self) -> Vec<u8> {
        to_rgba(&nearest_upsample(&self.lr, self.scale))
    }

    pub fn bicubic_rgba(&self) -> Vec<u8> {
        to_rgba(&self.upsampled)
    }

    /// PSNR of bicubic reconstruction against the original.
    pub fn psnr_db(&self) -> f64 {
        finite_or_cap(psnr(&self.upsampled, &self.hr).unwrap())
    }

    pub fn ssim(&self) -> f64 {
        ssim(&self.upsampled, &self.hr).unwrap()
    }
}

/// Metric playground: distortion sliders against a fixed reference.
#[wasm_bindgen]
pub struct MetricPlayground {
    reference: ImageTensor,
    distorted: ImageTensor,
}

#[wasm_bindgen]
impl MetricPlayground {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32) -> MetricPlayground {
        let size = (size as usize).clamp(16, 128) & !7;
        let reference = toy_hr_image(u64::from(seed).wrapping_add(1000), size);
        MetricPlayground { distorted: reference.clone(), reference }
    }

    pub fn distort(&mut self, noise_sigma: f64, blur_passes: u32, brightness: f64, seed: u32) {
        let (_, c, h, w) = self.reference.tensor().dims4();
        let mut t = self.reference.tensor().clone();
        for _ in 0..blur_passes.min(6) {
            let src = t.clone();
            let refl = |i: isize, n: usize| -> usize {
                if i < 0 {
                    0
                } else if i as usize >= n {
                    n - 1
                } else {
                    i as usize
                }
            };
            for cc in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let yy = refl(y as isize + dy as isize, h);
                                let xx = refl(x as isize + dx as isize, w);
                                let kw = if dy == 0 && dx == 0 { 4.0 } else if dy == 0 || dx == 0 { 2.0 } else { 1.0 };
                                acc += kw * src.data()[(cc * h + yy) * w + xx];
                            }
                        }
                        t.data_mut()[(cc * h + y) * w + x] = acc / 16.0;
                    }
                }
            }
        }
        let mut rng = Rng64::stream(u64::from(seed), "demo_metric_noise");
        let sigma = noise_sigma.clamp(0.0, 0.5);
        let shift = brightness.clamp(-0.5, 0.5);
        for v in t.data_mut() {
            *v += shift + sigma * rng.next_normal();
        }
        self.distorted = ImageTensor::clamped(t).expect("clamped");
    }

    pub fn size(&self) -> u32 {
        self.reference.height() as u32
    }

    pub fn reference_rgba(&self) -> Vec<u8> {
        to_rgba(&self.reference)
    }

    pub fn distorted_rgba(&self) -> Vec<u8> {
        to_rgba(&self.distorted)
    }

    pub fn psnr_db(&self) -> f64 {
        finite_or_cap(psnr(&self.distorted, &self.reference).unwrap())
    }

    pub fn ssim(&self) -> f64 {
        ssim(&self.distorted, &self.reference).unwrap()
    }
}

/// Stage schedule of the in-browser toy run.
const DEMO_STAGE1: u64 = 150;
const DEMO_STAGE2: u64 = 250;

fn demo_config(seed: u32) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = u64::from(seed);
    cfg.dataset.toy_n_train = 16;
    cfg.dataset.toy_n_val = 4;
    cfg.dataset.patch_size = 8;
    cfg.dataset.scale = 4;
    cfg.optim.batch_size = 4;
    cfg.optim.lr = 2e-3;
    cfg.nets = NetsConfig {
        unet_base: 4,
        unet_depth: 2,
        disc_base: 4,
        disc_min_input: 8,
        fe_base: 3,
        fe_conv_index: 2,
        fe_block_index: 2,
        sr_n_dnb: 1,
        sr_base: 6,
        sr_residual_scale: 0.2,
        d_sem: 8,
        se_base: 3,
        joint_base: 4,
        shared_trunk: true,
    };
    cfg
}

/// The three-stage toy training loop, stepped interactively.
#[wasm_bindgen]
pub struct TrainingDemo {
    trainer: Trainer,
    source: ToySource,
    pairs: Vec<EvalPair>,
    history: Vec<f64>,
    stages: Vec<u8>,
}

#[wasm_bindgen]
impl TrainingDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> TrainingDemo {
        let cfg = demo_config(seed);
        let source = ToySource::new(&cfg).expect("toy source");
        let pairs = toy_eval_pairs(&source);
        let trainer = Trainer::new(cfg).expect("trainer");
        TrainingDemo { trainer, source, pairs, history: Vec::new(), stages: Vec::new() }
    }

    fn stage_for(step: u64) -> Stage {
        if step <= DEMO_STAGE1 {
            Stage::PretrainUbcdtn
        } else if step <= DEMO_STAGE2 {
            Stage::PretrainSesrn
        } else {
            Stage::Joint
        }
    }

    /// Runs `n` training steps, crossing stage boundaries as needed.
    pub fn step(&mut self, n: u32) {
        for _ in 0..n {
            let next = self.trainer.step + 1;
            let stage = Self::stage_for(next);
            if stage != self.trainer.stage {
                // Stage boundary: fresh optimizer moments, same networks.
                let ckpt = CheckpointBundle {
                    stage,
                    step: self.trainer.step,
                    config: self.trainer.cfg.clone(),
                    nets: self.trainer.nets.clone(),
                    opt: OptState::new(&self.trainer.nets),
                };
                self.trainer = Trainer::from_checkpoint(ckpt).expect("stage switch");
            }
            self.trainer.step = next;
            let batch = self
                .source
                .batch_at(next, self.trainer.cfg.optim.batch_size)
                .expect("batch");
            let total = match stage {
                Stage::PretrainUbcdtn => self.trainer.ubcdtn_step(&batch).expect("step").total,
                Stage::PretrainSesrn => self.trainer.sesrn_step(&batch, false).expect("step").total,
                Stage::Joint => self.trainer.joint_step(&batch).expect("step").total,
            };
            self.history.push(total);
            self.stages.push(match stage {
                Stage::PretrainUbcdtn => 0,
                Stage::PretrainSesrn => 1,
                Stage::Joint => 2,
            });
        }
    }

    pub fn total_steps(&self) -> u32 {
        self.trainer.step as u32
    }

    pub fn stage_name(&self) -> String {
        match Self::stage_for(self.trainer.step.max(1)) {
            Stage::PretrainUbcdtn => "stage 1: domain transfer".into(),
            Stage::PretrainSesrn => "stage 2: super-resolution".into(),
            Stage::Joint => "stage 3: joint".into(),
        }
    }

    pub fn loss_history(&self) -> Vec<f64> {
        self.history.clone()
    }

    /// Stage tag per history entry (0, 1, 2); lets the plot switch colors.
    pub fn stage_history(&self) -> Vec<u8> {
        self.stages.clone()
    }

    /// Mean validation PSNR of the current model.
    pub fn val_psnr(&self) -> f64 {
        let opts = MetricOpts::default();
        let mut acc = 0.0;
        let mut n = 0usize;
        for pair in &self.pairs {
            let sr = super_resolve(&self.trainer.nets.sr, &pair.lr).expect("sr");
            let p = psnr(&sr, pair.gt.as_ref().unwrap()).unwrap();
            if p.is_finite() {
                acc += p;
                n += 1;
            }
            let _ = &opts;
        }
        if n == 0 {
            99.0
        } else {
            acc / n as f64
        }
    }

    /// Mean validation PSNR of plain bicubic upsampling (the baseline).
    pub fn bicubic_psnr(&self) -> f64 {
        let mut acc = 0.0;
        for pair in &self.pairs {
            let up = bicubic_upsample(&pair.lr, 4);
            acc += psnr(&up, pair.gt.as_ref().unwrap()).unwrap();
        }
        acc / self.pairs.len() as f64
    }

    pub fn panel_size(&self) -> u32 {
        self.pairs[0].gt.as_ref().unwrap().height() as u32
    }

    /// Validation panels for image 0: 0 real LR (nearest-up), 1 real-like
    /// view of its bicubic twin, 2 current SR output, 3 bicubic upsample,
    /// 4 ground truth.
    pub fn panel_rgba(&self, which: u8) -> Vec<u8> {
        let pair = &self.pairs[0];
        let scale = self.trainer.cfg.dataset.scale;
        let img = match which {
            0 => nearest_upsample(&pair.lr, scale),
            1 => {
                // What the domain transfer currently makes of the degraded twin.
                let gt = pair.gt.as_ref().unwrap();
                let spec = self.trainer.cfg.degradation_spec().expect("spec");
                let lr_deg = degrade(gt, &spec, None).expect("degrade");
                let mut g = cyclesr::graph::Graph::new();
                let x = g.constant(lr_deg.tensor().clone());
                let y = self.trainer.nets.cycle.g_a.forward(&mut g, x).expect("g_a");
                let real_like = ImageTensor::new(g.value(y).clone()).expect("range");
                nearest_upsample(&real_like, scale)
            }
            2 => super_resolve(&self.trainer.nets.sr, &pair.lr).expect("sr"),
            3 => bicubic_upsample(&pair.lr, scale),
            _ => pair.gt.clone().unwrap(),
        };
        to_rgba(&img)
    }
}
