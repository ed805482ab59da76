//! Command-line interface: synthetic degradation, three-stage training,
//! inference, evaluation and the ablation matrix.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cyclesr::harness::{
    build_dataset, evaluate_checkpoint_folders, model_resolver, run_ablation, AblationVariant,
    ToySource, UnpairedDatasetSpec, VariantId,
};
use cyclesr::imaging::{
    degrade, load_image, save_image, write_metrics_csv, DegradationSpec, MetricOpts,
};
use cyclesr::rng::Rng64;
use cyclesr::training::{
    load_checkpoint, pretrain_sesrn, pretrain_ubcdtn, save_checkpoint, train_joint, BatchSource,
    Stage, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "cyclesr",
    about = "Unsupervised real-world super-resolution: domain transfer + semantic-guided SR",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Force deterministic mode (fixed seed streams, fixed iteration order).
    #[arg(long)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl CommonOpts {
    fn load_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        Ok(cfg)
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum KernelKind {
    Bicubic,
    Box,
    Identity,
}

#[derive(Copy, Clone, ValueEnum)]
enum StageArg {
    All,
    Ubcdtn,
    Sesrn,
    Joint,
}

#[derive(Subcommand)]
enum Command {
    /// Apply the synthetic degradation operator to a folder of images.
    Degrade {
        #[command(flatten)]
        common: CommonOpts,
        /// Input folder of HR images.
        #[arg(long, name = "DIR")]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long, value_enum, default_value_t = KernelKind::Bicubic)]
        kernel: KernelKind,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
    },
    /// Run the training schedule (stage-selectable).
    Train {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Checkpoint to start from (required for single later stages).
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Super-resolve a folder of LR images with a trained checkpoint.
    Infer {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        ckpt: PathBuf,
        /// Folder of LR images.
        #[arg(long, name = "DIR")]
        input: PathBuf,
    },
    /// Evaluate a checkpoint: PSNR/SSIM against ground truth, or SR dumps
    /// only when no ground truth is given.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        ckpt: PathBuf,
        /// Folder of validation LR images.
        #[arg(long)]
        lr: PathBuf,
        /// Folder of ground-truth HR images (matched by file stem).
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Train and evaluate one ablation variant at toy scale.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        /// Variant id: A (SR only) .. E (full system).
        #[arg(long)]
        variant: String,
    },
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn data_source(cfg: &TrainConfig) -> Result<Box<dyn BatchSource>> {
    match cfg.dataset.kind.as_str() {
        "toy" => Ok(Box::new(ToySource::new(cfg)?)),
        "folders" => {
            let spec = UnpairedDatasetSpec::from_config(cfg)?;
            Ok(Box::new(build_dataset(&spec, cfg.effective_seed())?))
        }
        other => bail!("unknown dataset kind {other}"),
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Degrade { common, input, scale, kernel, noise_sigma } => {
            let spec = match kernel {
                KernelKind::Bicubic => DegradationSpec::bicubic(scale),
                KernelKind::Box => DegradationSpec::box_filter(scale),
                KernelKind::Identity => DegradationSpec::identity(scale),
            }
            .with_noise(noise_sigma);
            std::fs::create_dir_all(&common.out)?;
            let mut rng = Rng64::stream(common.seed.unwrap_or(0), "cli_degrade_noise");
            let mut count = 0usize;
            for entry in std::fs::read_dir(&input)? {
                let path = entry?.path();
                if !is_image(&path) {
                    continue;
                }
                let hr = load_image(&path).with_context(|| format!("{}", path.display()))?;
                let lr = degrade(&hr, &spec, Some(&mut rng))
                    .with_context(|| format!("degrading {}", path.display()))?;
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                save_image(&common.out.join(name), &lr)?;
                count += 1;
            }
            if count == 0 {
                bail!("no images found in {}", input.display());
            }
            println!("degraded {count} images into {}", common.out.display());
        }
        Command::Train { common, stage, ckpt } => {
            let cfg = common.load_config()?;
            std::fs::create_dir_all(&common.out)?;
            let mut data = data_source(&cfg)?;
            let load = |p: &Option<PathBuf>| -> Result<_> {
                let p = p.as_ref().context("this stage needs --ckpt")?;
                Ok(load_checkpoint(p)?)
            };
            match stage {
                StageArg::All => {
                    let s1 = pretrain_ubcdtn(&cfg, data.as_mut(), Some(&common.out.join("stage1")))?;
                    save_checkpoint(&s1.checkpoint, &common.out.join("stage1.ckpt"))?;
                    let s2 = pretrain_sesrn(
                        &cfg,
                        &s1.checkpoint,
                        data.as_mut(),
                        Some(&common.out.join("stage2")),
                    )?;
                    save_checkpoint(&s2.checkpoint, &common.out.join("stage2.ckpt"))?;
                    let (s3, _) = train_joint(
                        &cfg,
                        &s2.checkpoint,
                        data.as_mut(),
                        Some(&common.out.join("stage3")),
                    )?;
                    save_checkpoint(&s3.checkpoint, &common.out.join("final.ckpt"))?;
                    println!("trained all stages; final checkpoint at {}", common.out.join("final.ckpt").display());
                }
                StageArg::Ubcdtn => {
                    let s1 = pretrain_ubcdtn(&cfg, data.as_mut(), Some(&common.out))?;
                    save_checkpoint(&s1.checkpoint, &common.out.join("stage1.ckpt"))?;
                    println!("stage 1 checkpoint at {}", common.out.join("stage1.ckpt").display());
                }
                StageArg::Sesrn => {
                    let base = load(&ckpt)?;
                    if base.stage != Stage::PretrainUbcdtn {
                        eprintln!("note: starting SR pretraining from a {} checkpoint", base.stage.as_str());
                    }
                    let s2 = pretrain_sesrn(&cfg, &base, data.as_mut(), Some(&common.out))?;
                    save_checkpoint(&s2.checkpoint, &common.out.join("stage2.ckpt"))?;
                    println!("stage 2 checkpoint at {}", common.out.join("stage2.ckpt").display());
                }
                StageArg::Joint => {
                    let base = load(&ckpt)?;
                    let (s3, _) = train_joint(&cfg, &base, data.as_mut(), Some(&common.out))?;
                    save_checkpoint(&s3.checkpoint, &common.out.join("final.ckpt"))?;
                    println!("final checkpoint at {}", common.out.join("final.ckpt").display());
                }
            }
        }
        Command::Infer { common, ckpt, input } => {
            let bundle = load_checkpoint(&ckpt)?;
            std::fs::create_dir_all(&common.out)?;
            let mut resolve = model_resolver(&bundle.nets.sr);
            let mut count = 0usize;
            for entry in std::fs::read_dir(&input)? {
                let path = entry?.path();
                if !is_image(&path) {
                    continue;
                }
                let lr = load_image(&path)?;
                let sr = resolve(&lr).with_context(|| format!("{}", path.display()))?;
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                save_image(&common.out.join(name), &sr)?;
                count += 1;
            }
            if count == 0 {
                bail!("no images found in {}", input.display());
            }
            println!("super-resolved {count} images into {}", common.out.display());
        }
        Command::Eval { common, ckpt, lr, gt } => {
            let cfg = common.load_config()?;
            let bundle = load_checkpoint(&ckpt)?;
            std::fs::create_dir_all(&common.out)?;
            let opts =
                MetricOpts { space: cfg.metrics.space, border_crop: cfg.metrics.border_crop };
            let report = evaluate_checkpoint_folders(
                &bundle,
                &lr,
                gt.as_deref(),
                &opts,
                Some(&common.out),
            )?;
            match report {
                Some(report) => {
                    let csv = common.out.join("metrics.csv");
                    write_metrics_csv(&csv, &report.rows)?;
                    println!(
                        "{} images: mean PSNR {:.4} dB, mean SSIM {:.4} (rows in {})",
                        report.summary.n_images,
                        report.summary.psnr_db,
                        report.summary.ssim,
                        csv.display()
                    );
                }
                None => println!("no ground truth given; SR images written to {}", common.out.display()),
            }
        }
        Command::Ablate { common, variant } => {
            let cfg = common.load_config()?;
            let id: VariantId = variant.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
            let variant = AblationVariant::new(id);
            std::fs::create_dir_all(&common.out)?;
            let outcome = run_ablation(&variant, &cfg, Some(&common.out))?;
            println!(
                "variant {variant_id:?} (toy scale): mean PSNR {psnr:.4} dB, mean SSIM {ssim:.4} over {n} images",
                variant_id = outcome.variant,
                psnr = outcome.metrics.psnr_db,
                ssim = outcome.metrics.ssim,
                n = outcome.metrics.n_images,
            );
            println!("note: toy-scale numbers; full-scale protocols need the real corpora");
        }
    }
    Ok(())
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        .unwrap_or(false)
}
