//! Image representation, file IO, the synthetic degradation operator and the
//! PSNR/SSIM metrics.
//!
//! All images cross module boundaries as [`ImageTensor`]: a `[B, C, H, W]`
//! f64 tensor with every value in `[0, 1]`. Degradation follows the classic
//! model `y = (x ⊗ k) ↓ s + n`: convolution with a normalized kernel,
//! stride-`s` subsampling, optional additive white Gaussian noise, then a
//! clip back into range.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::Tensor;

/// Value range every image tensor is kept in.
pub const VALUE_RANGE: (f64, f64) = (0.0, 1.0);

/// Batched image in `[B, C, H, W]` layout, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.dims().len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "image tensor must be [B,C,H,W], got {:?}",
                data.dims()
            )));
        }
        let (b, c, h, w) = data.dims4();
        if b == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument("image dimensions must be >= 1".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidArgument(format!("expected 1 or 3 channels, got {c}")));
        }
        if data.data().iter().any(|&v| !(VALUE_RANGE.0..=VALUE_RANGE.1).contains(&v)) {
            return Err(Error::InvalidArgument("image values must lie in [0, 1]".into()));
        }
        Ok(Self { data })
    }

    /// Builds an image tensor by clamping arbitrary values into `[0, 1]`.
    pub fn clamped(data: Tensor) -> Result<Self> {
        Self::new(data.map(|v| v.clamp(VALUE_RANGE.0, VALUE_RANGE.1)))
    }

    pub fn constant(b: usize, c: usize, h: usize, w: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[b, c, h, w], value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[3]
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cs, h, w) = self.data.dims4();
        self.data.data()[((b * cs + c) * h + y) * w + x]
    }

    /// Extracts image `i` of the batch as a batch-1 tensor.
    pub fn select(&self, i: usize) -> ImageTensor {
        let (b, c, h, w) = self.data.dims4();
        assert!(i < b, "batch index {i} out of range {b}");
        let per = c * h * w;
        let data = self.data.data()[i * per..(i + 1) * per].to_vec();
        ImageTensor { data: Tensor::from_vec(&[1, c, h, w], data).unwrap() }
    }

    /// Stacks batch-compatible images into one batch.
    pub fn stack(images: &[ImageTensor]) -> Result<ImageTensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero images".into()))?;
        let (_, c, h, w) = first.data.dims4();
        let mut data = Vec::new();
        let mut batch = 0;
        for img in images {
            let (b2, c2, h2, w2) = img.data.dims4();
            if (c2, h2, w2) != (c, h, w) {
                return Err(Error::ShapeMismatch("stack of mismatched images".into()));
            }
            batch += b2;
            data.extend_from_slice(img.data.data());
        }
        ImageTensor::new(Tensor::from_vec(&[batch, c, h, w], data)?)
    }

    /// BT.601 luma conversion; identity for single-channel input.
    pub fn to_luma(&self) -> ImageTensor {
        let (b, c, h, w) = self.data.dims4();
        if c == 1 {
            return self.clone();
        }
        let mut out = Tensor::zeros(&[b, 1, h, w]);
        let xv = self.data.data();
        let ov = out.data_mut();
        let plane = h * w;
        for bi in 0..b {
            let rbase = bi * 3 * plane;
            for i in 0..plane {
                let (r, g, bl) = (xv[rbase + i], xv[rbase + plane + i], xv[rbase + 2 * plane + i]);
                ov[bi * plane + i] = 0.299 * r + 0.587 * g + 0.114 * bl;
            }
        }
        ImageTensor { data: out }
    }

    /// Drops `border` pixels from every side.
    pub fn crop_border(&self, border: usize) -> Result<ImageTensor> {
        if border == 0 {
            return Ok(self.clone());
        }
        let (b, c, h, w) = self.data.dims4();
        if h <= 2 * border || w <= 2 * border {
            return Err(Error::InvalidArgument(format!(
                "border {border} too large for {h}x{w} image"
            )));
        }
        let (nh, nw) = (h - 2 * border, w - 2 * border);
        let mut out = Tensor::zeros(&[b, c, nh, nw]);
        for bi in 0..b {
            for cc in 0..c {
                for y in 0..nh {
                    for x in 0..nw {
                        let v = self.get(bi, cc, y + border, x + border);
                        out.data_mut()[((bi * c + cc) * nh + y) * nw + x] = v;
                    }
                }
            }
        }
        Ok(ImageTensor { data: out })
    }
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Parameters of the degradation operator.
#[derive(Debug, Clone)]
pub struct DegradationSpec {
    /// 2-d convolution kernel; entries must sum to 1.
    pub kernel: Tensor,
    /// Integer downsampling factor.
    pub scale: usize,
    /// Standard deviation of additive white Gaussian noise.
    pub noise_sigma: f64,
}

impl DegradationSpec {
    /// Anti-aliased bicubic kernel for the given scale: the cubic stretched
    /// by `s` and sampled at the tap offsets of a stride-`s` grid, then
    /// normalized. For `scale = 1` this degenerates to the identity kernel.
    pub fn bicubic(scale: usize) -> Self {
        assert!(scale >= 1, "scale must be >= 1");
        let s = scale as f64;
        // Even scales put the block center between pixels; use an even tap
        // count there so offsets are half-integers, odd count otherwise.
        let taps = if scale % 2 == 0 { 4 * scale } else { 4 * scale - 1 };
        let half = (taps as f64 - 1.0) / 2.0;
        let mut row = vec![0.0; taps];
        for (i, v) in row.iter_mut().enumerate() {
            *v = cubic((i as f64 - half) / s) / s;
        }
        let sum: f64 = row.iter().sum();
        for v in &mut row {
            *v /= sum;
        }
        let mut kernel = Tensor::zeros(&[taps, taps]);
        for i in 0..taps {
            for j in 0..taps {
                kernel.data_mut()[i * taps + j] = row[i] * row[j];
            }
        }
        Self { kernel, scale, noise_sigma: 0.0 }
    }

    /// 1x1 identity kernel (pure subsampling).
    pub fn identity(scale: usize) -> Self {
        Self { kernel: Tensor::full(&[1, 1], 1.0), scale, noise_sigma: 0.0 }
    }

    /// s x s box kernel (block average).
    pub fn box_filter(scale: usize) -> Self {
        assert!(scale >= 1);
        let k = Tensor::full(&[scale, scale], 1.0 / (scale * scale) as f64);
        Self { kernel: k, scale, noise_sigma: 0.0 }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.dims().len() != 2 || self.kernel.numel() == 0 {
            return Err(Error::InvalidArgument("kernel must be a non-empty 2-d array".into()));
        }
        let sum: f64 = self.kernel.data().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "kernel entries must sum to 1 (got {sum})"
            )));
        }
        if self.scale < 1 {
            return Err(Error::InvalidArgument("scale must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Symmetric (mirror) boundary fold.
fn reflect(mut idx: isize, len: usize) -> usize {
    let len = len as isize;
    loop {
        if idx < 0 {
            idx = -idx - 1;
        } else if idx >= len {
            idx = 2 * len - idx - 1;
        } else {
            return idx as usize;
        }
    }
}

/// Applies `y = (x ⊗ k) ↓ s + n`. With `noise_sigma = 0` the result is a pure
/// function of the input; otherwise the caller provides the noise stream.
pub fn degrade(
    hr: &ImageTensor,
    spec: &DegradationSpec,
    noise: Option<&mut Rng64>,
) -> Result<ImageTensor> {
    spec.validate()?;
    let (b, c, h, w) = hr.tensor().dims4();
    if h % spec.scale != 0 || w % spec.scale != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} not divisible by scale {}",
            spec.scale
        )));
    }
    let (kh, kw) = (spec.kernel.dims()[0], spec.kernel.dims()[1]);
    let s = spec.scale;
    let (oh, ow) = (h / s, w / s);
    // Kernel anchored at the block center, rounding toward the top-left when
    // kernel and stride parities differ.
    let off_h = (s as isize - kh as isize).div_euclid(2);
    let off_w = (s as isize - kw as isize).div_euclid(2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let xv = hr.tensor().data();
    let kv = spec.kernel.data();
    {
        let ov = out.data_mut();
        for bi in 0..b {
            for cc in 0..c {
                let xbase = (bi * c + cc) * h * w;
                let obase = (bi * c + cc) * oh * ow;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = 0.0;
                        for m in 0..kh {
                            let iy = reflect((oi * s) as isize + off_h + m as isize, h);
                            for n in 0..kw {
                                let ix = reflect((oj * s) as isize + off_w + n as isize, w);
                                acc += kv[m * kw + n] * xv[xbase + iy * w + ix];
                            }
                        }
                        ov[obase + oi * ow + oj] = acc;
                    }
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let rng = noise.ok_or_else(|| {
            Error::InvalidArgument("noise_sigma > 0 requires a noise stream".into())
        })?;
        for v in out.data_mut() {
            *v += spec.noise_sigma * rng.next_normal();
        }
    }
    ImageTensor::clamped(out)
}

/// Bicubic interpolation upscaling (the plain SR baseline).
pub fn bicubic_upsample(lr: &ImageTensor, scale: usize) -> ImageTensor {
    assert!(scale >= 1);
    let (b, c, h, w) = lr.tensor().dims4();
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let xv = lr.tensor().data();
    let r = scale as f64;
    // Per-axis taps and weights are shared across rows/columns.
    let weights = |n_out: usize| -> Vec<([isize; 4], [f64; 4])> {
        (0..n_out)
            .map(|i| {
                let src = (i as f64 + 0.5) / r - 0.5;
                let base = src.floor() as isize;
                let mut taps = [0isize; 4];
                let mut ws = [0f64; 4];
                for t in 0..4 {
                    taps[t] = base - 1 + t as isize;
                    ws[t] = cubic(src - taps[t] as f64);
                }
                (taps, ws)
            })
            .collect()
    };
    let wy = weights(oh);
    let wx = weights(ow);
    {
        let ov = out.data_mut();
        for bi in 0..b {
            for cc in 0..c {
                let xbase = (bi * c + cc) * h * w;
                let obase = (bi * c + cc) * oh * ow;
                for oi in 0..oh {
                    let (ty, wys) = &wy[oi];
                    for oj in 0..ow {
                        let (tx, wxs) = &wx[oj];
                        let mut acc = 0.0;
                        for (yi, wy_val) in ty.iter().zip(wys.iter()) {
                            let iy = reflect(*yi, h);
                            for (xi, wx_val) in tx.iter().zip(wxs.iter()) {
                                let ix = reflect(*xi, w);
                                acc += wy_val * wx_val * xv[xbase + iy * w + ix];
                            }
                        }
                        ov[obase + oi * ow + oj] = acc;
                    }
                }
            }
        }
    }
    ImageTensor::clamped(out).expect("clamped output is always in range")
}

/// Nearest-neighbour upscaling; used for visual panels, not as a baseline.
pub fn nearest_upsample(lr: &ImageTensor, scale: usize) -> ImageTensor {
    let (b, c, h, w) = lr.tensor().dims4();
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let xv = lr.tensor().data();
    let ov = out.data_mut();
    for bi in 0..b {
        for cc in 0..c {
            let xbase = (bi * c + cc) * h * w;
            let obase = (bi * c + cc) * oh * ow;
            for oi in 0..oh {
                for oj in 0..ow {
                    ov[obase + oi * ow + oj] = xv[xbase + (oi / scale) * w + oj / scale];
                }
            }
        }
    }
    ImageTensor::new(out).expect("nearest keeps range")
}

/// Which channels metrics are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSpace {
    Rgb,
    Y,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricOpts {
    pub space: MetricSpace,
    /// Pixels cropped from each border before computing metrics.
    pub border_crop: usize,
}

impl Default for MetricOpts {
    fn default() -> Self {
        Self { space: MetricSpace::Rgb, border_crop: 0 }
    }
}

/// Aggregated metric values over a set of images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricResult {
    /// Mean PSNR over images with finite PSNR; `f64::INFINITY` when every
    /// image matched its reference exactly.
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
}

impl MetricResult {
    pub fn validate(&self) -> Result<()> {
        if self.n_images < 1 {
            return Err(Error::InvalidArgument("metric result over zero images".into()));
        }
        if !(-1.0..=1.0).contains(&self.ssim) {
            return Err(Error::InvalidArgument(format!("ssim {} outside [-1, 1]", self.ssim)));
        }
        Ok(())
    }

    /// Aggregates per-image values; infinite PSNRs are excluded from the mean.
    pub fn aggregate(per_image: &[(f64, f64)]) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::InvalidArgument("metric result over zero images".into()));
        }
        let finite: Vec<f64> =
            per_image.iter().map(|&(p, _)| p).filter(|p| p.is_finite()).collect();
        let psnr_db = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let ssim = per_image.iter().map(|&(_, s)| s).sum::<f64>() / per_image.len() as f64;
        let out = Self { psnr_db, ssim, n_images: per_image.len() };
        out.validate()?;
        Ok(out)
    }
}

fn prepared(a: &ImageTensor, opts: &MetricOpts) -> Result<ImageTensor> {
    let img = match opts.space {
        MetricSpace::Rgb => a.clone(),
        MetricSpace::Y => a.to_luma(),
    };
    img.crop_border(opts.border_crop)
}

/// Peak signal-to-noise ratio in dB with MAX = 1; `f64::INFINITY` when the
/// images are identical.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    psnr_with(a, b, &MetricOpts::default())
}

pub fn psnr_with(a: &ImageTensor, b: &ImageTensor, opts: &MetricOpts) -> Result<f64> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::ShapeMismatch(format!(
            "psnr inputs {:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    let (pa, pb) = (prepared(a, opts)?, prepared(b, opts)?);
    let n = pa.tensor().numel() as f64;
    let mse = pa
        .tensor()
        .data()
        .iter()
        .zip(pb.tensor().data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let dy = i as f64 - half;
            let dx = j as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over all valid 11x11 Gaussian windows, channels and batch.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, &MetricOpts::default())
}

pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, opts: &MetricOpts) -> Result<f64> {
    if a.tensor().dims() != b.tensor().dims() {
        return Err(Error::ShapeMismatch(format!(
            "ssim inputs {:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )));
    }
    let (pa, pb) = (prepared(a, opts)?, prepared(b, opts)?);
    let (bs, c, h, w) = pa.tensor().dims4();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let xv = pa.tensor().data();
    let yv = pb.tensor().data();
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..bs {
        for cc in 0..c {
            let base = (bi * c + cc) * h * w;
            for wy in 0..=(h - SSIM_WINDOW) {
                for wx in 0..=(w - SSIM_WINDOW) {
                    let (mut mx, mut my) = (0.0, 0.0);
                    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                    for i in 0..SSIM_WINDOW {
                        let row = base + (wy + i) * w + wx;
                        let wrow = i * SSIM_WINDOW;
                        for j in 0..SSIM_WINDOW {
                            let wt = win[wrow + j];
                            let x = xv[row + j];
                            let y = yv[row + j];
                            mx += wt * x;
                            my += wt * y;
                            sxx += wt * x * x;
                            syy += wt * y * y;
                            sxy += wt * x * y;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cov = sxy - mx * my;
                    let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                    let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                    total += num / den;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Loads an 8-bit raster file as a batch-1 RGB tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!("zero-size image {}", path.display())));
    }
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for ch in 0..3 {
            data[ch * h * w + y * w + x] = f64::from(px[ch]) / 255.0;
        }
    }
    ImageTensor::new(Tensor::from_vec(&[1, 3, h, w], data)?)
}

/// Saves a batch-1 tensor as an 8-bit PNG (RGB or grayscale).
pub fn save_image(path: &Path, img: &ImageTensor) -> Result<()> {
    if img.batch() != 1 {
        return Err(Error::InvalidArgument("save_image expects batch = 1".into()));
    }
    let (_, c, h, w) = img.tensor().dims4();
    let quant = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    match c {
        3 => {
            let mut out = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = image::Rgb([
                        quant(img.get(0, 0, y, x)),
                        quant(img.get(0, 1, y, x)),
                        quant(img.get(0, 2, y, x)),
                    ]);
                    out.put_pixel(x as u32, y as u32, px);
                }
            }
            out.save(path)?;
        }
        1 => {
            let mut out = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    out.put_pixel(x as u32, y as u32, image::Luma([quant(img.get(0, 0, y, x))]));
                }
            }
            out.save(path)?;
        }
        _ => return Err(Error::InvalidArgument(format!("cannot save {c}-channel image"))),
    }
    Ok(())
}

/// Writes per-image metric rows as CSV with a `image_id,psnr_db,ssim` header.
pub fn write_metrics_csv(path: &Path, rows: &[(String, f64, f64)]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "image_id,psnr_db,ssim")?;
    for (id, p, s) in rows {
        if p.is_finite() {
            writeln!(f, "{id},{p:.6},{s:.6}")?;
        } else {
            writeln!(f, "{id},inf,{s:.6}")?;
        }
    }
    Ok(())
}

/// Places batch-1 images side by side (heights must match).
pub fn hstack(images: &[ImageTensor]) -> Result<ImageTensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("hstack of zero images".into()))?;
    let (_, c, h, _) = first.tensor().dims4();
    let total_w: usize = images.iter().map(|i| i.width()).sum();
    for img in images {
        if img.batch() != 1 || img.channels() != c || img.height() != h {
            return Err(Error::ShapeMismatch("hstack of incompatible images".into()));
        }
    }
    let mut out = Tensor::zeros(&[1, c, h, total_w]);
    let mut x0 = 0;
    for img in images {
        let w = img.width();
        for cc in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(cc * h + y) * total_w + x0 + x] = img.get(0, cc, y, x);
                }
            }
        }
        x0 += w;
    }
    ImageTensor::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(h: usize, w: usize) -> ImageTensor {
        // Horizontal ramp in [0.1, 0.9]; safely inside range so filtering
        // overshoot cannot trip the clip.
        let mut t = Tensor::zeros(&[1, 1, h, w]);
        for y in 0..h {
            for x in 0..w {
                t.data_mut()[y * w + x] = 0.1 + 0.8 * x as f64 / (w - 1) as f64;
            }
        }
        ImageTensor::new(t).unwrap()
    }

    #[test]
    fn bicubic_kernel_sums_to_one_and_identity_at_scale_one() {
        for s in 1..=4 {
            let spec = DegradationSpec::bicubic(s);
            spec.validate().unwrap();
        }
        let spec = DegradationSpec::bicubic(1);
        assert_eq!(spec.kernel.dims(), &[3, 3]);
        // At scale 1 the cubic hits zeros at the integer taps: identity.
        let img = ramp_image(6, 6);
        let out = degrade(&img, &spec, None).unwrap();
        assert!(out.tensor().max_abs_diff(img.tensor()) < 1e-12);
    }

    #[test]
    fn constant_image_is_fixed_point_of_any_normalized_kernel() {
        let img = ImageTensor::constant(1, 3, 16, 16, 0.5).unwrap();
        for spec in [
            DegradationSpec::bicubic(4),
            DegradationSpec::box_filter(2),
            DegradationSpec::identity(4),
        ] {
            let out = degrade(&img, &spec, None).unwrap();
            assert_eq!(out.height(), 16 / spec.scale);
            for &v in out.tensor().data() {
                assert!((v - 0.5).abs() < 1e-12, "constant drifted to {v}");
            }
        }
    }

    #[test]
    fn identity_kernel_scale_one_is_exact_identity() {
        let img = ramp_image(8, 8);
        let out = degrade(&img, &DegradationSpec::identity(1), None).unwrap();
        assert_eq!(out.tensor(), img.tensor());
    }

    #[test]
    fn degrade_rejects_indivisible_dims_and_bad_spec() {
        let img = ramp_image(9, 9);
        assert!(degrade(&img, &DegradationSpec::bicubic(4), None).is_err());
        let mut bad = DegradationSpec::bicubic(3);
        bad.kernel = Tensor::full(&[2, 2], 1.0);
        let img2 = ramp_image(6, 6);
        assert!(degrade(&img2, &bad, None).is_err());
    }

    /// Independently coded direct-convolution + stride oracle.
    fn degrade_oracle(img: &ImageTensor, spec: &DegradationSpec) -> Vec<f64> {
        let (_, _, h, w) = img.tensor().dims4();
        let (kh, kw) = (spec.kernel.dims()[0], spec.kernel.dims()[1]);
        let s = spec.scale;
        let fold = |mut i: isize, n: usize| -> usize {
            let n = n as isize;
            while i < 0 || i >= n {
                if i < 0 {
                    i = -i - 1;
                } else {
                    i = 2 * n - i - 1;
                }
            }
            i as usize
        };
        let off_h = (s as isize - kh as isize).div_euclid(2);
        let off_w = (s as isize - kw as isize).div_euclid(2);
        let mut out = Vec::new();
        for oi in 0..h / s {
            for oj in 0..w / s {
                let mut acc = 0.0;
                for m in 0..kh {
                    for n in 0..kw {
                        let iy = fold(oi as isize * s as isize + off_h + m as isize, h);
                        let ix = fold(oj as isize * s as isize + off_w + n as isize, w);
                        acc += spec.kernel.data()[m * kw + n] * img.get(0, 0, iy, ix);
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn ramp_downsample_matches_direct_convolution_oracle() {
        let img = ramp_image(12, 12);
        let spec = DegradationSpec::bicubic(2);
        let out = degrade(&img, &spec, None).unwrap();
        let oracle = degrade_oracle(&img, &spec);
        for (a, b) in out.tensor().data().iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs oracle {b}");
        }
    }

    #[test]
    fn degrade_with_zero_sigma_is_deterministic_and_noise_needs_stream() {
        let img = ramp_image(8, 8);
        let spec = DegradationSpec::bicubic(2);
        let a = degrade(&img, &spec, None).unwrap();
        let b = degrade(&img, &spec, None).unwrap();
        assert_eq!(a.tensor(), b.tensor());

        let noisy_spec = DegradationSpec::bicubic(2).with_noise(0.05);
        assert!(degrade(&img, &noisy_spec, None).is_err());
        let mut rng1 = Rng64::stream(1, "noise");
        let mut rng2 = Rng64::stream(1, "noise");
        let n1 = degrade(&img, &noisy_spec, Some(&mut rng1)).unwrap();
        let n2 = degrade(&img, &noisy_spec, Some(&mut rng2)).unwrap();
        assert_eq!(n1.tensor(), n2.tensor());
        assert!(n1.tensor().max_abs_diff(a.tensor()) > 0.0);
    }

    #[test]
    fn psnr_identical_is_infinite_and_offset_matches_closed_form() {
        let a = ImageTensor::constant(1, 3, 8, 8, 0.3).unwrap();
        assert!(psnr(&a, &a).unwrap().is_infinite());

        let b = ImageTensor::new(a.tensor().map(|v| v + 1.0 / 255.0)).unwrap();
        let expected = 20.0 * 255f64.log10();
        let got = psnr(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-3, "{got} vs {expected}");
        assert!((got - 48.1308).abs() < 1e-3);
    }

    #[test]
    fn psnr_is_symmetric_and_matches_independent_reference() {
        let mut rng = Rng64::new(77);
        let mk = |rng: &mut Rng64| {
            let mut t = Tensor::zeros(&[1, 3, 9, 7]);
            t.fill_with(|| rng.next_f64());
            ImageTensor::new(t).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        // Independent reference: accumulate MSE in a scalar loop.
        let mut mse = 0.0;
        for i in 0..a.tensor().numel() {
            let d = a.tensor().data()[i] - b.tensor().data()[i];
            mse += d * d;
        }
        mse /= a.tensor().numel() as f64;
        let reference = 10.0 * (1.0f64 / mse).log10();
        assert!((psnr(&a, &b).unwrap() - reference).abs() < 1e-6);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = ImageTensor::constant(1, 3, 8, 8, 0.2).unwrap();
        let b = ImageTensor::constant(1, 3, 8, 4, 0.2).unwrap();
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    /// Hand-rolled per-window SSIM oracle (plain loops, no shared helpers).
    fn ssim_oracle(a: &ImageTensor, b: &ImageTensor) -> f64 {
        let (bs, c, h, w) = a.tensor().dims4();
        let mut win = vec![0.0; 121];
        let mut sum = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let dy = i as f64 - 5.0;
                let dx = j as f64 - 5.0;
                win[i * 11 + j] = (-(dx * dx + dy * dy) / 4.5).exp();
                sum += win[i * 11 + j];
            }
        }
        for v in &mut win {
            *v /= sum;
        }
        let mut acc = 0.0;
        let mut n = 0;
        for bi in 0..bs {
            for cc in 0..c {
                for wy in 0..=h - 11 {
                    for wx in 0..=w - 11 {
                        let (mut mx, mut my) = (0.0, 0.0);
                        for i in 0..11 {
                            for j in 0..11 {
                                mx += win[i * 11 + j] * a.get(bi, cc, wy + i, wx + j);
                                my += win[i * 11 + j] * b.get(bi, cc, wy + i, wx + j);
                            }
                        }
                        let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                        for i in 0..11 {
                            for j in 0..11 {
                                let x = a.get(bi, cc, wy + i, wx + j);
                                let y = b.get(bi, cc, wy + i, wx + j);
                                vx += win[i * 11 + j] * x * x;
                                vy += win[i * 11 + j] * y * y;
                                cov += win[i * 11 + j] * x * y;
                            }
                        }
                        vx -= mx * mx;
                        vy -= my * my;
                        cov -= mx * my;
                        let c1 = 0.0001;
                        let c2 = 0.0009;
                        acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2));
                        n += 1;
                    }
                }
            }
        }
        acc / n as f64
    }

    #[test]
    fn ssim_self_similarity_and_constant_case() {
        let mut rng = Rng64::new(5);
        let mut t = Tensor::zeros(&[1, 1, 16, 16]);
        t.fill_with(|| rng.next_f64());
        let a = ImageTensor::new(t).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);

        let c3 = ImageTensor::constant(1, 1, 12, 12, 0.3).unwrap();
        let c7 = ImageTensor::constant(1, 1, 12, 12, 0.7).unwrap();
        let got = ssim(&c3, &c7).unwrap();
        let oracle = ssim_oracle(&c3, &c7);
        assert!((got - oracle).abs() < 1e-6, "{got} vs oracle {oracle}");
    }

    #[test]
    fn ssim_matches_oracle_on_random_pair_and_is_symmetric() {
        let mut rng = Rng64::new(6);
        let mk = |rng: &mut Rng64| {
            let mut t = Tensor::zeros(&[1, 3, 14, 13]);
            t.fill_with(|| rng.next_f64());
            ImageTensor::new(t).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-6);
        assert!((got - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_anticorrelated() {
        let mut rng = Rng64::new(8);
        let mut t = Tensor::zeros(&[1, 1, 16, 16]);
        t.fill_with(|| if rng.next_f64() < 0.5 { 0.0 } else { 1.0 });
        let a = ImageTensor::new(t).unwrap();
        let b = ImageTensor::new(a.tensor().map(|v| 1.0 - v)).unwrap();
        let got = ssim(&a, &b).unwrap();
        assert!(got < 0.5, "inverted binary image should score below 0.5, got {got}");
        assert!((got - ssim_oracle(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let a = ImageTensor::constant(1, 1, 8, 8, 0.5).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn metric_result_aggregation_skips_infinite_entries() {
        let rows = [(f64::INFINITY, 1.0), (30.0, 0.9), (40.0, 0.8)];
        let agg = MetricResult::aggregate(&rows).unwrap();
        assert!((agg.psnr_db - 35.0).abs() < 1e-12);
        assert!((agg.ssim - 0.9).abs() < 1e-12);
        assert_eq!(agg.n_images, 3);

        let all_inf = [(f64::INFINITY, 1.0)];
        assert!(MetricResult::aggregate(&all_inf).unwrap().psnr_db.is_infinite());
    }

    #[test]
    fn luma_and_border_options_change_the_result() {
        let mut rng = Rng64::new(10);
        let mk = |rng: &mut Rng64| {
            let mut t = Tensor::zeros(&[1, 3, 16, 16]);
            t.fill_with(|| rng.next_f64());
            ImageTensor::new(t).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let rgb = psnr(&a, &b).unwrap();
        let y = psnr_with(&a, &b, &MetricOpts { space: MetricSpace::Y, border_crop: 0 }).unwrap();
        assert!((rgb - y).abs() > 1e-9);
        let cropped =
            psnr_with(&a, &b, &MetricOpts { space: MetricSpace::Rgb, border_crop: 2 }).unwrap();
        assert!((rgb - cropped).abs() > 1e-12);
    }

    #[test]
    fn png_round_trip_is_bit_exact_at_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");

        // Saturated and zero images.
        for v in [1.0, 0.0] {
            let img = ImageTensor::constant(1, 3, 64, 64, v).unwrap();
            save_image(&path, &img).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!(back.tensor().dims(), &[1, 3, 64, 64]);
            for &x in back.tensor().data() {
                assert_eq!(x, v);
            }
        }

        // Random 8-bit-quantized image: save(load(p)) round-trips exactly.
        let mut rng = Rng64::new(21);
        let mut t = Tensor::zeros(&[1, 3, 9, 11]);
        t.fill_with(|| (rng.next_f64() * 255.0).round() / 255.0);
        let img = ImageTensor::new(t).unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.tensor(), img.tensor());
    }

    #[test]
    fn load_missing_file_errors() {
        assert!(load_image(Path::new("/nonexistent/cyclesr.png")).is_err());
    }

    #[test]
    fn bicubic_upsample_shapes_and_constant() {
        let img = ImageTensor::constant(1, 3, 8, 8, 0.4).unwrap();
        let up = bicubic_upsample(&img, 4);
        assert_eq!(up.tensor().dims(), &[1, 3, 32, 32]);
        for &v in up.tensor().data() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }
}
