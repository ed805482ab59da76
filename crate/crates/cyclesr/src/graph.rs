//! Eager tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for all nodes that can
//! reach a [`Graph::leaf`]. Constants ([`Graph::constant`]) never receive
//! gradients, which is how frozen networks are guaranteed a structurally zero
//! gradient. Evaluation is single-threaded and allocation order is fixed, so
//! identical inputs reproduce identical tapes bitwise.

use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    /// `ln(max(x, eps))`; gradient is zero where the clamp is active.
    LogClamped(Var, f64),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    /// Transposed convolution, kernel 2, stride 2 (non-overlapping).
    ConvT2x2 { x: Var, w: Var, b: Option<Var> },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Tensor, inv_std: Tensor, train: bool },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize },
    GlobalAvgPool { x: Var },
    PixelShuffle { x: Var, r: usize },
    ConcatC(Var, Var),
    MeanAll(Var),
    MeanPerSample(Var),
    SumPerSample(Var),
    /// `a[i] - s[0]` with `a: [B]`, `s: [1]`.
    SubBroadcast { a: Var, s: Var },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by tape position, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient-tracked input (a trainable parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient (data, frozen parameters).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let g = self.ng(a);
        self.push(v, Op::MulScalar(a, c), g)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.mul_scalar(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let g = self.ng(a);
        self.push(v, Op::Abs(a), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let g = self.ng(a);
        self.push(v, Op::Square(a), g)
    }

    /// Elementwise square root; the subgradient at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let g = self.ng(a);
        self.push(v, Op::Sqrt(a), g)
    }

    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).map(|x| x.max(eps).ln());
        let g = self.ng(a);
        self.push(v, Op::LogClamped(a, eps), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let g = self.ng(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        let g = self.ng(a);
        self.push(v, Op::LeakyRelu(a, slope), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.ng(a);
        self.push(v, Op::Relu(a), g)
    }

    /// 2-d convolution, zero padding. `x: [B,Ci,H,W]`, `w: [Co,Ci,kh,kw]`,
    /// `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (bs, ci, h, wd) = self.value(x).dims4();
        let (co, wci, kh, kw) = self.value(w).dims4();
        assert_eq!(ci, wci, "conv2d channel mismatch: input {ci}, weight {wci}");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[bs, co, oh, ow]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let o = out.data_mut();
            conv2d_forward(xv, wv, o, bs, ci, h, wd, co, kh, kw, stride, pad, oh, ow);
        }
        if let Some(bias) = b {
            assert_eq!(self.value(bias).dims(), &[co], "conv2d bias shape");
            let bv = self.value(bias).data().to_vec();
            let o = out.data_mut();
            for bi in 0..bs {
                for c in 0..co {
                    let base = (bi * co + c) * oh * ow;
                    for v in &mut o[base..base + oh * ow] {
                        *v += bv[c];
                    }
                }
            }
        }
        let g = self.ng(x) || self.ng(w) || b.map(|v| self.ng(v)).unwrap_or(false);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, g)
    }

    /// Transposed convolution with kernel 2, stride 2.
    /// `x: [B,Ci,H,W]`, `w: [Ci,Co,2,2]`, output `[B,Co,2H,2W]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bs, ci, h, wd) = self.value(x).dims4();
        let (wci, co, kh, kw) = self.value(w).dims4();
        assert_eq!(ci, wci, "conv_transpose2x2 channel mismatch");
        assert_eq!((kh, kw), (2, 2), "conv_transpose2x2 expects a 2x2 kernel");
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = Tensor::zeros(&[bs, co, oh, ow]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let o = out.data_mut();
            for bi in 0..bs {
                for c_in in 0..ci {
                    for c_out in 0..co {
                        let wbase = ((c_in * co) + c_out) * 4;
                        let (w00, w01, w10, w11) =
                            (wv[wbase], wv[wbase + 1], wv[wbase + 2], wv[wbase + 3]);
                        for i in 0..h {
                            let xrow = ((bi * ci + c_in) * h + i) * wd;
                            let orow0 = ((bi * co + c_out) * oh + 2 * i) * ow;
                            let orow1 = orow0 + ow;
                            for j in 0..wd {
                                let xv_ij = xv[xrow + j];
                                o[orow0 + 2 * j] += xv_ij * w00;
                                o[orow0 + 2 * j + 1] += xv_ij * w01;
                                o[orow1 + 2 * j] += xv_ij * w10;
                                o[orow1 + 2 * j + 1] += xv_ij * w11;
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = b {
            assert_eq!(self.value(bias).dims(), &[co], "conv_transpose2x2 bias shape");
            let bv = self.value(bias).data().to_vec();
            let o = out.data_mut();
            for bi in 0..bs {
                for c in 0..co {
                    let base = (bi * co + c) * oh * ow;
                    for v in &mut o[base..base + oh * ow] {
                        *v += bv[c];
                    }
                }
            }
        }
        let g = self.ng(x) || self.ng(w) || b.map(|v| self.ng(v)).unwrap_or(false);
        self.push(out, Op::ConvT2x2 { x, w, b }, g)
    }

    /// Fully connected layer. `x: [B,F]`, `w: [O,F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bs, f) = self.value(x).dims2();
        let (o, wf) = self.value(w).dims2();
        assert_eq!(f, wf, "linear feature mismatch");
        let mut out = Tensor::zeros(&[bs, o]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let ov = out.data_mut();
            for bi in 0..bs {
                for oi in 0..o {
                    let mut acc = 0.0;
                    let xrow = bi * f;
                    let wrow = oi * f;
                    for fi in 0..f {
                        acc += xv[xrow + fi] * wv[wrow + fi];
                    }
                    ov[bi * o + oi] = acc;
                }
            }
            if let Some(bias) = b {
                assert_eq!(self.value(bias).dims(), &[o], "linear bias shape");
                let bv = self.value(bias).data();
                for bi in 0..bs {
                    for oi in 0..o {
                        ov[bi * o + oi] += bv[oi];
                    }
                }
            }
        }
        let g = self.ng(x) || self.ng(w) || b.map(|v| self.ng(v)).unwrap_or(false);
        self.push(out, Op::Linear { x, w, b }, g)
    }

    /// Batch normalization over `[B,C,H,W]`.
    ///
    /// `train = true` normalizes with current-batch statistics and returns
    /// them so the caller can fold them into running buffers; `train = false`
    /// uses the provided running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        train: bool,
    ) -> (Var, Tensor, Tensor) {
        let (bs, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gamma).dims(), &[c], "batch_norm gamma shape");
        assert_eq!(self.value(beta).dims(), &[c], "batch_norm beta shape");
        let n = (bs * h * w) as f64;
        let (mean, var) = if train {
            let xv = self.value(x).data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for bi in 0..bs {
                for cc in 0..c {
                    let base = ((bi * c) + cc) * h * w;
                    let mut s = 0.0;
                    for v in &xv[base..base + h * w] {
                        s += v;
                    }
                    mean[cc] += s;
                }
            }
            for m in &mut mean {
                *m /= n;
            }
            for bi in 0..bs {
                for cc in 0..c {
                    let base = ((bi * c) + cc) * h * w;
                    let m = mean[cc];
                    let mut s = 0.0;
                    for v in &xv[base..base + h * w] {
                        let d = v - m;
                        s += d * d;
                    }
                    var[cc] += s;
                }
            }
            for v in &mut var {
                *v /= n;
            }
            (
                Tensor::from_vec(&[c], mean).unwrap(),
                Tensor::from_vec(&[c], var).unwrap(),
            )
        } else {
            (running_mean.clone(), running_var.clone())
        };
        let inv_std = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut out = Tensor::zeros(&[bs, c, h, w]);
        {
            let xv = self.value(x).data();
            let gv = self.value(gamma).data();
            let bv = self.value(beta).data();
            let mv = mean.data();
            let sv = inv_std.data();
            let ov = out.data_mut();
            for bi in 0..bs {
                for cc in 0..c {
                    let base = ((bi * c) + cc) * h * w;
                    let (m, is, ga, be) = (mv[cc], sv[cc], gv[cc], bv[cc]);
                    for i in 0..h * w {
                        ov[base + i] = ga * (xv[base + i] - m) * is + be;
                    }
                }
            }
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let var_out = var;
        let node = self.push(
            out,
            Op::BatchNorm { x, gamma, beta, mean: mean.clone(), inv_std, train },
            g,
        );
        (node, mean, var_out)
    }

    /// 2x2 max pooling, stride 2; input height/width must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[bs, c, oh, ow]);
        let mut argmax = vec![0usize; bs * c * oh * ow];
        {
            let xv = self.value(x).data();
            let ov = out.data_mut();
            for bi in 0..bs {
                for cc in 0..c {
                    let ibase = ((bi * c) + cc) * h * w;
                    let obase = ((bi * c) + cc) * oh * ow;
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut best_idx = ibase + (2 * i) * w + 2 * j;
                            let mut best = xv[best_idx];
                            for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = ibase + (2 * i + di) * w + 2 * j + dj;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                            ov[obase + i * ow + j] = best;
                            argmax[obase + i * ow + j] = best_idx;
                        }
                    }
                }
            }
        }
        let g = self.ng(x);
        self.push(out, Op::MaxPool2 { x, argmax }, g)
    }

    /// Non-overlapping k x k average pooling; spatial dims must divide by `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        assert!(k >= 1 && h % k == 0 && w % k == 0, "avg_pool{k} on {h}x{w}");
        let (oh, ow) = (h / k, w / k);
        let mut out = Tensor::zeros(&[bs, c, oh, ow]);
        {
            let xv = self.value(x).data();
            let ov = out.data_mut();
            let inv = 1.0 / (k * k) as f64;
            for bi in 0..bs {
                for cc in 0..c {
                    let ibase = ((bi * c) + cc) * h * w;
                    let obase = ((bi * c) + cc) * oh * ow;
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut s = 0.0;
                            for di in 0..k {
                                for dj in 0..k {
                                    s += xv[ibase + (i * k + di) * w + j * k + dj];
                                }
                            }
                            ov[obase + i * ow + j] = s * inv;
                        }
                    }
                }
            }
        }
        let g = self.ng(x);
        self.push(out, Op::AvgPool { x, k }, g)
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = self.value(x).dims4();
        let mut out = Tensor::zeros(&[bs, c]);
        {
            let xv = self.value(x).data();
            let ov = out.data_mut();
            let inv = 1.0 / (h * w) as f64;
            for bi in 0..bs {
                for cc in 0..c {
                    let base = ((bi * c) + cc) * h * w;
                    let mut s = 0.0;
                    for v in &xv[base..base + h * w] {
                        s += v;
                    }
                    ov[bi * c + cc] = s * inv;
                }
            }
        }
        let g = self.ng(x);
        self.push(out, Op::GlobalAvgPool { x }, g)
    }

    /// Depth-to-space: `[B, C*r^2, H, W] -> [B, C, H*r, W*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let (bs, cin, h, w) = self.value(x).dims4();
        assert!(cin % (r * r) == 0, "pixel_shuffle: {cin} channels not divisible by {}", r * r);
        let c = cin / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut out = Tensor::zeros(&[bs, c, oh, ow]);
        {
            let xv = self.value(x).data();
            let ov = out.data_mut();
            for bi in 0..bs {
                for cc in 0..c {
                    for dr in 0..r {
                        for dc in 0..r {
                            let cin_idx = cc * r * r + dr * r + dc;
                            for i in 0..h {
                                let irow = ((bi * cin + cin_idx) * h + i) * w;
                                let orow = ((bi * c + cc) * oh + i * r + dr) * ow;
                                for j in 0..w {
                                    ov[orow + j * r + dc] = xv[irow + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        let g = self.ng(x);
        self.push(out, Op::PixelShuffle { x, r }, g)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (bs, ca, h, w) = self.value(a).dims4();
        let (bs2, cb, h2, w2) = self.value(b).dims4();
        assert_eq!((bs, h, w), (bs2, h2, w2), "concat_channels spatial/batch mismatch");
        let mut out = Tensor::zeros(&[bs, ca + cb, h, w]);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let ov = out.data_mut();
            let plane = h * w;
            for bi in 0..bs {
                let o_base = bi * (ca + cb) * plane;
                let a_base = bi * ca * plane;
                let b_base = bi * cb * plane;
                ov[o_base..o_base + ca * plane].copy_from_slice(&av[a_base..a_base + ca * plane]);
                ov[o_base + ca * plane..o_base + (ca + cb) * plane]
                    .copy_from_slice(&bv[b_base..b_base + cb * plane]);
            }
        }
        let g = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatC(a, b), g)
    }

    /// Mean over every element, producing a `[1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let g = self.ng(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), g)
    }

    /// Per-sample mean over all non-batch axes: `[B, ...] -> [B]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let bs = t.dims()[0];
        let per = t.numel() / bs;
        let mut out = Tensor::zeros(&[bs]);
        for bi in 0..bs {
            let s: f64 = t.data()[bi * per..(bi + 1) * per].iter().sum();
            out.data_mut()[bi] = s / per as f64;
        }
        let g = self.ng(x);
        self.push(out, Op::MeanPerSample(x), g)
    }

    /// Per-sample sum over all non-batch axes: `[B, ...] -> [B]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let bs = t.dims()[0];
        let per = t.numel() / bs;
        let mut out = Tensor::zeros(&[bs]);
        for bi in 0..bs {
            out.data_mut()[bi] = t.data()[bi * per..(bi + 1) * per].iter().sum();
        }
        let g = self.ng(x);
        self.push(out, Op::SumPerSample(x), g)
    }

    /// `a[i] - s[0]` for `a: [B]`, `s: [1]`.
    pub fn sub_broadcast(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(a).dims().len(), 1, "sub_broadcast lhs must be [B]");
        assert!(self.value(s).is_scalar(), "sub_broadcast rhs must be scalar");
        let sv = self.value(s).scalar_value();
        let v = self.value(a).map(|x| x - sv);
        let g = self.ng(a) || self.ng(s);
        self.push(v, Op::SubBroadcast { a, s }, g)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Var {
        let v = self.value(x).reshaped(dims).expect("reshape numel mismatch");
        let g = self.ng(x);
        self.push(v, Op::Reshape(x), g)
    }

    /// Reverse pass from a scalar node. Returns per-node gradients; nodes that
    /// cannot reach a leaf are skipped entirely.
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(self.value(root).is_scalar(), "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.accumulate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_scaled(&delta, 1.0),
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, gout.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, gout.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::AddScalar(a) => self.acc(grads, *a, gout.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.acc(grads, *a, gout.map(|g| g * c));
            }
            Op::Abs(a) => {
                let d = gout.zip_map(self.value(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Square(a) => {
                let d = gout.zip_map(self.value(*a), |g, x| 2.0 * x * g);
                self.acc(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = gout.zip_map(self.value(*a), |g, x| {
                    if x > 0.0 {
                        g * 0.5 / x.sqrt()
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::LogClamped(a, eps) => {
                let eps = *eps;
                let d = gout.zip_map(self.value(*a), |g, x| if x > eps { g / x } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let d = gout.zip_map(y, |g, s| g * s * (1.0 - s));
                self.acc(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = gout.zip_map(self.value(*a), |g, x| if x >= 0.0 { g } else { g * slope });
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = gout.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(*x, *w, *b, *stride, *pad, gout, grads);
            }
            Op::ConvT2x2 { x, w, b } => {
                self.convt_backward(*x, *w, *b, gout, grads);
            }
            Op::Linear { x, w, b } => {
                let (bs, f) = self.value(*x).dims2();
                let (o, _) = self.value(*w).dims2();
                let gv = gout.data();
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    let mut gx = Tensor::zeros(&[bs, f]);
                    let gxv = gx.data_mut();
                    for bi in 0..bs {
                        for oi in 0..o {
                            let g = gv[bi * o + oi];
                            if g == 0.0 {
                                continue;
                            }
                            let wrow = oi * f;
                            let xrow = bi * f;
                            for fi in 0..f {
                                gxv[xrow + fi] += g * wv[wrow + fi];
                            }
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.ng(*w) {
                    let xv = self.value(*x).data();
                    let mut gw = Tensor::zeros(&[o, f]);
                    let gwv = gw.data_mut();
                    for bi in 0..bs {
                        for oi in 0..o {
                            let g = gv[bi * o + oi];
                            if g == 0.0 {
                                continue;
                            }
                            let wrow = oi * f;
                            let xrow = bi * f;
                            for fi in 0..f {
                                gwv[wrow + fi] += g * xv[xrow + fi];
                            }
                        }
                    }
                    self.acc(grads, *w, gw);
                }
                if let Some(bias) = b {
                    if self.ng(*bias) {
                        let mut gb = Tensor::zeros(&[o]);
                        for bi in 0..bs {
                            for oi in 0..o {
                                gb.data_mut()[oi] += gv[bi * o + oi];
                            }
                        }
                        self.acc(grads, *bias, gb);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                self.batch_norm_backward(*x, *gamma, *beta, mean, inv_std, *train, gout, grads);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).dims());
                let gxv = gx.data_mut();
                for (oi, &src) in argmax.iter().enumerate() {
                    gxv[src] += gout.data()[oi];
                }
                self.acc(grads, *x, gx);
            }
            Op::AvgPool { x, k } => {
                let k = *k;
                let (bs, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let mut gx = Tensor::zeros(&[bs, c, h, w]);
                let gxv = gx.data_mut();
                let gv = gout.data();
                for bi in 0..bs {
                    for cc in 0..c {
                        let ibase = ((bi * c) + cc) * h * w;
                        let obase = ((bi * c) + cc) * oh * ow;
                        for i in 0..oh {
                            for j in 0..ow {
                                let g = gv[obase + i * ow + j] * inv;
                                for di in 0..k {
                                    for dj in 0..k {
                                        gxv[ibase + (i * k + di) * w + j * k + dj] += g;
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::GlobalAvgPool { x } => {
                let (bs, c, h, w) = self.value(*x).dims4();
                let inv = 1.0 / (h * w) as f64;
                let mut gx = Tensor::zeros(&[bs, c, h, w]);
                let gxv = gx.data_mut();
                let gv = gout.data();
                for bi in 0..bs {
                    for cc in 0..c {
                        let g = gv[bi * c + cc] * inv;
                        let base = ((bi * c) + cc) * h * w;
                        for v in &mut gxv[base..base + h * w] {
                            *v += g;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::PixelShuffle { x, r } => {
                let r = *r;
                let (bs, cin, h, w) = self.value(*x).dims4();
                let c = cin / (r * r);
                let (oh, ow) = (h * r, w * r);
                let mut gx = Tensor::zeros(&[bs, cin, h, w]);
                let gxv = gx.data_mut();
                let gv = gout.data();
                for bi in 0..bs {
                    for cc in 0..c {
                        for dr in 0..r {
                            for dc in 0..r {
                                let cin_idx = cc * r * r + dr * r + dc;
                                for i in 0..h {
                                    let irow = ((bi * cin + cin_idx) * h + i) * w;
                                    let orow = ((bi * c + cc) * oh + i * r + dr) * ow;
                                    for j in 0..w {
                                        gxv[irow + j] += gv[orow + j * r + dc];
                                    }
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ConcatC(a, b) => {
                let (bs, ca, h, w) = self.value(*a).dims4();
                let (_, cb, _, _) = self.value(*b).dims4();
                let plane = h * w;
                let gv = gout.data();
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(&[bs, ca, h, w]);
                    for bi in 0..bs {
                        let o_base = bi * (ca + cb) * plane;
                        let a_base = bi * ca * plane;
                        ga.data_mut()[a_base..a_base + ca * plane]
                            .copy_from_slice(&gv[o_base..o_base + ca * plane]);
                    }
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(&[bs, cb, h, w]);
                    for bi in 0..bs {
                        let o_base = bi * (ca + cb) * plane + ca * plane;
                        let b_base = bi * cb * plane;
                        gb.data_mut()[b_base..b_base + cb * plane]
                            .copy_from_slice(&gv[o_base..o_base + cb * plane]);
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::MeanAll(x) => {
                let t = self.value(*x);
                let g = gout.scalar_value() / t.numel() as f64;
                self.acc(grads, *x, Tensor::full(t.dims(), g));
            }
            Op::MeanPerSample(x) => {
                let t = self.value(*x);
                let bs = t.dims()[0];
                let per = t.numel() / bs;
                let mut gx = Tensor::zeros(t.dims());
                for bi in 0..bs {
                    let g = gout.data()[bi] / per as f64;
                    for v in &mut gx.data_mut()[bi * per..(bi + 1) * per] {
                        *v += g;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SumPerSample(x) => {
                let t = self.value(*x);
                let bs = t.dims()[0];
                let per = t.numel() / bs;
                let mut gx = Tensor::zeros(t.dims());
                for bi in 0..bs {
                    let g = gout.data()[bi];
                    for v in &mut gx.data_mut()[bi * per..(bi + 1) * per] {
                        *v += g;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::SubBroadcast { a, s } => {
                if self.ng(*a) {
                    self.acc(grads, *a, gout.clone());
                }
                if self.ng(*s) {
                    let total: f64 = gout.data().iter().sum();
                    self.acc(grads, *s, Tensor::scalar(-total));
                }
            }
            Op::Reshape(x) => {
                let gx = gout.reshaped(self.value(*x).dims()).unwrap();
                self.acc(grads, *x, gx);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (bs, ci, h, wd) = self.value(x).dims4();
        let (co, _, kh, kw) = self.value(w).dims4();
        let (_, _, oh, ow) = gout.dims4();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gv = gout.data();
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let mut gx = if need_x { Some(Tensor::zeros(&[bs, ci, h, wd])) } else { None };
        let mut gw = if need_w { Some(Tensor::zeros(&[co, ci, kh, kw])) } else { None };
        for c_out in 0..co {
            for c_in in 0..ci {
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wval = wv[((c_out * ci + c_in) * kh + khi) * kw + kwi];
                        let mut gw_acc = 0.0;
                        for bi in 0..bs {
                            let gbase = ((bi * co) + c_out) * oh * ow;
                            let xbase = ((bi * ci) + c_in) * h * wd;
                            for oi in 0..oh {
                                let ih = (oi * stride + khi) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + ih as usize * wd;
                                let grow = gbase + oi * ow;
                                for oj in 0..ow {
                                    let iw = (oj * stride + kwi) as isize - pad as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    let g = gv[grow + oj];
                                    if need_w {
                                        gw_acc += g * xv[xrow + iw as usize];
                                    }
                                    if let Some(gx) = gx.as_mut() {
                                        gx.data_mut()[xrow + iw as usize] += g * wval;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw.data_mut()[((c_out * ci + c_in) * kh + khi) * kw + kwi] += gw_acc;
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx {
            self.acc(grads, x, gx);
        }
        if let Some(gw) = gw {
            self.acc(grads, w, gw);
        }
        if let Some(bias) = b {
            if self.ng(bias) {
                let mut gb = Tensor::zeros(&[co]);
                for bi in 0..bs {
                    for c_out in 0..co {
                        let base = ((bi * co) + c_out) * oh * ow;
                        gb.data_mut()[c_out] += gv[base..base + oh * ow].iter().sum::<f64>();
                    }
                }
                self.acc(grads, bias, gb);
            }
        }
    }

    fn convt_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (bs, ci, h, wd) = self.value(x).dims4();
        let (_, co, _, _) = self.value(w).dims4();
        let (oh, ow) = (2 * h, 2 * wd);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gv = gout.data();
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let mut gx = if need_x { Some(Tensor::zeros(&[bs, ci, h, wd])) } else { None };
        let mut gw = if need_w { Some(Tensor::zeros(&[ci, co, 2, 2])) } else { None };
        for c_in in 0..ci {
            for c_out in 0..co {
                let wbase = ((c_in * co) + c_out) * 4;
                let wk = [wv[wbase], wv[wbase + 1], wv[wbase + 2], wv[wbase + 3]];
                let mut gw_acc = [0.0f64; 4];
                for bi in 0..bs {
                    let xbase = ((bi * ci) + c_in) * h * wd;
                    let gbase = ((bi * co) + c_out) * oh * ow;
                    for i in 0..h {
                        let xrow = xbase + i * wd;
                        let grow0 = gbase + (2 * i) * ow;
                        let grow1 = grow0 + ow;
                        for j in 0..wd {
                            let g00 = gv[grow0 + 2 * j];
                            let g01 = gv[grow0 + 2 * j + 1];
                            let g10 = gv[grow1 + 2 * j];
                            let g11 = gv[grow1 + 2 * j + 1];
                            if need_w {
                                let xval = xv[xrow + j];
                                gw_acc[0] += xval * g00;
                                gw_acc[1] += xval * g01;
                                gw_acc[2] += xval * g10;
                                gw_acc[3] += xval * g11;
                            }
                            if let Some(gx) = gx.as_mut() {
                                gx.data_mut()[xrow + j] +=
                                    wk[0] * g00 + wk[1] * g01 + wk[2] * g10 + wk[3] * g11;
                            }
                        }
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    for (slot, acc) in gw_acc.iter().enumerate() {
                        gw.data_mut()[wbase + slot] += acc;
                    }
                }
            }
        }
        if let Some(gx) = gx {
            self.acc(grads, x, gx);
        }
        if let Some(gw) = gw {
            self.acc(grads, w, gw);
        }
        if let Some(bias) = b {
            if self.ng(bias) {
                let mut gb = Tensor::zeros(&[co]);
                for bi in 0..bs {
                    for c_out in 0..co {
                        let base = ((bi * co) + c_out) * oh * ow;
                        gb.data_mut()[c_out] += gv[base..base + oh * ow].iter().sum::<f64>();
                    }
                }
                self.acc(grads, bias, gb);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor,
        inv_std: &Tensor,
        train: bool,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (bs, c, h, w) = self.value(x).dims4();
        let n = (bs * h * w) as f64;
        let xv = self.value(x).data();
        let gv = gout.data();
        let ga = self.value(gamma).data();
        let mv = mean.data();
        let sv = inv_std.data();
        let plane = h * w;

        // Per-channel reductions.
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for bi in 0..bs {
            for cc in 0..c {
                let base = ((bi * c) + cc) * plane;
                let (m, is) = (mv[cc], sv[cc]);
                let mut sg = 0.0;
                let mut sgx = 0.0;
                for i in 0..plane {
                    let g = gv[base + i];
                    sg += g;
                    sgx += g * (xv[base + i] - m) * is;
                }
                sum_g[cc] += sg;
                sum_gx[cc] += sgx;
            }
        }
        if self.ng(x) {
            let mut gx = Tensor::zeros(&[bs, c, h, w]);
            let gxv = gx.data_mut();
            for bi in 0..bs {
                for cc in 0..c {
                    let base = ((bi * c) + cc) * plane;
                    let (m, is, gam) = (mv[cc], sv[cc], ga[cc]);
                    if train {
                        let k = gam * is / n;
                        for i in 0..plane {
                            let xh = (xv[base + i] - m) * is;
                            gxv[base + i] +=
                                k * (n * gv[base + i] - sum_g[cc] - xh * sum_gx[cc]);
                        }
                    } else {
                        let k = gam * is;
                        for i in 0..plane {
                            gxv[base + i] += k * gv[base + i];
                        }
                    }
                }
            }
            self.acc(grads, x, gx);
        }
        if self.ng(gamma) {
            self.acc(grads, gamma, Tensor::from_vec(&[c], sum_gx).unwrap());
        }
        if self.ng(beta) {
            self.acc(grads, beta, Tensor::from_vec(&[c], sum_g).unwrap());
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    xv: &[f64],
    wv: &[f64],
    out: &mut [f64],
    bs: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for bi in 0..bs {
        for c_out in 0..co {
            let obase = ((bi * co) + c_out) * oh * ow;
            for c_in in 0..ci {
                let xbase = ((bi * ci) + c_in) * h * wd;
                let wbase = (c_out * ci + c_in) * kh * kw;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wval = wv[wbase + khi * kw + kwi];
                        if wval == 0.0 {
                            continue;
                        }
                        for oi in 0..oh {
                            let ih = (oi * stride + khi) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * wd;
                            let orow = obase + oi * ow;
                            for oj in 0..ow {
                                let iw = (oj * stride + kwi) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                out[orow + oj] += wval * xv[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}
