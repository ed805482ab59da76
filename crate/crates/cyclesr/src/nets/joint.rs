//! Joint discriminator over (image, embedded-semantics) tuples.
//!
//! An image-level sub-net (strided convolutions, global pooling, linear
//! projection) and a semantics-level sub-net (two-layer MLP) each produce a
//! vector; the fully connected module scores their concatenation. Output is
//! one raw critic score per sample.

use serde::{Deserialize, Serialize};

use super::{add_bn, add_conv, bn_layer, conv_layer, Arch, BoundNet, Mode, NetHandle, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
const N_DOWN: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointDiscSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Semantics vector length accepted by the semantics-level sub-net.
    pub d_sem: usize,
    /// Expected HR/SR image side lengths (height, width).
    pub image_size: (usize, usize),
}

impl JointDiscSpec {
    pub fn new(in_channels: usize, base_channels: usize, d_sem: usize, image_size: (usize, usize)) -> Self {
        Self { in_channels, base_channels, d_sem, image_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.d_sem == 0 {
            return Err(Error::InvalidArgument("joint discriminator sizes must be >= 1".into()));
        }
        let (h, w) = self.image_size;
        let div = 1usize << N_DOWN;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {h}x{w} must divide by {div}"
            )));
        }
        Ok(())
    }
}

pub fn build_joint_discriminator(spec: &JointDiscSpec, seed: u64) -> Result<NetHandle> {
    spec.validate()?;
    let mut rng = Rng64::stream(seed, "joint_disc");
    let mut store = ParamStore::new();
    let b = spec.base_channels;
    // Image-level sub-net.
    add_conv(&mut store, &mut rng, "img.conv0", b, spec.in_channels, 3);
    let mut prev = b;
    for i in 0..N_DOWN {
        let c = prev * 2;
        add_conv(&mut store, &mut rng, &format!("img.down{i}"), c, prev, 3);
        add_bn(&mut store, &format!("img.down{i}.bn"), c);
        prev = c;
    }
    store.add("img.proj.w", super::he_linear(&mut rng, spec.d_sem, prev));
    store.add("img.proj.b", Tensor::zeros(&[spec.d_sem]));
    // Semantics-level sub-net.
    store.add("sem.fc0.w", super::he_linear(&mut rng, spec.d_sem, spec.d_sem));
    store.add("sem.fc0.b", Tensor::zeros(&[spec.d_sem]));
    store.add("sem.fc1.w", super::he_linear(&mut rng, spec.d_sem, spec.d_sem));
    store.add("sem.fc1.b", Tensor::zeros(&[spec.d_sem]));
    // Fully connected module over the concatenated vector.
    store.add("fcm.fc0.w", super::he_linear(&mut rng, spec.d_sem, 2 * spec.d_sem));
    store.add("fcm.fc0.b", Tensor::zeros(&[spec.d_sem]));
    store.add("fcm.out.w", super::he_linear(&mut rng, 1, spec.d_sem));
    store.add("fcm.out.b", Tensor::zeros(&[1]));
    Ok(NetHandle::from_parts(Arch::JointDiscriminator(spec.clone()), store, false))
}

pub(super) fn forward(
    bound: &mut BoundNet,
    g: &mut Graph,
    spec: &JointDiscSpec,
    image: Var,
    semantics: Var,
    mode: Mode,
) -> Result<Var> {
    let (b, c, h, w) = g.value(image).dims4();
    if c != spec.in_channels || (h, w) != spec.image_size {
        return Err(Error::ShapeMismatch(format!(
            "joint discriminator expects {}x{}x{} images, got {c}x{h}x{w}",
            spec.in_channels, spec.image_size.0, spec.image_size.1
        )));
    }
    let (sb, sd) = g.value(semantics).dims2();
    if sb != b || sd != spec.d_sem {
        return Err(Error::ShapeMismatch(format!(
            "semantics shape [{sb},{sd}] does not match batch {b} x d_sem {}",
            spec.d_sem
        )));
    }
    // Image-level path.
    let conv0 = conv_layer(bound, g, "img.conv0", image, 1, 1);
    let mut cur = g.leaky_relu(conv0, LEAKY_SLOPE);
    for i in 0..N_DOWN {
        let down = conv_layer(bound, g, &format!("img.down{i}"), cur, 2, 1);
        let normed = bn_layer(bound, g, &format!("img.down{i}.bn"), down, mode);
        cur = g.leaky_relu(normed, LEAKY_SLOPE);
    }
    let pooled = g.global_avg_pool(cur);
    let proj_w = bound.var("img.proj.w");
    let proj_b = bound.var("img.proj.b");
    let img_vec = g.linear(pooled, proj_w, Some(proj_b));
    let img_vec = g.leaky_relu(img_vec, LEAKY_SLOPE);
    // Semantics-level path.
    let fc0_w = bound.var("sem.fc0.w");
    let fc0_b = bound.var("sem.fc0.b");
    let s0 = g.linear(semantics, fc0_w, Some(fc0_b));
    let s0 = g.leaky_relu(s0, LEAKY_SLOPE);
    let fc1_w = bound.var("sem.fc1.w");
    let fc1_b = bound.var("sem.fc1.b");
    let s1 = g.linear(s0, fc1_w, Some(fc1_b));
    let sem_vec = g.leaky_relu(s1, LEAKY_SLOPE);
    // Fused scoring. Concatenation happens in feature space: reshape to
    // channel layout, concat, reshape back.
    let img_4d = g.reshape(img_vec, &[b, spec.d_sem, 1, 1]);
    let sem_4d = g.reshape(sem_vec, &[b, spec.d_sem, 1, 1]);
    let cat = g.concat_channels(img_4d, sem_4d);
    let cat2d = g.reshape(cat, &[b, 2 * spec.d_sem]);
    let f0_w = bound.var("fcm.fc0.w");
    let f0_b = bound.var("fcm.fc0.b");
    let f0 = g.linear(cat2d, f0_w, Some(f0_b));
    let f0 = g.leaky_relu(f0, LEAKY_SLOPE);
    let out_w = bound.var("fcm.out.w");
    let out_b = bound.var("fcm.out.b");
    let score = g.linear(f0, out_w, Some(out_b));
    Ok(g.reshape(score, &[b]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> JointDiscSpec {
        JointDiscSpec::new(3, 4, 8, (32, 32))
    }

    fn inputs(g: &mut Graph, b: usize, seed: u64) -> (Var, Var) {
        let mut rng = Rng64::new(seed);
        let mut img = Tensor::zeros(&[b, 3, 32, 32]);
        img.fill_with(|| rng.next_f64());
        let mut sem = Tensor::zeros(&[b, 8]);
        sem.fill_with(|| rng.next_normal());
        (g.constant(img), g.constant(sem))
    }

    #[test]
    fn tuple_forward_gives_one_score_per_sample() {
        let net = build_joint_discriminator(&spec(), 1).unwrap();
        let mut g = Graph::new();
        let (img, sem) = inputs(&mut g, 4, 2);
        let mut bound = net.bind(&mut g, false);
        let s = bound.forward_pair(&mut g, img, sem, Mode::Eval).unwrap();
        assert_eq!(g.value(s).dims(), &[4]);
        // Plain forward is not defined for tuple input.
        assert!(bound.forward(&mut g, img, Mode::Eval).is_err());
    }

    #[test]
    fn zeroed_final_layer_scores_zero_for_any_tuple() {
        let mut net = build_joint_discriminator(&spec(), 3).unwrap();
        net.zero_params_matching(|n| n.starts_with("fcm.out"));
        let mut g = Graph::new();
        let (img, sem) = inputs(&mut g, 3, 9);
        let mut bound = net.bind(&mut g, false);
        let s = bound.forward_pair(&mut g, img, sem, Mode::Eval).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn semantics_path_is_live() {
        // Finite-difference probe: with the image fixed, perturbing the
        // semantics must move the score.
        let net = build_joint_discriminator(&spec(), 5).unwrap();
        let mut rng = Rng64::new(11);
        let mut img = Tensor::zeros(&[1, 3, 32, 32]);
        img.fill_with(|| rng.next_f64());
        let mut sem = Tensor::zeros(&[1, 8]);
        sem.fill_with(|| rng.next_normal());
        let run = |sem: &Tensor| {
            let mut g = Graph::new();
            let iv = g.constant(img.clone());
            let sv = g.constant(sem.clone());
            let mut bound = net.bind(&mut g, false);
            let s = bound.forward_pair(&mut g, iv, sv, Mode::Eval).unwrap();
            g.value(s).scalar_value()
        };
        let base = run(&sem);
        let mut moved = false;
        for i in 0..8 {
            let mut bumped = sem.clone();
            bumped.data_mut()[i] += 0.1;
            if (run(&bumped) - base).abs() > 1e-9 {
                moved = true;
                break;
            }
        }
        assert!(moved, "semantics input has no effect on the score");
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let net = build_joint_discriminator(&spec(), 7).unwrap();
        let mut g = Graph::new();
        let (img, _) = inputs(&mut g, 2, 1);
        let bad_sem = g.constant(Tensor::zeros(&[2, 5]));
        let mut bound = net.bind(&mut g, false);
        assert!(bound.forward_pair(&mut g, img, bad_sem, Mode::Eval).is_err());
        let bad_img = g.constant(Tensor::zeros(&[2, 3, 16, 16]));
        let ok_sem = g.constant(Tensor::zeros(&[2, 8]));
        assert!(bound.forward_pair(&mut g, bad_img, ok_sem, Mode::Eval).is_err());
    }
}
