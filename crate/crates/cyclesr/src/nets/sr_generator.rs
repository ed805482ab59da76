//! Super-resolution generator: shallow feature module, a chain of dense
//! nested blocks (each three residual-in-internal-dense blocks plus a scaling
//! layer), a global fusion convolution, global residual learning that adds
//! the shallow features back in, and sub-pixel 2x upsampling stages.

use serde::{Deserialize, Serialize};

use super::{add_conv, conv_layer, Arch, BoundNet, NetHandle, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng64;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const RIDB_CONVS: usize = 4;
pub const RIDBS_PER_DNB: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrGeneratorSpec {
    pub in_channels: usize,
    /// Number of dense nested blocks in the middle stage.
    pub n_dnb: usize,
    /// Fixed at 3; kept explicit so configs are self-describing.
    pub n_ridb_per_dnb: usize,
    pub base_channels: usize,
    /// Multiplier of each block's scaling layer, in (0, 1].
    pub residual_scale: f64,
    /// Realized as repeated 2x sub-pixel stages; one of {2, 4, 8}.
    pub upscale: usize,
}

impl SrGeneratorSpec {
    pub fn new(in_channels: usize, n_dnb: usize, base_channels: usize, upscale: usize) -> Self {
        Self {
            in_channels,
            n_dnb,
            n_ridb_per_dnb: RIDBS_PER_DNB,
            base_channels,
            residual_scale: 0.2,
            upscale,
        }
    }

    pub fn n_stages(&self) -> usize {
        match self.upscale {
            2 => 1,
            4 => 2,
            8 => 3,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dnb < 1 {
            return Err(Error::InvalidArgument("need at least one dense block".into()));
        }
        if self.n_ridb_per_dnb != RIDBS_PER_DNB {
            return Err(Error::InvalidArgument(format!(
                "each dense block holds exactly {RIDBS_PER_DNB} residual dense blocks"
            )));
        }
        if !matches!(self.upscale, 2 | 4 | 8) {
            return Err(Error::InvalidArgument(format!(
                "upscale {} not realizable from 2x stages",
                self.upscale
            )));
        }
        if !(self.residual_scale > 0.0 && self.residual_scale <= 1.0) {
            return Err(Error::InvalidArgument("residual_scale must be in (0, 1]".into()));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::InvalidArgument("channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Builds the SR generator. Anything between the shallow features and the
/// global residual add lives under the `dnb*`/`mdbm.*` name prefixes, so
/// zeroing those parameters collapses the net onto its shallow+upsample path.
pub fn build_sr_generator(spec: &SrGeneratorSpec, seed: u64) -> Result<NetHandle> {
    spec.validate()?;
    let mut rng = Rng64::stream(seed, "sr_generator");
    let mut store = ParamStore::new();
    let c = spec.base_channels;
    add_conv(&mut store, &mut rng, "sfm", c, spec.in_channels, 3);
    for d in 0..spec.n_dnb {
        for r in 0..RIDBS_PER_DNB {
            for k in 0..RIDB_CONVS {
                // Dense inputs: the block input plus every previous conv.
                let cin = c * (k + 1);
                add_conv(&mut store, &mut rng, &format!("dnb{d}.ridb{r}.conv{k}"), c, cin, 3);
            }
            add_conv(
                &mut store,
                &mut rng,
                &format!("dnb{d}.ridb{r}.fuse"),
                c,
                c * (RIDB_CONVS + 1),
                1,
            );
        }
    }
    add_conv(&mut store, &mut rng, "mdbm.fuse", c, c, 3);
    for s in 0..spec.n_stages() {
        add_conv(&mut store, &mut rng, &format!("um{s}"), 4 * c, c, 3);
    }
    add_conv(&mut store, &mut rng, "tail", spec.in_channels, c, 3);
    Ok(NetHandle::from_parts(Arch::SrGenerator(spec.clone()), store, false))
}

fn ridb(bound: &BoundNet, g: &mut Graph, prefix: &str, x: Var) -> Var {
    let mut dense = x;
    for k in 0..RIDB_CONVS {
        let conv = conv_layer(bound, g, &format!("{prefix}.conv{k}"), dense, 1, 1);
        let act = g.leaky_relu(conv, LEAKY_SLOPE);
        dense = g.concat_channels(dense, act);
    }
    let fused = conv_layer(bound, g, &format!("{prefix}.fuse"), dense, 1, 0);
    // Local residual learning.
    g.add(x, fused)
}

pub(super) fn forward(
    bound: &mut BoundNet,
    g: &mut Graph,
    spec: &SrGeneratorSpec,
    x: Var,
) -> Result<Var> {
    let (_, c, h, w) = g.value(x).dims4();
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "sr generator expects {} channels, got {c}",
            spec.in_channels
        )));
    }
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument(format!(
            "sr generator needs spatial dims >= 8, got {h}x{w}"
        )));
    }
    let shallow = conv_layer(bound, g, "sfm", x, 1, 1);
    let mut cur = shallow;
    for d in 0..spec.n_dnb {
        let block_in = cur;
        let mut r = block_in;
        for ri in 0..RIDBS_PER_DNB {
            r = ridb(bound, g, &format!("dnb{d}.ridb{ri}"), r);
        }
        let scaled = g.mul_scalar(r, spec.residual_scale);
        cur = g.add(block_in, scaled);
    }
    let global_features = conv_layer(bound, g, "mdbm.fuse", cur, 1, 1);
    // Global residual learning: fuse shallow and global features.
    let mut fused = g.add(shallow, global_features);
    for s in 0..spec.n_stages() {
        let up = conv_layer(bound, g, &format!("um{s}"), fused, 1, 1);
        let shuffled = g.pixel_shuffle(up, 2);
        fused = g.leaky_relu(shuffled, LEAKY_SLOPE);
    }
    let out = conv_layer(bound, g, "tail", fused, 1, 1);
    Ok(g.sigmoid(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;
    use crate::tensor::Tensor;

    #[test]
    fn upscales_sixteen_to_sixtyfour_at_4x() {
        let net = build_sr_generator(&SrGeneratorSpec::new(3, 1, 4, 4), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 16, 16], 0.5));
        let y = net.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).dims(), &[1, 3, 64, 64]);
        assert!(g.value(y).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn three_ridbs_per_dnb_is_enforced() {
        let mut spec = SrGeneratorSpec::new(3, 1, 4, 4);
        spec.n_ridb_per_dnb = 2;
        assert!(build_sr_generator(&spec, 1).is_err());
        spec.n_ridb_per_dnb = 3;
        assert!(build_sr_generator(&spec, 1).is_ok());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(build_sr_generator(&SrGeneratorSpec::new(3, 0, 4, 4), 1).is_err());
        assert!(build_sr_generator(&SrGeneratorSpec::new(3, 1, 4, 3), 1).is_err());
        let mut spec = SrGeneratorSpec::new(3, 1, 4, 2);
        spec.residual_scale = 0.0;
        assert!(build_sr_generator(&spec, 1).is_err());
    }

    /// Structural oracle for the global residual wiring: zero everything in
    /// the middle stage and rebuild the shallow+upsample path by hand from
    /// the same parameter tensors; the outputs must agree exactly.
    #[test]
    fn zeroed_middle_stage_reduces_to_the_shallow_path() {
        let spec = SrGeneratorSpec::new(3, 2, 4, 4);
        let mut net = build_sr_generator(&spec, 9).unwrap();
        net.zero_params_matching(|n| n.starts_with("dnb") || n.starts_with("mdbm."));

        let mut x = Tensor::zeros(&[1, 3, 8, 8]);
        let mut rng = Rng64::new(4);
        x.fill_with(|| rng.next_f64());

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = net.forward(&mut g, xv).unwrap();
        let full = g.value(y).clone();

        // Hand-wired shallow path with the same tensors.
        let mut g2 = Graph::new();
        let xv2 = g2.constant(x);
        let p = |name: &str| net.params().get(name).unwrap().clone();
        let sfm_w = g2.constant(p("sfm.w"));
        let sfm_b = g2.constant(p("sfm.b"));
        let mut cur = g2.conv2d(xv2, sfm_w, Some(sfm_b), 1, 1);
        for s in 0..spec.n_stages() {
            let w = g2.constant(p(&format!("um{s}.w")));
            let b = g2.constant(p(&format!("um{s}.b")));
            let conv = g2.conv2d(cur, w, Some(b), 1, 1);
            let shuffled = g2.pixel_shuffle(conv, 2);
            cur = g2.leaky_relu(shuffled, LEAKY_SLOPE);
        }
        let tw = g2.constant(p("tail.w"));
        let tb = g2.constant(p("tail.b"));
        let tail = g2.conv2d(cur, tw, Some(tb), 1, 1);
        let expect = g2.sigmoid(tail);
        assert_eq!(full, g2.value(expect).clone());
    }

    #[test]
    fn parameter_count_is_pure_function_of_spec() {
        let a = build_sr_generator(&SrGeneratorSpec::new(3, 2, 4, 4), 1).unwrap();
        let b = build_sr_generator(&SrGeneratorSpec::new(3, 2, 4, 4), 77).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert!(build_sr_generator(&SrGeneratorSpec::new(3, 3, 4, 4), 1)
            .unwrap()
            .param_count()
            > a.param_count());
    }
}
