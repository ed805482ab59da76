//! Relativistic-average logits, the primitive shared by both adversarial
//! flavors: each critic score is compared against the batch mean of the
//! opposing population, optionally squashed by a sigmoid.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

#[derive(Debug, Clone)]
pub struct RelativisticLogits {
    pub d_real: Vec<f64>,
    pub d_fake: Vec<f64>,
    /// True when a sigmoid was applied (values in (0, 1)); false for raw
    /// relativistic differences.
    pub squashed: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `d_real[i] = f(c_real[i] - mean(c_fake))`, `d_fake[i] = f(c_fake[i] -
/// mean(c_real))`, with `f` the sigmoid iff `squash`.
pub fn relativistic_logits(
    c_real: &[f64],
    c_fake: &[f64],
    squash: bool,
) -> Result<RelativisticLogits> {
    if c_real.is_empty() || c_fake.is_empty() {
        return Err(Error::InvalidArgument("relativistic logits need non-empty batches".into()));
    }
    let mean_fake = c_fake.iter().sum::<f64>() / c_fake.len() as f64;
    let mean_real = c_real.iter().sum::<f64>() / c_real.len() as f64;
    let f = |x: f64| if squash { sigmoid(x) } else { x };
    Ok(RelativisticLogits {
        d_real: c_real.iter().map(|&c| f(c - mean_fake)).collect(),
        d_fake: c_fake.iter().map(|&c| f(c - mean_real)).collect(),
        squashed: squash,
    })
}

/// Graph version over `[B]` score vectors; returns `(d_real, d_fake)`.
pub fn relativistic_logits_g(g: &mut Graph, c_real: Var, c_fake: Var, squash: bool) -> (Var, Var) {
    let mean_fake = g.mean_all(c_fake);
    let mean_real = g.mean_all(c_real);
    let mut d_real = g.sub_broadcast(c_real, mean_fake);
    let mut d_fake = g.sub_broadcast(c_fake, mean_real);
    if squash {
        d_real = g.sigmoid(d_real);
        d_fake = g.sigmoid(d_fake);
    }
    (d_real, d_fake)
}
