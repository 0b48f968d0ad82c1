//! Binary-concrete (Gumbel-Softmax) relaxation of Bernoulli mask sampling.

use ndarray::Array2;
use rand::Rng;

use crate::error::FairsadError;
use crate::tape::{sigmoid_stable, Tape, Var};

fn standard_gumbel<R: Rng>(rng: &mut R) -> f64 {
    // inverse-CDF; clamp away from 0 and 1 to keep logs finite
    let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
    -(-u.ln()).ln()
}

/// Draws the per-dimension Gumbel noise `g1 - g0` for a binary-concrete
/// sample of the given width.
pub fn gumbel_noise<R: Rng>(rng: &mut R, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((1, width), |_| {
        let g0 = standard_gumbel(rng);
        let g1 = standard_gumbel(rng);
        g1 - g0
    })
}

/// Plain-array binary-concrete sample: `sigmoid((logit + g1 - g0) / tau)`.
pub fn gumbel_binary_sample<R: Rng>(
    logits: &Array2<f64>,
    temperature: f64,
    rng: &mut R,
) -> Result<Array2<f64>, FairsadError> {
    if temperature <= 0.0 {
        return Err(FairsadError::Config(format!(
            "mask temperature must be positive, got {temperature}"
        )));
    }
    let noise = gumbel_noise(rng, logits.len());
    let mut out = logits.clone();
    for (i, v) in out.iter_mut().enumerate() {
        *v = sigmoid_stable((*v + noise[[0, i]]) / temperature);
    }
    Ok(out)
}

/// Tape version of the same draw, differentiable w.r.t. `logits`.
/// The noise draw is recorded as a constant, so repeated backward passes see
/// the same sample.
pub fn gumbel_binary_sample_on_tape<R: Rng>(
    tape: &mut Tape,
    logits: Var,
    temperature: f64,
    rng: &mut R,
) -> Result<Var, FairsadError> {
    if temperature <= 0.0 {
        return Err(FairsadError::Config(format!(
            "mask temperature must be positive, got {temperature}"
        )));
    }
    let width = tape.value(logits).len();
    let noise = tape.constant(gumbel_noise(rng, width));
    let shifted = tape.add(logits, noise)?;
    let scaled = tape.scale(shifted, 1.0 / temperature);
    Ok(tape.sigmoid(scaled))
}
