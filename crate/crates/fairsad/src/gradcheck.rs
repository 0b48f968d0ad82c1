//! Finite-difference verification of every differentiable primitive and of
//! the four objective terms, shared by the `gradcheck` CLI subcommand and the
//! acceptance suite.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::losses::{
    classification_loss, discriminator_loss, distance_correlation_loss, mask_covariance_loss,
    total_loss,
};
use crate::tape::{finite_difference_check, ArcList, Tape, Var};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

/// Samples entries in (0.2, 1.5) with random sign, then separates values
/// along each column so that pairwise gaps stay far away from the
/// finite-difference step. Keeps ReLU / abs / sqrt / pairwise-distance
/// compositions away from their kinks.
fn smooth_point(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut point = Array2::from_shape_fn((rows, cols), |_| {
        let mag: f64 = rng.gen_range(0.2..1.5);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    for (r, mut row) in point.rows_mut().into_iter().enumerate() {
        for v in row.iter_mut() {
            *v += r as f64 * 0.05; // enforce per-column separation
        }
    }
    point
}

/// Reduces an arbitrary matrix node to a scalar through a fixed random
/// weighting, so that gradient errors cannot cancel the way they could under
/// a plain mean.
fn weighted_scalar(tape: &mut Tape, x: Var, weights: &Array2<f64>) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(x, w).expect("shapes agree by construction");
    tape.mean(prod)
}

fn check_many<F>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, trials: usize, f: F) -> f64
where
    F: Fn(&mut Tape, Var, &Array2<f64>) -> Var,
{
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let point = smooth_point(rng, rows, cols);
        let weights = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0));
        let err = finite_difference_check(
            |t, x| f(t, x, &weights),
            &point,
            GRADCHECK_STEP,
        );
        worst = worst.max(err);
    }
    worst
}

/// Runs the whole suite: one entry per primitive operation and one per
/// objective term, each probed at `trials` random smooth points.
pub fn run_suite(trials: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &'static str, err: f64| out.push(CheckOutcome { name, max_rel_err: err });

    // --- primitives ---
    let r = &mut rng;
    push("matmul_lhs", check_many(r, 4, 3, trials, |t, x, _| {
        let c = t.constant(Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64).sin()));
        let y = t.matmul(x, c).unwrap();
        let wz = Array2::from_shape_fn((4, 5), |(i, j)| ((i + 2 * j) as f64).cos());
        weighted_scalar(t, y, &wz)
    }));
    push("matmul_rhs", check_many(r, 3, 5, trials, |t, x, _| {
        let c = t.constant(Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64).sin()));
        let y = t.matmul(c, x).unwrap();
        let wz = Array2::from_shape_fn((4, 5), |(i, j)| ((2 * i + j) as f64).cos());
        weighted_scalar(t, y, &wz)
    }));
    push("bias_add", check_many(r, 5, 3, trials, |t, x, w| {
        let b = t.constant(Array2::from_shape_fn((1, 3), |(_, j)| 0.3 * j as f64 - 0.2));
        let y = t.add_bias(x, b).unwrap();
        weighted_scalar(t, y, w)
    }));
    push("concat_cols", check_many(r, 4, 4, trials, |t, x, w| {
        let a = t.slice_cols(x, 0, 2).unwrap();
        let b = t.slice_cols(x, 2, 4).unwrap();
        let y = t.concat_cols(&[b, a]).unwrap();
        weighted_scalar(t, y, w)
    }));
    push("elementwise_mul", check_many(r, 4, 3, trials, |t, x, w| {
        let c = t.constant(Array2::from_shape_fn((4, 3), |(i, j)| 0.5 + 0.1 * (i + j) as f64));
        let y = t.mul(x, c).unwrap();
        weighted_scalar(t, y, w)
    }));
    push("elementwise_add", check_many(r, 4, 3, trials, |t, x, w| {
        let y = t.add(x, x).unwrap();
        weighted_scalar(t, y, w)
    }));
    push("relu", check_many(r, 5, 4, trials, |t, x, w| {
        let y = t.relu(x);
        weighted_scalar(t, y, w)
    }));
    push("sigmoid", check_many(r, 5, 4, trials, |t, x, w| {
        let y = t.sigmoid(x);
        weighted_scalar(t, y, w)
    }));
    push("softmax_rows", check_many(r, 5, 4, trials, |t, x, w| {
        let y = t.softmax_rows(x);
        weighted_scalar(t, y, w)
    }));
    push("l2_normalize_rows", check_many(r, 5, 4, trials, |t, x, w| {
        let y = t.l2_normalize_rows(x);
        weighted_scalar(t, y, w)
    }));
    push("weighted_scatter_sum_values", check_many(r, 4, 3, trials, |t, x, w| {
        let arcs = Arc::new(ArcList { dst: vec![0, 0, 1, 2, 3, 3], src: vec![1, 2, 0, 3, 0, 2] });
        let wts = t.constant(Array2::from_shape_fn((6, 1), |(i, _)| 0.2 + 0.1 * i as f64));
        let y = t.weighted_scatter_sum(x, wts, arcs, 4).unwrap();
        weighted_scalar(t, y, w)
    }));
    push("weighted_scatter_sum_weights", check_many(r, 6, 1, trials, |t, x, _| {
        let arcs = Arc::new(ArcList { dst: vec![0, 0, 1, 2, 3, 3], src: vec![1, 2, 0, 3, 0, 2] });
        let vals =
            t.constant(Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.7).sin()));
        let y = t.weighted_scatter_sum(vals, x, arcs, 4).unwrap();
        let wz = Array2::from_shape_fn((4, 3), |(i, j)| ((i + j) as f64).cos());
        weighted_scalar(t, y, &wz)
    }));
    push("mean", check_many(r, 5, 4, trials, |t, x, _| t.mean(x)));
    push("abs", check_many(r, 5, 4, trials, |t, x, w| {
        let y = t.abs(x);
        weighted_scalar(t, y, w)
    }));
    push("sqrt", check_many(r, 5, 4, trials, |t, x, w| {
        // keep the argument strictly positive before the root
        let y = t.mul(x, x).unwrap();
        let y = t.sqrt(y);
        weighted_scalar(t, y, w)
    }));
    push("scalar_divide", check_many(r, 1, 1, trials, |t, x, _| {
        let num = t.scalar_constant(0.37);
        let y = t.mul(x, x).unwrap(); // strictly positive denominator
        t.div(num, y).unwrap()
    }));
    push("bce_with_logits", check_many(r, 6, 1, trials, |t, x, _| {
        let targets = vec![1.0, 0.0, 1.0, 1.0, 0.0];
        t.bce_with_logits(x, Arc::new(targets), Arc::new(vec![0, 1, 2, 4, 5])).unwrap()
    }));
    push("softmax_cross_entropy", check_many(r, 6, 3, trials, |t, x, _| {
        t.softmax_cross_entropy(x, Arc::new(vec![0, 1, 2, 0, 1, 2]), 0.5).unwrap()
    }));
    push("pairwise_distance", check_many(r, 6, 1, trials, |t, x, _| {
        let y = t.pairwise_abs_dist(x).unwrap();
        let wz = Array2::from_shape_fn((6, 6), |(i, j)| ((i * 6 + j) as f64 * 0.3).sin());
        weighted_scalar(t, y, &wz)
    }));
    push("double_centering", check_many(r, 5, 5, trials, |t, x, w| {
        let y = t.double_center(x).unwrap();
        weighted_scalar(t, y, w)
    }));

    // --- objective terms ---
    push("loss_mask_covariance", check_many(r, 8, 3, trials, |t, x, _| {
        let s = [0u8, 1, 0, 1, 1, 0, 1, 0];
        mask_covariance_loss(t, x, &s, None).unwrap()
    }));
    push("loss_distance_correlation", check_many(r, 8, 4, trials, |t, x, _| {
        let a = t.slice_cols(x, 0, 2).unwrap();
        let b = t.slice_cols(x, 2, 4).unwrap();
        distance_correlation_loss(t, &[a, b]).unwrap()
    }));
    push("loss_discriminator", check_many(r, 6, 3, trials, |t, x, _| {
        discriminator_loss(t, x, 2, 3).unwrap()
    }));
    push("loss_total", check_many(r, 8, 5, trials, |t, x, _| {
        // one input feeding all four terms at once, combined with the
        // production weighting
        let logits = t.slice_cols(x, 0, 1).unwrap();
        let l_c = classification_loss(t, logits, &[1, 0, 1, 1, 0, 1, 0, 0], &[0, 1, 2, 3, 5, 6])
            .unwrap();
        let a = t.slice_cols(x, 1, 2).unwrap();
        let b = t.slice_cols(x, 2, 3).unwrap();
        let l_dc = distance_correlation_loss(t, &[a, b]).unwrap();
        let disc_in = t.slice_cols(x, 3, 5).unwrap();
        let disc_in = t.gather_rows(disc_in, Arc::new(vec![0, 1, 2, 3])).unwrap();
        let l_d = discriminator_loss(t, disc_in, 2, 2).unwrap();
        let s = [0u8, 1, 0, 1, 1, 0, 1, 0];
        let hm = t.slice_cols(x, 1, 4).unwrap();
        let l_m = mask_covariance_loss(t, hm, &s, None).unwrap();
        total_loss(t, l_c, l_dc, l_d, l_m, 0.1, 1.0).unwrap().0
    }));

    out
}
