//! The four training objectives: classification BCE, distance-correlation
//! between channels, channel-discriminator cross-entropy, and the mask
//! covariance penalty, plus their weighted combination.

use std::sync::Arc;

use ndarray::Array2;

use crate::error::FairsadError;
use crate::tape::{Tape, Var};

pub const DCOR_DENOM_GUARD: f64 = 1e-12;

/// Mean binary cross-entropy with logits over the masked nodes.
pub fn classification_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[i8],
    mask: &[usize],
) -> Result<Var, FairsadError> {
    if mask.is_empty() {
        return Err(FairsadError::Metric("classification loss needs a non-empty mask".into()));
    }
    let targets: Vec<f64> = mask.iter().map(|&i| labels[i] as f64).collect();
    tape.bce_with_logits(logits, Arc::new(targets), Arc::new(mask.to_vec()))
}

/// Columnwise squared distance covariance between two equally shaped blocks:
/// per column, double-center the pairwise absolute-distance matrices and
/// average their elementwise product, then sum over columns.
pub fn dcov_squared(tape: &mut Tape, za: Var, zb: Var) -> Result<Var, FairsadError> {
    let (sa, sb) = (tape.value(za).raw_dim(), tape.value(zb).raw_dim());
    if sa != sb {
        return Err(FairsadError::Shape {
            op: "dcov_squared".into(),
            node: tape.len(),
            detail: format!("{}x{} vs {}x{}", sa[0], sa[1], sb[0], sb[1]),
        });
    }
    if sa[0] < 2 {
        return Err(FairsadError::Metric("dcov_squared needs at least 2 rows".into()));
    }
    let width = sa[1];
    let mut acc: Option<Var> = None;
    for j in 0..width {
        let ca = tape.slice_cols(za, j, j + 1)?;
        let cb = tape.slice_cols(zb, j, j + 1)?;
        let da = tape.pairwise_abs_dist(ca)?;
        let db = tape.pairwise_abs_dist(cb)?;
        let aa = tape.double_center(da)?;
        let bb = tape.double_center(db)?;
        let prod = tape.mul(aa, bb)?;
        let term = tape.mean(prod); // mean over n^2 entries = (1/n^2) * sum
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("width checked positive"))
}

/// Per-column double-centered pairwise distance matrices of a block. The
/// matrices are shared between every covariance term a block takes part in,
/// which keeps the per-epoch tape size linear in the channel count.
fn centered_distance_columns(tape: &mut Tape, z: Var) -> Result<Vec<Var>, FairsadError> {
    let width = tape.value(z).ncols();
    let mut out = Vec::with_capacity(width);
    for j in 0..width {
        let col = tape.slice_cols(z, j, j + 1)?;
        let dist = tape.pairwise_abs_dist(col)?;
        out.push(tape.double_center(dist)?);
    }
    Ok(out)
}

fn dcov_from_centered(tape: &mut Tape, a: &[Var], b: &[Var]) -> Result<Var, FairsadError> {
    let mut acc: Option<Var> = None;
    for (&aj, &bj) in a.iter().zip(b) {
        let prod = tape.mul(aj, bj)?;
        let term = tape.mean(prod);
        acc = Some(match acc {
            Some(v) => tape.add(v, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| FairsadError::Metric("dcov needs at least one column".into()))
}

/// Sum over unordered channel pairs of the distance-correlation ratio.
/// Pairs whose denominator falls below [`DCOR_DENOM_GUARD`] contribute 0.
pub fn distance_correlation_loss(
    tape: &mut Tape,
    channels: &[Var],
) -> Result<Var, FairsadError> {
    let centered: Vec<Vec<Var>> = channels
        .iter()
        .map(|&z| centered_distance_columns(tape, z))
        .collect::<Result<_, _>>()?;
    // self-covariances, clamped against tiny negative accumulations before
    // the square root
    let mut selfs = Vec::with_capacity(channels.len());
    for c in &centered {
        let d = dcov_from_centered(tape, c, c)?;
        selfs.push(tape.relu(d));
    }
    let mut acc = tape.scalar_constant(0.0);
    for k1 in 0..channels.len() {
        for k2 in (k1 + 1)..channels.len() {
            let num = dcov_from_centered(tape, &centered[k1], &centered[k2])?;
            let prod = tape.mul(selfs[k1], selfs[k2])?;
            let den = tape.sqrt(prod);
            if tape.scalar(den) < DCOR_DENOM_GUARD {
                continue; // constant-channel guard
            }
            let ratio = tape.div(num, den)?;
            acc = tape.add(acc, ratio)?;
        }
    }
    Ok(acc)
}

/// Mean over training nodes of the summed per-channel cross-entropy:
/// `-(1/|V_T|) sum_v sum_k log p(k | z_v^k)`. Channel logits rows are grouped
/// channel-block by channel-block with `|V_T|` rows each.
pub fn discriminator_loss(
    tape: &mut Tape,
    channel_logits: Var,
    num_train_nodes: usize,
    num_channels: usize,
) -> Result<Var, FairsadError> {
    if num_train_nodes == 0 {
        return Err(FairsadError::Metric("discriminator loss needs a non-empty mask".into()));
    }
    if num_channels <= 1 {
        return Ok(tape.scalar_constant(0.0));
    }
    let rows = tape.value(channel_logits).nrows();
    if rows != num_train_nodes * num_channels {
        return Err(FairsadError::Shape {
            op: "discriminator_loss".into(),
            node: tape.len(),
            detail: format!("expected {} rows, got {rows}", num_train_nodes * num_channels),
        });
    }
    let mut labels = Vec::with_capacity(rows);
    for k in 0..num_channels {
        labels.extend(std::iter::repeat(k).take(num_train_nodes));
    }
    tape.softmax_cross_entropy(channel_logits, Arc::new(labels), 1.0 / num_train_nodes as f64)
}

/// Sum over representation columns of the absolute covariance between the
/// sensitive attribute and the masked column, over the given node set.
pub fn mask_covariance_loss(
    tape: &mut Tape,
    h_masked: Var,
    sensitive: &[u8],
    nodes: Option<&[usize]>,
) -> Result<Var, FairsadError> {
    let selected: Vec<usize> = match nodes {
        Some(nodes) => nodes.to_vec(),
        None => (0..sensitive.len()).collect(),
    };
    let has0 = selected.iter().any(|&i| sensitive[i] == 0);
    let has1 = selected.iter().any(|&i| sensitive[i] == 1);
    if !has0 || !has1 {
        return Err(FairsadError::Metric(
            "mask covariance loss needs both sensitive groups".into(),
        ));
    }
    let n = selected.len();
    let h = if nodes.is_some() {
        tape.gather_rows(h_masked, Arc::new(selected.clone()))?
    } else {
        h_masked
    };
    let s_mean = selected.iter().map(|&i| sensitive[i] as f64).sum::<f64>() / n as f64;
    let s_centered = Array2::from_shape_fn((n, 1), |(r, _)| sensitive[selected[r]] as f64 - s_mean);
    let sc = tape.constant(s_centered);

    let width = tape.value(h).ncols();
    let mut acc = tape.scalar_constant(0.0);
    for i in 0..width {
        let col = tape.slice_cols(h, i, i + 1)?;
        let mu = tape.mean(col);
        let mu_b = tape.broadcast_scalar(mu, n, 1)?;
        let centered = tape.sub(col, mu_b)?;
        let prod = tape.mul(sc, centered)?;
        let cov = tape.mean(prod);
        let a = tape.abs(cov);
        acc = tape.add(acc, a)?;
    }
    Ok(acc)
}

/// The four loss values and their weighted total.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_dc: f64,
    pub l_d: f64,
    pub l_m: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `total = L_c + alpha (L_dc + L_d) + beta L_m`, returned both as a tape
/// node and as a plain breakdown.
pub fn total_loss(
    tape: &mut Tape,
    l_c: Var,
    l_dc: Var,
    l_d: Var,
    l_m: Var,
    alpha: f64,
    beta: f64,
) -> Result<(Var, LossBreakdown), FairsadError> {
    let disent = tape.add(l_dc, l_d)?;
    let disent = tape.scale(disent, alpha);
    let masked = tape.scale(l_m, beta);
    let partial = tape.add(l_c, disent)?;
    let total = tape.add(partial, masked)?;
    let breakdown = LossBreakdown {
        l_c: tape.scalar(l_c),
        l_dc: tape.scalar(l_dc),
        l_d: tape.scalar(l_d),
        l_m: tape.scalar(l_m),
        total: tape.scalar(total),
        alpha,
        beta,
    };
    Ok((total, breakdown))
}

impl LossBreakdown {
    /// The defining identity of the breakdown.
    pub fn is_consistent(&self) -> bool {
        (self.total - (self.l_c + self.alpha * (self.l_dc + self.l_d) + self.beta * self.l_m))
            .abs()
            < 1e-12
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_difference_check;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force double-centering oracle, written directly from the
    /// componentwise definition. Kept independent of the tape path.
    pub(crate) fn dcov_squared_oracle(za: &Array2<f64>, zb: &Array2<f64>) -> f64 {
        assert_eq!(za.raw_dim(), zb.raw_dim());
        let n = za.nrows();
        let mut total = 0.0;
        for j in 0..za.ncols() {
            let center = |z: &Array2<f64>| -> Vec<Vec<f64>> {
                let mut a = vec![vec![0.0; n]; n];
                for i1 in 0..n {
                    for i2 in 0..n {
                        a[i1][i2] = (z[[i1, j]] - z[[i2, j]]).abs();
                    }
                }
                let row_means: Vec<f64> =
                    (0..n).map(|i| a[i].iter().sum::<f64>() / n as f64).collect();
                let col_means: Vec<f64> = (0..n)
                    .map(|c| (0..n).map(|r| a[r][c]).sum::<f64>() / n as f64)
                    .collect();
                let grand: f64 =
                    a.iter().flat_map(|r| r.iter()).sum::<f64>() / (n * n) as f64;
                let mut out = vec![vec![0.0; n]; n];
                for i1 in 0..n {
                    for i2 in 0..n {
                        out[i1][i2] = a[i1][i2] - row_means[i1] - col_means[i2] + grand;
                    }
                }
                out
            };
            let a = center(za);
            let b = center(zb);
            let mut acc = 0.0;
            for i1 in 0..n {
                for i2 in 0..n {
                    acc += a[i1][i2] * b[i1][i2];
                }
            }
            total += acc / (n * n) as f64;
        }
        total
    }

    pub(crate) fn dcor_pair_oracle(za: &Array2<f64>, zb: &Array2<f64>) -> f64 {
        let num = dcov_squared_oracle(za, zb);
        let den = (dcov_squared_oracle(za, za).max(0.0) * dcov_squared_oracle(zb, zb).max(0.0))
            .sqrt();
        if den < DCOR_DENOM_GUARD {
            0.0
        } else {
            num / den
        }
    }

    fn eval_dcov(za: &Array2<f64>, zb: &Array2<f64>) -> f64 {
        let mut t = Tape::new();
        let a = t.leaf(za.clone());
        let b = t.leaf(zb.clone());
        let v = dcov_squared(&mut t, a, b).unwrap();
        t.scalar(v)
    }

    #[test]
    fn bce_closed_forms() {
        let mut t = Tape::new();
        let logits = t.leaf(array![[0.0], [0.0]]);
        let l = classification_loss(&mut t, logits, &[1, 1], &[0, 1]).unwrap();
        assert_abs_diff_eq!(t.scalar(l), 2.0f64.ln(), epsilon = 1e-12);

        let mut t = Tape::new();
        let logits = t.leaf(array![[30.0]]);
        let l = classification_loss(&mut t, logits, &[1], &[0]).unwrap();
        assert!(t.scalar(l) < 1e-9);
    }

    #[test]
    fn bce_empty_mask_rejected() {
        let mut t = Tape::new();
        let logits = t.leaf(array![[0.0]]);
        assert!(classification_loss(&mut t, logits, &[1], &[]).is_err());
    }

    #[test]
    fn dcov_constant_column_is_zero() {
        let za = array![[1.0], [1.0], [1.0], [1.0]];
        let zb = array![[0.3], [0.7], [0.1], [0.9]];
        assert_abs_diff_eq!(eval_dcov(&za, &zb), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn dcov_n2_matches_closed_form() {
        // two points at distance 1: centred matrix is [[-1/2, 1/2], [1/2, -1/2]],
        // so the squared statistic is the mean of its squares, 1/4
        let z = array![[0.0], [1.0]];
        assert_abs_diff_eq!(eval_dcov(&z, &z), 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(eval_dcov(&z, &z), dcov_squared_oracle(&z, &z), epsilon = 1e-14);
    }

    #[test]
    fn dcov_matches_oracle_on_fixed_instance() {
        let za = array![[1.0], [2.0], [3.0], [4.0]];
        let zb = array![[1.0], [4.0], [9.0], [16.0]];
        let expected = dcov_squared_oracle(&za, &zb);
        assert_abs_diff_eq!(eval_dcov(&za, &zb), expected, epsilon = 1e-12);
        assert!(expected > 0.0);
    }

    #[test]
    fn dcov_symmetry_and_oracle_equivalence_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let n = rng.gen_range(2..20);
            let w = rng.gen_range(1..5);
            let za = Array2::from_shape_fn((n, w), |_| rng.gen_range(-2.0..2.0));
            let zb = Array2::from_shape_fn((n, w), |_| rng.gen_range(-2.0..2.0));
            let ab = eval_dcov(&za, &zb);
            let ba = eval_dcov(&zb, &za);
            assert_eq!(ab, ba);
            assert_abs_diff_eq!(ab, dcov_squared_oracle(&za, &zb), epsilon = 1e-10);
        }
    }

    #[test]
    fn dcor_no_pairs_for_single_channel() {
        let mut t = Tape::new();
        let z = t.leaf(array![[1.0], [2.0], [3.0]]);
        let l = distance_correlation_loss(&mut t, &[z]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn dcor_identical_channels_is_one() {
        let mut t = Tape::new();
        let z1 = t.leaf(array![[1.0], [5.0], [2.0], [8.0]]);
        let z2 = t.leaf(array![[1.0], [5.0], [2.0], [8.0]]);
        let l = distance_correlation_loss(&mut t, &[z1, z2]).unwrap();
        assert_abs_diff_eq!(t.scalar(l), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn dcor_invariant_to_positive_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let za = Array2::from_shape_fn((12, 2), |_| rng.gen_range(-1.0..1.0));
        let zb = za.mapv(|v| 3.0 * v + 5.0);
        let mut t = Tape::new();
        let a = t.leaf(za.clone());
        let b = t.leaf(zb.clone());
        let l = distance_correlation_loss(&mut t, &[a, b]).unwrap();
        assert_abs_diff_eq!(t.scalar(l), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(dcor_pair_oracle(&za, &zb), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn dcor_constant_channel_guard() {
        let mut t = Tape::new();
        let z1 = t.leaf(Array2::from_elem((5, 2), 0.7));
        let z2 = t.leaf(array![[1.0, 0.0], [2.0, 1.0], [0.5, 3.0], [0.1, 0.2], [4.0, 1.0]]);
        let l = distance_correlation_loss(&mut t, &[z1, z2]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn discriminator_uniform_logits_closed_form() {
        let k = 4;
        let vt = 3;
        let mut t = Tape::new();
        let logits = t.leaf(Array2::zeros((vt * k, k)));
        let l = discriminator_loss(&mut t, logits, vt, k).unwrap();
        assert_abs_diff_eq!(t.scalar(l), 4.0 * 4.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn discriminator_confident_correct_is_near_zero() {
        let k = 3;
        let vt = 2;
        let mut logits = Array2::from_elem((vt * k, k), -50.0);
        for kk in 0..k {
            for v in 0..vt {
                logits[[kk * vt + v, kk]] = 50.0;
            }
        }
        let mut t = Tape::new();
        let lv = t.leaf(logits);
        let l = discriminator_loss(&mut t, lv, vt, k).unwrap();
        assert!(t.scalar(l) < 1e-9);
    }

    #[test]
    fn discriminator_single_channel_is_zero() {
        let mut t = Tape::new();
        let lv = t.leaf(Array2::zeros((5, 1)));
        let l = discriminator_loss(&mut t, lv, 5, 1).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn mask_cov_hand_example() {
        // s=[0,0,1,1], one column [1,1,0,0] -> |cov| = 0.25, other columns zero
        let h = array![[1.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let mut t = Tape::new();
        let hv = t.leaf(h);
        let l = mask_covariance_loss(&mut t, hv, &[0, 0, 1, 1], None).unwrap();
        assert_abs_diff_eq!(t.scalar(l), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn mask_cov_constant_columns_zero() {
        let mut t = Tape::new();
        let hv = t.leaf(Array2::from_elem((6, 3), 2.5));
        let l = mask_covariance_loss(&mut t, hv, &[0, 0, 0, 1, 1, 1], None).unwrap();
        assert_abs_diff_eq!(t.scalar(l), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn mask_cov_single_group_rejected() {
        let mut t = Tape::new();
        let hv = t.leaf(Array2::zeros((4, 1)));
        assert!(mask_covariance_loss(&mut t, hv, &[1, 1, 1, 1], None).is_err());
    }

    #[test]
    fn mask_cov_permuted_s_column_is_small() {
        // a column that is a random permutation of s decorrelates from s
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 1000;
        let s: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let mut hits = 0;
        for _ in 0..20 {
            let mut col: Vec<f64> = s.iter().map(|&v| v as f64).collect();
            col.shuffle(&mut rng);
            let h = Array2::from_shape_fn((n, 1), |(r, _)| col[r]);
            let mut t = Tape::new();
            let hv = t.leaf(h);
            let l = mask_covariance_loss(&mut t, hv, &s, None).unwrap();
            if t.scalar(l) < 0.05 {
                hits += 1;
            }
        }
        assert!(hits >= 19, "only {hits}/20 permutations below 0.05");
    }

    #[test]
    fn mask_cov_restricted_to_subset() {
        let h = array![[1.0], [1.0], [0.0], [0.0], [9.0]];
        let mut t = Tape::new();
        let hv = t.leaf(h);
        let l = mask_covariance_loss(&mut t, hv, &[0, 0, 1, 1, 1], Some(&[0, 1, 2, 3])).unwrap();
        assert_abs_diff_eq!(t.scalar(l), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut t = Tape::new();
        let l_c = t.leaf(array![[1.0]]);
        let l_dc = t.leaf(array![[2.0]]);
        let l_d = t.leaf(array![[3.0]]);
        let l_m = t.leaf(array![[4.0]]);
        let (tv, b) = total_loss(&mut t, l_c, l_dc, l_d, l_m, 0.1, 1.0).unwrap();
        assert_abs_diff_eq!(t.scalar(tv), 5.5, epsilon = 1e-12);
        assert!(b.is_consistent());

        let mut t = Tape::new();
        let l_c = t.leaf(array![[0.37]]);
        let zero = t.scalar_constant(0.0);
        let (tv, b) = total_loss(&mut t, l_c, zero, zero, zero, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(t.scalar(tv), 0.37, epsilon = 1e-15);
        assert!(b.is_consistent());
    }

    #[test]
    fn mask_cov_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s: Vec<u8> = vec![0, 1, 0, 1, 1, 0];
        for _ in 0..5 {
            let point = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
            let s = s.clone();
            let err = finite_difference_check(
                move |t, x| mask_covariance_loss(t, x, &s, None).unwrap(),
                &point,
                1e-5,
            );
            assert!(err < 1e-4, "fd error {err}");
        }
    }

    #[test]
    fn dcor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..5 {
            let point = Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1.0..1.0));
            let err = finite_difference_check(
                |t, x| {
                    let a = t.slice_cols(x, 0, 1).unwrap();
                    let b = t.slice_cols(x, 1, 2).unwrap();
                    distance_correlation_loss(t, &[a, b]).unwrap()
                },
                &point,
                1e-5,
            );
            assert!(err < 1e-4, "fd error {err}");
        }
    }
}
