//! The FairSAD network: a neighbor assigner routing each directed arc across
//! channels, per-channel dimension reduction, multi-channel graph convolution
//! with row normalization, a learnable channel mask, a linear classifier, and
//! a channel discriminator used during training.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::FairsadError;
use crate::graph::AttributedGraph;
use crate::sampling::gumbel_binary_sample_on_tape;
use crate::tape::{ArcList, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Structural hyperparameters of one model instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHyper {
    pub feature_dim: usize,
    pub channels: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub assigner_hidden: usize,
    pub temperature: f64,
    /// Remove the neighbor assigner (uniform arc weights).
    pub disable_assigner: bool,
    /// Pin the mask to all ones.
    pub disable_mask: bool,
}

impl ModelHyper {
    pub fn channel_width(&self) -> usize {
        self.hidden_dim / self.channels
    }

    pub fn validate(&self) -> Result<(), FairsadError> {
        if self.channels == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return Err(FairsadError::Config("channels, hidden_dim, layers must be positive".into()));
        }
        if self.hidden_dim % self.channels != 0 {
            return Err(FairsadError::Config(format!(
                "hidden_dim {} not divisible by channels {}",
                self.hidden_dim, self.channels
            )));
        }
        if self.temperature <= 0.0 {
            return Err(FairsadError::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// All learnable parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub hyper: ModelHyper,
    pub assigner_w1: Array2<f64>,
    pub assigner_b1: Array2<f64>,
    pub assigner_w2: Array2<f64>,
    pub assigner_b2: Array2<f64>,
    pub reducer_w: Vec<Array2<f64>>,
    pub reducer_b: Vec<Array2<f64>>,
    /// Indexed `[layer][channel]`; linear update on `[self || aggregate]`.
    pub conv_w: Vec<Vec<Array2<f64>>>,
    pub conv_b: Vec<Vec<Array2<f64>>>,
    pub mask_logits: Array2<f64>,
    pub classifier_w: Array2<f64>,
    pub classifier_b: Array2<f64>,
    pub disc_w: Array2<f64>,
    pub disc_b: Array2<f64>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Initial keep-probability of the mask is sigmoid(2) ~ 0.88, so early
/// training is close to identity masking.
pub const MASK_LOGIT_INIT: f64 = 2.0;

/// Fraction of the covariance penalty's gradient allowed to flow into the
/// backbone; the mask logits always receive the full gradient.
pub const MASK_LOSS_BACKBONE_FLOW: f64 = 0.25;

impl ModelParams {
    pub fn init(hyper: ModelHyper, seed: u64) -> Result<Self, FairsadError> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = hyper.feature_dim;
        let k = hyper.channels;
        let w = hyper.channel_width();
        let ah = hyper.assigner_hidden;
        let params = Self {
            assigner_w1: glorot(&mut rng, 2 * d, ah),
            assigner_b1: Array2::zeros((1, ah)),
            assigner_w2: glorot(&mut rng, ah, k),
            assigner_b2: Array2::zeros((1, k)),
            reducer_w: (0..k).map(|_| glorot(&mut rng, d, w)).collect(),
            reducer_b: (0..k).map(|_| Array2::zeros((1, w))).collect(),
            conv_w: (0..hyper.layers)
                .map(|_| (0..k).map(|_| glorot(&mut rng, 2 * w, w)).collect())
                .collect(),
            conv_b: (0..hyper.layers)
                .map(|_| (0..k).map(|_| Array2::zeros((1, w))).collect())
                .collect(),
            mask_logits: Array2::from_elem((1, hyper.hidden_dim), MASK_LOGIT_INIT),
            classifier_w: glorot(&mut rng, hyper.hidden_dim, 1),
            classifier_b: Array2::zeros((1, 1)),
            disc_w: glorot(&mut rng, w, k),
            disc_b: Array2::zeros((1, k)),
            hyper,
        };
        Ok(params)
    }

    /// Flat parameter list in a fixed order; the trailing
    /// [`Self::NUM_DISC_PARAMS`] entries belong to the channel discriminator.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> =
            vec![&self.assigner_w1, &self.assigner_b1, &self.assigner_w2, &self.assigner_b2];
        out.extend(self.reducer_w.iter());
        out.extend(self.reducer_b.iter());
        for l in 0..self.hyper.layers {
            out.extend(self.conv_w[l].iter());
            out.extend(self.conv_b[l].iter());
        }
        out.push(&self.mask_logits);
        out.push(&self.classifier_w);
        out.push(&self.classifier_b);
        out.push(&self.disc_w);
        out.push(&self.disc_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = vec![
            &mut self.assigner_w1,
            &mut self.assigner_b1,
            &mut self.assigner_w2,
            &mut self.assigner_b2,
        ];
        out.extend(self.reducer_w.iter_mut());
        out.extend(self.reducer_b.iter_mut());
        for layer in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            out.extend(layer.0.iter_mut());
            out.extend(layer.1.iter_mut());
        }
        out.push(&mut self.mask_logits);
        out.push(&mut self.classifier_w);
        out.push(&mut self.classifier_b);
        out.push(&mut self.disc_w);
        out.push(&mut self.disc_b);
        out
    }

    pub const NUM_DISC_PARAMS: usize = 2;

    pub fn num_params(&self) -> usize {
        4 + 2 * self.hyper.channels + 2 * self.hyper.layers * self.hyper.channels + 3 + 2
    }
}

/// One recorded forward pass: the tape plus handles to every tensor the
/// training loop needs.
pub struct ForwardPass {
    pub tape: Tape,
    /// Aligned with [`ModelParams::params`].
    pub param_vars: Vec<Var>,
    /// Edge-channel routing weights, rows summing to 1 (None when the
    /// assigner is disabled).
    pub edge_weights: Option<Var>,
    /// Pre-mask channel blocks `Z^k`.
    pub channel_blocks: Vec<Var>,
    /// Masked channel blocks.
    pub masked_blocks: Vec<Var>,
    pub h: Var,
    pub h_masked: Var,
    /// `mask` applied to a gradient-damped copy of `h`; input for the covariance penalty.
    pub h_masked_cov: Var,
    pub mask: Var,
    pub class_logits: Var,
    /// Stacked discriminator logits (train mode, K > 1).
    pub channel_logits: Option<Var>,
}

struct ParamVars {
    assigner_w1: Var,
    assigner_b1: Var,
    assigner_w2: Var,
    assigner_b2: Var,
    reducer_w: Vec<Var>,
    reducer_b: Vec<Var>,
    conv_w: Vec<Vec<Var>>,
    conv_b: Vec<Vec<Var>>,
    mask_logits: Var,
    classifier_w: Var,
    classifier_b: Var,
    disc_w: Var,
    disc_b: Var,
}

fn register_params(tape: &mut Tape, p: &ModelParams) -> (Vec<Var>, ParamVars) {
    let mut flat = Vec::with_capacity(p.num_params());
    let mut leaf = |a: &Array2<f64>| {
        let v = tape.leaf(a.clone());
        flat.push(v);
        v
    };
    let pv = ParamVars {
        assigner_w1: leaf(&p.assigner_w1),
        assigner_b1: leaf(&p.assigner_b1),
        assigner_w2: leaf(&p.assigner_w2),
        assigner_b2: leaf(&p.assigner_b2),
        reducer_w: p.reducer_w.iter().map(&mut leaf).collect(),
        reducer_b: p.reducer_b.iter().map(&mut leaf).collect(),
        conv_w: p.conv_w.iter().map(|l| l.iter().map(&mut leaf).collect()).collect(),
        conv_b: p.conv_b.iter().map(|l| l.iter().map(&mut leaf).collect()).collect(),
        mask_logits: leaf(&p.mask_logits),
        classifier_w: leaf(&p.classifier_w),
        classifier_b: leaf(&p.classifier_b),
        disc_w: leaf(&p.disc_w),
        disc_b: leaf(&p.disc_b),
    };
    (flat, pv)
}

/// Per-arc feature pairs `[x_dst || x_src]` in CSR arc order.
fn arc_features(graph: &AttributedGraph, arcs: &ArcList) -> Array2<f64> {
    let d = graph.feature_dim();
    let mut out = Array2::zeros((arcs.len(), 2 * d));
    for a in 0..arcs.len() {
        for j in 0..d {
            out[[a, j]] = graph.attributes[[arcs.dst[a], j]];
            out[[a, d + j]] = graph.attributes[[arcs.src[a], j]];
        }
    }
    out
}

fn assign_neighbor_weights(
    tape: &mut Tape,
    pv: &ParamVars,
    graph: &AttributedGraph,
    arcs: &ArcList,
) -> Result<Var, FairsadError> {
    let feats = tape.constant(arc_features(graph, arcs));
    let h = tape.matmul(feats, pv.assigner_w1)?;
    let h = tape.add_bias(h, pv.assigner_b1)?;
    let h = tape.relu(h);
    let alpha = tape.matmul(h, pv.assigner_w2)?;
    let alpha = tape.add_bias(alpha, pv.assigner_b2)?;
    Ok(tape.softmax_rows(alpha))
}

fn reduce_attributes(
    tape: &mut Tape,
    pv: &ParamVars,
    x: Var,
    k: usize,
) -> Result<Var, FairsadError> {
    let r = tape.matmul(x, pv.reducer_w[k])?;
    tape.add_bias(r, pv.reducer_b[k])
}

fn disentangled_conv(
    tape: &mut Tape,
    pv: &ParamVars,
    z: Var,
    weights_col: Var,
    arcs: Arc<ArcList>,
    num_nodes: usize,
    layer: usize,
    k: usize,
) -> Result<Var, FairsadError> {
    let agg = tape.weighted_scatter_sum(z, weights_col, arcs, num_nodes)?;
    let joint = tape.concat_cols(&[z, agg])?;
    let upd = tape.matmul(joint, pv.conv_w[layer][k])?;
    let upd = tape.add_bias(upd, pv.conv_b[layer][k])?;
    Ok(tape.l2_normalize_rows(upd))
}

/// Full forward pass. `train_nodes` feeds the channel discriminator; it is
/// only consulted in train mode.
pub fn forward(
    params: &ModelParams,
    graph: &AttributedGraph,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    train_nodes: &[usize],
) -> Result<ForwardPass, FairsadError> {
    let hyper = &params.hyper;
    hyper.validate()?;
    if graph.feature_dim() != hyper.feature_dim {
        return Err(FairsadError::Config(format!(
            "graph has {} features, model expects {}",
            graph.feature_dim(),
            hyper.feature_dim
        )));
    }
    let k = hyper.channels;
    let n = graph.num_nodes;
    let arcs = graph.arc_list();

    let mut tape = Tape::new();
    let (param_vars, pv) = register_params(&mut tape, params);
    let x = tape.constant(graph.attributes.clone());

    let use_assigner = !hyper.disable_assigner && k > 1;
    let edge_weights = if use_assigner {
        Some(assign_neighbor_weights(&mut tape, &pv, graph, &arcs)?)
    } else {
        None
    };
    // without the assigner, each channel routes every arc at weight 1/K
    let uniform_weights =
        if use_assigner { None } else { Some(tape.constant(Array2::from_elem((arcs.len(), 1), 1.0 / k as f64))) };

    let mut channel_blocks = Vec::with_capacity(k);
    for ch in 0..k {
        let weights_col = match edge_weights {
            Some(w) => tape.slice_cols(w, ch, ch + 1)?,
            None => uniform_weights.expect("uniform weights set"),
        };
        let mut z = reduce_attributes(&mut tape, &pv, x, ch)?;
        for layer in 0..hyper.layers {
            z = disentangled_conv(&mut tape, &pv, z, weights_col, arcs.clone(), n, layer, ch)?;
        }
        channel_blocks.push(z);
    }
    let h = tape.concat_cols(&channel_blocks)?;

    let mask = if hyper.disable_mask {
        tape.constant(Array2::from_elem((1, hyper.hidden_dim), 1.0))
    } else {
        match mode {
            Mode::Train => {
                gumbel_binary_sample_on_tape(&mut tape, pv.mask_logits, hyper.temperature, rng)?
            }
            Mode::Infer => tape.sigmoid(pv.mask_logits),
        }
    };
    let h_masked = tape.mul_row_broadcast(h, mask)?;
    // The covariance penalty is first and foremost the mask's objective: its
    // gradient reaches the mask logits at full strength, but only a damped
    // fraction reaches the backbone. At full strength the backbone scrubs the
    // sensitive signal out of every channel of `h` before the masks can
    // differentiate, leaving nothing for the masks to identify; with no flow
    // at all, masking alone cannot remove enough of the leak. The blend keeps
    // the penalty's value unchanged while scaling its backbone gradient.
    let h_live = tape.scale(h, MASK_LOSS_BACKBONE_FLOW);
    let h_frozen = tape.constant(tape.value(h) * (1.0 - MASK_LOSS_BACKBONE_FLOW));
    let h_blend = tape.add(h_live, h_frozen)?;
    let h_masked_cov = tape.mul_row_broadcast(h_blend, mask)?;

    let w = hyper.channel_width();
    let mut masked_blocks = Vec::with_capacity(k);
    for ch in 0..k {
        masked_blocks.push(tape.slice_cols(h_masked, ch * w, (ch + 1) * w)?);
    }

    let class_logits = tape.matmul(h_masked, pv.classifier_w)?;
    let class_logits = tape.add_bias(class_logits, pv.classifier_b)?;

    let channel_logits = if mode == Mode::Train && k > 1 && !train_nodes.is_empty() {
        let rows = Arc::new(train_nodes.to_vec());
        let mut parts = Vec::with_capacity(k);
        for &block in &masked_blocks {
            parts.push(tape.gather_rows(block, rows.clone())?);
        }
        let stacked = tape.concat_rows(&parts)?;
        let logits = tape.matmul(stacked, pv.disc_w)?;
        Some(tape.add_bias(logits, pv.disc_b)?)
    } else {
        None
    };

    Ok(ForwardPass {
        tape,
        param_vars,
        edge_weights,
        channel_blocks,
        masked_blocks,
        h,
        h_masked,
        h_masked_cov,
        mask,
        class_logits,
        channel_logits,
    })
}

/// Sigmoid class probabilities from an inference pass.
pub fn class_probabilities(pass: &ForwardPass) -> Vec<f64> {
    pass.tape
        .value(pass.class_logits)
        .column(0)
        .iter()
        .map(|&v| crate::tape::sigmoid_stable(v))
        .collect()
}

/// Hard 0/1 predictions at threshold 0.5.
pub fn class_predictions(pass: &ForwardPass) -> Vec<u8> {
    class_probabilities(pass).iter().map(|&p| (p >= 0.5) as u8).collect()
}
