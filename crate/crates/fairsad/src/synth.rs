//! Two-block stochastic-block-model generator with planted sensitive-attribute
//! bias, used as a desk-scale testbed.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::FairsadError;
use crate::graph::AttributedGraph;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub nodes_per_group: usize,
    pub intra_prob: f64,
    pub inter_prob: f64,
    pub feature_dim: usize,
    /// Strength of the sensitive-attribute direction leaked into features.
    pub leakage: f64,
    /// Strength of the label direction in features.
    pub label_signal: f64,
    /// |P(y=1|s=1) - P(y=1|s=0)|, in [0,1].
    pub label_sensitive_correlation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            nodes_per_group: 200,
            intra_prob: 0.02,
            inter_prob: 0.002,
            feature_dim: 8,
            leakage: 1.0,
            label_signal: 1.0,
            label_sensitive_correlation: 0.6,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), FairsadError> {
        if self.nodes_per_group == 0 {
            return Err(FairsadError::Config("nodes_per_group must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(FairsadError::Config("feature_dim must be positive".into()));
        }
        for (name, p) in [("intra_prob", self.intra_prob), ("inter_prob", self.inter_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FairsadError::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if !(0.0..=1.0).contains(&self.label_sensitive_correlation) {
            return Err(FairsadError::Config(format!(
                "label_sensitive_correlation must lie in [0,1], got {}",
                self.label_sensitive_correlation
            )));
        }
        if self.leakage < 0.0 || self.label_signal < 0.0 {
            return Err(FairsadError::Config("signal strengths must be nonnegative".into()));
        }
        Ok(())
    }
}

fn random_unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let mut v = Array1::from_shape_fn(d, |_| StandardNormal.sample(rng));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.mapv_inplace(|x| x / norm);
    }
    v
}

/// Generates a two-block SBM graph where the sensitive attribute is the block
/// id, features leak the sensitive attribute with the configured strength,
/// and labels correlate with the sensitive attribute by the configured gap.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<AttributedGraph, FairsadError> {
    spec.validate()?;
    let n = 2 * spec.nodes_per_group;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let sensitive: Vec<u8> = (0..n).map(|i| (i >= spec.nodes_per_group) as u8).collect();

    // P(y=1|s) = 1/2 +- corr/2, so the group positive-rate gap is exactly corr
    let corr = spec.label_sensitive_correlation;
    let labels: Vec<i8> = sensitive
        .iter()
        .map(|&s| {
            let p1 = if s == 1 { 0.5 + corr / 2.0 } else { 0.5 - corr / 2.0 };
            (rng.gen::<f64>() < p1) as i8
        })
        .collect();

    let label_dir = random_unit_vector(&mut rng, d);
    // The sensitive direction deliberately shares part of its mass with the
    // label direction: stripping the leak from the representation then costs
    // label signal, so a trained model has to isolate the leak rather than
    // delete it. Keeps the planted bias non-trivial to remove.
    const DIR_OVERLAP: f64 = 0.6;
    let sens_dir = {
        let raw = random_unit_vector(&mut rng, d);
        let dot = raw.dot(&label_dir);
        let mut perp = &raw - &(dot * &label_dir);
        let norm = perp.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            perp.mapv_inplace(|x| x / norm);
            DIR_OVERLAP * &label_dir + (1.0 - DIR_OVERLAP * DIR_OVERLAP).sqrt() * &perp
        } else {
            raw
        }
    };
    let mut attributes = Array2::zeros((n, d));
    for i in 0..n {
        let ysign = if labels[i] == 1 { 1.0 } else { -1.0 };
        let ssign = if sensitive[i] == 1 { 1.0 } else { -1.0 };
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            attributes[[i, j]] = spec.label_signal * ysign * label_dir[j]
                + spec.leakage * ssign * sens_dir[j]
                + noise;
        }
    }

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if sensitive[u] == sensitive[v] { spec.intra_prob } else { spec.inter_prob };
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let (graph, _) = AttributedGraph::from_edges(attributes, sensitive, labels, &edges)?;
    Ok(graph)
}
