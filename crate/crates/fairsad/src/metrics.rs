//! Utility and group-fairness metrics: AUC, F1, demographic-parity gap, and
//! equalized-odds gap. All values are percentages.

use crate::error::FairsadError;

fn group_rate(pred: &[u8], sens: &[u8], mask: &[usize], group: u8) -> Result<f64, FairsadError> {
    let mut pos = 0usize;
    let mut tot = 0usize;
    for &i in mask {
        if sens[i] == group {
            tot += 1;
            pos += (pred[i] == 1) as usize;
        }
    }
    if tot == 0 {
        return Err(FairsadError::Metric(format!("sensitive group {group} is empty on the mask")));
    }
    Ok(pos as f64 / tot as f64)
}

/// `100 * |P(pred=1 | s=0) - P(pred=1 | s=1)|` over the mask.
pub fn delta_dp(pred: &[u8], sens: &[u8], mask: &[usize]) -> Result<f64, FairsadError> {
    let r0 = group_rate(pred, sens, mask, 0)?;
    let r1 = group_rate(pred, sens, mask, 1)?;
    Ok(100.0 * (r0 - r1).abs())
}

/// `100 * |P(pred=1 | y=1, s=0) - P(pred=1 | y=1, s=1)|` over the mask.
pub fn delta_eo(pred: &[u8], labels: &[i8], sens: &[u8], mask: &[usize]) -> Result<f64, FairsadError> {
    let positives: Vec<usize> = mask.iter().copied().filter(|&i| labels[i] == 1).collect();
    let r0 = group_rate(pred, sens, &positives, 0)
        .map_err(|_| FairsadError::Metric("group 0 has no positive nodes on the mask".into()))?;
    let r1 = group_rate(pred, sens, &positives, 1)
        .map_err(|_| FairsadError::Metric("group 1 has no positive nodes on the mask".into()))?;
    Ok(100.0 * (r0 - r1).abs())
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counted one half. Percentage.
pub fn auc(scores: &[f64], labels: &[i8], mask: &[usize]) -> Result<f64, FairsadError> {
    let pos: Vec<f64> = mask.iter().filter(|&&i| labels[i] == 1).map(|&i| scores[i]).collect();
    let neg: Vec<f64> = mask.iter().filter(|&&i| labels[i] == 0).map(|&i| scores[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(FairsadError::Metric("AUC needs both classes on the mask".into()));
    }
    let mut credit = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                credit += 1.0;
            } else if p == n {
                credit += 0.5;
            }
        }
    }
    Ok(100.0 * credit / (pos.len() * neg.len()) as f64)
}

/// F1 of the positive class; 0 when precision + recall is 0. Percentage.
pub fn f1(pred: &[u8], labels: &[i8], mask: &[usize]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    for &i in mask {
        match (pred[i], labels[i]) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fne += 1,
            _ => {}
        }
    }
    if 2 * tp + fp + fne == 0 {
        return 0.0;
    }
    100.0 * 2.0 * tp as f64 / (2 * tp + fp + fne) as f64
}

/// Per-seed metric values with mean and sample standard deviation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricSummary {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { per_seed: values, mean, std }
    }
}

/// AUC/F1/DP/EO for one evaluation or a multi-seed aggregate.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub auc: MetricSummary,
    pub f1: MetricSummary,
    pub delta_dp: MetricSummary,
    pub delta_eo: MetricSummary,
}

/// Metrics from a single run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SingleRunMetrics {
    pub auc: f64,
    pub f1: f64,
    pub delta_dp: f64,
    pub delta_eo: f64,
}

impl MetricsReport {
    pub fn aggregate(runs: &[SingleRunMetrics]) -> Self {
        Self {
            auc: MetricSummary::from_values(runs.iter().map(|r| r.auc).collect()),
            f1: MetricSummary::from_values(runs.iter().map(|r| r.f1).collect()),
            delta_dp: MetricSummary::from_values(runs.iter().map(|r| r.delta_dp).collect()),
            delta_eo: MetricSummary::from_values(runs.iter().map(|r| r.delta_eo).collect()),
        }
    }
}
