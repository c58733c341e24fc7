//! Gaussian soft labels over QP groups and the two training losses.

use serde::{Deserialize, Serialize};

use crate::autograd::LOG_FLOOR;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Assignment of coding QPs to low/medium/high distortion groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionGrouping {
    /// QPs of the heavily distorted (high-QP) group.
    pub high: Vec<i32>,
    pub medium: Vec<i32>,
    /// QPs of the lightly distorted (low-QP) group.
    pub low: Vec<i32>,
    /// Width of the Gaussian kernel, in QP units.
    pub sigma: f64,
}

impl Default for DistortionGrouping {
    fn default() -> Self {
        Self {
            high: vec![51, 46],
            medium: vec![40, 34],
            low: vec![28, 22],
            sigma: 5.0,
        }
    }
}

impl DistortionGrouping {
    /// Every QP in the grouping, highest distortion first.
    pub fn all_qps(&self) -> Vec<i32> {
        self.high.iter().chain(&self.medium).chain(&self.low).copied().collect()
    }

    pub fn contains(&self, qp: i32) -> bool {
        self.all_qps().contains(&qp)
    }
}

fn mean(qps: &[i32], name: &'static str) -> Result<f64> {
    if qps.is_empty() {
        return Err(Error::EmptyGroup(name));
    }
    Ok(qps.iter().map(|&q| q as f64).sum::<f64>() / qps.len() as f64)
}

/// Mean QP of each group, ordered as the QE output channels `[L, M, H]`.
pub fn qp_centers(grouping: &DistortionGrouping) -> Result<[f64; 3]> {
    Ok([
        mean(&grouping.low, "low")?,
        mean(&grouping.medium, "medium")?,
        mean(&grouping.high, "high")?,
    ])
}

/// Level index (0 = L, 1 = M, 2 = H) of the group containing `qp`.
pub fn level_of(qp: i32, grouping: &DistortionGrouping) -> Option<usize> {
    [&grouping.low, &grouping.medium, &grouping.high]
        .iter()
        .position(|g| g.contains(&qp))
}

/// Gaussian soft label `[g_L, g_M, g_H]` of a QP.
pub fn soft_label(qp: i32, grouping: &DistortionGrouping) -> Result<[f64; 3]> {
    soft_label_at(qp as f64, grouping)
}

/// [`soft_label`] for a real-valued QP.
pub fn soft_label_at(q: f64, grouping: &DistortionGrouping) -> Result<[f64; 3]> {
    let sigma = grouping.sigma;
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidConfig("sigma must be positive".into()));
    }
    let centers = qp_centers(grouping)?;
    let logits = centers.map(|c| -(q - c).powi(2) / (2.0 * sigma * sigma));
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - max).exp());
    let total: f64 = e.iter().sum();
    Ok(e.map(|v| v / total))
}

/// Cross entropy of the QE output `p` against the soft label `g`.
pub fn qe_loss(p: &[f64; 3], g: &[f64; 3]) -> f64 {
    -g.iter().zip(p).map(|(gi, pi)| gi * pi.max(LOG_FLOOR).ln()).sum::<f64>()
}

pub fn entropy(g: &[f64; 3]) -> f64 {
    -g.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Mean squared error between enhanced and original attributes.
pub fn bqe_loss(enhanced: &Matrix, original: &Matrix) -> Result<f64> {
    if enhanced.shape() != original.shape() {
        return Err(Error::ShapeMismatch(format!(
            "enhanced {:?} vs original {:?}",
            enhanced.shape(),
            original.shape()
        )));
    }
    if enhanced.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let sum: f64 = enhanced.data().iter().zip(original.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sum / enhanced.len() as f64)
}

pub(crate) fn argmax3(v: &[f64; 3]) -> usize {
    let mut best = 0;
    for i in 1..3 {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
