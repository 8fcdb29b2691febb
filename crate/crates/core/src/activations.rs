//! Simplex-valued activations for attention: softmax, sparsemax and
//! sparsegen, with their vector-Jacobian products.
//!
//! Sparsemax is the Euclidean projection of a score vector onto the
//! probability simplex. Unlike softmax it returns exact zeros, which is what
//! makes the attention tables of the sparse models readable: only a handful of
//! prior courses carry any weight. Sparsegen rescales the scores by
//! `1 / (1 - gamma)` before projecting, so larger `gamma` means sparser output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output of an activation: a point on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub weights: Vec<f64>,
    /// Indices that received a share of the mass, ascending. For sparsemax a
    /// threshold tie keeps the tied index here even though its weight is 0.
    pub support: Vec<usize>,
    /// Distance of the closest score to the sparsemax threshold (in the
    /// rescaled space). Infinite for softmax. Small values mean the support is
    /// about to change and the Jacobian is not locally constant.
    pub margin: f64,
}

impl AttentionWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Activation {
    Softmax,
    /// Sparsemax on `z / (1 - gamma)`; `gamma = 0` is plain sparsemax.
    Sparsegen {
        gamma: f64,
    },
}

impl Activation {
    pub fn sparsemax() -> Self {
        Activation::Sparsegen { gamma: 0.0 }
    }

    pub fn sparsegen(gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Activation::Sparsegen { gamma })
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, Activation::Sparsegen { .. })
    }

    pub fn forward(&self, z: &[f64]) -> AttentionWeights {
        match *self {
            Activation::Softmax => softmax(z),
            Activation::Sparsegen { gamma } => project(z, 1.0 / (1.0 - gamma)),
        }
    }

    pub fn vjp(&self, a: &AttentionWeights, upstream: &[f64]) -> Vec<f64> {
        match *self {
            Activation::Softmax => softmax_vjp(a, upstream),
            Activation::Sparsegen { gamma } => {
                let scale = 1.0 / (1.0 - gamma);
                let mut out = sparsemax_vjp(a, upstream);
                if scale != 1.0 {
                    out.iter_mut().for_each(|v| *v *= scale);
                }
                out
            }
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_nan() || gamma >= 1.0 {
        return Err(Error::Parameter(format!(
            "sparsegen gamma must be < 1, got {gamma}"
        )));
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> AttentionWeights {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    AttentionWeights {
        support: (0..z.len()).collect(),
        weights,
        margin: f64::INFINITY,
    }
}

/// Euclidean projection of `z` onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> AttentionWeights {
    project(z, 1.0)
}

/// `sparsemax(z / (1 - gamma))`.
pub fn sparsegen(z: &[f64], gamma: f64) -> Result<AttentionWeights> {
    check_gamma(gamma)?;
    Ok(project(z, 1.0 / (1.0 - gamma)))
}

// Sort-threshold projection of `scale * z`.
fn project(z: &[f64], scale: f64) -> AttentionWeights {
    let scaled: Vec<f64> = if scale == 1.0 {
        z.to_vec()
    } else {
        z.iter().map(|&v| v * scale).collect()
    };
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));

    let mut cumsum = 0.0;
    let mut k = 0;
    let mut support_sum = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        cumsum += scaled[idx];
        let count = (rank + 1) as f64;
        // Ties at the threshold stay in the support.
        if 1.0 + count * scaled[idx] >= cumsum {
            k = rank + 1;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - 1.0) / k as f64;

    let weights: Vec<f64> = scaled.iter().map(|&v| (v - tau).max(0.0)).collect();
    let mut support: Vec<usize> = order[..k].to_vec();
    support.sort_unstable();
    let margin = scaled
        .iter()
        .map(|&v| (v - tau).abs())
        .fold(f64::INFINITY, f64::min);
    AttentionWeights {
        weights,
        support,
        margin,
    }
}

/// `(diag(a) - a a^T) * upstream`.
pub fn softmax_vjp(a: &AttentionWeights, upstream: &[f64]) -> Vec<f64> {
    let dot: f64 = a.weights.iter().zip(upstream).map(|(w, u)| w * u).sum();
    a.weights
        .iter()
        .zip(upstream)
        .map(|(w, u)| w * (u - dot))
        .collect()
}

/// Generalized Jacobian of the simplex projection: centering of `upstream`
/// over the support, zero elsewhere. Sparsegen's `1 / (1 - gamma)` factor is
/// applied by [`Activation::vjp`].
pub fn sparsemax_vjp(a: &AttentionWeights, upstream: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.weights.len()];
    if a.support.is_empty() {
        return out;
    }
    let mean = a.support.iter().map(|&i| upstream[i]).sum::<f64>() / a.support.len() as f64;
    for &i in &a.support {
        out[i] = upstream[i] - mean;
    }
    out
}
