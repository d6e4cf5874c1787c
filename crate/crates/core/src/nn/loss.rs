//! Masked L2 losses on depth predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::depth_io::DepthMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("ground truth has no valid pixels")]
    EmptyMask,
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
}

/// Weights of the coarse and refined terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub coarse: f64,
    pub refined: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            coarse: 0.1,
            refined: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub coarse: f64,
    pub refined: f64,
    pub total: f64,
}

/// Mean of `(pred - gt)^2` over pixels where `gt` is valid.
///
/// Prediction validity is ignored: pixels the prediction marks invalid
/// contribute their stored value (0).
pub fn masked_l2(pred: &DepthMap, gt: &DepthMap) -> Result<f64, LossError> {
    let (pw, ph) = (pred.width(), pred.height());
    if (pw, ph) != (gt.width(), gt.height()) {
        return Err(LossError::ShapeMismatch {
            pred: (pw, ph),
            gt: (gt.width(), gt.height()),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..ph {
        for x in 0..pw {
            if let Some(g) = gt.get(x, y) {
                let e = pred.grid().get(x, y, 0) - g;
                sum += e * e;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(LossError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Weighted sum of the coarse and refined masked L2 losses.
pub fn total_loss(coarse: &DepthMap, refined: &DepthMap, gt: &DepthMap, weights: LossWeights) -> Result<LossBreakdown, LossError> {
    let c = masked_l2(coarse, gt)?;
    let r = masked_l2(refined, gt)?;
    Ok(LossBreakdown {
        coarse: c,
        refined: r,
        total: weights.coarse * c + weights.refined * r,
    })
}

/// Masked L2 on a single-channel tensor, with its gradient.
pub fn masked_l2_with_grad<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &[bool]) -> Result<(T, Tensor<T>), LossError> {
    if pred.shape() != gt.shape() || pred.len() != mask.len() {
        return Err(LossError::ShapeMismatch {
            pred: (pred.width(), pred.height()),
            gt: (gt.width(), gt.height()),
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(LossError::EmptyMask);
    }
    let n = T::from_usize(count).expect("pixel count");
    let two = T::one() + T::one();
    let mut sum = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if mask[i] {
            let e = p - g;
            sum = sum + e * e;
            grad[i] = two * e / n;
        }
    }
    Ok((sum / n, Tensor::from_vec(pred.channels(), pred.height(), pred.width(), grad)))
}
