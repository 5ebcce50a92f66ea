//! Training objectives: two-class cross-entropy on the logits and the
//! CAM-to-center distance penalty, plus their weighted sum.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_cam, normalize_cam_backward, CamMap, Upsampler};
use crate::nn::Real;
use crate::volume::Point2;

/// Per-step record of both objectives. `combined == loss1 + lambda * loss2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss1: f64,
    pub loss2: f64,
    pub combined: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(loss1: f64, loss2: f64, lambda: f64) -> Self {
        LossBreakdown { loss1, loss2, combined: combined_loss(loss1, loss2, lambda), lambda }
    }

    pub fn is_finite(&self) -> bool {
        self.loss1.is_finite() && self.loss2.is_finite() && self.combined.is_finite()
    }
}

pub fn combined_loss<T: Real>(l1: T, l2: T, lambda: T) -> T {
    debug_assert!(lambda >= T::zero(), "lambda must be non-negative");
    l1 + lambda * l2
}

/// Cross-entropy of one logit row against `label`, with `∂/∂logits`.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|l| (*l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<T> = exps.iter().map(|e| *e / sum).collect();
    grad[label] -= T::one();
    Ok((loss.max(T::zero()), grad))
}

/// Mean cross-entropy over a `batch × classes` logit matrix.
pub fn classification_loss<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<T> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.nrows(), labels.len())));
    }
    let mut total = T::zero();
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let row: Vec<T> = row.to_vec();
        total += cross_entropy(&row, label)?.0;
    }
    Ok(total / T::lit(labels.len() as f64))
}

/// Softmax probabilities of one logit row.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|l| (*l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceLoss<T> {
    pub value: T,
    /// The map carried no mass; `value` is the maximum penalty 1.
    pub degenerate: bool,
}

fn check_center(shape: (usize, usize), center: Point2) -> Result<()> {
    if center.u >= shape.0 || center.v >= shape.1 {
        return Err(Error::InvalidArgument(format!("center {center:?} outside {}x{} map", shape.0, shape.1)));
    }
    Ok(())
}

/// Pixel distance to `center` divided by the grid diagonal.
fn normalized_distances<T: Real>(shape: (usize, usize), center: Point2) -> Array2<T> {
    let diag = (((shape.0 - 1).pow(2) + (shape.1 - 1).pow(2)) as f64).sqrt();
    let (cu, cv) = (center.u as f64, center.v as f64);
    Array2::from_shape_fn(shape, |(u, v)| {
        if diag == 0.0 {
            return T::zero();
        }
        let d = ((u as f64 - cu).powi(2) + (v as f64 - cv).powi(2)).sqrt();
        T::lit(d / diag)
    })
}

/// Mass-weighted mean distance of `map` from `center` and its gradient
/// with respect to every map value.
pub fn distance_loss_with_grad<T: Real>(map: &Array2<T>, center: Point2) -> Result<(DistanceLoss<T>, Array2<T>)> {
    check_center(map.dim(), center)?;
    if map.iter().any(|m| *m < T::zero() || !m.is_finite()) {
        return Err(Error::InvalidArgument("distance loss needs a non-negative, finite map".into()));
    }
    let mass: T = map.iter().copied().sum();
    if !(mass > T::zero()) {
        return Ok((DistanceLoss { value: T::one(), degenerate: true }, Array2::zeros(map.raw_dim())));
    }
    let dist = normalized_distances::<T>(map.dim(), center);
    let weighted: T = map.iter().zip(dist.iter()).map(|(m, d)| *m * *d).sum();
    let value = weighted / mass;
    let grad = dist.mapv(|d| (d - value) / mass);
    Ok((DistanceLoss { value, degenerate: false }, grad))
}

/// Distance loss of an image-resolution CAM against the projected center.
pub fn distance_loss<T: Real>(cam: &CamMap<T>, center: Point2) -> Result<DistanceLoss<T>> {
    let (loss, _) = distance_loss_with_grad(&cam.data, center)?;
    if loss.degenerate {
        log::debug!("distance loss on an all-zero CAM; using maximum penalty");
    }
    Ok(loss)
}

/// Full localization path from a raw coarse CAM: rectify, peak-normalize,
/// upsample, distance. Returns the loss and `∂loss/∂raw`.
///
/// A map with no positive value costs the maximum penalty 1. The loss is
/// flat there, so instead of a zero gradient the degenerate case returns a
/// unit-sum pull that raises the coarse cells nearest the center. Without it
/// training drifts into all-negative maps and never leaves.
pub fn cam_distance_loss<T: Real>(
    raw: &Array2<T>,
    upsampler: &Upsampler<T>,
    center: Point2,
) -> Result<(DistanceLoss<T>, Array2<T>)> {
    let (norm, degenerate) = normalize_cam(raw, true);
    if degenerate {
        let (h, w) = upsampler.output_shape();
        check_center((h, w), center)?;
        let pull = upsampler.adjoint(&normalized_distances::<T>((h, w), center).mapv(|d| T::one() - d));
        let total: T = pull.iter().copied().sum();
        let grad = pull.mapv(|p| -p / total);
        return Ok((DistanceLoss { value: T::one(), degenerate: true }, grad));
    }
    let up = upsampler.apply(&norm);
    let (loss, d_up) = distance_loss_with_grad(&up, center)?;
    let d_norm = upsampler.adjoint(&d_up);
    Ok((loss, normalize_cam_backward(raw, true, &d_norm)))
}
