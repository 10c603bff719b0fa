//! Image distances: per-pixel cosine distance between descriptors, its mean
//! over aligned pixels, a soft-mask IoU distance, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{FeatureImage, Image};
use crate::render::Rendering;

const MIN_NORM: f64 = 1e-12;

/// Weights of the semantic (`lambda_feat`) and IoU (`lambda_iou`) terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeights {
    pub lambda_feat: f64,
    pub lambda_iou: f64,
}

impl DistanceWeights {
    pub fn new(lambda_feat: f64, lambda_iou: f64) -> Result<Self> {
        if !(lambda_feat >= 0.0 && lambda_iou >= 0.0) || (lambda_feat == 0.0 && lambda_iou == 0.0) {
            return Err(Error::Invalid(format!(
                "weights must be non-negative and not both zero: ({lambda_feat}, {lambda_iou})"
            )));
        }
        Ok(Self {
            lambda_feat,
            lambda_iou,
        })
    }

    /// Pose initialization scores descriptors only.
    pub const FEATURES_ONLY: DistanceWeights = DistanceWeights {
        lambda_feat: 1.0,
        lambda_iou: 0.0,
    };

    /// Pose refinement scores masks only.
    pub const IOU_ONLY: DistanceWeights = DistanceWeights {
        lambda_feat: 0.0,
        lambda_iou: 1.0,
    };
}

/// `1 - cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na <= MIN_NORM || nb <= MIN_NORM {
        return Err(Error::ZeroFeature);
    }
    Ok(1.0 - dot / (na * nb))
}

/// Cosine distance between the descriptors of `f1` at `u1` and `f2` at `u2`
/// (continuous pixel coordinates, bilinear lookup).
pub fn pixel_distance(f1: &FeatureImage, u1: [f64; 2], f2: &FeatureImage, u2: [f64; 2]) -> Result<f64> {
    if f1.channels() != f2.channels() {
        return Err(Error::ShapeMismatch(format!(
            "descriptor widths differ: {} vs {}",
            f1.channels(),
            f2.channels()
        )));
    }
    let a = f1.sample_bilinear_vec(u1[0], u1[1]);
    let b = f2.sample_bilinear_vec(u2[0], u2[1]);
    cosine_distance(&a, &b)
}

/// Mean cosine distance over all aligned pixel pairs.
pub fn image_distance(f1: &FeatureImage, f2: &FeatureImage) -> Result<f64> {
    if !f1.same_shape(f2) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            f1.width(),
            f1.height(),
            f1.channels(),
            f2.width(),
            f2.height(),
            f2.channels()
        )));
    }
    let c = f1.channels();
    let mut sum = 0.0;
    for (a, b) in f1.data().chunks_exact(c).zip(f2.data().chunks_exact(c)) {
        sum += cosine_distance(a, b)?;
    }
    Ok(sum / (f1.width() * f1.height()) as f64)
}

/// `1 - |m1 ⊙ m2|₁ / (|m1|₁ + |m2|₁ - |m1 ⊙ m2|₁)`; zero when both masks
/// are empty.
pub fn iou_distance(m1: &Image, m2: &Image) -> Result<f64> {
    if !m1.same_shape(m2) || m1.channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "masks {}x{}x{} vs {}x{}x{}",
            m1.width(),
            m1.height(),
            m1.channels(),
            m2.width(),
            m2.height(),
            m2.channels()
        )));
    }
    let (mut inter, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (a, b) in m1.data().iter().zip(m2.data()) {
        inter += a * b;
        s1 += a;
        s2 += b;
    }
    let union = s1 + s2 - inter;
    if union <= 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 - inter / union).clamp(0.0, 1.0))
}

/// `lambda_feat * image_distance + lambda_iou * iou_distance` of a rendering
/// against target features and mask.
pub fn combined_distance(
    rendering: &Rendering,
    target_features: Option<&FeatureImage>,
    target_mask: &Image,
    w: &DistanceWeights,
) -> Result<f64> {
    let mut total = 0.0;
    if w.lambda_feat != 0.0 {
        let rf = rendering.features.as_ref().ok_or(Error::MissingChannel("features"))?;
        let tf = target_features.ok_or(Error::MissingChannel("target features"))?;
        total += w.lambda_feat * image_distance(rf, tf)?;
    }
    if w.lambda_iou != 0.0 {
        total += w.lambda_iou * iou_distance(&rendering.mask, target_mask)?;
    }
    Ok(total)
}
