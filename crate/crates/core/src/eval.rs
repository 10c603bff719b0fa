//! Pose accuracy after global similarity alignment, keypoint accuracy
//! (PCK@α), and the 2D nearest-neighbor matching baseline.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{geodesic_angle, RigidTransform};
use crate::raster::FeatureImage;

/// `x ↦ scale · rotation · x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * p + self.translation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub rotation_deg_mean: f64,
    pub translation_mean: f64,
    pub per_pose: Vec<PoseError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseAlignment {
    pub similarity: Similarity,
    pub report: PoseReport,
}

const COLLINEAR_TOL: f64 = 1e-9;

fn centered(points: &[Vector3<f64>]) -> (Vector3<f64>, Vec<Vector3<f64>>) {
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    (mean, points.iter().map(|p| p - mean).collect())
}

fn check_spread(points: &[Vector3<f64>], label: &str) -> Result<()> {
    let scatter: Matrix3<f64> = points.iter().map(|p| p * p.transpose()).sum();
    let mut sv: Vec<f64> = scatter.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= COLLINEAR_TOL * sv[0] {
        return Err(Error::DegenerateConfiguration(format!("{label} camera centers are collinear")));
    }
    Ok(())
}

/// Least-squares similarity mapping `src` points onto `dst` points.
pub fn fit_similarity(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} points", src.len(), dst.len())));
    }
    if src.len() < 2 {
        return Err(Error::DegenerateConfiguration("need at least two poses".into()));
    }
    let (mx, xs) = centered(src);
    let (my, ys) = centered(dst);
    check_spread(&xs, "predicted")?;
    check_spread(&ys, "ground-truth")?;
    let n = src.len() as f64;
    let cov: Matrix3<f64> = ys.iter().zip(&xs).map(|(y, x)| y * x.transpose()).sum::<Matrix3<f64>>() / n;
    let var_x = xs.iter().map(|x| x.norm_squared()).sum::<f64>() / n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let d = svd.singular_values;
    let scale = (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_x;
    let translation = my - scale * rotation * mx;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Aligns predicted camera-to-world poses to ground truth with a similarity
/// fitted on camera centers, then reports the geodesic rotation error
/// (degrees) and the aligned center distance per pose.
pub fn procrustes_align(pred: &[RigidTransform], gt: &[RigidTransform]) -> Result<PoseAlignment> {
    let pc: Vec<Vector3<f64>> = pred.iter().map(|p| p.translation).collect();
    let gc: Vec<Vector3<f64>> = gt.iter().map(|p| p.translation).collect();
    let sim = fit_similarity(&pc, &gc)?;
    let per_pose: Vec<PoseError> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| PoseError {
            rotation_deg: geodesic_angle(&(sim.rotation * p.rotation), &g.rotation).to_degrees(),
            translation: (sim.apply(&p.translation) - g.translation).norm(),
        })
        .collect();
    let n = per_pose.len() as f64;
    let report = PoseReport {
        rotation_deg_mean: per_pose.iter().map(|e| e.rotation_deg).sum::<f64>() / n,
        translation_mean: per_pose.iter().map(|e| e.translation).sum::<f64>() / n,
        per_pose,
    };
    Ok(PoseAlignment {
        similarity: sim,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckConfig {
    pub alpha: f64,
    /// Target object bounding box `(height, width)` in pixels.
    pub bbox: (f64, f64),
}

impl PckConfig {
    pub fn radius(&self) -> f64 {
        self.alpha * self.bbox.0.max(self.bbox.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    pub pck: f64,
    pub alpha: f64,
}

/// Percentage of predictions within `α · max(H_bbox, W_bbox)` of ground
/// truth, boundary inclusive; missing predictions count as wrong.
pub fn pck(predicted: &[Option<[f64; 2]>], gt: &[[f64; 2]], cfg: &PckConfig) -> Result<f64> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::Invalid(format!("alpha must be positive, got {}", cfg.alpha)));
    }
    if predicted.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} ground-truth keypoints",
            predicted.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::EmptyKeypointList);
    }
    let r = cfg.radius();
    let hits = predicted
        .iter()
        .zip(gt)
        .filter(|(p, g)| p.is_some_and(|p| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt() <= r))
        .count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Target pixel center whose descriptor is nearest in cosine distance to the
/// source descriptor at `u_query`. Zero-norm target pixels are skipped; ties
/// go to the smallest `(row, col)`.
pub fn nn_match(source: &FeatureImage, target: &FeatureImage, u_query: [f64; 2]) -> Result<[f64; 2]> {
    if source.channels() != target.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} channels",
            source.channels(),
            target.channels()
        )));
    }
    let q = source.sample_bilinear_vec(u_query[0], u_query[1]);
    let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nq <= 1e-12 {
        return Err(Error::ZeroFeature);
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for row in 0..target.height() {
        for col in 0..target.width() {
            let t = target.pixel(col, row);
            let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nt <= 1e-12 {
                continue;
            }
            let d = 1.0 - q.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (nq * nt);
            if best.is_none_or(|(_, _, b)| d < b) {
                best = Some((col, row, d));
            }
        }
    }
    let (col, row, _) = best.ok_or(Error::NoValidPixels)?;
    Ok([col as f64 + 0.5, row as f64 + 0.5])
}
