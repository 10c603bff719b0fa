//! Per-image camera estimation by analysis-by-synthesis.
//!
//! Initialization renders every pose of a spherical candidate grid, crops
//! each render to its mask's bounding box, resamples it onto the feature
//! grid, and keeps the candidate with the lowest semantic image distance to
//! the equally cropped target. Refinement then minimizes the mask IoU
//! distance over a 7-vector (an se(3) twist composed onto the initial pose in
//! the canonical frame, plus a field-of-view offset in degrees) using Adam on
//! central finite-difference gradients.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Aabb, VoxelField};
use crate::geometry::{camera_from_spherical, exp_map, CameraPose, Twist};
use crate::metric::{image_distance, iou_distance};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::raster::{resample, tight_bbox, FeatureImage, Image};
use crate::render::{render, Channels, RenderConfig};

/// Cartesian product of field-of-view, azimuth and elevation values at a
/// fixed camera radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub fov_values: Vec<f64>,
    pub azimuths: Vec<f64>,
    pub elevations: Vec<f64>,
    pub radius: f64,
}

impl CandidateGrid {
    /// `n_fov` values spanning `fov_range` inclusive, `n_az` azimuths over
    /// `[-180, 180)` and `n_el` elevations over `(-90, 90)` offset half a step
    /// from the poles.
    pub fn uniform(n_fov: usize, n_az: usize, n_el: usize, fov_range: (f64, f64), radius: f64) -> Self {
        let fov_values = if n_fov == 1 {
            vec![0.5 * (fov_range.0 + fov_range.1)]
        } else {
            let step = (fov_range.1 - fov_range.0) / (n_fov - 1) as f64;
            (0..n_fov).map(|k| fov_range.0 + k as f64 * step).collect()
        };
        let az_step = 360.0 / n_az as f64;
        let el_step = 180.0 / n_el as f64;
        Self {
            fov_values,
            azimuths: (0..n_az).map(|k| -180.0 + k as f64 * az_step).collect(),
            elevations: (0..n_el).map(|k| -90.0 + (k as f64 + 0.5) * el_step).collect(),
            radius,
        }
    }

    /// 3 × 16 × 16 grid over FoV [15°, 60°] with radius 1.8 × the domain
    /// half-diagonal.
    pub fn default_for(domain: &Aabb) -> Self {
        Self::uniform(3, 16, 16, (15.0, 60.0), default_radius(domain))
    }

    pub fn len(&self) -> usize {
        self.fov_values.len() * self.azimuths.len() * self.elevations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let sorted = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if self.is_empty() {
            return Err(Error::Invalid("candidate grid is empty".into()));
        }
        if !(sorted(&self.fov_values) && sorted(&self.azimuths) && sorted(&self.elevations)) {
            return Err(Error::Invalid("candidate grid lists must be strictly ascending".into()));
        }
        if !(self.radius > 0.0) || self.elevations.iter().any(|e| e.abs() > 90.0) {
            return Err(Error::Invalid("candidate radius or elevation out of range".into()));
        }
        if self.fov_values.iter().any(|f| !(*f > 0.0 && *f < 180.0)) {
            return Err(Error::Invalid("candidate FoV out of (0, 180)".into()));
        }
        Ok(())
    }
}

pub fn default_radius(domain: &Aabb) -> f64 {
    1.8 * 0.5 * domain.diagonal()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub fov_deg: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub pose: CameraPose,
}

/// Enumerates the grid with FoV outermost and elevation innermost.
pub fn candidate_grid(grid: &CandidateGrid, width: usize, height: usize) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(grid.len());
    for &fov in &grid.fov_values {
        for &az in &grid.azimuths {
            for &el in &grid.elevations {
                out.push(Candidate {
                    index: out.len(),
                    fov_deg: fov,
                    azimuth_deg: az,
                    elevation_deg: el,
                    pose: camera_from_spherical(az, el, grid.radius, fov, width, height),
                });
            }
        }
    }
    out
}

/// Settings of the crop-and-compare initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Candidate render resolution.
    pub render_size: (usize, usize),
    /// Common grid `(width, height)` both crops are resampled to.
    pub feature_grid: (usize, usize),
    /// Mask level defining the crop rectangle.
    pub mask_threshold: f64,
    /// Rounds of zooming and shifting the selected camera so its rendered
    /// mask matches the target mask in area and centroid (0 keeps the raw
    /// candidate).
    pub fit_rounds: usize,
    pub render: RenderConfig,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            render_size: (64, 64),
            feature_grid: (64, 64),
            mask_threshold: 0.5,
            fit_rounds: 3,
            render: RenderConfig::default(),
        }
    }
}

/// Crops features to the mask's bounding box and resamples them onto the
/// feature grid. The mask and features may differ in resolution.
pub fn crop_to_grid(mask: &Image, features: &FeatureImage, cfg: &InitConfig) -> Result<FeatureImage> {
    let rect = tight_bbox(mask, cfg.mask_threshold)?;
    let rect = rect.rescale((mask.width(), mask.height()), (features.width(), features.height()));
    let crop = features.crop(&rect);
    Ok(resample(&crop, cfg.feature_grid.0, cfg.feature_grid.1))
}

/// Candidate poses with their cropped descriptor images (`None` when the
/// render is empty).
#[derive(Debug, Clone)]
pub struct CandidateBank {
    pub candidates: Vec<Candidate>,
    pub crops: Vec<Option<FeatureImage>>,
}

impl CandidateBank {
    /// Renders every candidate from the field's baked descriptors.
    pub fn render(field: &VoxelField, grid: &CandidateGrid, cfg: &InitConfig) -> Result<Self> {
        grid.validate()?;
        let candidates = candidate_grid(grid, cfg.render_size.0, cfg.render_size.1);
        let crops = candidates
            .par_iter()
            .map(|c| {
                let r = render(field, &c.pose, &cfg.render, Channels::MASK.with_features())?;
                let features = r.features.expect("features requested");
                match crop_to_grid(&r.mask, &features, cfg) {
                    Ok(crop) => Ok(Some(crop)),
                    Err(Error::EmptyMask) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { candidates, crops })
    }

    /// Builds the bank from externally computed candidate features, e.g.
    /// descriptors produced for saved candidate renders.
    pub fn from_features(
        candidates: Vec<Candidate>,
        masks: &[Image],
        features: &[FeatureImage],
        cfg: &InitConfig,
    ) -> Result<Self> {
        if masks.len() != candidates.len() || features.len() != candidates.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} candidates, {} masks, {} feature maps",
                candidates.len(),
                masks.len(),
                features.len()
            )));
        }
        let crops = masks
            .iter()
            .zip(features)
            .map(|(m, f)| match crop_to_grid(m, f, cfg) {
                Ok(c) => Ok(Some(c)),
                Err(Error::EmptyMask) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { candidates, crops })
    }

    /// Semantic distance of every candidate to a prepared target crop;
    /// empty candidates score +∞.
    pub fn scores(&self, target_crop: &FeatureImage) -> Result<Vec<f64>> {
        self.crops
            .par_iter()
            .map(|c| match c {
                Some(c) => image_distance(c, target_crop),
                None => Ok(f64::INFINITY),
            })
            .collect()
    }

    /// Lowest-scoring candidate, ties to the lowest index. The returned pose
    /// keeps the candidate's FoV and extrinsics at the target resolution.
    pub fn best(&self, target_crop: &FeatureImage, target_size: (usize, usize)) -> Result<PoseEstimate> {
        let scores = self.scores(target_crop)?;
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in scores.iter().enumerate() {
            if s.is_finite() && best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
        let (index, score) = best.ok_or(Error::EmptyMask)?;
        Ok(PoseEstimate {
            pose: self.candidates[index].pose.with_size(target_size.0, target_size.1),
            score,
            trajectory: None,
            candidate_index: Some(index),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: CameraPose,
    /// Distance at the returned pose.
    pub score: f64,
    /// Score of every accepted refinement iterate, starting with the
    /// initial pose.
    pub trajectory: Option<Vec<f64>>,
    pub candidate_index: Option<usize>,
}

/// Exhaustive candidate scoring against one target image.
pub fn init_pose(
    field: &VoxelField,
    target_features: &FeatureImage,
    target_mask: &Image,
    grid: &CandidateGrid,
    cfg: &InitConfig,
) -> Result<PoseEstimate> {
    let bank = CandidateBank::render(field, grid, cfg)?;
    let target = crop_to_grid(target_mask, target_features, cfg)?;
    bank.best(&target, (target_mask.width(), target_mask.height()))
}

/// Total and centroid `(x, y)` of a single-channel mask.
fn mask_moments(mask: &Image) -> (f64, [f64; 2]) {
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            let v = mask.get(col, row, 0);
            m += v;
            sx += v * (col as f64 + 0.5);
            sy += v * (row as f64 + 0.5);
        }
    }
    (m, [sx / m, sy / m])
}

/// Zooms and shifts the camera so the rendered mask matches the target in
/// area and centroid. The FoV absorbs the scale, keeping the camera
/// distance; crop-based scoring discards exactly this scale and offset.
pub fn fit_to_mask(field: &VoxelField, pose: &CameraPose, target_mask: &Image, cfg: &InitConfig) -> Result<CameraPose> {
    let (mass_t, ct) = mask_moments(target_mask);
    if mass_t < EMPTY_MASS {
        return Err(Error::EmptyMask);
    }
    let anchor = field.nocs_box()?.center();
    let mut pose = pose.with_size(target_mask.width(), target_mask.height());
    for _ in 0..cfg.fit_rounds {
        let r = render(field, &pose, &cfg.render, Channels::MASK)?;
        let (mass_r, cr) = mask_moments(&r.mask);
        let depth = pose.extrinsics.transform_point(&anchor).z;
        if mass_r < EMPTY_MASS || !(depth > 0.0) {
            break;
        }
        let s = (mass_t / mass_r).sqrt();
        let half = (pose.intrinsics.fov_deg.to_radians() / 2.0).tan() / s;
        pose.intrinsics.fov_deg = (2.0 * half.atan()).to_degrees().clamp(1.0, 179.0);
        let (c0x, c0y) = pose.intrinsics.principal_point();
        let f = pose.intrinsics.focal();
        let dx = (ct[0] - c0x - s * (cr[0] - c0x)) * depth / f;
        let dy = (ct[1] - c0y - s * (cr[1] - c0y)) * depth / f;
        pose.extrinsics.translation += Vector3::new(dx, dy, 0.0);
    }
    Ok(pose)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Finite-difference step of the rotation components, radians.
    pub fd_step_rot: f64,
    /// Finite-difference step of the translation components, scene units.
    /// `None` means 1e-3 × the field domain diagonal.
    pub fd_step_trans: Option<f64>,
    /// Finite-difference step of the FoV offset, degrees.
    pub fd_step_fov: f64,
    /// Consecutive collapsed-mask rejections before giving up.
    pub max_rejections: usize,
    pub record_trajectory: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            iterations: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            fd_step_rot: 1e-3,
            fd_step_trans: None,
            fd_step_fov: 0.05,
            max_rejections: 10,
            record_trajectory: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        let steps_ok = self.fd_step_rot > 0.0 && self.fd_step_fov > 0.0 && self.fd_step_trans.is_none_or(|s| s > 0.0);
        if !steps_ok {
            return Err(Error::Invalid("finite-difference steps must be positive".into()));
        }
        Ok(())
    }

    pub fn steps(&self, domain: &Aabb) -> [f64; 7] {
        let t = self.fd_step_trans.unwrap_or(1e-3 * domain.diagonal());
        let r = self.fd_step_rot;
        [r, r, r, t, t, t, self.fd_step_fov]
    }
}

/// Rendered mask total below which a render counts as collapsed.
const EMPTY_MASS: f64 = 1e-6;

/// Mask-IoU objective over the 7-parameter pose offset.
pub struct PoseObjective<'a> {
    pub field: &'a VoxelField,
    pub target_mask: &'a Image,
    pub init: CameraPose,
    pub render: RenderConfig,
}

impl<'a> PoseObjective<'a> {
    pub fn new(field: &'a VoxelField, target_mask: &'a Image, init: CameraPose, render: RenderConfig) -> Self {
        let init = init.with_size(target_mask.width(), target_mask.height());
        Self {
            field,
            target_mask,
            init,
            render,
        }
    }

    /// `x[0..6]` is a twist applied in the canonical frame before the initial
    /// world-to-camera transform; `x[6]` offsets the FoV in degrees.
    pub fn pose_at(&self, x: &[f64]) -> CameraPose {
        let mut pose = self.init;
        pose.extrinsics = self.init.extrinsics.compose(&exp_map(&Twist::from_slice(&x[..6])));
        pose.intrinsics.fov_deg = (self.init.intrinsics.fov_deg + x[6]).clamp(1.0, 179.0);
        pose
    }

    /// IoU distance and total rendered mask at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<(f64, f64)> {
        let r = render(self.field, &self.pose_at(x), &self.render, Channels::MASK)?;
        let mass: f64 = r.mask.data().iter().sum();
        Ok((iou_distance(&r.mask, self.target_mask)?, mass))
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.eval(x)?.0)
    }

    /// Central finite differences with per-parameter steps.
    pub fn gradient(&self, x: &[f64], steps: &[f64; 7]) -> Result<[f64; 7]> {
        let parts = (0..7)
            .into_par_iter()
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += steps[i];
                xm[i] -= steps[i];
                Ok((self.value(&xp)? - self.value(&xm)?) / (2.0 * steps[i]))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut g = [0.0; 7];
        g.copy_from_slice(&parts);
        Ok(g)
    }
}

/// Adam refinement of pose and FoV on the mask IoU distance; returns the
/// best iterate seen.
pub fn refine_pose(
    field: &VoxelField,
    target_mask: &Image,
    init: &CameraPose,
    cfg: &OptimConfig,
    render_cfg: &RenderConfig,
) -> Result<PoseEstimate> {
    cfg.validate()?;
    let objective = PoseObjective::new(field, target_mask, *init, render_cfg.clone());
    let steps = cfg.steps(field.domain());
    let mut x = [0.0f64; 7];
    let (f0, mass) = objective.eval(&x)?;
    if mass < EMPTY_MASS {
        return Err(Error::EmptyMask);
    }
    let mut best = (f0, x);
    let mut trajectory = cfg.record_trajectory.then(|| vec![f0]);
    let mut adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        epsilon: cfg.epsilon,
        weight_decay: 0.0,
    };
    let mut state = AdamState::new(7);
    let mut rejections = 0;
    for _ in 0..cfg.iterations {
        let grad = objective.gradient(&x, &steps)?;
        let mut next_state = state.clone();
        let mut next = x;
        adam_step(&mut next_state, &mut next, &grad, &adam)?;
        let (f, mass) = objective.eval(&next)?;
        if mass < EMPTY_MASS {
            rejections += 1;
            adam.learning_rate *= 0.5;
            if rejections >= cfg.max_rejections {
                return Err(Error::EmptyMask);
            }
            continue;
        }
        rejections = 0;
        state = next_state;
        x = next;
        if let Some(t) = trajectory.as_mut() {
            t.push(f);
        }
        if f < best.0 {
            best = (f, x);
        }
    }
    Ok(PoseEstimate {
        pose: objective.pose_at(&best.1),
        score: best.0,
        trajectory,
        candidate_index: None,
    })
}
