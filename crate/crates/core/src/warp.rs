//! Canonical coordinate mappings between images.
//!
//! A [`WarpField`] stores a displacement per feature-grid cell in normalized
//! image coordinates, moving a real-image location `u` onto `ũ = u + T(u)` in
//! the render of the refined pose. Combined with the NOCS render this lifts
//! pixels into the canonical frame; the reverse direction inverts both maps
//! by exhaustive nearest-neighbor search.

use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::raster::{FeatureImage, Image};
use crate::render::NocsImage;

const MIN_NORM: f64 = 1e-12;
const INVERSE_EPS: f64 = 1e-8;

/// Displacement grid; channel 0 is the horizontal and channel 1 the vertical
/// component, both in normalized `[0, 1]` units.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    pub displacement: Image,
    /// `(width, height)` of the real image the grid covers.
    pub source_size: (usize, usize),
    /// `(width, height)` of the render the warped coordinates index.
    pub render_size: (usize, usize),
}

impl WarpField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            displacement: Image::zeros(width, height, 2),
            source_size: (width, height),
            render_size: (width, height),
        }
    }

    pub fn from_displacement(displacement: Image) -> Result<Self> {
        if displacement.channels() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "displacement needs 2 channels, got {}",
                displacement.channels()
            )));
        }
        if let Some(i) = displacement.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let size = (displacement.width(), displacement.height());
        Ok(Self {
            displacement,
            source_size: size,
            render_size: size,
        })
    }

    pub fn width(&self) -> usize {
        self.displacement.width()
    }

    pub fn height(&self) -> usize {
        self.displacement.height()
    }

    /// Normalized coordinate of grid cell `(col, row)`.
    pub fn grid_point(&self, col: usize, row: usize) -> [f64; 2] {
        [
            (col as f64 + 0.5) / self.width() as f64,
            (row as f64 + 0.5) / self.height() as f64,
        ]
    }

    /// Warped coordinate of grid cell `(col, row)`, clamped to `[0, 1]²`.
    pub fn warped_grid_point(&self, col: usize, row: usize) -> [f64; 2] {
        let u = self.grid_point(col, row);
        let d = self.displacement.pixel(col, row);
        [(u[0] + d[0]).clamp(0.0, 1.0), (u[1] + d[1]).clamp(0.0, 1.0)]
    }

    /// Warps an arbitrary normalized coordinate using the bilinearly
    /// upsampled displacement.
    pub fn apply(&self, u: [f64; 2]) -> [f64; 2] {
        let mut d = [0.0; 2];
        self.displacement
            .sample_bilinear(u[0] * self.width() as f64, u[1] * self.height() as f64, &mut d);
        [(u[0] + d[0]).clamp(0.0, 1.0), (u[1] + d[1]).clamp(0.0, 1.0)]
    }

    pub fn mean_displacement(&self) -> f64 {
        let n = self.width() * self.height();
        self.displacement
            .data()
            .chunks_exact(2)
            .map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt())
            .sum::<f64>()
            / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarpConfig {
    pub lambda_l2: f64,
    pub lambda_smooth: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub huber_delta: f64,
    /// Weights of rigidity at offset 10, rigidity at offset 1, and total
    /// variation.
    pub rigidity_weights: (f64, f64, f64),
}

impl Default for WarpConfig {
    fn default() -> Self {
        Self {
            lambda_l2: 10.0,
            lambda_smooth: 0.0,
            iterations: 4000,
            learning_rate: 0.01,
            weight_decay: 0.01,
            huber_delta: 0.01,
            rigidity_weights: (1.0, 0.1, 10.0),
        }
    }
}

impl WarpConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.rigidity_weights;
        let weights = [self.lambda_l2, self.lambda_smooth, self.weight_decay, a, b, c];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Invalid("warp weights must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.huber_delta > 0.0) {
            return Err(Error::Invalid("warp learning_rate and huber_delta must be positive".into()));
        }
        Ok(())
    }
}

fn huber(x: f64, delta: f64) -> (f64, f64) {
    if x.abs() <= delta {
        (0.5 * x * x, x)
    } else {
        (delta * (x.abs() - 0.5 * delta), delta * x.signum())
    }
}

/// Flat index of component `k` at `(col, row)` in an interleaved
/// `w × h × 2` buffer.
#[inline]
fn di(w: usize, col: usize, row: usize, k: usize) -> usize {
    (row * w + col) * 2 + k
}

/// Rigidity penalty and its gradient with respect to the displacement buffer
/// (accumulated into `grad` scaled by `scale`).
fn rigidity_impl(disp: &[f64], w: usize, h: usize, offset: usize, scale: f64, mut grad: Option<&mut [f64]>) -> f64 {
    if offset == 0 || offset >= w || offset >= h {
        return 0.0;
    }
    let count = ((h - offset) * (w - offset)) as f64;
    let sx = w as f64 / offset as f64;
    let sy = h as f64 / offset as f64;
    let mut total = 0.0;
    for row in 0..h - offset {
        for col in 0..w - offset {
            let here = [disp[di(w, col, row, 0)], disp[di(w, col, row, 1)]];
            let right = [disp[di(w, col + offset, row, 0)], disp[di(w, col + offset, row, 1)]];
            let down = [disp[di(w, col, row + offset, 0)], disp[di(w, col, row + offset, 1)]];
            let j = Matrix2::new(
                1.0 + (right[0] - here[0]) * sx,
                (down[0] - here[0]) * sy,
                (right[1] - here[1]) * sx,
                1.0 + (down[1] - here[1]) * sy,
            );
            let a = j.transpose() * j;
            let b = (a + Matrix2::identity() * INVERSE_EPS)
                .try_inverse()
                .unwrap_or_else(|| Matrix2::identity() / INVERSE_EPS);
            let (na, nb) = (a.norm(), b.norm());
            total += na + nb;
            if let Some(g) = grad.as_deref_mut() {
                let gm = a / na - b * b * b / nb;
                let gj = j * gm * (2.0 * scale / count);
                g[di(w, col + offset, row, 0)] += gj[(0, 0)] * sx;
                g[di(w, col, row + offset, 0)] += gj[(0, 1)] * sy;
                g[di(w, col, row, 0)] -= gj[(0, 0)] * sx + gj[(0, 1)] * sy;
                g[di(w, col + offset, row, 1)] += gj[(1, 0)] * sx;
                g[di(w, col, row + offset, 1)] += gj[(1, 1)] * sy;
                g[di(w, col, row, 1)] -= gj[(1, 0)] * sx + gj[(1, 1)] * sy;
            }
        }
    }
    total / count
}

fn tv_impl(disp: &[f64], w: usize, h: usize, delta: f64, scale: f64, mut grad: Option<&mut [f64]>) -> f64 {
    let mut total = 0.0;
    let mut pass = |pairs: usize, next: &dyn Fn(usize, usize) -> Option<(usize, usize)>| {
        if pairs == 0 {
            return;
        }
        let mut sum = 0.0;
        for row in 0..h {
            for col in 0..w {
                let Some((c2, r2)) = next(col, row) else {
                    continue;
                };
                for k in 0..2 {
                    let (i1, i2) = (di(w, col, row, k), di(w, c2, r2, k));
                    let (v, d) = huber(disp[i2] - disp[i1], delta);
                    sum += v;
                    if let Some(g) = grad.as_deref_mut() {
                        let gd = d * scale / pairs as f64;
                        g[i2] += gd;
                        g[i1] -= gd;
                    }
                }
            }
        }
        total += sum / pairs as f64;
    };
    pass(h * w.saturating_sub(1), &|c, r| (c + 1 < w).then_some((c + 1, r)));
    pass(h.saturating_sub(1) * w, &|c, r| (r + 1 < h).then_some((c, r + 1)));
    total
}

/// Mean over interior points of `‖J̃ᵀJ̃‖_F + ‖(J̃ᵀJ̃ + εI)⁻¹‖_F`, where `J̃` is
/// the forward-difference Jacobian of `u ↦ u + T(u)` at the given grid
/// offset. Zero when the grid has no interior points for the offset.
pub fn rigidity_loss(warp: &WarpField, offset: usize) -> f64 {
    rigidity_impl(warp.displacement.data(), warp.width(), warp.height(), offset, 1.0, None)
}

/// Mean Huber penalty of horizontal neighbor differences plus that of
/// vertical ones, each summed over both displacement components.
pub fn tv_loss(warp: &WarpField, huber_delta: f64) -> f64 {
    tv_impl(warp.displacement.data(), warp.width(), warp.height(), huber_delta, 1.0, None)
}

pub fn smooth_loss(warp: &WarpField, cfg: &WarpConfig) -> f64 {
    let (w10, w1, wtv) = cfg.rigidity_weights;
    w10 * rigidity_loss(warp, 10) + w1 * rigidity_loss(warp, 1) + wtv * tv_loss(warp, cfg.huber_delta)
}

/// Bilinear sample and its derivatives along x and y, matching
/// [`Image::sample_bilinear`] (zero derivative where the sample clamps).
fn sample_with_grad(img: &Image, x: f64, y: f64, val: &mut [f64], dx: &mut [f64], dy: &mut [f64]) {
    let axis = |p: f64, n: usize| -> (usize, usize, f64, bool) {
        let g = p - 0.5;
        if !(g > 0.0) {
            return (0, 0, 0.0, false);
        }
        let i0 = g.floor();
        let i = i0 as usize;
        if i + 1 >= n {
            return (n - 1, n - 1, 0.0, false);
        }
        (i, i + 1, g - i0, true)
    };
    let (x0, x1, fx, live_x) = axis(x, img.width());
    let (y0, y1, fy, live_y) = axis(y, img.height());
    let (p00, p10, p01, p11) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
    let (sx, sy) = (img.width() as f64, img.height() as f64);
    for k in 0..val.len() {
        let top = p00[k] + fx * (p10[k] - p00[k]);
        let bottom = p01[k] + fx * (p11[k] - p01[k]);
        val[k] = top + fy * (bottom - top);
        dx[k] = if live_x {
            ((1.0 - fy) * (p10[k] - p00[k]) + fy * (p11[k] - p01[k])) * sx
        } else {
            0.0
        };
        dy[k] = if live_y { (bottom - top) * sy } else { 0.0 };
    }
}

/// Forward-warp objective over a displacement buffer.
pub struct WarpObjective<'a> {
    pub real: &'a FeatureImage,
    pub render: &'a FeatureImage,
    pub cfg: &'a WarpConfig,
}

impl<'a> WarpObjective<'a> {
    pub fn new(real: &'a FeatureImage, render: &'a FeatureImage, cfg: &'a WarpConfig) -> Result<Self> {
        if real.channels() != render.channels() {
            return Err(Error::ShapeMismatch(format!(
                "real features have {} channels, render features {}",
                real.channels(),
                render.channels()
            )));
        }
        Ok(Self { real, render, cfg })
    }

    /// Objective value; `grad`, when given, receives the analytic gradient.
    pub fn evaluate(&self, disp: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (w, h) = (self.real.width(), self.real.height());
        let n = (w * h) as f64;
        let c = self.real.channels();
        let (rw, rh) = (self.render.width() as f64, self.render.height() as f64);
        let want_grad = grad.is_some();
        let lambda_l2 = self.cfg.lambda_l2;

        let row_terms: Vec<(f64, Vec<f64>)> = (0..h)
            .into_par_iter()
            .map(|row| {
                let mut g_row = if want_grad { vec![0.0; w * 2] } else { Vec::new() };
                let (mut val, mut dx, mut dy) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
                let mut sum = 0.0;
                for col in 0..w {
                    let d = &disp[di(w, col, row, 0)..di(w, col, row, 0) + 2];
                    sum += lambda_l2 * (d[0] * d[0] + d[1] * d[1]);
                    if want_grad {
                        g_row[col * 2] += 2.0 * lambda_l2 * d[0] / n;
                        g_row[col * 2 + 1] += 2.0 * lambda_l2 * d[1] / n;
                    }
                    let a = self.real.pixel(col, row);
                    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if na <= MIN_NORM {
                        continue;
                    }
                    let ux = (col as f64 + 0.5) / w as f64 + d[0];
                    let uy = (row as f64 + 0.5) / h as f64 + d[1];
                    let (cx, cy) = (ux.clamp(0.0, 1.0), uy.clamp(0.0, 1.0));
                    sample_with_grad(self.render, cx * rw, cy * rh, &mut val, &mut dx, &mut dy);
                    let ns = val.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if ns <= MIN_NORM {
                        continue;
                    }
                    let dot: f64 = a.iter().zip(&val).map(|(p, q)| p * q).sum();
                    let cos = dot / (na * ns);
                    sum += 1.0 - cos;
                    if want_grad {
                        // d(1 - cos)/ds = -(a / (|a||s|) - cos · s / |s|²)
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for k in 0..c {
                            let ds = -(a[k] / (na * ns) - cos * val[k] / (ns * ns));
                            gx += ds * dx[k];
                            gy += ds * dy[k];
                        }
                        if ux > 0.0 && ux < 1.0 {
                            g_row[col * 2] += gx / n;
                        }
                        if uy > 0.0 && uy < 1.0 {
                            g_row[col * 2 + 1] += gy / n;
                        }
                    }
                }
                (sum, g_row)
            })
            .collect();

        let mut total = row_terms.iter().map(|(s, _)| s).sum::<f64>() / n;
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            for (row, (_, g_row)) in row_terms.iter().enumerate() {
                g[row * w * 2..(row + 1) * w * 2].copy_from_slice(g_row);
            }
        }
        let ls = self.cfg.lambda_smooth;
        if ls != 0.0 {
            let (w10, w1, wtv) = self.cfg.rigidity_weights;
            total += ls * w10 * rigidity_impl(disp, w, h, 10, ls * w10, grad.as_deref_mut());
            total += ls * w1 * rigidity_impl(disp, w, h, 1, ls * w1, grad.as_deref_mut());
            total += ls * wtv * tv_impl(disp, w, h, self.cfg.huber_delta, ls * wtv, grad.as_deref_mut());
        }
        total
    }
}

/// Result of [`fit_forward_warp`].
#[derive(Debug, Clone)]
pub struct WarpFit {
    pub warp: WarpField,
    /// Objective at the returned warp.
    pub objective: f64,
    /// Objective at zero displacement.
    pub initial_objective: f64,
}

/// AdamW descent of the forward-warp objective from zero displacement;
/// returns the best iterate. The warp grid matches `real_features`.
pub fn fit_forward_warp(real_features: &FeatureImage, render_features: &FeatureImage, cfg: &WarpConfig) -> Result<WarpFit> {
    cfg.validate()?;
    let objective = WarpObjective::new(real_features, render_features, cfg)?;
    let (w, h) = (real_features.width(), real_features.height());
    let mut disp = vec![0.0; w * h * 2];
    let mut grad = vec![0.0; w * h * 2];
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut state = AdamState::new(disp.len());
    let initial = objective.evaluate(&disp, Some(&mut grad));
    let mut best = (initial, disp.clone());
    for _ in 0..cfg.iterations {
        adam_step(&mut state, &mut disp, &grad, &adam)?;
        let f = objective.evaluate(&disp, Some(&mut grad));
        if f < best.0 {
            best = (f, disp.clone());
        }
    }
    let displacement = Image::from_vec(w, h, 2, best.1)?;
    Ok(WarpFit {
        warp: WarpField {
            displacement,
            source_size: (w, h),
            render_size: (render_features.width(), render_features.height()),
        },
        objective: best.0,
        initial_objective: initial,
    })
}

/// NOCS lookup at continuous pixel coordinates, interpolating only over
/// valid neighbors; `None` when no neighbor with positive weight is valid.
pub fn forward_2d3d(nocs: &NocsImage, u: [f64; 2]) -> Option<Vector3<f64>> {
    let s = nocs.values.stencil(u[0], u[1]);
    let mut acc = Vector3::zeros();
    let mut total = 0.0;
    for (&(row, col), &w) in s.idx.iter().zip(&s.w) {
        if w > 0.0 && nocs.is_valid(col, row) {
            acc += nocs.value(col, row) * w;
            total += w;
        }
    }
    (total > 0.0).then(|| acc / total)
}

/// Valid pixel whose NOCS value is nearest to `p`: its center in pixel
/// coordinates and the distance. Ties go to the smallest `(row, col)`.
pub fn reverse_3d2d(nocs: &NocsImage, p: &Vector3<f64>) -> Result<([f64; 2], f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for row in 0..nocs.height() {
        for col in 0..nocs.width() {
            if !nocs.is_valid(col, row) {
                continue;
            }
            let d2 = (nocs.value(col, row) - p).norm_squared();
            if best.is_none_or(|(_, _, b)| d2 < b) {
                best = Some((col, row, d2));
            }
        }
    }
    let (col, row, d2) = best.ok_or(Error::NoValidPixels)?;
    Ok(([col as f64 + 0.5, row as f64 + 0.5], d2.sqrt()))
}

/// Grid point (normalized) whose warped position is nearest to `u_tilde`.
/// Ties go to the smallest `(row, col)`.
pub fn reverse_2d2d(warp: &WarpField, u_tilde: [f64; 2]) -> [f64; 2] {
    let mut best = (0, 0, f64::INFINITY);
    for row in 0..warp.height() {
        for col in 0..warp.width() {
            let v = warp.warped_grid_point(col, row);
            let d2 = (v[0] - u_tilde[0]).powi(2) + (v[1] - u_tilde[1]).powi(2);
            if d2 < best.2 {
                best = (col, row, d2);
            }
        }
    }
    warp.grid_point(best.0, best.1)
}

/// Everything needed to map one image to and from the canonical frame.
#[derive(Debug, Clone)]
pub struct MappingContext {
    pub warp: WarpField,
    pub nocs: NocsImage,
    pub pose: CameraPose,
    /// `(width, height)` of the image keypoints are expressed in.
    pub image_size: (usize, usize),
}

impl MappingContext {
    /// Pixel coordinates to the canonical frame.
    pub fn lift(&self, u: [f64; 2]) -> Option<Vector3<f64>> {
        let un = [u[0] / self.image_size.0 as f64, u[1] / self.image_size.1 as f64];
        let ut = self.warp.apply(un);
        forward_2d3d(
            &self.nocs,
            [ut[0] * self.nocs.width() as f64, ut[1] * self.nocs.height() as f64],
        )
    }

    /// Canonical point to pixel coordinates of this image.
    pub fn project(&self, p: &Vector3<f64>) -> Result<[f64; 2]> {
        let (px, _) = reverse_3d2d(&self.nocs, p)?;
        let ut = [px[0] / self.nocs.width() as f64, px[1] / self.nocs.height() as f64];
        let u = reverse_2d2d(&self.warp, ut);
        Ok([u[0] * self.image_size.0 as f64, u[1] * self.image_size.1 as f64])
    }
}

/// Maps a source pixel to the target image through the canonical frame.
pub fn transfer_keypoint(source: &MappingContext, target: &MappingContext, u_source: [f64; 2]) -> Result<[f64; 2]> {
    let p = source.lift(u_source).ok_or(Error::InvalidLift)?;
    target.project(&p)
}

/// Copies source colors onto every target pixel whose canonical point maps
/// into the source region (mask ≥ 0.5). Other pixels are left unchanged.
pub fn transfer_pixels(
    source_image: &Image,
    source: &MappingContext,
    target_image: &Image,
    target: &MappingContext,
    region: &Image,
) -> Result<Image> {
    if source_image.channels() != target_image.channels() {
        return Err(Error::ShapeMismatch("source and target images differ in channels".into()));
    }
    let (w, h) = (target_image.width(), target_image.height());
    let c = target_image.channels();
    let rows: Vec<Vec<Option<Vec<f64>>>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let u = [col as f64 + 0.5, row as f64 + 0.5];
                    let p = target.lift(u)?;
                    let us = source.project(&p).ok()?;
                    let rx = (us[0] / source.image_size.0 as f64 * region.width() as f64) as usize;
                    let ry = (us[1] / source.image_size.1 as f64 * region.height() as f64) as usize;
                    let inside = region.get(rx.min(region.width() - 1), ry.min(region.height() - 1), 0) >= 0.5;
                    inside.then(|| {
                        let sx = us[0] / source.image_size.0 as f64 * source_image.width() as f64;
                        let sy = us[1] / source.image_size.1 as f64 * source_image.height() as f64;
                        source_image.sample_bilinear_vec(sx, sy)
                    })
                })
                .collect()
        })
        .collect();
    let mut out = target_image.clone();
    for (row, cols) in rows.into_iter().enumerate() {
        for (col, v) in cols.into_iter().enumerate() {
            if let Some(v) = v {
                out.pixel_mut(col, row)[..c].copy_from_slice(&v);
            }
        }
    }
    Ok(out)
}
