//! Volumetric rendering of a [`VoxelField`] under a [`CameraPose`].
//!
//! Each pixel casts one ray through its center. The ray is sampled at
//! `n_samples` midpoints of equal sub-intervals of `[t_near, t_far]` and
//! composited front to back:
//!
//! ```text
//! alpha_i = 1 - exp(-sigma_i * delta)
//! T_i     = prod_{j<i} (1 - alpha_j)
//! color   = sum_i T_i alpha_i c_i + T_final * background
//! mask    = 1 - T_final
//! ```
//!
//! NOCS, depth and descriptors use the same weights `T_i alpha_i`. NOCS and
//! depth are divided by the accumulated weight so they describe the expected
//! termination point; descriptors composite the field's background
//! descriptor like color and are then normalized to unit length.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{nocs_value, Aabb, VoxelField};
use crate::geometry::CameraPose;
use crate::raster::{self, Image, Rect};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub n_samples: usize,
    /// Fixed `[t_near, t_far]`; `None` uses each ray's interval inside the
    /// field domain.
    pub bounds: Option<(f64, f64)>,
    pub background_color: [f64; 3],
    /// A pixel's NOCS value is valid when its mask reaches this value.
    pub mask_valid_threshold: f64,
    /// Marching stops once transmittance falls below this value; 0 marches
    /// every sample.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_samples: 128,
            bounds: None,
            background_color: [0.0; 3],
            mask_valid_threshold: 0.5,
            min_transmittance: 0.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Invalid("n_samples must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.min_transmittance) {
            return Err(Error::Invalid("min_transmittance must lie in [0, 1)".into()));
        }
        if let Some((a, b)) = self.bounds {
            if !(a < b) {
                return Err(Error::Invalid(format!("t_near {a} must be below t_far {b}")));
            }
        }
        Ok(())
    }
}

/// Optional outputs of [`render`]. Mask and depth are always produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Channels {
    pub color: bool,
    pub nocs: bool,
    pub features: bool,
}

impl Channels {
    pub const MASK: Channels = Channels {
        color: false,
        nocs: false,
        features: false,
    };
    pub const ALL: Channels = Channels {
        color: true,
        nocs: true,
        features: true,
    };

    pub fn with_color(mut self) -> Self {
        self.color = true;
        self
    }

    pub fn with_nocs(mut self) -> Self {
        self.nocs = true;
        self
    }

    pub fn with_features(mut self) -> Self {
        self.features = true;
        self
    }
}

/// Canonical-coordinate image with per-pixel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct NocsImage {
    /// H×W×3 values in `[0, 1]`.
    pub values: Image,
    pub valid: Vec<bool>,
}

impl NocsImage {
    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.valid[row * self.width() + col]
    }

    pub fn value(&self, col: usize, row: usize) -> Vector3<f64> {
        let p = self.values.pixel(col, row);
        Vector3::new(p[0], p[1], p[2])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Packs values and validity into one H×W×4 image (validity as 0/1).
    pub fn to_packed(&self) -> Image {
        Image::from_fn(self.width(), self.height(), 4, |c, r, out| {
            out[..3].copy_from_slice(self.values.pixel(c, r));
            out[3] = if self.is_valid(c, r) { 1.0 } else { 0.0 };
        })
    }

    pub fn from_packed(img: &Image) -> Result<Self> {
        if img.channels() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "packed NOCS needs 4 channels, got {}",
                img.channels()
            )));
        }
        let values = Image::from_fn(img.width(), img.height(), 3, |c, r, out| {
            out.copy_from_slice(&img.pixel(c, r)[..3])
        });
        let valid = img.data().chunks_exact(4).map(|p| p[3] >= 0.5).collect();
        Ok(Self { values, valid })
    }
}

#[derive(Debug, Clone)]
pub struct Rendering {
    pub color: Option<Image>,
    pub mask: Image,
    pub depth: Image,
    pub nocs: Option<NocsImage>,
    pub features: Option<Image>,
    /// Sum of compositing weights per pixel; equals `mask` up to rounding.
    pub weight_sum: Image,
}

struct RayOut {
    color: [f64; 3],
    mask: f64,
    weight: f64,
    depth: f64,
    nocs: [f64; 3],
}

/// Renders the requested channels at the pose's resolution.
pub fn render(field: &VoxelField, pose: &CameraPose, cfg: &RenderConfig, channels: Channels) -> Result<Rendering> {
    cfg.validate()?;
    if channels.features && !field.has_descriptors() {
        return Err(Error::DescriptorAbsent);
    }
    let nocs_box = if channels.nocs { Some(field.nocs_box()?) } else { None };
    let (w, h) = (pose.intrinsics.width, pose.intrinsics.height);
    let dim = if channels.features { field.descriptor_dim() } else { 0 };

    let rows: Vec<(Vec<RayOut>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut outs = Vec::with_capacity(w);
            let mut feats = vec![0.0; w * dim];
            for col in 0..w {
                let f = &mut feats[col * dim..(col + 1) * dim];
                outs.push(march(field, pose, cfg, channels, nocs_box.as_ref(), [col, row], f));
            }
            (outs, feats)
        })
        .collect();

    let mut mask = Image::zeros(w, h, 1);
    let mut weight_sum = Image::zeros(w, h, 1);
    let mut depth = Image::zeros(w, h, 1);
    let mut color = channels.color.then(|| Image::zeros(w, h, 3));
    let mut nocs_vals = channels.nocs.then(|| Image::zeros(w, h, 3));
    let mut valid = vec![false; if channels.nocs { w * h } else { 0 }];
    let mut features = channels.features.then(|| Image::zeros(w, h, dim));
    for (row, (outs, feats)) in rows.into_iter().enumerate() {
        for (col, o) in outs.into_iter().enumerate() {
            mask.pixel_mut(col, row)[0] = o.mask;
            weight_sum.pixel_mut(col, row)[0] = o.weight;
            depth.pixel_mut(col, row)[0] = o.depth;
            if let Some(c) = color.as_mut() {
                c.pixel_mut(col, row).copy_from_slice(&o.color);
            }
            if let Some(n) = nocs_vals.as_mut() {
                n.pixel_mut(col, row).copy_from_slice(&o.nocs);
                valid[row * w + col] = o.mask >= cfg.mask_valid_threshold;
            }
            if let Some(fimg) = features.as_mut() {
                fimg.pixel_mut(col, row).copy_from_slice(&feats[col * dim..(col + 1) * dim]);
            }
        }
    }
    Ok(Rendering {
        color,
        mask,
        depth,
        nocs: nocs_vals.map(|values| NocsImage { values, valid }),
        features,
        weight_sum,
    })
}

fn march(
    field: &VoxelField,
    pose: &CameraPose,
    cfg: &RenderConfig,
    channels: Channels,
    nocs_box: Option<&Aabb>,
    px: [usize; 2],
    feat: &mut [f64],
) -> RayOut {
    let ray = pose.ray_for_pixel([px[0] as f64 + 0.5, px[1] as f64 + 0.5]);
    let interval = match cfg.bounds {
        Some(b) => Some(b),
        None => field.domain().intersect_ray(&ray),
    };
    let mut transmittance = 1.0;
    let mut weight = 0.0;
    let mut color = [0.0; 3];
    let mut nocs = [0.0; 3];
    let mut depth = 0.0;
    if let Some((t0, t1)) = interval {
        let delta = (t1 - t0) / cfg.n_samples as f64;
        // Samples outside the density support contribute nothing.
        let (first, last) = match field.support().and_then(|s| s.intersect_ray(&ray)) {
            Some((a, b)) => (
                ((a - t0) / delta - 1.5).floor().max(0.0) as usize,
                (((b - t0) / delta + 0.5).ceil().max(0.0) as usize).min(cfg.n_samples),
            ),
            None => (0, 0),
        };
        for i in first..last {
            let t = t0 + (i as f64 + 0.5) * delta;
            let p = ray.at(t);
            let Some((sigma, stencil)) = field.density_with_stencil(&p) else {
                continue;
            };
            let alpha = 1.0 - (-sigma * delta).exp();
            let wi = transmittance * alpha;
            weight += wi;
            depth += wi * t;
            if channels.color {
                let c = field.color_at(&stencil);
                for k in 0..3 {
                    color[k] += wi * c[k];
                }
            }
            if let Some(b) = nocs_box {
                let n = nocs_value(b, &p);
                for k in 0..3 {
                    nocs[k] += wi * n[k];
                }
            }
            if channels.features {
                // Presence of descriptors was checked by the caller.
                let _ = field.accumulate_descriptor(&stencil, wi, feat);
            }
            transmittance *= 1.0 - alpha;
            if transmittance < cfg.min_transmittance {
                break;
            }
        }
    }
    if channels.color {
        for k in 0..3 {
            color[k] += transmittance * cfg.background_color[k];
        }
    }
    if weight > 0.0 {
        depth /= weight;
        for v in nocs.iter_mut() {
            *v = (*v / weight).clamp(0.0, 1.0);
        }
    }
    if channels.features {
        if let Some(bg) = field.background_descriptor() {
            for (f, b) in feat.iter_mut().zip(bg) {
                *f += transmittance * b;
            }
        }
        normalize_in_place(feat);
    }
    RayOut {
        color,
        mask: 1.0 - transmittance,
        weight,
        depth,
        nocs,
    }
}

/// Scales `v` to unit length; leaves (near-)zero vectors at zero.
pub fn normalize_in_place(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Renders the NOCS channel; pixels with mask below the validity threshold
/// are flagged invalid.
pub fn render_nocs(field: &VoxelField, pose: &CameraPose, cfg: &RenderConfig) -> Result<NocsImage> {
    let r = render(field, pose, cfg, Channels::MASK.with_nocs())?;
    Ok(r.nocs.expect("nocs channel requested"))
}

/// Crops `image` to the tightest rectangle around mask pixels at or above
/// `threshold`.
pub fn tight_bbox_crop(mask: &Image, image: &Image, threshold: f64) -> Result<(Image, Rect)> {
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs image {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    let rect = raster::tight_bbox(mask, threshold)?;
    Ok((image.crop(&rect), rect))
}

/// Bilinear resampling to `(width, height)`.
pub fn resample(image: &Image, width: usize, height: usize) -> Image {
    raster::resample(image, width, height)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;
    use crate::geometry::camera_from_spherical;

    fn empty_field() -> VoxelField {
        let n = 8 * 8 * 8;
        VoxelField::new([8, 8, 8], Aabb::cube(1.0), vec![0.0; n], vec![0.3; 3 * n], None).unwrap()
    }

    #[test]
    fn zero_density_renders_background() {
        let cfg = RenderConfig {
            background_color: [0.2, 0.4, 0.6],
            ..Default::default()
        };
        let cam = camera_from_spherical(20.0, 10.0, 3.0, 40.0, 16, 12);
        let r = render(&empty_field(), &cam, &cfg, Channels::MASK.with_color()).unwrap();
        assert!(r.mask.data().iter().all(|&m| m == 0.0));
        for p in r.color.unwrap().data().chunks(3) {
            assert_eq!(p, &[0.2, 0.4, 0.6]);
        }
    }

    #[test]
    fn nocs_requires_nonempty_field() {
        let cam = camera_from_spherical(0.0, 0.0, 3.0, 40.0, 8, 8);
        assert!(matches!(render_nocs(&empty_field(), &cam, &RenderConfig::default()), Err(Error::EmptyField(_))));
    }

    #[test]
    fn features_require_descriptors() {
        let cam = camera_from_spherical(0.0, 0.0, 3.0, 40.0, 8, 8);
        let r = render(&empty_field(), &cam, &RenderConfig::default(), Channels::MASK.with_features());
        assert!(matches!(r, Err(Error::DescriptorAbsent)));
    }

    #[test]
    fn crop_rectangle_and_errors() {
        let mut mask = Image::zeros(10, 8, 1);
        for row in 2..=5 {
            for col in 3..=7 {
                mask.pixel_mut(col, row)[0] = 1.0;
            }
        }
        let img = Image::from_fn(10, 8, 2, |c, r, o| {
            o[0] = c as f64;
            o[1] = r as f64;
        });
        let (crop, rect) = tight_bbox_crop(&mask, &img, 0.5).unwrap();
        assert_eq!(rect, Rect { x0: 3, y0: 2, x1: 7, y1: 5 });
        assert_eq!((crop.width(), crop.height()), (5, 4));
        assert_eq!(crop.pixel(0, 0), &[3.0, 2.0]);

        let zero = Image::zeros(10, 8, 1);
        assert!(matches!(tight_bbox_crop(&zero, &img, 0.5), Err(Error::EmptyMask)));

        let full = Image::filled(10, 8, 1, 1.0);
        let (crop, _) = tight_bbox_crop(&full, &img, 0.5).unwrap();
        assert_eq!(crop, img);
    }

    #[test]
    fn resample_identity_constant_and_checkerboard() {
        let img = Image::from_fn(7, 5, 3, |c, r, o| {
            o[0] = (c * 31 + r * 7) as f64 * 0.01;
            o[1] = (c as f64).sin();
            o[2] = r as f64;
        });
        let same = resample(&img, 7, 5);
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-7);
        }
        let constant = Image::filled(9, 6, 2, 0.7);
        let out = resample(&constant, 4, 13);
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-12));

        let checker = Image::from_fn(16, 12, 1, |c, r, o| o[0] = ((c + r) % 2) as f64);
        let down = resample(&checker, 8, 6);
        assert!(down.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn packed_nocs_round_trip() {
        let values = Image::from_fn(3, 2, 3, |c, r, o| {
            o[0] = c as f64 / 3.0;
            o[1] = r as f64 / 2.0;
            o[2] = 0.25;
        });
        let n = NocsImage {
            values,
            valid: vec![true, false, true, true, false, false],
        };
        assert_eq!(NocsImage::from_packed(&n.to_packed()).unwrap(), n);
    }
}
